"""Command line: ``fedseg {generate,train,evaluate,inspect}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config
from .datastore import (
    FPM_MAGIC,
    FPV_MAGIC,
    ClientDataset,
    FormatError,
    client_volumes,
    make_client,
    read_client_dir,
    read_model,
    read_volume,
    write_clients,
    write_model,
)
from .evaluation import one_shot_validate
from .fedsim import NumericError, RoundReport, run_federation
from .protoseg import init_params
from .superpixel import BACKEND

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
HOLDOUT_ID = "holdout"
LOSS_COLUMNS = ("ce", "cyclic", "spatial_dice", "edge_dice", "total")

log = logging.getLogger("fedseg")


class DataError(Exception):
    pass


# -- helpers ---------------------------------------------------------------
def code_fingerprint() -> str:
    """sha256 over the package sources, in path order."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for p in sorted(list(root.glob("*.py")) + list(root.glob("*.pyx"))):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _sha(text: str | bytes) -> str:
    return hashlib.sha256(text.encode() if isinstance(text, str) else text).hexdigest()


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    fed = cfg.fed
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["global_seed"] = args.seed
    if getattr(args, "baseline", False):
        changes["baseline_mode"] = True
    if getattr(args, "rounds", None) is not None:
        changes["rounds"] = args.rounds
    if getattr(args, "cap", None) is not None:
        changes["iteration_cap"] = None if args.cap.lower() == "none" else int(args.cap)
    if changes:
        fed = dataclasses.replace(fed, **changes)
    data = cfg.data
    if getattr(args, "data", None):
        data = dataclasses.replace(data, root=str(args.data))
    out = cfg.out_dir
    if getattr(args, "out", None) and args.command == "train":
        out = str(args.out)
    return RunConfig(data, fed, out)


def _load_clients(cfg: RunConfig) -> tuple[list[ClientDataset], ClientDataset | None]:
    root = Path(cfg.data.root)
    if not root.is_dir():
        raise DataError(f"data root {root} does not exist; run 'fedseg generate' first")
    clients = []
    for k, (seed, style) in enumerate(zip(cfg.data.seeds, cfg.data.styles)):
        cid = f"client{k + 1}"
        vols = read_client_dir(root / cid)
        if len(vols) != cfg.data.counts[k]:
            log.warning("%s holds %d scans, config lists %d", cid, len(vols), cfg.data.counts[k])
        clients.append(make_client(cid, vols, seed, style))
    holdout = None
    if cfg.data.holdout_count:
        vols = read_client_dir(root / HOLDOUT_ID)
        holdout = make_client(HOLDOUT_ID, vols, cfg.data.holdout_seed, cfg.data.holdout_style)
    return clients, holdout


def _data_fingerprint(clients, holdout) -> str:
    h = hashlib.sha256()
    for c in clients + ([holdout] if holdout else []):
        for v in [c.support] + c.training + c.validation:
            h.update(f"{c.client_id}/{v.scan_id}".encode())
            h.update(v.voxels.tobytes())
            if v.labels is not None:
                h.update(v.labels.tobytes())
    return h.hexdigest()


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _cell(value):
    return "skipped" if value is None else repr(value)


def _dice_dict(report, classes) -> dict[str, float | None]:
    return {str(c): report.class_mean(c) for c in classes}


# -- commands --------------------------------------------------------------
def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    root = Path(args.out or cfg.data.root)
    d = cfg.data
    roster = {}
    for k, (count, seed, style) in enumerate(zip(d.counts, d.seeds, d.styles)):
        roster[f"client{k + 1}"] = client_volumes(count, seed, style, d.slice_spec(), d.size, d.organs)
    if d.holdout_count:
        roster[HOLDOUT_ID] = client_volumes(d.holdout_count, d.holdout_seed, d.holdout_style,
                                            d.slice_spec(), d.size, d.organs)
    paths = write_clients(root, roster)
    print(f"wrote {len(paths)} volumes for {len(roster)} clients under {root}")
    return EXIT_OK


def _write_manifest(out: Path, cfg: RunConfig, clients, holdout, extra=None) -> None:
    text = dump_config(cfg)
    manifest = {
        "fedseg_version": __version__,
        "superpixel_backend": BACKEND,
        "config": text,
        "roster": [
            {"client_id": c.client_id, "seed": c.seed, "style": c.style, "scans": c.scan_count,
             "training_scans": len(c.training), "validation_scans": len(c.validation),
             "support_scan": c.support.scan_id, "slice_count": c.slice_count}
            for c in clients
        ],
        "holdout": None if holdout is None else {"client_id": holdout.client_id, "scans": holdout.scan_count},
        "fingerprints": {
            "config_sha256": _sha(text),
            "code_sha256": code_fingerprint(),
            "data_sha256": _data_fingerprint(clients, holdout),
        },
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _has_section(path, name: str) -> bool:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(Path(path).read_text(encoding="utf-8"))
    return cp.has_section(name)


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if args.baseline and _has_section(args.config, "losses"):
        raise ConfigError("--baseline contradicts the dice-term weights in the [losses] section")
    clients, holdout = _load_clients(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    _write_manifest(out, cfg, clients, holdout)

    fed = cfg.fed
    classes = fed.eval_classes
    params = init_params(fed.proto.encoder, fed.global_seed)
    metrics = (out / "metrics.jsonl").open("w")
    rows = []

    def emit(obj):
        metrics.write(json.dumps(obj, sort_keys=True) + "\n")
        metrics.flush()

    def on_round(rep: RoundReport):
        for c, w in zip(rep.clients, rep.weights):
            emit({"kind": "client", "phase": "round", "round": rep.round, "client": c.client_id,
                  "lr": rep.lr, "weight": w, "slice_count": c.slice_count, "iterations": c.iterations,
                  "losses": c.losses.as_dict(), "dice": {str(k): v for k, v in c.dice.items()},
                  "skipped_parts": {str(k): v for k, v in c.evaluation.skipped_parts.items()}})
            rows.append([rep.round, c.client_id] + [c.losses.as_dict()[k] for k in LOSS_COLUMNS]
                        + [_cell(c.dice.get(k)) for k in classes])
        emit({"kind": "server", "phase": "round", "round": rep.round, "lr": rep.lr, "weights": rep.weights,
              "mean_dice": {str(k): rep.mean_dice(k) for k in classes},
              "client_dice": {c.client_id: {str(k): v for k, v in c.dice.items()} for c in rep.clients},
              "holdout_dice": None if rep.holdout is None else _dice_dict(rep.holdout, classes)})
        print(f"round {rep.round:3d} lr={rep.lr:.3g} mean dice "
              + " ".join(f"c{k}={rep.mean_dice(k) if rep.mean_dice(k) is None else round(rep.mean_dice(k), 2)}"
                         for k in classes), flush=True)

    def on_initial(reports, holdout_report):
        for c, rep0 in zip(clients, reports):
            emit({"kind": "client", "phase": "initial", "round": None, "client": c.client_id,
                  "dice": _dice_dict(rep0, classes)})
        emit({"kind": "server", "phase": "initial", "round": None,
              "mean_dice": {str(k): _mean([r.class_mean(k) for r in reports]) for k in classes},
              "client_dice": {c.client_id: _dice_dict(r, classes) for c, r in zip(clients, reports)},
              "holdout_dice": None if holdout_report is None else _dice_dict(holdout_report, classes)})

    try:
        run = run_federation(fed, clients, params, on_round=on_round, holdout=holdout, on_initial=on_initial)
    finally:
        metrics.close()

    write_model(out / "model.fpm", run.params)
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "client", *LOSS_COLUMNS, *[f"dice_class_{k}" for k in classes]])
        w.writerows(rows)
    _write_manifest(out, cfg, clients, holdout, {"model_sha256": run.params.checksum(),
                                                  "rounds_completed": len(run.reports)})
    print(f"wrote {out / 'model.fpm'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.run:
        run = Path(args.run)
        cfg = load_config(args.config or run / "config.ini")
        model_path = Path(args.model) if args.model else run / "model.fpm"
    else:
        if not (args.config and args.model):
            raise ConfigError("evaluate needs --run, or both --config and --model")
        cfg = load_config(args.config)
        model_path = Path(args.model)
    cfg = _apply_overrides(cfg, args)
    classes = tuple(int(c) for c in args.classes.split(",")) if args.classes else cfg.fed.eval_classes
    expected = init_params(cfg.fed.proto.encoder, 0)
    params = read_model(model_path, expected.names)
    for name, got, want in zip(expected.names, params, expected):
        if got.shape != want.shape:
            raise FormatError(f"{model_path}: tensor {name} has shape {got.shape}, "
                              f"the configured encoder expects {want.shape}")
    clients, holdout = _load_clients(cfg)
    targets = clients + ([holdout] if holdout is not None else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["client", *[f"dice_class_{k}" for k in classes]])
    for c in targets:
        rep = one_shot_validate(params, c, classes, cfg.fed.proto)
        w.writerow([c.client_id] + [_cell(rep.class_mean(k)) for k in classes])
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def _inspect_one(path: Path) -> dict:
    head = path.read_bytes()[:4]
    if head == FPV_MAGIC:
        v = read_volume(path)
        info = {"path": str(path), "format": "FPV1", "scan_id": v.scan_id, "style": v.style,
                "shape": list(v.voxels.shape), "intensity": [float(v.voxels.min()), float(v.voxels.max())],
                "labelled": v.labels is not None}
        if v.labels is not None:
            ids, counts = np.unique(v.labels, return_counts=True)
            info["label_voxels"] = {str(int(i)): int(n) for i, n in zip(ids, counts)}
        return info
    if head == FPM_MAGIC:
        m = read_model(path)
        return {"path": str(path), "format": "FPM1", "tensors": [list(t.shape) for t in m],
                "parameters": m.num_parameters(), "sha256": m.checksum()}
    raise FormatError(f"{path}: unrecognised magic {head!r}")


def cmd_inspect(args) -> int:
    for p in map(Path, args.paths):
        files = sorted(p.rglob("*.fp[vm]")) if p.is_dir() else [p]
        if not files:
            raise DataError(f"no .fpv/.fpm files under {p}")
        for f in files:
            print(json.dumps(_inspect_one(f), sort_keys=True))
    return EXIT_OK


# -- entry point -----------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedseg", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fedseg {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic client volumes")
    g.add_argument("--config", required=True)
    g.add_argument("--out", help="data root (default: [data] root)")

    t = sub.add_parser("train", help="run federated training")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="run directory (default: [output] dir)")
    t.add_argument("--data", help="data root (default: [data] root)")
    t.add_argument("--seed", type=int, help="override the global seed")
    t.add_argument("--baseline", action="store_true", help="CE and cyclic terms only")
    t.add_argument("--rounds", type=int)
    t.add_argument("--cap", help="iteration cap per epoch, or 'none'")

    e = sub.add_parser("evaluate", help="one-shot validation of a saved model")
    e.add_argument("--run", help="run directory holding config.ini and model.fpm")
    e.add_argument("--config")
    e.add_argument("--model")
    e.add_argument("--data", help="data root (default: [data] root)")
    e.add_argument("--classes", help="comma-separated class ids")
    e.add_argument("--out", help="also write the CSV here")

    i = sub.add_parser("inspect", help="print headers of .fpv/.fpm files")
    i.add_argument("paths", nargs="+")
    return ap


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"fedseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, OSError) as exc:
        print(f"fedseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"fedseg: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
