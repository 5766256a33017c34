import csv
import json

import pytest

from fedseg.cli import main

TINY = """
[data]
root = {root}
counts = 5, 5
styles = MR_T2, CT
seeds = 1, 2
slices = 8
size = 32
organs = 2

[federation]
rounds = 2
iteration_cap = 4
global_seed = 7
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = base / "tiny.ini"
    cfg.write_text(TINY.format(root=base / "data"))
    assert main(["generate", "--config", str(cfg)]) == 0
    return base, cfg


@pytest.fixture(scope="module")
def trained(tiny):
    base, cfg = tiny
    run = base / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == 0
    return run


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_generate_reference_roster_file_count(tmp_path):
    cfg = tmp_path / "g.ini"
    cfg.write_text(f"[data]\nroot = {tmp_path / 'd'}\ncounts = 20, 20, 15, 15, 25\nslices = 3\nsize = 8\norgans = 1\n")
    assert main(["generate", "--config", str(cfg)]) == 0
    files = sorted((tmp_path / "d").rglob("*.fpv"))
    assert len(files) == 95
    assert len({f.parent.name for f in files}) == 5
    first = {f: f.read_bytes() for f in files}
    assert main(["generate", "--config", str(cfg)]) == 0
    assert all(f.read_bytes() == b for f, b in first.items())


def test_generate_rejects_small_count(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[data]\ncounts = 20, 4\n")
    assert main(["generate", "--config", str(cfg)]) == 2
    assert "4:1" in capsys.readouterr().err


def test_train_writes_artifacts(trained):
    for name in ("manifest.json", "metrics.jsonl", "summary.csv", "model.fpm", "config.ini"):
        assert (trained / name).is_file(), name
    records = [json.loads(line) for line in (trained / "metrics.jsonl").read_text().splitlines()]
    servers = [r for r in records if r["kind"] == "server" and r["phase"] == "round"]
    assert [r["round"] for r in servers] == [0, 1]
    assert sum(1 for r in records if r["kind"] == "client" and r["phase"] == "round") == 4
    rows = read_csv(trained / "summary.csv")
    assert list(rows[0]) == ["round", "client", "ce", "cyclic", "spatial_dice", "edge_dice", "total",
                             "dice_class_1", "dice_class_2"]
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["rounds_completed"] == 2
    assert set(manifest["fingerprints"]) == {"config_sha256", "code_sha256", "data_sha256"}


def test_train_is_deterministic(tiny, trained):
    base, cfg = tiny
    again = base / "run_again"
    assert main(["train", "--config", str(cfg), "--out", str(again)]) == 0
    for name in ("metrics.jsonl", "summary.csv", "model.fpm"):
        assert (again / name).read_bytes() == (trained / name).read_bytes(), name
    # manifests differ only in the output directory recorded in the embedded config
    a, b = (json.loads((d / "manifest.json").read_text()) for d in (again, trained))
    assert a["config"].replace(str(again), str(trained)) == b["config"]
    assert a["fingerprints"]["data_sha256"] == b["fingerprints"]["data_sha256"]
    assert a["model_sha256"] == b["model_sha256"]


def test_baseline_flag_zeroes_dice_columns(tiny):
    base, cfg = tiny
    run = base / "run_baseline"
    assert main(["train", "--config", str(cfg), "--out", str(run), "--baseline", "--rounds", "1"]) == 0
    rows = read_csv(run / "summary.csv")
    assert rows and all(float(r["spatial_dice"]) == 0.0 and float(r["edge_dice"]) == 0.0 for r in rows)
    assert all(float(r["total"]) > 0 for r in rows)


def test_baseline_flag_with_losses_section_is_rejected(tmp_path, tiny):
    base, _ = tiny
    cfg = tmp_path / "c.ini"
    cfg.write_text(TINY.format(root=base / "data") + "\n[losses]\nedge_dice_weight = 0.5\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r"), "--baseline"]) == 2


def test_evaluate_reproduces_final_server_numbers(trained, capsys):
    out = trained / "eval.csv"
    assert main(["evaluate", "--run", str(trained), "--out", str(out)]) == 0
    rows = read_csv(out)
    assert [r["client"] for r in rows] == ["client1", "client2"]
    last = [json.loads(line) for line in (trained / "metrics.jsonl").read_text().splitlines()][-1]
    for r in rows:
        for k in ("1", "2"):
            want = last["client_dice"][r["client"]][k]
            assert (r[f"dice_class_{k}"] == "skipped") if want is None else float(r[f"dice_class_{k}"]) == want
    assert "client1" in capsys.readouterr().out


def test_evaluate_unknown_class_is_skipped(trained):
    out = trained / "eval4.csv"
    assert main(["evaluate", "--run", str(trained), "--classes", "1,4", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert list(rows[0]) == ["client", "dice_class_1", "dice_class_4"]
    assert all(r["dice_class_4"] == "skipped" for r in rows)


def test_evaluate_rejects_mismatched_model(trained, tmp_path):
    cfg = tmp_path / "narrow.ini"
    cfg.write_text((trained / "config.ini").read_text().replace("widths = 16, 32, 64", "widths = 8, 32, 64"))
    code = main(["evaluate", "--config", str(cfg), "--model", str(trained / "model.fpm")])
    assert code == 3


def test_inspect(trained, tiny, capsys):
    base, _ = tiny
    assert main(["inspect", str(trained / "model.fpm"), str(base / "data" / "client1")]) == 0
    lines = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert lines[0]["format"] == "FPM1" and lines[1]["format"] == "FPV1" and len(lines) == 6


@pytest.mark.filterwarnings("ignore:overflow encountered", "ignore:invalid value encountered")
def test_exit_codes(tmp_path, tiny):
    base, cfg = tiny
    missing = tmp_path / "m.ini"
    missing.write_text(TINY.format(root=tmp_path / "nowhere"))
    assert main(["train", "--config", str(missing), "--out", str(tmp_path / "r")]) == 3
    bad = tmp_path / "junk.fpv"
    bad.write_bytes(b"NOPE" + bytes(30))
    assert main(["inspect", str(bad)]) == 3
    assert main(["train", "--config", str(tmp_path / "absent.ini")]) == 2
    hot = tmp_path / "hot.ini"
    hot.write_text(TINY.format(root=base / "data") + "base_lr = 1e30\n")
    assert main(["train", "--config", str(hot), "--out", str(tmp_path / "r2")]) == 4
