"""Run configuration: ``key = value`` lines under ``[section]`` headers.

Parsing goes through :mod:`configparser`; :func:`dump_config` writes every
resolved key so that ``parse(dump(parse(text))) == parse(text)``.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .datastore import STYLES, ConfigurationError
from .episodes import AugmentRanges, SuperpixelParams
from .fedsim import FedConfig
from .protoseg import EncoderConfig, ProtoConfig

ConfigError = ConfigurationError


@dataclass(frozen=True)
class DataConfig:
    root: str = "data"
    counts: tuple[int, ...] = (20, 20, 15, 15, 25)
    styles: tuple[str, ...] = ("MR_T2", "MR_T2", "MR_T2", "MR_T2", "MR_T2")
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    slices: tuple[int, int] = (30, 50)
    size: int = 64
    organs: int = 4
    holdout_count: int = 0
    holdout_style: str = "CT"
    holdout_seed: int = 1000

    def __post_init__(self):
        if not self.counts:
            raise ConfigError("[data] counts must list at least one client")
        if not len(self.counts) == len(self.styles) == len(self.seeds):
            raise ConfigError("[data] counts, styles and seeds must have the same length")
        for c in self.counts:
            if c < 5:
                raise ConfigError(
                    f"[data] client count {c} < 5: the 4:1 split needs >= 1 validation scan, "
                    "1 support scan and >= 1 training scan"
                )
        for s in self.styles + (self.holdout_style,):
            if s not in STYLES:
                raise ConfigError(f"[data] unknown style {s!r}; choose from {', '.join(STYLES)}")
        if self.slices[0] < 3 or self.slices[0] > self.slices[1]:
            raise ConfigError("[data] slices must be >= 3 (lo-hi with lo <= hi)")
        if self.size % 4 or self.size < 8:
            raise ConfigError("[data] size must be a multiple of 4, at least 8")
        if not 1 <= self.organs <= 4:
            raise ConfigError("[data] organs must lie in [1, 4]")
        if self.holdout_count and self.holdout_count < 5:
            raise ConfigError("[data] holdout_count must be 0 or >= 5")

    def slice_spec(self):
        lo, hi = self.slices
        return lo if lo == hi else (lo, hi)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    out_dir: str = "runs/default"


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(t for t in text.replace(",", " ").split())


def _range(text: str) -> tuple[int, int]:
    text = text.strip()
    if "-" in text:
        lo, hi = text.split("-", 1)
        return int(lo), int(hi)
    return int(text), int(text)


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("none", "") else int(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    known = {"data", "federation", "model", "superpixel", "augment", "losses", "output"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")

    def sec(name):
        return cp[name] if cp.has_section(name) else {}

    try:
        d = sec("data")
        dd = DataConfig()
        counts = _ints(d["counts"]) if "counts" in d else dd.counts
        # a custom roster without styles/seeds gets MR_T2 and seeds 1..n
        default_styles = dd.styles if "counts" not in d else ("MR_T2",) * len(counts)
        default_seeds = dd.seeds if "counts" not in d else tuple(range(1, len(counts) + 1))
        data = DataConfig(
            root=d.get("root", dd.root),
            counts=counts,
            styles=_words(d["styles"]) if "styles" in d else default_styles,
            seeds=_ints(d["seeds"]) if "seeds" in d else default_seeds,
            slices=_range(d["slices"]) if "slices" in d else dd.slices,
            size=int(d.get("size", dd.size)),
            organs=int(d.get("organs", dd.organs)),
            holdout_count=int(d.get("holdout_count", dd.holdout_count)),
            holdout_style=d.get("holdout_style", dd.holdout_style),
            holdout_seed=int(d.get("holdout_seed", dd.holdout_seed)),
        )

        m = sec("model")
        pc = ProtoConfig()
        proto = ProtoConfig(
            tau_fg=float(m.get("tau_fg", pc.tau_fg)),
            tau_bg=float(m.get("tau_bg", pc.tau_bg)),
            alpha_w=float(m.get("alpha_w", pc.alpha_w)),
            alpha_p=float(m.get("alpha_p", pc.alpha_p)),
            encoder=EncoderConfig(widths=_ints(m["widths"]) if "widths" in m else pc.encoder.widths),
        )
        s = sec("superpixel")
        sp0 = SuperpixelParams()
        sp = SuperpixelParams(
            k=float(s.get("k", sp0.k)), min_size=int(s.get("min_size", sp0.min_size)),
            sigma=float(s.get("sigma", sp0.sigma)), area_min=float(s.get("area_min", sp0.area_min)),
            area_max=float(s.get("area_max", sp0.area_max)),
        )
        a = sec("augment")
        ar0 = AugmentRanges()
        aug = AugmentRanges(
            max_rotation=float(a.get("max_rotation", ar0.max_rotation)),
            scale=_floats(a["scale"]) if "scale" in a else ar0.scale,
            flip_prob=float(a.get("flip_prob", ar0.flip_prob)),
            elastic_prob=float(a.get("elastic_prob", ar0.elastic_prob)),
            elastic_alpha=float(a.get("elastic_alpha", ar0.elastic_alpha)),
            gamma=_floats(a["gamma"]) if "gamma" in a else ar0.gamma,
            max_noise=float(a.get("max_noise", ar0.max_noise)),
        )
        f = sec("federation")
        fc = FedConfig()
        baseline = _bool(f.get("baseline", "false"))
        lsec = sec("losses")
        if baseline and len(lsec):
            raise ConfigError("[federation] baseline = true contradicts dice-term weights in [losses]")
        fed = FedConfig(
            rounds=int(f.get("rounds", fc.rounds)),
            local_epochs=int(f.get("local_epochs", fc.local_epochs)),
            iteration_cap=_opt_int(f["iteration_cap"]) if "iteration_cap" in f else fc.iteration_cap,
            base_lr=float(f.get("base_lr", fc.base_lr)),
            lr_decay=float(f.get("lr_decay", fc.lr_decay)),
            batch_size=int(f.get("batch_size", fc.batch_size)),
            global_seed=int(f.get("global_seed", fc.global_seed)),
            baseline_mode=baseline,
            workers=int(f.get("workers", fc.workers)),
            eval_classes=_ints(f["eval_classes"]) if "eval_classes" in f
            else tuple(range(1, data.organs + 1)),
            dice_weights=(float(lsec.get("spatial_dice_weight", fc.dice_weights[0])),
                          float(lsec.get("edge_dice_weight", fc.dice_weights[1]))),
            proto=proto, superpixel=sp, augment=aug,
        )
        out = sec("output").get("dir", RunConfig.out_dir)
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {exc}") from None
    return RunConfig(data, fed, out)


def dump_config(cfg: RunConfig) -> str:
    d, f = cfg.data, cfg.fed
    sections = {
        "data": {
            "root": d.root, "counts": d.counts, "styles": d.styles, "seeds": d.seeds,
            "slices": f"{d.slices[0]}-{d.slices[1]}", "size": d.size, "organs": d.organs,
            "holdout_count": d.holdout_count, "holdout_style": d.holdout_style,
            "holdout_seed": d.holdout_seed,
        },
        "federation": {
            "rounds": f.rounds, "local_epochs": f.local_epochs, "iteration_cap": f.iteration_cap,
            "base_lr": f.base_lr, "lr_decay": f.lr_decay, "batch_size": f.batch_size,
            "global_seed": f.global_seed, "baseline": f.baseline_mode, "workers": f.workers,
            "eval_classes": f.eval_classes,
        },
        "model": {
            "widths": f.proto.encoder.widths, "tau_fg": f.proto.tau_fg, "tau_bg": f.proto.tau_bg,
            "alpha_w": f.proto.alpha_w, "alpha_p": f.proto.alpha_p,
        },
        "superpixel": dataclasses.asdict(f.superpixel),
        "augment": {
            "max_rotation": f.augment.max_rotation, "scale": f.augment.scale,
            "flip_prob": f.augment.flip_prob, "elastic_prob": f.augment.elastic_prob,
            "elastic_alpha": f.augment.elastic_alpha, "gamma": f.augment.gamma,
            "max_noise": f.augment.max_noise,
        },
        "output": {"dir": cfg.out_dir},
    }
    if not f.baseline_mode:
        sections["losses"] = {"spatial_dice_weight": f.dice_weights[0], "edge_dice_weight": f.dice_weights[1]}
    lines = []
    for name, values in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in values.items())
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
