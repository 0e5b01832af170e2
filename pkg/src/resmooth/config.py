"""Experiment configuration: a line-oriented ``key = value`` text format with
one level of ``[section]`` headers, typed into an ``ExperimentConfig``."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, replace

from .glyphs import NOISE_PRESETS, GlyphSpec
from .netcore import TrainConfig
from .pipelines import ModelSpec
from .rasters import RAND_AUGMENT_OPS, AugmentStrategy
from .smoothing import ALPHA_MODES, AlphaMode

VARIANTS = ("resmooth_log", "resmooth_norm", "baseline_plain", "baseline_lsr", "nda_constant")
UNIFORM_OPTIMAL_GRID = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5)


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = ""
        if key is not None:
            where = f"key '{key}'" + (f" (line {line})" if line else "") + ": "
        super().__init__(where + message)
        self.key, self.line = key, line


@dataclass(frozen=True)
class ExperimentConfig:
    glyphs: GlyphSpec = GlyphSpec()
    train_path: str | None = None
    test_path: str | None = None
    strategy: AugmentStrategy = AugmentStrategy("rand_augment", p=0.5)
    model: ModelSpec = ModelSpec()
    pretrain: TrainConfig = TrainConfig()
    train: TrainConfig = TrainConfig()
    variant: str = "resmooth_log"
    alpha_max: float = 0.4
    alpha_mode: str = "resmooth"
    lsr_alpha: float | None = None
    uniform_constant: float | None = None
    tau: float = 0.5
    refit: bool = False
    seeds: tuple = (0,)
    output_dir: str = "runs"
    sweep_param: str = "alpha"
    sweep_grid: tuple = (0.1, 0.2, 0.3, 0.4, 0.5)
    optimal_grid: tuple = UNIFORM_OPTIMAL_GRID
    daood_n: int = 100
    daood_max_attempts: int | None = None
    fair_n: int = 32
    plot_bins: int = 100
    config_hash: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must not be empty", "seeds")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}", "variant")
        if self.variant == "nda_constant" and not self.strategy.is_negative:
            raise ConfigError("nda_constant requires a jigsaw or rotation strategy", "variant")
        if self.alpha_mode not in ALPHA_MODES:
            raise ConfigError(f"unknown alpha mode {self.alpha_mode!r}", "alpha_mode")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)", "tau")

    def alpha(self, seed: int = 0) -> AlphaMode:
        return AlphaMode(self.alpha_mode, self.alpha_max, seed, self.uniform_constant)

    def train_cfg(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed)

    def pretrain_cfg(self, seed: int) -> TrainConfig:
        return replace(self.pretrain, seed=seed)


# section -> key -> (target, parser)
def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _floats(raw: str) -> tuple:
    return tuple(float(v) for v in raw.replace(",", " ").split())


def _ints(raw: str) -> tuple:
    return tuple(int(v) for v in raw.replace(",", " ").split())


def _noise(raw: str) -> float:
    return NOISE_PRESETS[raw] if raw in NOISE_PRESETS else float(raw)


def _ops(raw: str) -> tuple:
    ops = tuple(v for v in raw.replace(",", " ").split())
    bad = [o for o in ops if o not in RAND_AUGMENT_OPS]
    if bad:
        raise ValueError(f"unknown ops {bad}")
    return ops


def _opt_float(raw: str):
    return None if raw.lower() in ("", "none") else float(raw)


def _opt_int(raw: str):
    return None if raw.lower() in ("", "none") else int(raw)


_TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "lr0": float,
    "momentum": float,
    "weight_decay": float,
    "schedule": str,
}

SCHEMA = {
    "data": {
        "classes": ("n_classes", int),
        "per_class": ("per_class", int),
        "test_per_class": ("test_per_class", int),
        "size": ("size", int),
        "noise": ("noise", _noise),
        "orientation_sensitive": ("orientation_sensitive", _bool),
        "seed": ("seed", int),
        "jitter": ("jitter", float),
        "train": ("train_path", str),
        "test": ("test_path", str),
    },
    "augment": {
        "kind": ("kind", str),
        "p": ("p", float),
        "n_ops": ("n_ops", int),
        "magnitude": ("magnitude", int),
        "grid_k": ("grid_k", int),
        "cut_size": ("cut_size", int),
        "ops": ("ops", _ops),
    },
    "model": {"arch": ("architecture", str), "hidden": ("hidden", int)},
    "pretrain": {k: (k, f) for k, f in _TRAIN_KEYS.items()},
    "train": {k: (k, f) for k, f in _TRAIN_KEYS.items()},
    "resmooth": {
        "variant": ("variant", str),
        "alpha_max": ("alpha_max", float),
        "alpha_mode": ("alpha_mode", str),
        "lsr_alpha": ("lsr_alpha", _opt_float),
        "uniform_constant": ("uniform_constant", _opt_float),
        "tau": ("tau", float),
        "refit": ("refit", _bool),
    },
    "run": {"seeds": ("seeds", _ints), "output_dir": ("output_dir", str)},
    "sweep": {"param": ("sweep_param", str), "grid": ("sweep_grid", _floats), "optimal_grid": ("optimal_grid", _floats)},
    "daood": {"n": ("daood_n", int), "max_attempts": ("daood_max_attempts", _opt_int), "fair_n": ("fair_n", int)},
    "plot": {"bins": ("plot_bins", int)},
}


def _line_index(text: str) -> dict:
    """(section, key) -> 1-based line number of its definition."""
    index, section = {}, None
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif section and "=" in s and not s.startswith(("#", ";")):
            index[(section, s.split("=", 1)[0].strip().lower())] = lineno
    return index


def parse_sections(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"), delimiters=("=",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "option", None) or "<syntax>", line) from None
    return {s: dict(parser.items(s)) for s in parser.sections()}


def canonical_text(sections: dict) -> str:
    out = []
    for sec in sorted(sections):
        out.append(f"[{sec}]")
        out.extend(f"{k} = {sections[sec][k]}" for k in sorted(sections[sec]))
    return "\n".join(out) + "\n"


def hash_sections(sections: dict) -> str:
    return hashlib.sha256(canonical_text(sections).encode("utf-8")).hexdigest()[:16]


def parse_config(text: str) -> ExperimentConfig:
    sections = parse_sections(text)
    lines = _line_index(text)
    typed: dict = {sec: {} for sec in SCHEMA}
    for sec, items in sections.items():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]", sec, None)
        for key, raw in items.items():
            line = lines.get((sec, key))
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key in [{sec}]", key, line)
            target, conv = SCHEMA[sec][key]
            try:
                typed[sec][target] = conv(raw.strip())
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"bad value {raw!r}: {exc}", key, line) from None

    def build(cls, kwargs, sec):
        try:
            return cls(**kwargs)
        except (ValueError, TypeError) as exc:
            # name the config key whose field the message mentions
            back = {target: key for key, (target, _) in SCHEMA[sec].items() if target in kwargs}
            hits = [k for t, k in back.items() if t in str(exc) or k in str(exc)]
            key = hits[0] if hits else next(iter(back.values()), sec)
            raise ConfigError(str(exc), key, lines.get((sec, key))) from None

    d, a, m = typed["data"], typed["augment"], typed["model"]
    train_path, test_path = d.pop("train_path", None), d.pop("test_path", None)
    top: dict = {}
    for sec in ("resmooth", "run", "sweep", "daood", "plot"):
        top.update(typed[sec])
    try:
        return ExperimentConfig(
            glyphs=build(GlyphSpec, d, "data"),
            train_path=train_path,
            test_path=test_path,
            strategy=build(AugmentStrategy, {"kind": "rand_augment", "p": 0.5, **a}, "augment"),
            model=build(ModelSpec, m, "model"),
            pretrain=build(TrainConfig, typed["pretrain"], "pretrain"),
            train=build(TrainConfig, typed["train"], "train"),
            config_hash=hash_sections(sections),
            **top,
        )
    except ConfigError as exc:
        if exc.line is None and exc.key is not None:
            for (sec, key), ln in lines.items():
                if key == exc.key:
                    raise ConfigError(str(exc).split(": ", 1)[-1], exc.key, ln) from None
        raise


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def config_hash_of_file(path) -> str:
    with open(path) as fh:
        return hash_sections(parse_sections(fh.read()))

