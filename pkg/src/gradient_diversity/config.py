"""Experiment configuration: typed INI sections, presets and validation.

Example file::

    [data]
    source = blobs
    train_count = 4000

    [train]
    schedule = 3:cosine_max_pairwise, 3:angle_sum
    beta = 0.5

Every key is checked against a typed schema; unknown sections or keys are
rejected before any work starts.
"""

from __future__ import annotations

import configparser
import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .trainer import GRAD_LOSS_KINDS, PRESETS


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _floats(text: str) -> list:
    return [float(t) for t in text.replace(";", ",").split(",") if t.strip()]


def _strs(text: str) -> list:
    return [t.strip() for t in text.replace(";", ",").split(",") if t.strip()]


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in _strs(text))


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_schedule(text) -> list:
    """``"3:cosine_max_pairwise, 3:angle_sum"`` or a preset name such as ``desk``."""
    if isinstance(text, list):
        return [(int(e), str(k)) for e, k in text]
    text = text.strip()
    if text in PRESETS:
        return list(PRESETS[text])
    out = []
    for part in _strs(text):
        epochs, _, kind = part.partition(":")
        kind = kind.strip()
        if kind not in GRAD_LOSS_KINDS:
            raise ValueError(f"unknown gradient loss {kind!r}")
        out.append((int(epochs), kind))
    if not out:
        raise ValueError("empty schedule")
    return out


@dataclass
class DataSection:
    source: str = "blobs"  # blobs | mnist | fashion
    data_dir: str = "data"
    train_count: int = 4000
    test_count: int = 1000
    stratified: bool = True
    n: int = 784
    classes: int = 10
    per_class: int = 500
    spread: float = 0.6


@dataclass
class EnsembleSection:
    size: int = 3
    hidden: tuple = (256, 128)
    regularized: int = 3
    baselines: int = 2


@dataclass
class TrainSection:
    schedule: list = field(default_factory=lambda: list(PRESETS["desk"]))
    baseline_schedule: list = field(default_factory=lambda: list(PRESETS["desk-baseline"]))
    beta: float = 0.5
    learning_rate: float = 0.05
    batch_size: int = 64
    temperature: float = 50.0
    checkpoints: bool = True


@dataclass
class AttackSection:
    kinds: list = field(default_factory=lambda: ["fgsm", "pgd_linf", "mi"])
    epsilons: list = field(default_factory=lambda: [0.1, 0.2, 0.3])
    count: int = 1000
    iterative_count: int = 200
    pgd_steps: int = 40
    mi_steps: int = 10
    momentum_decay: float = 1.0
    random_start: bool = False


@dataclass
class GdrSection:
    method: str = "exact"
    samples: int = 20000
    count: int = 1000
    correct_only: bool = False


@dataclass
class SeedSection:
    data: int = 0
    init: int = 0
    attack: int = 0


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    gdr: GdrSection = field(default_factory=GdrSection)
    seeds: SeedSection = field(default_factory=SeedSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "ExperimentConfig":
        d, e, t, a, g = self.data, self.ensemble, self.train, self.attack, self.gdr
        checks = [
            (d.source in ("blobs", "mnist", "fashion"), "data.source", "must be blobs, mnist or fashion"),
            (d.train_count > 0 and d.test_count > 0, "data.train_count", "counts must be positive"),
            (d.n >= 2 and d.classes >= 2 and d.per_class >= 1, "data.n", "bad synthetic shape"),
            (d.spread >= 0, "data.spread", "must be >= 0"),
            (e.size >= 1, "ensemble.size", "must be >= 1"),
            (all(h > 0 for h in e.hidden), "ensemble.hidden", "sizes must be positive"),
            (e.regularized >= 0 and e.baselines >= 0 and e.regularized + e.baselines > 0,
             "ensemble.regularized", "need at least one ensemble to train"),
            (t.beta >= 0, "train.beta", "must be >= 0"),
            (t.learning_rate > 0, "train.learning_rate", "must be > 0"),
            (t.batch_size > 0, "train.batch_size", "must be > 0"),
            (all(k in ("fgsm", "pgd_linf", "mi") for k in a.kinds), "attack.kinds", "unknown attack"),
            (all(eps >= 0 for eps in a.epsilons), "attack.epsilons", "must be >= 0"),
            (a.count > 0 and a.iterative_count > 0, "attack.count", "must be positive"),
            (g.method in ("exact", "monte_carlo"), "gdr.method", "must be exact or monte_carlo"),
            (g.samples > 0 and g.count > 0, "gdr.samples", "must be positive"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg}", key)
        for key in ("schedule", "baseline_schedule"):
            for epochs, kind in getattr(t, key):
                if epochs < 0 or kind not in GRAD_LOSS_KINDS:
                    raise ConfigError(f"train.{key}: bad phase {epochs}:{kind}", f"train.{key}")
                if kind == "angle_sum" and e.size != 3 or kind == "quad_triangle_area" and e.size != 4:
                    raise ConfigError(f"train.{key}: {kind} does not fit ensemble.size={e.size}", f"train.{key}")
        return self


SECTION_TYPES = {f.name: f.default_factory for f in fields(ExperimentConfig)}

# parser per field type annotation string
_PARSERS = {
    "str": str,
    "int": int,
    "float": float,
    "bool": _bool,
    "tuple": _ints,
    "list": None,  # per key below
}
_LIST_PARSERS = {
    ("train", "schedule"): parse_schedule,
    ("train", "baseline_schedule"): parse_schedule,
    ("attack", "kinds"): _strs,
    ("attack", "epsilons"): _floats,
}


def _set(cfg: ExperimentConfig, section: str, key: str, raw: str) -> None:
    if section not in SECTION_TYPES:
        raise ConfigError(f"unknown config section [{section}]", section)
    sec = getattr(cfg, section)
    types = {f.name: f.type for f in fields(sec)}
    if key not in types:
        raise ConfigError(f"unknown config key {section}.{key}", f"{section}.{key}")
    kind = str(types[key]).split("[")[0]
    parser = _LIST_PARSERS.get((section, key)) if kind == "list" else _PARSERS.get(kind, str)
    try:
        setattr(sec, key, parser(raw) if isinstance(raw, str) else raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}.{key}: {exc}", f"{section}.{key}") from exc


def preset(name: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if name == "desk":
        return cfg
    if name == "paper-mnist":
        cfg.data.source = "mnist"
        cfg.data.data_dir = "data/mnist"
        return cfg
    if name == "paper-fashion":
        cfg.data.source = "fashion"
        cfg.data.data_dir = "data/fashion"
        cfg.attack.epsilons = [0.03, 0.06, 0.09]
        return cfg
    raise ConfigError(f"unknown preset {name!r}", "preset")


PRESET_NAMES = ("desk", "paper-mnist", "paper-fashion")


def load_config(path=None, preset_name: str = "desk", overrides: dict | None = None) -> ExperimentConfig:
    """Preset, then file values, then ``overrides`` (``{"section.key": value}``)."""
    cfg = copy.deepcopy(preset(preset_name))
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                _set(cfg, section, key, raw)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        _set(cfg, section, key, value)
    return cfg.validate()


def write_config(cfg: ExperimentConfig, path) -> Path:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in cfg.to_dict().items():
        parser[section] = {}
        for key, value in values.items():
            if key.endswith("schedule"):
                value = ", ".join(f"{e}:{k}" for e, k in value)
            elif isinstance(value, (list, tuple)):
                value = ", ".join(str(v) for v in value)
            parser[section][key] = str(value)
    path = Path(path)
    with path.open("w") as fh:
        parser.write(fh)
    return path
