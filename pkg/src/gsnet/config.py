"""Run configuration: flat ``section.key = value`` text files.

Lines are UTF-8, ``#`` starts a comment, and every key is dotted with its
section (``model``, ``data``, ``optim``, ``train``, ``ablation``,
``diagnose``). Unknown keys are rejected. Tuples are written as comma lists.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import GrainGenConfig
from .errors import ConfigError
from .model import ModelConfig

_ABLATION_KEYS = ("guided", "triple", "iawca")


@dataclass
class DataSection:
    gen: GrainGenConfig = field(default_factory=GrainGenConfig)
    n_per_level: int = 250
    split: float = 0.8
    dir: str = "data"


@dataclass
class OptimSection:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 16
    lr_power: float = 0.9


@dataclass
class TrainSection:
    epochs: int = 30
    seed: int = 0
    out_dir: str = "runs/default"
    half_levels: bool = False


@dataclass
class AblationSection:
    guided: bool = True
    triple: bool = True
    iawca: bool = True


@dataclass
class DiagnoseSection:
    grad_coords: int = 3
    samples: int = 10


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSection = field(default_factory=DataSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    diagnose: DiagnoseSection = field(default_factory=DiagnoseSection)

    def model_config(self) -> ModelConfig:
        """The model config with ablation switches and the class count applied."""
        n = self.data.gen.num_levels
        return replace(
            self.model,
            guided=self.ablation.guided,
            triple=self.ablation.triple,
            iawca=self.ablation.iawca,
            image_size=self.data.gen.image_size,
            num_classes=2 * n - 1 if self.train.half_levels else n,
        )


def _targets(cfg: RunConfig) -> dict[str, tuple[object, str]]:
    """Map every dotted key to (owning object, attribute)."""
    out: dict[str, tuple[object, str]] = {}
    for f in fields(ModelConfig):
        # the ablation section owns the switches; image size and class count come from data
        if f.name not in _ABLATION_KEYS and f.name not in ("image_size", "num_classes"):
            out[f"model.{f.name}"] = (cfg.model, f.name)
    for f in fields(GrainGenConfig):
        out[f"data.{f.name}"] = (cfg.data.gen, f.name)
    for sect_name in ("data", "optim", "train", "ablation", "diagnose"):
        sect = getattr(cfg, sect_name)
        for f in fields(sect):
            if f.name != "gen":
                out[f"{sect_name}.{f.name}"] = (sect, f.name)
    return out


def _parse_value(key: str, raw: str, current):
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(i) for i in v)
    return str(v)


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    targets = _targets(cfg)
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in targets:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        obj, attr = targets[key]
        setattr(obj, attr, _parse_value(key, raw, getattr(obj, attr)))
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    lines = [f"{k} = {_format_value(getattr(obj, attr))}" for k, (obj, attr) in _targets(cfg).items()]
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
