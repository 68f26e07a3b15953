"""Run configuration: flat ``section.key = value`` text with ``#`` comments."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .supernet import OPS


class ConfigError(ValueError):
    """Malformed config text, unknown key or uncoercible value."""


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | idx
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    classes: tuple[int, ...] = (0, 1)  # idx subset, relabelled 0..K-1
    num_classes: int = 2
    num_train: int = 512
    num_valid: int = 256
    height: int = 16
    width: int = 16
    margin: float = 0.6
    noise: float = 0.2


@dataclass
class BackboneConfig:
    stem_channels: int = 8
    num_blocks: int = 3
    layers_per_block: int = 2
    channel_multiplier: int = 2
    epochs: int = 15
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    steps: int = 7
    step_size: float = 2 / 255
    norm: str = "inf"  # inf | 2
    random_start: bool = True


@dataclass
class SearchConfig:
    nodes: int = 4
    ops: tuple[str, ...] = OPS
    channel_ratio: float = 0.5
    cells_per_block: int = 3
    per_block: bool = False
    epochs: int = 5
    batch_size: int = 64
    free_replay: int = 4
    arch_attack_steps: int = 1
    cotrain_backbone: bool = False


@dataclass
class AdmmConfig:
    rho: float = 1.0
    eta1: float = 3e-4
    eta2: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0  # 0 disables


@dataclass
class FlopsConfig:
    enabled: bool = True
    gamma: float = 0.0  # 0 calibrates gamma so the initial scale is exactly 1
    tau: float = 1.0
    mode: str = "pow"  # pow | mul


@dataclass
class RetrainConfig:
    cells_per_block: int = 6
    epochs: int = 10
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 3e-4
    batch_size: int = 64
    grad_clip: float = 1.0  # 0 disables
    constraint: bool = True
    eval_samples: int = 0  # per-epoch validation subset size; 0 uses the whole split


@dataclass
class BaselineConfig:
    epochs: int = 40
    lr: float = 0.02


@dataclass
class EvalConfig:
    pgd_steps: tuple[int, ...] = (10, 20)
    step_size: float = 0.0  # 0 uses attack.step_size
    batch_size: int = 128


@dataclass
class BoundsConfig:
    trials: int = 10_000
    points: int = 64
    radius: int = 2
    value_range: float = 3.0


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = True
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    flops: FlopsConfig = field(default_factory=FlopsConfig)
    retrain: RetrainConfig = field(default_factory=RetrainConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bounds: BoundsConfig = field(default_factory=BoundsConfig)

    # ---------------------------------------------------------------- access

    def _locate(self, key: str):
        parts = key.split(".")
        obj = self
        for p in parts[:-1]:
            sub = getattr(obj, p, None)
            if not dataclasses.is_dataclass(sub):
                raise ConfigError(f"unknown config key {key!r}")
            obj = sub
        names = {f.name: f for f in fields(obj)}
        f = names.get(parts[-1])
        if f is None or dataclasses.is_dataclass(getattr(obj, f.name)):
            raise ConfigError(f"unknown config key {key!r}")
        return obj, f

    def get(self, key: str):
        obj, f = self._locate(key)
        return getattr(obj, f.name)

    def set(self, key: str, value) -> None:
        obj, f = self._locate(key)
        cur = getattr(obj, f.name)
        setattr(obj, f.name, _coerce(key, value, cur) if isinstance(value, str) else value)

    def items(self):
        """(dotted key, value) pairs in declaration order."""
        def walk(obj, prefix):
            for f in fields(obj):
                v = getattr(obj, f.name)
                if dataclasses.is_dataclass(v):
                    yield from walk(v, f"{prefix}{f.name}.")
                else:
                    yield f"{prefix}{f.name}", v
        return list(walk(self, ""))

    # ---------------------------------------------------------------- text

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        cfg.update_text(text)
        return cfg

    def update_text(self, text: str) -> None:
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            k, v = line.split("=", 1)
            self.set(k.strip(), v.strip())

    def apply_overrides(self, overrides) -> None:
        for item in overrides or ():
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            self.set(k.strip(), v.strip())

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    def copy(self) -> "RunConfig":
        return RunConfig.from_text(self.to_text())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return str(v)


def _scalar(key: str, text: str, like):
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def _coerce(key: str, text: str, current):
    if isinstance(current, tuple):
        like = current[0] if current else ""
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(_scalar(key, t, like) for t in items)
    return _scalar(key, text, current)
