"""Run configuration: a TOML file of ``section.key = value`` entries."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class GeometryBlock:
    kind: str = "sparse"
    image_size: int = 64
    n_angles: int = 30
    n_detectors: int = 0
    arc_degrees: float = 120.0


@dataclass
class PhantomBlock:
    n_train: int = 200
    n_test: int = 20
    n_ellipses: int = 6
    intensity_lo: float = 0.1
    intensity_hi: float = 0.6


@dataclass
class NoiseBlock:
    sigma: float = 1.0


@dataclass
class ModelBlock:
    kind: str = "conv"
    mu: float = 0.05
    slope: float = 0.2
    icnn_channels: int = 48
    icnn_layers: int = 4
    icnn_kernel: int = 5
    smooth_channels: int = 32
    smooth_layers: int = 5
    smooth_kernel: int = 5
    smooth_out: int = 64
    outer_hidden: list = field(default_factory=lambda: [64, 64])
    dense_hidden: list = field(default_factory=lambda: [48, 48, 48, 48])


@dataclass
class TrainBlock:
    batch_size: int = 16
    n_iters: int = 5000
    learning_rate: float = 1e-4
    penalty_weight: float = 10.0
    decay: float = 0.9
    eps: float = 1e-8
    checkpoint_every: int = 0
    mode: str = "acncr"
    certificate_samples: int = 600


@dataclass
class SolveBlock:
    alpha: float = 0.1
    method: str = "accelerated"
    n_steps: int = 200
    step_rule: str = "constant"
    step: float = 0.4
    momentum: object = "nesterov"
    init: str = "fbp"


@dataclass
class TVBlock:
    weight: float = 0.01
    n_steps: int = 300


@dataclass
class MetricsBlock:
    data_range: object = 1.0


@dataclass
class PathsBlock:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoint"
    report_dir: str = "reports"


@dataclass
class TheoryBlock:
    n_pwl: int = 1000
    pwl_samples: int = 200
    modulus_samples: int = 100_000
    n_iwcnn: int = 50
    iwcnn_samples: int = 3000
    icnn_checks: int = 10_000
    checkpoint_checks: int = 200
    convergence_levels: int = 20
    convergence_tol: float = 1e-2
    convergence_seeds: list = field(default_factory=lambda: [0, 1, 2])
    stability_perturbations: int = 50
    inject_bad_pwl: bool = False
    use_checkpoint: bool = True


@dataclass
class RunConfig:
    experiment: str = "default"
    seed: int = 0
    geometry: GeometryBlock = field(default_factory=GeometryBlock)
    phantom: PhantomBlock = field(default_factory=PhantomBlock)
    noise: NoiseBlock = field(default_factory=NoiseBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    train: TrainBlock = field(default_factory=TrainBlock)
    solve: SolveBlock = field(default_factory=SolveBlock)
    tv: TVBlock = field(default_factory=TVBlock)
    metrics: MetricsBlock = field(default_factory=MetricsBlock)
    paths: PathsBlock = field(default_factory=PathsBlock)
    theory: TheoryBlock = field(default_factory=TheoryBlock)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# either a keyword or a number; checked in _validate
MIXED_KEYS = {("solve", "momentum"), ("metrics", "data_range")}


def _coerce(cls_name, key, default, value):
    if (cls_name, key) in MIXED_KEYS:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{cls_name}.{key} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{cls_name}.{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{cls_name}.{key} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{cls_name}.{key} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{cls_name}.{key} must be a list")
        return value
    return value


def _fill(obj, table: dict, where: str):
    names = {f.name for f in dataclasses.fields(obj)} - {"base_dir"}
    for key, value in table.items():
        if key not in names:
            raise ConfigError(f"unknown config key '{where}{key}'")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}{key}' must be a table")
            _fill(current, value, f"{where}{key}.")
        else:
            setattr(obj, key, _coerce(where.rstrip("."), key, current, value))


def _validate(cfg: RunConfig):
    if cfg.geometry.kind not in ("sparse", "limited"):
        raise ConfigError("geometry.kind must be 'sparse' or 'limited'")
    if cfg.model.kind not in ("conv", "dense"):
        raise ConfigError("model.kind must be 'conv' or 'dense'")
    m = cfg.solve.momentum
    if not (m == "nesterov" or (isinstance(m, (int, float)) and not isinstance(m, bool))):
        raise ConfigError("solve.momentum must be 'nesterov' or a number")
    r = cfg.metrics.data_range
    if not (r == "max" or (isinstance(r, (int, float)) and not isinstance(r, bool) and r > 0)):
        raise ConfigError("metrics.data_range must be a positive number or 'max'")
    if cfg.seed < 0:
        raise ConfigError("seed must be nonnegative")


def parse_config(text: str, base_dir=".") -> RunConfig:
    try:
        table = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    cfg = RunConfig(base_dir=Path(base_dir))
    _fill(cfg, table, "")
    _validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)
