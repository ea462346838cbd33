"""
Run configuration.

Every section is a dataclass with to_dict/from_dict; from_dict rejects
unknown keys. Environment defaults come from a .env file next to the package
(or the working directory).
"""
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from dotenv import load_dotenv

from imbalanced_supcon.data import SAMPLER_MODES
from imbalanced_supcon.encoder import ACTIVATIONS, BACKENDS
from imbalanced_supcon.errors import InvalidConfig
from imbalanced_supcon.losses import ANCHOR_MODES, LOSS_KINDS
from imbalanced_supcon.metrics import TIE_BREAKS
from imbalanced_supcon.probe import PROBE_OPTIMIZERS
from imbalanced_supcon.prototypes import PROTOTYPE_SOURCES

# Load .env from the package directory, then the working directory
env_path = Path(__file__).parent / '.env'
if env_path.exists():
    load_dotenv(dotenv_path=env_path)
else:
    load_dotenv()

SCHEDULES = ("constant", "cosine")
INIT_MODES = ("near-collapsed", "standard")


def default_out_dir() -> str:
    return os.getenv("SUPCON_OUT_DIR", "runs")


def default_workers() -> int:
    try:
        return max(1, int(os.getenv("SUPCON_WORKERS", "1")))
    except ValueError:
        return 1


def default_log_level() -> str:
    return os.getenv("SUPCON_LOG_LEVEL", "INFO").upper()


class _Section:
    """to_dict/from_dict shared by every config section"""

    def to_dict(self) -> Dict[str, Any]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, _Section):
                value = value.to_dict()
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]):
        data = dict(data or {})
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise InvalidConfig(f"{cls.__name__}: unknown keys {unknown}")
        kwargs = {}
        for name, value in data.items():
            section_type = _SECTION_TYPES.get((cls.__name__, name))
            if section_type is not None:
                value = section_type.from_dict(value)
            elif isinstance(value, list):
                value = tuple(value)
            kwargs[name] = value
        return cls(**kwargs)


@dataclass
class DataConfig(_Section):
    n: int = 2000
    imbalance: float = 0.05
    input_dim: int = 16
    separation: float = 6.0
    spread: float = 1.0
    aug_sigma: Optional[float] = None
    split_fraction: float = 0.8
    minority_label: int = 1

    def __post_init__(self):
        # default augmentation noise is a tenth of the cluster spread
        if self.aug_sigma is None:
            self.aug_sigma = 0.1 * self.spread

    def validate(self):
        if self.n < 4:
            raise InvalidConfig(f"data.n must be at least 4, got {self.n}")
        if not 0.0 < self.imbalance <= 0.5:
            raise InvalidConfig(f"data.imbalance must be in (0, 0.5], got {self.imbalance}")
        if self.separation < 0 or self.spread < 0 or self.aug_sigma < 0:
            raise InvalidConfig("data.separation, spread and aug_sigma must be non-negative")
        if not 0.0 < self.split_fraction < 1.0:
            raise InvalidConfig(f"data.split_fraction must be in (0, 1), got {self.split_fraction}")
        if self.minority_label not in (0, 1):
            raise InvalidConfig("data.minority_label must be 0 or 1")


@dataclass
class EncoderConfig(_Section):
    backend: str = "free-table"
    dim: int = 32
    init: str = "near-collapsed"
    eta: float = 0.05
    hidden: Tuple[int, ...] = (64, 64)
    activation: str = "tanh"

    def validate(self):
        if self.backend not in BACKENDS:
            raise InvalidConfig(f"encoder.backend must be one of {BACKENDS}")
        if self.dim < 2:
            raise InvalidConfig(f"encoder.dim must be at least 2, got {self.dim}")
        if self.init not in INIT_MODES:
            raise InvalidConfig(f"encoder.init must be one of {INIT_MODES}")
        if self.init == "near-collapsed" and not 0.0 < self.eta <= 0.1:
            raise InvalidConfig(f"encoder.eta must be in (0, 0.1], got {self.eta}")
        if self.activation not in ACTIVATIONS:
            raise InvalidConfig(f"encoder.activation must be one of {ACTIVATIONS}")


@dataclass
class LossConfig(_Section):
    kind: str = "supcon"
    tau: float = 0.07
    theta_min: float = 1.0
    theta_maj: float = 0.0
    k: int = 6
    lam: float = 1.0
    gate: float = 0.5
    anchor_mode: str = "all-views"
    force_partner: bool = True
    prototype_source: str = "majority"
    prototype_step: float = 0.5
    prototype_iters: int = 500

    def validate(self):
        if self.kind not in LOSS_KINDS:
            raise InvalidConfig(f"loss.kind must be one of {LOSS_KINDS}, got '{self.kind}'")
        if not self.tau > 0:
            raise InvalidConfig(f"loss.tau must be positive, got {self.tau}")
        for name in ("theta_min", "theta_maj"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidConfig(f"loss.{name} must be in [0, 1]")
        if self.k < 1:
            raise InvalidConfig(f"loss.k must be at least 1, got {self.k}")
        if self.lam < 0:
            raise InvalidConfig("loss.lam must be non-negative")
        if self.anchor_mode not in ANCHOR_MODES:
            raise InvalidConfig(f"loss.anchor_mode must be one of {ANCHOR_MODES}")
        if self.prototype_source not in PROTOTYPE_SOURCES:
            raise InvalidConfig(f"loss.prototype_source must be one of {PROTOTYPE_SOURCES}")
        if self.prototype_step <= 0 or self.prototype_iters < 0:
            raise InvalidConfig("loss.prototype_step must be positive, prototype_iters non-negative")


@dataclass
class OptimizerConfig(_Section):
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 200
    batch_size: int = 256
    sampler: str = "uniform"
    schedule: str = "constant"
    warmup_epochs: int = 10
    warmup_start_factor: float = 0.1
    prototype_refresh: int = 0

    def validate(self):
        if not self.lr > 0:
            raise InvalidConfig(f"optimizer.lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidConfig("optimizer.momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidConfig("optimizer.weight_decay must be non-negative")
        if self.epochs < 1:
            raise InvalidConfig("optimizer.epochs must be at least 1")
        if self.batch_size < 2:
            raise InvalidConfig("optimizer.batch_size must be at least 2")
        if self.sampler not in SAMPLER_MODES:
            raise InvalidConfig(f"optimizer.sampler must be one of {SAMPLER_MODES}")
        if self.schedule not in SCHEDULES:
            raise InvalidConfig(f"optimizer.schedule must be one of {SCHEDULES}")
        if self.warmup_epochs < 0 or not 0.0 < self.warmup_start_factor <= 1.0:
            raise InvalidConfig("optimizer warm-up settings out of range")
        if self.prototype_refresh < 0:
            raise InvalidConfig("optimizer.prototype_refresh must be non-negative")


@dataclass
class MetricConfig(_Section):
    r_fraction: float = 0.05
    eval_every: int = 0
    tie_break: str = "index"
    epsilon_max: float = 0.3
    embeddings_path: Optional[str] = None

    def validate(self):
        if not 0.0 < self.r_fraction < 1.0:
            raise InvalidConfig("metrics.r_fraction must be in (0, 1)")
        if self.eval_every < 0:
            raise InvalidConfig("metrics.eval_every must be non-negative")
        if self.tie_break not in TIE_BREAKS:
            raise InvalidConfig(f"metrics.tie_break must be one of {TIE_BREAKS}")
        if not self.epsilon_max > 0:
            raise InvalidConfig("metrics.epsilon_max must be positive")


@dataclass
class ProbeConfig(_Section):
    subset_fraction: float = 1.0
    epochs: int = 200
    lr: float = 0.1
    optimizer: str = "full-batch"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 256
    balance_test: bool = True

    def validate(self):
        if not 0.0 < self.subset_fraction <= 1.0:
            raise InvalidConfig("probe.subset_fraction must be in (0, 1]")
        if self.epochs < 1 or not self.lr > 0:
            raise InvalidConfig("probe.epochs must be at least 1 and probe.lr positive")
        if self.optimizer not in PROBE_OPTIMIZERS:
            raise InvalidConfig(f"probe.optimizer must be one of {PROBE_OPTIMIZERS}")


@dataclass
class SeedConfig(_Section):
    data: int = 0
    init: int = 0
    batch: int = 0
    augment: int = 0

    def validate(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, int) or value < 0:
                raise InvalidConfig(f"seeds.{f.name} must be a non-negative integer")

    @classmethod
    def all(cls, seed: int) -> "SeedConfig":
        return cls(data=seed, init=seed, batch=seed, augment=seed)


@dataclass
class RunConfig(_Section):
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    evaluate_bound: bool = True
    out_dir: str = field(default_factory=default_out_dir)

    def validate(self) -> "RunConfig":
        for section in (self.data, self.encoder, self.loss, self.optimizer,
                        self.metrics, self.probe, self.seeds):
            section.validate()
        if self.optimizer.sampler in ("uniform", "guarantee-minority"):
            train_size = self.data.n
            if self.encoder.backend == "mlp":
                train_size = int(self.data.n * self.data.split_fraction)
            if self.optimizer.batch_size > train_size:
                raise InvalidConfig(
                    f"batch size {self.optimizer.batch_size} exceeds the {train_size} training samples"
                )
        return self

    def body(self) -> Dict[str, Any]:
        """Config without out_dir; the hashed and stored part"""
        body = self.to_dict()
        body.pop("out_dir")
        return body

    @property
    def run_id(self) -> str:
        canonical = json.dumps(self.body(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        clone = RunConfig.from_dict(self.to_dict())
        clone.seeds = SeedConfig.all(seed)
        return clone

    def with_value(self, dotted_key: str, value) -> "RunConfig":
        """Copy with one nested field replaced, e.g. with_value('loss.tau', 0.5)"""
        data = self.to_dict()
        section, _, name = dotted_key.rpartition(".")
        target = data[section] if section else data
        if name not in target:
            raise InvalidConfig(f"unknown config key '{dotted_key}'")
        target[name] = value
        return RunConfig.from_dict(data)


_SECTION_TYPES = {
    ("RunConfig", "data"): DataConfig,
    ("RunConfig", "encoder"): EncoderConfig,
    ("RunConfig", "loss"): LossConfig,
    ("RunConfig", "optimizer"): OptimizerConfig,
    ("RunConfig", "metrics"): MetricConfig,
    ("RunConfig", "probe"): ProbeConfig,
    ("RunConfig", "seeds"): SeedConfig,
}


def load_config(file_path) -> RunConfig:
    """Read a JSON config; missing keys take their defaults"""
    try:
        with open(file_path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise InvalidConfig(f"config file not found: {file_path}")
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"config file {file_path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise InvalidConfig(f"config file {file_path} must hold a JSON object")
    return RunConfig.from_dict(data)
