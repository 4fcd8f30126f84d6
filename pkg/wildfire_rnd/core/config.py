import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from .enums import BinMode, Regime, SnapshotMode
from .errors import ConfigError

THREADS_ENV = "RND_THREADS"


@dataclass
class PathsConfig:
    quotes: Optional[str] = None
    exposures: Optional[str] = None
    fires: Optional[str] = None
    returns: Optional[str] = None
    output_dir: str = "out"


@dataclass
class TreatmentConfig:
    threshold: float = 0.10
    snapshot: str = SnapshotMode.LATEST.value


@dataclass
class PricingConfig:
    n_steps: int = 500
    american: bool = True


@dataclass
class DensityConfig:
    grid_size: int = 100
    bandwidth_multiplier: float = 0.5
    min_strikes: int = 5
    moneyness_coverage: List[float] = field(default_factory=lambda: [0.5, 1.5])
    require_coverage: bool = False


@dataclass
class GarchConfig:
    n_lags: int = 1
    n_paths: int = 20000
    regime: str = Regime.STATIONARY.value
    foresight_window: int = 250
    grad_tol: float = 1e-6
    max_iter: int = 500


@dataclass
class KernelConfig:
    maturity_bins: int = 10
    density_floor: float = 1e-10
    prop1: Dict[str, float] = field(default_factory=lambda: {
        'q': 0.5, 'q_w': 0.1, 'beta': 0.8, 'sigma': 0.15, 'sigma_w': 0.3,
        'mu': 0.07, 'alpha': 0.01, 'r': 0.02, 'gamma': 4.0, 'T': 1.0,
        'n_paths': 1000000, 'n_blocks': 8,
    })


@dataclass
class CalibrationConfig:
    n_starts: int = 10
    models: List[str] = field(default_factory=lambda: ["merton", "kou"])
    bounds: Dict[str, Dict[str, List[float]]] = field(default_factory=lambda: {
        'merton': {'sigma': [1e-4, 3.0], 'lambda_s': [0.0, 5.0],
                   'mu_s': [-3.0, 3.0], 'sigma_s': [1e-4, 3.0]},
        'kou': {'sigma': [1e-4, 3.0], 'lambda': [0.0, 5.0], 'p_up': [0.0, 1.0],
                'eta1': [1e-3, 50.0], 'eta2': [1.0001, 50.0]},
        'flat': {'sigma': [1e-4, 3.0]},
    })


@dataclass
class PanelConfig:
    n_bins: int = 30
    bin_mode: str = BinMode.QUANTILE.value
    moneyness_range: List[float] = field(default_factory=lambda: [0.1, 1.8])
    kernel_bandwidths: List[float] = field(default_factory=lambda: [0.05, 0.2])
    n_eval_points: int = 100
    fwl_bandwidths: List[float] = field(default_factory=lambda: [0.05, 30.0])
    fwl_min_obs: int = 1000
    maturity_unit: str = "days"


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    treatment: TreatmentConfig = field(default_factory=TreatmentConfig)
    pricing: PricingConfig = field(default_factory=PricingConfig)
    density: DensityConfig = field(default_factory=DensityConfig)
    garch: GarchConfig = field(default_factory=GarchConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    panel: PanelConfig = field(default_factory=PanelConfig)
    seed: int = 20171012
    parallelism: int = 4

    def to_dict(self):
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(data) -> "RunConfig":
        return _build(RunConfig, data, "config")

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output_dir)

    def effective_threads(self) -> int:
        """Worker count after applying the RND_THREADS cap"""
        threads = max(1, int(self.parallelism))
        cap = os.environ.get(THREADS_ENV)
        if cap:
            try:
                threads = min(threads, max(1, int(cap)))
            except ValueError:
                raise ConfigError(f"{THREADS_ENV} must be an integer, got {cap!r}")
        return threads

    def validate(self):
        if self.density.grid_size < 20:
            raise ConfigError(f"grid_size must be >= 20, got {self.density.grid_size}")
        if not 0.0 < self.treatment.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in (0, 1], got {self.treatment.threshold}")
        if self.density.bandwidth_multiplier <= 0:
            raise ConfigError("bandwidth_multiplier must be > 0")
        if self.pricing.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.kernel.maturity_bins < 1:
            raise ConfigError("maturity_bins must be >= 1")
        if self.panel.n_bins < 2:
            raise ConfigError("n_bins must be >= 2")
        for enum_cls, value, name in ((SnapshotMode, self.treatment.snapshot, "snapshot"),
                                      (Regime, self.garch.regime, "regime"),
                                      (BinMode, self.panel.bin_mode, "bin_mode")):
            try:
                enum_cls(value)
            except ValueError:
                raise ConfigError(f"unknown {name} {value!r}")
        for model in self.calibration.models:
            if model not in self.calibration.bounds:
                raise ConfigError(f"no calibration bounds for model {model!r}")
        for name in ('quotes', 'exposures', 'fires', 'returns'):
            path = getattr(self.paths, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"paths.{name} does not exist: {path}")
        return self


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        nested = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if nested is not None and dataclasses.is_dataclass(nested):
            kwargs[name] = _build(nested, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: Optional[str]) -> RunConfig:
    """Read a JSON config; missing path means all defaults"""
    if path is None:
        return RunConfig().validate()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    return RunConfig.from_dict(data).validate()
