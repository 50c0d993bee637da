"""Experiment configuration: one YAML file per experiment.

Every block maps onto a dataclass; ``ExperimentConfig.from_dict`` validates
and ``to_dict`` gives back a plain structure, so parse -> serialise -> parse
is the identity.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .datagen import BurgersSpec, SinusoidSpec
from .errors import ConfigurationError
from .hmc import DualAveraging
from .networks import NetworkSpec, spec_from_dict, spec_to_dict
from .vi import AdamConfig, PlateauConfig

INIT_KINDS = ("prior", "vi-jitter")
MODES = ("full", "reduced")
VARIANCE_CHOICES = ("max", "median")
MASS_KINDS = ("identity", "vi")


def _build(cls, d, where):
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where}: expected a mapping, got {type(d).__name__}")
    known = {f.name for f in fields(cls) if f.init}
    extra = set(d) - known
    if extra:
        raise ConfigurationError(f"{where}: unknown field(s) {sorted(extra)}; allowed {sorted(known)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class DataConfig:
    """Exactly one of ``sinusoid``, ``burgers`` or ``path``."""

    sinusoid: SinusoidSpec | None = None
    burgers: BurgersSpec | None = None
    path: str | None = None

    def __post_init__(self):
        n = sum(x is not None for x in (self.sinusoid, self.burgers, self.path))
        if n != 1:
            raise ConfigurationError(f"data: exactly one source required (sinusoid, burgers or path), got {n}")

    @classmethod
    def from_dict(cls, d) -> DataConfig:
        d = dict(d or {})
        sin = d.pop("sinusoid", None)
        bur = d.pop("burgers", None)
        path = d.pop("path", None)
        if d:
            raise ConfigurationError(f"data: unknown field(s) {sorted(d)}")
        return cls(
            _build(SinusoidSpec, sin, "data.sinusoid") if sin is not None else None,
            _build(BurgersSpec, bur, "data.burgers") if bur is not None else None,
            str(path) if path is not None else None,
        )

    def to_dict(self) -> dict:
        if self.sinusoid is not None:
            d = asdict(self.sinusoid)
            d["train_ranges"] = [list(r) for r in d["train_ranges"]]
            d["val_range"] = list(d["val_range"])
            return {"sinusoid": d}
        if self.burgers is not None:
            return {"burgers": asdict(self.burgers)}
        return {"path": self.path}


@dataclass(frozen=True)
class VIConfig:
    epochs: int = 1000
    n_mc: int = 1
    batch_size: int | None = None
    sigma0: float = 0.05
    seed: int = 0
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    scheduler: PlateauConfig = field(default_factory=PlateauConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("vi.epochs must be non-negative")
        if self.n_mc < 1:
            raise ConfigurationError("vi.n_mc must be at least 1")
        if not self.sigma0 > 0:
            raise ConfigurationError("vi.sigma0 must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError("vi.batch_size must be positive")

    @classmethod
    def from_dict(cls, d) -> VIConfig:
        d = dict(d or {})
        opt = _build(AdamConfig, d.pop("optimizer", None), "vi.optimizer")
        sch = _build(PlateauConfig, d.pop("scheduler", None), "vi.scheduler")
        return _build(cls, {**d, "optimizer": opt, "scheduler": sch}, "vi")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SensitivityConfig:
    tau: float = 0.9
    rule: str = "at_least"

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ConfigurationError("sensitivity.tau must lie in (0, 1]")
        if self.rule not in ("at_least", "at_most"):
            raise ConfigurationError("sensitivity.rule must be 'at_least' or 'at_most'")


@dataclass(frozen=True)
class InitConfig:
    kind: str = "vi-jitter"
    scale: float = 1.0  # jitter in units of the VI standard deviation

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise ConfigurationError(f"hmc.init.kind must be one of {INIT_KINDS}")
        if self.scale < 0:
            raise ConfigurationError("hmc.init.scale must be non-negative")


@dataclass(frozen=True)
class HMCBlock:
    """Sampler settings.

    Step size: ``step_size`` fixed (``full_step_size`` overrides it for the
    full-space sampler), or ``adapt`` (dual averaging) starting
    from it. Leapfrog steps: ``n_steps`` fixed, or the trajectory heuristic
    ``round(pi v / (2 eps))`` with ``v = posterior_variance`` if given, else
    the max or median VI variance (``variance_choice``).
    """

    mode: str = "reduced"
    step_size: float = 1e-3
    full_step_size: float | None = None  # full-space sampler; defaults to step_size
    adapt: DualAveraging | None = None
    n_steps: int | None = None
    posterior_variance: float | None = None
    variance_choice: str = "max"
    use_std: bool = False
    chains: int = 1
    samples: int = 1000
    burn_in: int = 100
    init: InitConfig = field(default_factory=InitConfig)
    mass: str = "identity"
    seed: int = 0
    max_steps: int = 10_000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"hmc.mode must be one of {MODES}")
        if not self.step_size > 0:
            raise ConfigurationError("hmc.step_size must be positive")
        if self.full_step_size is not None and not self.full_step_size > 0:
            raise ConfigurationError("hmc.full_step_size must be positive")
        if self.n_steps is not None and self.n_steps < 1:
            raise ConfigurationError("hmc.n_steps must be at least 1")
        if self.posterior_variance is not None and not self.posterior_variance > 0:
            raise ConfigurationError("hmc.posterior_variance must be positive")
        if self.variance_choice not in VARIANCE_CHOICES:
            raise ConfigurationError(f"hmc.variance_choice must be one of {VARIANCE_CHOICES}")
        if self.mass not in MASS_KINDS:
            raise ConfigurationError(f"hmc.mass must be one of {MASS_KINDS}")
        if self.chains < 1 or self.samples < 1:
            raise ConfigurationError("hmc.chains and hmc.samples must be positive")
        if not 0 <= self.burn_in < self.samples:
            raise ConfigurationError("hmc.burn_in must be below hmc.samples")
        if self.adapt is not None and self.adapt.n_warmup > self.burn_in:
            raise ConfigurationError("hmc.adapt.n_warmup must not exceed hmc.burn_in")

    @classmethod
    def from_dict(cls, d) -> HMCBlock:
        d = dict(d or {})
        ad = d.pop("adapt", None)
        init = d.pop("init", None)
        return _build(cls, {
            **d,
            "adapt": _build(DualAveraging, ad, "hmc.adapt") if ad is not None else None,
            "init": _build(InitConfig, init, "hmc.init"),
        }, "hmc")

    def to_dict(self) -> dict:
        return asdict(self)

    def step_for(self, mode: str) -> float:
        return self.full_step_size if mode == "full" and self.full_step_size is not None else self.step_size


@dataclass(frozen=True)
class ReportConfig:
    grid: tuple = (-1.2, 1.2, 241)  # start, stop, points for function bands
    n_predictive: int = 1000
    band_sigma: float = 3.0
    pairs: tuple = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(self.grid))
        object.__setattr__(self, "pairs", tuple(tuple(p) for p in self.pairs))
        if len(self.grid) != 3 or int(self.grid[2]) < 2:
            raise ConfigurationError("report.grid is [start, stop, points] with points >= 2")
        if any(len(p) != 2 for p in self.pairs):
            raise ConfigurationError("report.pairs entries name exactly two parameters")

    def to_dict(self) -> dict:
        return {"grid": list(self.grid), "n_predictive": self.n_predictive, "band_sigma": self.band_sigma,
                "pairs": [list(p) for p in self.pairs], "seed": self.seed}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    network: NetworkSpec
    data: DataConfig
    prior_variance: float
    likelihood_variance: float
    vi: VIConfig = field(default_factory=VIConfig)
    sensitivity: SensitivityConfig | None = field(default_factory=SensitivityConfig)
    hmc: HMCBlock = field(default_factory=HMCBlock)
    report: ReportConfig = field(default_factory=ReportConfig)
    partition_path: str | None = None

    def __post_init__(self):
        if not self.name:
            raise ConfigurationError("name must be non-empty")
        if not self.prior_variance > 0 or not self.likelihood_variance > 0:
            raise ConfigurationError("prior_variance and likelihood_variance must be positive")
        if self.hmc.mode == "reduced" and self.sensitivity is None and self.partition_path is None:
            raise ConfigurationError("hmc.mode=reduced needs a sensitivity block or a partition_path")

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        if not isinstance(d, dict):
            raise ConfigurationError("config must be a mapping")
        d = dict(d)
        allowed = {f.name for f in fields(cls)}
        extra = set(d) - allowed
        if extra:
            raise ConfigurationError(f"unknown top-level field(s) {sorted(extra)}")
        for key in ("name", "network", "data", "prior_variance", "likelihood_variance"):
            if key not in d:
                raise ConfigurationError(f"missing required field {key!r}")
        sens = d.get("sensitivity", {})
        try:
            return cls(
                name=str(d["name"]),
                network=spec_from_dict(d["network"]),
                data=DataConfig.from_dict(d["data"]),
                prior_variance=_num(d["prior_variance"], "prior_variance"),
                likelihood_variance=_num(d["likelihood_variance"], "likelihood_variance"),
                vi=VIConfig.from_dict(d.get("vi")),
                sensitivity=None if sens is None else _build(SensitivityConfig, sens, "sensitivity"),
                hmc=HMCBlock.from_dict(d.get("hmc")),
                report=_build(ReportConfig, d.get("report"), "report"),
                partition_path=d.get("partition_path"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed config: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "network": spec_to_dict(self.network),
            "data": self.data.to_dict(),
            "prior_variance": self.prior_variance,
            "likelihood_variance": self.likelihood_variance,
            "vi": self.vi.to_dict(),
            "sensitivity": None if self.sensitivity is None else asdict(self.sensitivity),
            "hmc": self.hmc.to_dict(),
            "report": self.report.to_dict(),
            "partition_path": self.partition_path,
        }

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_mode(self, mode: str) -> ExperimentConfig:
        from dataclasses import replace

        return replace(self, hmc=replace(self.hmc, mode=mode))


def _num(v, where) -> float:
    if isinstance(v, str):
        v = _eval_number(v, where)
    try:
        return float(v)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: expected a number, got {v!r}") from exc


def _eval_number(s: str, where: str) -> float:
    """Accept ``"0.0679**2"``-style literals so reference values can be written as they are usually quoted."""
    import ast

    try:
        node = ast.parse(s, mode="eval").body
    except SyntaxError as exc:
        raise ConfigurationError(f"{where}: cannot parse {s!r}") from exc

    def ev(n):
        if isinstance(n, ast.Constant) and isinstance(n.value, (int, float)):
            return float(n.value)
        if isinstance(n, ast.UnaryOp) and isinstance(n.op, ast.USub):
            return -ev(n.operand)
        if isinstance(n, ast.BinOp) and isinstance(n.op, (ast.Pow, ast.Mult, ast.Div)):
            a, b = ev(n.left), ev(n.right)
            return a**b if isinstance(n.op, ast.Pow) else a * b if isinstance(n.op, ast.Mult) else a / b
        if isinstance(n, ast.Name) and n.id == "pi":
            return math.pi
        raise ConfigurationError(f"{where}: unsupported expression {s!r}")

    return ev(node)


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _numbers(obj, where=""):
    """Resolve string numerics such as ``"(1e-3)**2"`` anywhere in the tree."""
    if isinstance(obj, dict):
        return {k: _numbers(v, f"{where}.{k}" if where else str(k)) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_numbers(v, where) for v in obj]
    if isinstance(obj, str) and any(c in obj for c in "*/") and not any(c.isalpha() and c not in "epi" for c in obj):
        return _eval_number(obj, where)
    return obj


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML: {exc}") from exc
    return ExperimentConfig.from_dict(_numbers(raw))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(dump_config(cfg))
    return path


def shipped_config_path(name: str) -> Path:
    """Path of a config shipped with the package (``case1``, ``case2``, ``burgers_desk``)."""
    from importlib.resources import files

    p = Path(str(files("vihmc") / "configs" / f"{name}.yaml"))
    if not p.exists():
        raise ConfigurationError(f"no shipped config named {name!r}")
    return p
