"""JSON experiment configuration with strict, path-aware validation."""
import json
import math
import typing
from dataclasses import dataclass, field, fields, is_dataclass

from .errors import ConfigError


def _require(ok, path, message):
    if not ok:
        raise ConfigError(path, message)


def _positive(obj, *names):
    for name in names:
        v = getattr(obj, name)
        _require(isinstance(v, (int, float)) and v > 0, name, f"must be positive, got {v!r}")


def _count(obj, *names):
    for name in names:
        v = getattr(obj, name)
        _require(isinstance(v, int) and not isinstance(v, bool) and v >= 1, name, f"must be an integer >= 1, got {v!r}")


@dataclass
class GridConfig:
    nx: int = 9
    ny: typing.Optional[int] = 9

    def __post_init__(self):
        _count(self, "nx")
        if self.ny is not None:
            _count(self, "ny")


@dataclass
class MaterialConfig:
    alpha: float = 1.0
    eps_interp: float = 0.05
    eps_smooth: float = 1e-3
    p: typing.Union[float, str] = 2.0

    def __post_init__(self):
        _positive(self, "alpha", "eps_interp", "eps_smooth")
        if self.p in ("inf", "infinity"):
            self.p = math.inf
        _require(isinstance(self.p, (int, float)) and self.p >= 2, "p", f"must be >= 2 or 'inf', got {self.p!r}")
        self.p = float(self.p)


@dataclass
class TimeConfig:
    T: float = 1.0
    M: int = 20

    def __post_init__(self):
        _positive(self, "T")
        _count(self, "M")


@dataclass
class SourceConfig:
    kind: str = "point"
    location: list = field(default_factory=lambda: [0.5, 0.5])
    rate: float = 0.05
    path: typing.Optional[str] = None

    def __post_init__(self):
        _require(self.kind in ("point", "uniform", "custom"), "kind", f"unknown source kind {self.kind!r}")
        _require(isinstance(self.rate, (int, float)) and self.rate >= 0, "rate", "must be nonnegative")
        _require(
            isinstance(self.location, list) and len(self.location) in (1, 2), "location", "must be [x] or [x, y]"
        )
        _require(self.kind != "custom" or self.path, "path", "required for a custom source")


@dataclass
class SupportConfig:
    kind: str = "flat"
    height: float = 0.0
    slope: float = 0.5
    path: typing.Optional[str] = None

    def __post_init__(self):
        _require(self.kind in ("flat", "ramp", "custom"), "kind", f"unknown support kind {self.kind!r}")
        _require(self.kind != "custom" or self.path, "path", "required for a custom support")


@dataclass
class ControlConfig:
    sigma: float = 1.0
    lambda0: float = 0.0
    lambda1: float = 0.2
    region: list = field(default_factory=lambda: [0.0, 0.3, 0.0, 0.3])
    gamma: float = 10.0
    scheme: str = "semi-implicit"
    init_path: typing.Optional[str] = None
    max_iter: int = 200
    tol: float = 1e-8

    def __post_init__(self):
        _positive(self, "sigma", "gamma", "tol")
        _require(self.lambda0 >= 0, "lambda0", "must be nonnegative")
        _require(self.lambda0 <= self.lambda1, "lambda0", "must not exceed lambda1")
        _require(isinstance(self.region, list) and len(self.region) == 4, "region", "must be [x0, x1, y0, y1]")
        _require(self.scheme in ("explicit", "semi-implicit"), "scheme", f"unknown scheme {self.scheme!r}")
        _require(isinstance(self.max_iter, int) and self.max_iter >= 0, "max_iter", "must be a nonnegative integer")


@dataclass
class SolverConfig:
    gamma_schedule: list = field(default_factory=lambda: [10.0**k for k in range(9)])
    inner_tol: float = 1e-6
    picard_tol: float = 1e-8
    picard_max: int = 50
    damping: float = 1.0
    newton_tol: float = 1e-11
    newton_max: int = 100
    act_tol: typing.Optional[float] = None
    check_tol: float = 1e-6

    def __post_init__(self):
        gs = self.gamma_schedule
        _require(
            isinstance(gs, list) and gs and all(isinstance(x, (int, float)) for x in gs),
            "gamma_schedule",
            "must be a nonempty list of numbers",
        )
        _require(gs[0] > 0 and all(b > a for a, b in zip(gs, gs[1:])), "gamma_schedule", "must be positive and strictly increasing")
        _positive(self, "inner_tol", "picard_tol", "newton_tol", "check_tol")
        _count(self, "picard_max", "newton_max")
        _require(0 < self.damping <= 1, "damping", "must lie in (0, 1]")
        _require(self.act_tol is None or self.act_tol > 0, "act_tol", "must be positive")


@dataclass
class SweepConfig:
    noise: float = 0.5
    trials: int = 100

    def __post_init__(self):
        _positive(self, "noise")
        _count(self, "trials")


@dataclass
class ExperimentConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    material: MaterialConfig = field(default_factory=MaterialConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    support: SupportConfig = field(default_factory=SupportConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seed: int = 0

    def __post_init__(self):
        _require(isinstance(self.seed, int) and self.seed >= 0, "seed", "must be a nonnegative integer")


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", "expected a JSON object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        if is_dataclass(hints[name]):
            kwargs[name] = _build(hints[name], value, sub)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        if path and not exc.path.startswith(path + "."):
            raise ConfigError(f"{path}.{exc.path}", str(exc).split(": ", 1)[1]) from None
        raise


def parse_config(source):
    """Load an :class:`ExperimentConfig` from a path, JSON text or dict."""
    if isinstance(source, dict):
        data = source
    else:
        text = str(source)
        if not text.lstrip().startswith("{"):
            with open(text, encoding="utf-8") as fh:
                text = fh.read()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"malformed JSON: {exc}") from None
    return _build(ExperimentConfig, data, "")
