"""
Strict JSON run configuration.

A run config has the sections ``grid``, ``sequence``, ``prior``, ``sampler``,
``de``, ``adam``, ``solver`` and ``metrics`` plus a top-level ``seed``.
Missing keys take their defaults, unknown keys are rejected, and
``resolved()`` gives the complete effective document.
"""

from dataclasses import asdict, dataclass, field, fields, replace
import json

from .dps import SamplerConfig
from .optim import AdamConfig, DEConfig
from .phantom import BLUR_PRESETS
from .solver import SolverConfig


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is the 1-based source line when known."""

    def __init__(self, msg, line=None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line else msg)


@dataclass
class GridConfig:
    dims: tuple = (48, 48, 48)

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ValueError("grid.dims must be three sizes >= 4")


@dataclass
class SequenceConfig:
    frames: int = 6
    alpha: tuple = (0.8, 10.2, -1.0, 0.2)
    blur: str = "aniso-noise"
    # explicit overrides of the blur preset
    gamma: tuple = None
    noise: float = None
    betas: list = None
    amplitude: float = 5.0
    smoothness: float = 8.0
    rk_steps: int = 8
    border: float = 12.0

    def __post_init__(self):
        if self.blur not in BLUR_PRESETS:
            raise ValueError(f"unknown blur preset {self.blur!r}; expected one of {sorted(BLUR_PRESETS)}")
        if self.frames < 1:
            raise ValueError("sequence.frames must be >= 1")
        gamma, noise = BLUR_PRESETS[self.blur]
        self.gamma = tuple(float(x) for x in (gamma if self.gamma is None else self.gamma))
        self.noise = float(noise if self.noise is None else self.noise)
        self.alpha = tuple(float(x) for x in self.alpha)
        if len(self.alpha) != 4 or len(self.gamma) != 3:
            raise ValueError("sequence.alpha needs 4 values and sequence.gamma 3")
        if self.betas is not None:
            self.betas = [[float(b) for b in row] for row in self.betas]


@dataclass
class PriorConfig:
    kind: str = "gmm"
    templates: int = 8
    # the bank holds a perturbed copy of the test phantom as its first member
    near_match: bool = True
    sigma: float = 0.05
    gp_lam: float = 4.0
    gp_p: float = 2.0

    def __post_init__(self):
        if self.kind not in ("gmm", "gp"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.templates < 1:
            raise ValueError("prior.templates must be >= 1")
        if not self.sigma > 0:
            raise ValueError("prior.sigma must be positive")


@dataclass
class MetricsConfig:
    foreground_threshold: float = 0.05
    # LowpassFuse width; None means spacing / (2 pi) of the true tag
    lowpass_sigma: float = None
    # HARP tag frequency; None means 1 / true spacing
    harp_f0: float = None


def desk_adam():
    """Motion optimizer budget of the desk reference runs (one CPU)."""
    return AdamConfig(lr=2e-3, steps=100)


def desk_solver():
    """Frame 1 gets eight rounds; the blur estimate needs them to settle."""
    return SolverConfig(loops=8, loops_later=4)


@dataclass
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    sequence: SequenceConfig = field(default_factory=SequenceConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    de: DEConfig = field(default_factory=DEConfig)
    adam: AdamConfig = field(default_factory=desk_adam)
    solver: SolverConfig = field(default_factory=desk_solver)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    seed: int = 0

    def resolved(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = _plain(asdict(v)) if hasattr(v, "__dataclass_fields__") else v
        # DE seeds are derived per block from the run seed
        out["de"].pop("seed", None)
        return out

    def to_json(self):
        return json.dumps(self.resolved(), indent=2, sort_keys=True) + "\n"


SECTIONS = {f.name: f for f in fields(RunConfig) if f.name != "seed"}
_HIDDEN = {"de": {"seed"}}


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if hasattr(v, "tolist"):
        return v.tolist()
    return v


def _line_of(text, key, after=0):
    """1-based line of the first ``"key"`` at or after character ``after``."""
    if text is None:
        return None
    pos = text.find(f'"{key}"', after)
    return None if pos < 0 else text.count("\n", 0, pos) + 1


def from_dict(doc, text=None):
    """Build a RunConfig from a parsed document; ``text`` improves error lines."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object", 1 if text else None)
    kw = {}
    for name, value in doc.items():
        if name == "seed":
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError("seed must be a non-negative integer", _line_of(text, "seed"))
            kw["seed"] = value
            continue
        if name not in SECTIONS:
            raise ConfigError(f"unknown section {name!r}", _line_of(text, name))
        start = text.find(f'"{name}"') if text else 0
        if not isinstance(value, dict):
            raise ConfigError(f"section {name!r} must be an object", _line_of(text, name))
        base = SECTIONS[name].default_factory()
        allowed = {f.name for f in fields(base)} - _HIDDEN.get(name, set())
        for key in value:
            if key not in allowed:
                raise ConfigError(f"unknown key {name}.{key}", _line_of(text, key, max(start, 0)))
        try:
            factory = SECTIONS[name].default_factory
            # the desk sections overlay their RunConfig defaults
            kw[name] = factory(**value) if isinstance(factory, type) else replace(base, **value)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"section {name!r}: {err}", _line_of(text, name)) from None
    return RunConfig(**kw)


def loads(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON: {err.msg}", err.lineno) from None
    return from_dict(doc, text)


def load(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
