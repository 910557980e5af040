"""Flat ``key = value`` experiment configuration files.

Lines look like ``delta = 0.01`` or ``grid = [64, 128, 256]``; ``#`` starts
a comment.  Values are Python literals; anything that does not parse as a
literal is kept as a bare string, so ``model = ou`` and ``model = "ou"``
are equivalent.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError
from .model import make_model
from .schemes import InitialLaw, SchemeConfig

__all__ = [
    "ExperimentConfig",
    "EXPERIMENT_KINDS",
    "parse_config_values",
    "coerce_values",
    "parse_config_text",
    "read_config_text",
    "load_config",
]

EXPERIMENT_KINDS = ("chaos", "delta-rate", "decay", "delay-rate", "moments",
                    "couple-check", "contraction-check", "simulate")

MODEL_KEYS = ("beta", "alpha", "K_interaction", "sigma", "L_mult", "dim", "lam")


@dataclass
class ExperimentConfig:
    """Every tunable of every experiment; unused keys are ignored by a kind.

    Acceptance windows live here (``window_low``, ``window_high``,
    ``min_r2``) so compute budgets can trade noise for runtime without
    touching code.
    """

    experiment: str = "simulate"
    model: str = "double-well-1d"
    beta: Optional[float] = None
    alpha: Optional[float] = None
    K_interaction: Optional[float] = None
    sigma: Optional[float] = None
    L_mult: Optional[float] = None
    dim: Optional[int] = None
    lam: Optional[float] = None

    scheme: str = "explicit"
    delta: float = 0.01
    kappa: float = 0.5
    taming_mode: str = "gradient_norm"
    r0: float = 0.0
    horizon: float = 10.0
    N: int = 256
    implicit_tol: float = 1e-12
    implicit_max_iter: int = 100

    init: str = "gaussian"
    init_loc: float = 0.0
    init_scale: float = 1.0
    init_locs: list = field(default_factory=lambda: [2.0, -2.0])

    grid: list = field(default_factory=list)
    times: list = field(default_factory=list)
    repetitions: int = 16
    seed: int = 20240601
    threads: int = 1

    n_ref: int = 16384
    ref_repetitions: int = 4
    delta_ref: Optional[float] = None
    reference_scheme: str = "explicit"
    n_proj: int = 64

    fit_window: list = field(default_factory=list)
    window_low: Optional[float] = None
    window_high: Optional[float] = None
    backward_window_high: Optional[float] = None
    min_r2: Optional[float] = None
    zero_factor: float = 3.0
    expected_rate: Optional[float] = None
    rate_tolerance: Optional[float] = None
    control: bool = False

    p_grid: list = field(default_factory=lambda: [2, 4, 6])
    schemes: list = field(default_factory=lambda: ["backward", "tamed", "adaptive"])
    explicit_delta: Optional[float] = None
    growth_factor: float = 2.0
    record_every: float = 1.0

    epsilon: float = 1e-3
    inner_delta: Optional[float] = None
    runs: int = 40
    proxy_size: int = 0
    second: str = "explicit"

    rmax: Optional[float] = None
    rmax_factor: float = 10.0
    n_grid: int = 10_000
    snapshot_format: str = "csv"

    def __post_init__(self):
        if self.experiment not in EXPERIMENT_KINDS:
            raise ConfigError(f"key 'experiment': unknown kind {self.experiment!r}")
        if self.repetitions < 1:
            raise ConfigError("key 'repetitions' must be >= 1")
        if self.N < 1:
            raise ConfigError("key 'N' must be >= 1")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("key 'seed' must be an unsigned 64-bit integer")
        self.seed = int(self.seed)

    # -- derived objects -------------------------------------------------

    def model_overrides(self):
        return {k: getattr(self, k) for k in MODEL_KEYS if getattr(self, k) is not None}

    def build_model(self, **extra):
        kw = self.model_overrides()
        kw.update(extra)
        return make_model(self.model, **kw)

    def scheme_config(self, kind=None, delta=None, horizon=None, r0=None):
        return SchemeConfig(
            kind=kind or self.scheme,
            delta=self.delta if delta is None else delta,
            horizon=self.horizon if horizon is None else horizon,
            taming_mode=self.taming_mode,
            kappa=self.kappa,
            implicit_tol=self.implicit_tol,
            implicit_max_iter=self.implicit_max_iter,
            r0=self.r0 if r0 is None else r0,
        )

    def initial_law(self, loc=None):
        return InitialLaw(self.init, self.init_loc if loc is None else loc, self.init_scale)

    def as_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key, value):
    f = _FIELDS[key]
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    kind = type(default) if default is not None else None
    try:
        if kind is bool:
            if isinstance(value, str):
                value = value.lower() in ("1", "true", "yes", "on")
            return bool(value)
        if kind is int and not isinstance(value, bool):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind is float:
            return float(value)
        if kind is list:
            return list(value) if isinstance(value, (list, tuple)) else [value]
        if kind is str:
            return str(value)
        if value is None:
            return None
        return int(value) if key == "dim" else float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"key {key!r}: cannot interpret {value!r}") from None


def parse_config_values(text):
    """Parse config text into a dict of coerced values (only keys present)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        try:
            parsed = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            parsed = value
        values[key] = _coerce(key, parsed)
    return values


def coerce_values(values):
    """Validate and coerce a mapping of config keys (``None`` values dropped)."""
    out = {}
    for key, value in values.items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def parse_config_text(text, **overrides):
    """Parse config text into an :class:`ExperimentConfig`.

    ``overrides`` (e.g. from command-line flags) win over file values.
    Unknown keys raise :class:`ConfigError` naming the key.
    """
    values = parse_config_values(text)
    values.update(coerce_values(overrides))
    return ExperimentConfig(**values)


def read_config_text(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def load_config(path, **overrides):
    return parse_config_text(read_config_text(path), **overrides)
