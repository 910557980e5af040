"""Coefficients of a mean-field SDE with convolution-type interaction.

The drift splits as ``b(x, mu) = b1(x) + (b0 * mu)(x)`` where the
convolution is evaluated against an empirical measure.  All coefficient
callables are vectorised over leading axes: ``b1`` and ``b0`` map
``(..., d) -> (..., d)`` and ``grad_b1`` maps ``(..., d) -> (..., d, d)``.

Arrays of particle positions have shape ``(..., N, d)``; any leading axes
index independent systems, each with its own empirical measure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, InvalidStateError

__all__ = [
    "BLOWUP_THRESHOLD",
    "Constants",
    "ModelSpec",
    "Ensemble",
    "DissipativityReport",
    "interaction_conv",
    "conv_field",
    "drift",
    "drift_field",
    "grad_b1_hs_norm",
    "check_dissipativity",
    "check_gradient",
    "check_linear_kernel",
    "is_blown_up",
    "make_model",
    "GALLERY",
]

# |x| above this (or NaN) counts as a blow-up event
BLOWUP_THRESHOLD = 1e100

# bound on the number of floats materialised per chunk by the naive kernel sum
_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class Constants:
    """Structural constants of the drift and noise.

    ``lambda0`` is the slope of the short-range growth profile
    ``phi(r) = lambda0 * r``, ``lam`` the long-range dissipativity rate
    beyond ``ell0``, ``K`` the Lipschitz constant of ``b0``, ``L`` the
    squared Lipschitz constant of ``sigma0``.  ``alpha``, ``lambda_b1``
    and ``lambda_hat_b1`` are the gradient-growth constants used by the
    tamed scheme threshold and ``lstar`` the polynomial growth order of
    the local Lipschitz constant of ``b1``.
    """

    lambda0: float = 0.0
    lam: float = 1.0
    ell0: float = 0.0
    K: float = 0.0
    L: float = 0.0
    alpha: float = 0.0
    lambda_b1: float = 0.0
    lambda_hat_b1: float = 0.0
    lstar: float = 0.0

    def __post_init__(self):
        for name in ("lambda0", "ell0", "K", "L", "alpha", "lambda_b1",
                     "lambda_hat_b1", "lstar"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"constant {name} must be >= 0")
        if not self.lam > 0:
            raise ConfigError("constant lam must be > 0")

    def phi(self, r):
        return self.lambda0 * np.asarray(r, dtype=float)


@dataclass(frozen=True)
class ModelSpec:
    """Drift parts, noise intensities and structural constants.

    ``kernel_K`` declares the linear form ``b0(z) = -kernel_K * z``; when
    set, convolutions use the ensemble mean instead of the pairwise sum.
    ``ou_beta`` / ``ou_mean`` are set for models of the form
    ``b1(x) = beta * (mean - x)``; closed-form OU laws are computed from them.
    """

    name: str
    dim: int
    b1: Callable
    grad_b1: Callable
    b0: Callable
    sigma: float
    sigma0: Optional[Callable] = None
    noise_dim_b: int = 0
    kernel_K: Optional[float] = None
    constants: Constants = field(default_factory=Constants)
    ou_beta: Optional[float] = None
    ou_mean: Optional[float] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (isinstance(self.dim, (int, np.integer)) and self.dim >= 1):
            raise ConfigError("dim must be a positive integer")
        if not np.isfinite(self.sigma):
            raise ConfigError("sigma must be finite")
        if self.sigma0 is not None and self.noise_dim_b < 1:
            raise ConfigError("sigma0 given but noise_dim_b < 1")

    @property
    def has_multiplicative_noise(self):
        return self.sigma0 is not None

    def with_constants(self, **kw):
        return replace(self, constants=replace(self.constants, **kw))


class Ensemble:
    """Particle positions at one time point.

    Parameters
    ----------
    positions : array_like, shape (..., N, d)
        Leading axes, if any, index independent systems.
    time : float
        Time stamp, may be an array broadcastable to the leading axes.
    """

    def __init__(self, positions, time=0.0):
        pos = np.array(positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        if pos.ndim < 2 or pos.shape[-2] < 1:
            raise ConfigError("an ensemble needs at least one particle")
        pos.setflags(write=False)
        self.positions = pos
        self.time = time

    @property
    def particle_count(self):
        return self.positions.shape[-2]

    @property
    def dim(self):
        return self.positions.shape[-1]

    @cached_property
    def mean(self):
        return self.positions.mean(axis=-2)

    @cached_property
    def blown_up(self):
        return is_blown_up(self.positions)

    def replace(self, positions, time):
        return Ensemble(positions, time)

    def __repr__(self):
        return (f"Ensemble(shape={self.positions.shape}, "
                f"time={np.round(self.time, 6)!r})")


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    if x.shape[-1] != dim:
        raise ConfigError(f"point has dimension {x.shape[-1]}, model has {dim}")
    return x


def _require_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidStateError("non-finite coordinates in drift input")


def _naive_conv(points, positions, b0):
    """(1/N) sum_j b0(x - x_j) for points (..., M, d) and positions (..., N, d)."""
    m, n, d = points.shape[-2], positions.shape[-2], points.shape[-1]
    lead = np.broadcast_shapes(points.shape[:-2], positions.shape[:-2])
    per_row = max(1, n * d * int(np.prod(lead, dtype=np.int64)))
    step = max(1, _CHUNK_ELEMS // per_row)
    out = np.empty(lead + (m, d))
    for start in range(0, m, step):
        stop = min(m, start + step)
        diff = points[..., start:stop, None, :] - positions[..., None, :, :]
        out[..., start:stop, :] = b0(diff).mean(axis=-2)
    return out


def conv_at(points, positions, model, mean=None):
    """Interaction term at ``points`` (..., M, d) against ``positions`` (..., N, d)."""
    if model.kernel_K is not None:
        if mean is None:
            mean = positions.mean(axis=-2)
        return -model.kernel_K * (points - mean[..., None, :])
    return _naive_conv(points, positions, model.b0)


def conv_field(positions, model, mean=None):
    """Interaction term felt by every particle from its own system."""
    return conv_at(positions, positions, model, mean)


def interaction_conv(x, ens, model, naive=False):
    """Convolution of ``b0`` with the empirical measure of ``ens`` at ``x``.

    ``x`` is a single point of shape (d,) or a stack (M, d).  With a
    declared linear kernel the ensemble mean is used unless ``naive``.
    """
    pts = _as_points(x, model.dim)
    _require_finite(pts, ens.positions)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    if model.kernel_K is not None and not naive:
        out = conv_at(pts, ens.positions, model, ens.mean)
    else:
        out = _naive_conv(pts, ens.positions, model.b0)
    return out[..., 0, :] if single else out


def drift(x, ens, model):
    """Full drift ``b1(x) + (b0 * mu_ens)(x)``."""
    pts = _as_points(x, model.dim)
    return model.b1(pts) + interaction_conv(pts, ens, model)


def drift_field(positions, model, mean=None):
    """Drift of every particle against the empirical measure of its system."""
    return model.b1(positions) + conv_field(positions, model, mean)


def grad_b1_hs_norm(x, model):
    g = model.grad_b1(x)
    return np.sqrt(np.sum(g * g, axis=(-2, -1)))


def is_blown_up(positions, axis=None):
    """True where a coordinate is NaN or exceeds ``BLOWUP_THRESHOLD``."""
    with np.errstate(invalid="ignore"):
        bad = ~(np.abs(positions) <= BLOWUP_THRESHOLD)
    if axis is None:
        return bool(bad.any())
    return bad.any(axis=axis)


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------


@dataclass
class DissipativityReport:
    passed: bool
    max_violation_b1: float
    worst_pair_b1: tuple
    max_violation_b0: float
    worst_pair_b0: tuple
    n_pairs: int
    radius: float


def _ball_samples(rng, n, dim, radius):
    u = rng.standard_normal((n, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / dim)
    return u * r[:, None]


def dissipativity_violation(model, x, y):
    """Signed excess of the partial dissipativity inequality at pairs (x, y).

    Positive values are violations.  Uses ``phi(r) = lambda0 * r``.
    """
    c = model.constants
    dx = x - y
    r = np.linalg.norm(dx, axis=-1)
    lhs = np.sum(dx * (model.b1(x) - model.b1(y)), axis=-1)
    rhs = np.where(r <= c.ell0, r * c.phi(r), -c.lam * r * r)
    return lhs - rhs, lhs


def check_dissipativity(model, n_pairs, radius, seed, tol=1e-9):
    """Sample pairs with ``|x - y| <= radius`` and test the drift hypotheses.

    Both points are drawn uniformly from the ball of radius ``radius / 2``.
    Reports the largest violation of the partial dissipativity of ``b1``
    and of the Lipschitz bound ``|b0(x) - b0(y)| <= K |x - y|``.
    """
    if n_pairs < 1:
        raise ConfigError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    x = _ball_samples(rng, n_pairs, model.dim, radius / 2)
    y = _ball_samples(rng, n_pairs, model.dim, radius / 2)

    viol, lhs = dissipativity_violation(model, x, y)
    scaled = viol / np.maximum(1.0, np.abs(lhs))
    i = int(np.argmax(scaled))

    dx = np.linalg.norm(x - y, axis=-1)
    db0 = np.linalg.norm(model.b0(x) - model.b0(y), axis=-1)
    viol0 = db0 - model.constants.K * dx
    j = int(np.argmax(viol0))

    passed = bool(scaled[i] <= tol and viol0[j] <= tol * max(1.0, db0[j]))
    return DissipativityReport(
        passed=passed,
        max_violation_b1=float(viol[i]),
        worst_pair_b1=(x[i].tolist(), y[i].tolist()),
        max_violation_b0=float(viol0[j]),
        worst_pair_b0=(x[j].tolist(), y[j].tolist()),
        n_pairs=n_pairs,
        radius=float(radius),
    )


def check_gradient(model, n_points=200, radius=10.0, seed=0, step=1e-5):
    """Largest relative error between ``grad_b1`` and central differences."""
    rng = np.random.default_rng(seed)
    x = _ball_samples(rng, n_points, model.dim, radius)
    g = model.grad_b1(x)
    fd = np.empty_like(g)
    for k in range(model.dim):
        e = np.zeros(model.dim)
        e[k] = step
        fd[..., :, k] = (model.b1(x + e) - model.b1(x - e)) / (2 * step)
    scale = np.maximum(1.0, np.abs(g))
    return float(np.max(np.abs(g - fd) / scale))


def check_linear_kernel(model, n_points=1000, seed=0):
    """Largest relative mismatch between ``b0`` and its declared linear form."""
    if model.kernel_K is None:
        raise ConfigError("model declares no linear kernel form")
    rng = np.random.default_rng(seed)
    z = rng.uniform(-10, 10, (n_points, model.dim))
    a = model.b0(z)
    b = -model.kernel_K * z
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


# --------------------------------------------------------------------------
# gallery
# --------------------------------------------------------------------------


def _linear_kernel(K):
    def b0(z):
        return -K * z
    return b0


def _sin_multiplicative(L, dim):
    """sigma0(x) = sqrt(L) diag(sin x); Lipschitz with squared constant L."""
    s = math.sqrt(L)

    def sigma0(x):
        v = s * np.sin(x)
        return v[..., :, None] * np.eye(dim)
    return sigma0


def _double_well(dim, K_interaction=0.05, sigma=1.0, L_mult=0.0, lam=1.0):
    def b1(x):
        return x - np.sum(x * x, axis=-1, keepdims=True) * x

    def grad_b1(x):
        sq = np.sum(x * x, axis=-1)[..., None, None]
        eye = np.eye(dim)
        return (1.0 - sq) * eye - 2.0 * x[..., :, None] * x[..., None, :]

    # <x-y, b1(x)-b1(y)> <= |x-y|^2 (1 - |x-y|^2 / 4), so phi(r) = r and
    # dissipativity rate lam holds beyond 2 sqrt(1 + lam).
    growth = math.sqrt(dim + 8.0)
    consts = Constants(
        lambda0=1.0,
        lam=lam,
        ell0=2.0 * math.sqrt(1.0 + lam),
        K=K_interaction,
        L=L_mult,
        alpha=4.0,
        lambda_b1=0.75 / growth,
        lambda_hat_b1=1.5 / growth,
        lstar=2.0,
    )
    name = "double-well-1d" if dim == 1 else "double-well-nd"
    return ModelSpec(
        name=name,
        dim=dim,
        b1=b1,
        grad_b1=grad_b1,
        b0=_linear_kernel(K_interaction),
        sigma=sigma,
        sigma0=_sin_multiplicative(L_mult, dim) if L_mult > 0 else None,
        noise_dim_b=dim if L_mult > 0 else 0,
        kernel_K=K_interaction,
        constants=consts,
        params=dict(K_interaction=K_interaction, sigma=sigma, L_mult=L_mult,
                    dim=dim),
    )


def _ou(dim=1, beta=1.0, alpha=0.0, K_interaction=0.0, sigma=1.0, L_mult=0.0):
    if not beta > 0:
        raise ConfigError("OU model needs beta > 0")
    mean = np.full(dim, float(alpha))

    def b1(x):
        return beta * (mean - x)

    def grad_b1(x):
        return np.broadcast_to(-beta * np.eye(dim), x.shape + (dim,)).copy()

    root_d = math.sqrt(dim)
    consts = Constants(
        lambda0=1.0,
        lam=beta,
        ell0=1.0,
        K=K_interaction,
        L=L_mult,
        alpha=beta * root_d,
        lambda_b1=0.5 / root_d,
        lambda_hat_b1=1.0 / root_d,
        lstar=0.0,
    )
    return ModelSpec(
        name="ou",
        dim=dim,
        b1=b1,
        grad_b1=grad_b1,
        b0=_linear_kernel(K_interaction),
        sigma=sigma,
        sigma0=_sin_multiplicative(L_mult, dim) if L_mult > 0 else None,
        noise_dim_b=dim if L_mult > 0 else 0,
        kernel_K=K_interaction,
        constants=consts,
        ou_beta=beta,
        ou_mean=float(alpha),
        params=dict(beta=beta, alpha=alpha, K_interaction=K_interaction,
                    sigma=sigma, L_mult=L_mult, dim=dim),
    )


GALLERY = ("double-well-1d", "ou", "double-well-nd")


def make_model(name, **overrides):
    """Build a gallery model by name.

    Accepted overrides: ``beta``, ``alpha`` (OU only), ``K_interaction``,
    ``sigma``, ``L_mult``, ``dim`` (OU and double-well-nd) and ``lam``
    (double-wells; shifts ``ell0`` accordingly).
    """
    allowed = {
        "double-well-1d": {"K_interaction", "sigma", "L_mult", "lam"},
        "double-well-nd": {"K_interaction", "sigma", "L_mult", "lam", "dim"},
        "ou": {"beta", "alpha", "K_interaction", "sigma", "L_mult", "dim"},
    }
    if name not in allowed:
        raise ConfigError(f"unknown model {name!r}; choose from {GALLERY}")
    bad = set(overrides) - allowed[name]
    if bad:
        raise ConfigError(f"model {name!r} does not accept {sorted(bad)}")
    kw = {k: v for k, v in overrides.items() if v is not None}
    if name == "double-well-1d":
        return _double_well(1, **kw)
    if name == "double-well-nd":
        dim = int(kw.pop("dim", 2))
        return _double_well(dim, **kw)
    kw["dim"] = int(kw.get("dim", 1))
    return _ou(**kw)
