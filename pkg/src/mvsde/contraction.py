"""Concave distance function and the contraction inequality behind it.

For a model with constants ``lambda0, lam, ell0, K, L`` and noise ``sigma``
the distance ``f(r) = 1 - exp(-c1 r) + c2 r`` satisfies

    phi_star(r) <= -lambda_star * f(r)   for all r > 0,

where ``phi_star`` collects the drift and noise contributions seen by the
reflection-coupled difference process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RegimeError

__all__ = [
    "LyapunovConstants",
    "ContractionReport",
    "lyapunov_constants",
    "constants_from_values",
    "f_eval",
    "f_prime",
    "f_double_prime",
    "phi_star",
    "verify_contraction",
]


@dataclass(frozen=True)
class LyapunovConstants:
    """Constants of the distance function and the contraction rate.

    ``lambda_star_star = lambda_star - K (1 + c1 / c2)``; only its sign
    matters (positive means the interaction is weak enough for the
    contraction to survive the mean-field term).
    """

    c1: float
    c2: float
    lambda_star: float
    lambda_star_star: float
    lambda0: float
    lam: float
    ell0: float
    K: float
    L: float
    sigma: float

    @property
    def closes(self):
        return self.lambda_star_star > 0

    def as_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["closes"] = self.closes
        return out


def constants_from_values(lambda0, lam, ell0, K, L, sigma):
    """Compute the constants from raw model numbers.

    Raises
    ------
    RegimeError
        If ``lam <= K + L / 2`` (no positive contraction rate).
    ConfigError
        If ``sigma == 0``.
    """
    if sigma == 0 or not math.isfinite(sigma):
        raise ConfigError("sigma must be finite and nonzero")
    margin = lam - K - L / 2.0
    if not margin > 0:
        raise RegimeError(
            f"lam={lam} <= K + L/2 = {K + L / 2.0}: no contraction rate")
    phi_ell = lambda0 * ell0
    c1 = 2.0 * (phi_ell + (L + 2.0 * K) * ell0 / 2.0) / sigma ** 2
    c2 = c1 * math.exp(-c1 * ell0)
    denom = -math.expm1(-c1 * ell0) + c2 * ell0
    head = min(2.0 * phi_ell + L * ell0, margin)
    if not (c1 > 0 and denom > 0):
        raise RegimeError("c1 = 0: the distance function degenerates "
                          "(need lambda0 * ell0 + K * ell0 > 0)")
    lambda_star = head * c2 / denom
    lss = lambda_star - K * (1.0 + c1 / c2) if c2 > 0 else -math.inf
    return LyapunovConstants(c1, c2, lambda_star, lss, lambda0, lam, ell0, K, L,
                             float(sigma))


def lyapunov_constants(model):
    """Constants of the distance function for a :class:`~mvsde.model.ModelSpec`."""
    c = model.constants
    return constants_from_values(c.lambda0, c.lam, c.ell0, c.K, c.L, model.sigma)


def f_eval(c, r):
    r = np.asarray(r, dtype=float)
    return -np.expm1(-c.c1 * r) + c.c2 * r


def f_prime(c, r):
    r = np.asarray(r, dtype=float)
    return c.c1 * np.exp(-c.c1 * r) + c.c2


def f_double_prime(c, r):
    r = np.asarray(r, dtype=float)
    return -c.c1 ** 2 * np.exp(-c.c1 * r)


def phi_star(c, r):
    """Drift-plus-noise bound seen by ``f`` of the coupled difference at distance r.

    ``(f'(r)) ((phi(r) + lam r) 1{r <= ell0} - (lam - K - L/2) r) + 2 sigma^2 f''(r)``.
    """
    r = np.asarray(r, dtype=float)
    short = np.where(r <= c.ell0, c.lambda0 * r + c.lam * r, 0.0)
    drift = short - (c.lam - c.K - c.L / 2.0) * r
    return f_prime(c, r) * drift + 2.0 * c.sigma ** 2 * f_double_prime(c, r)


@dataclass
class ContractionReport:
    passed: bool
    max_violation: float
    worst_r: float
    tolerance: float
    r_max: float
    n_grid: int
    constants: LyapunovConstants
    f_increasing: bool
    f_concave: bool

    def as_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "constants"}
        out["constants"] = self.constants.as_dict()
        return out


def verify_contraction(c, r_max, n_grid=10_000, rtol=1e-10):
    """Check ``phi_star(r) + lambda_star f(r) <= rtol max(1, |phi_star(r)|)`` on a grid.

    The grid is ``r_max * k / n_grid`` for ``k = 1..n_grid``.  ``c`` is a
    :class:`LyapunovConstants` or a model (constants are derived from it).
    """
    if not isinstance(c, LyapunovConstants):
        c = lyapunov_constants(c)
    if not r_max > 0 or n_grid < 1:
        raise ConfigError("need r_max > 0 and n_grid >= 1")
    r = r_max * np.arange(1, n_grid + 1) / n_grid
    ps = phi_star(c, r)
    gap = ps + c.lambda_star * f_eval(c, r)
    scaled = gap / np.maximum(1.0, np.abs(ps))
    i = int(np.argmax(scaled))
    fp = f_prime(c, r)
    fpp = f_double_prime(c, r)
    return ContractionReport(
        passed=bool(scaled[i] <= rtol),
        max_violation=float(gap[i]),
        worst_r=float(r[i]),
        tolerance=rtol,
        r_max=float(r_max),
        n_grid=int(n_grid),
        constants=c,
        f_increasing=bool(np.all(fp > 0)),
        f_concave=bool(np.all(fpp < 0)),
    )
