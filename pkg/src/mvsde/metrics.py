"""Distances between samples, moments and rate fits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "SampleSet",
    "RateFit",
    "as_samples",
    "w1_1d",
    "w1_1d_detail",
    "w1_standard_error",
    "sliced_w1",
    "jackknife",
    "moment",
    "fit_loglog_slope",
    "fit_exp_decay",
]


@dataclass(frozen=True)
class SampleSet:
    """Equally weighted samples, shape ``(n, d)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1:
            raise ConfigError("a sample set needs shape (n, d) with n >= 1")
        if not np.all(np.isfinite(v)):
            raise ConfigError("sample set contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


def as_samples(a):
    """Coerce an array or :class:`SampleSet` to an ``(n, d)`` float array."""
    if isinstance(a, SampleSet):
        return a.values
    return SampleSet(a).values


def _equalize(a, b, seed):
    n = min(len(a), len(b))
    truncated = len(a) != len(b)
    if truncated:
        rng = np.random.default_rng(seed)
        if len(a) > n:
            a = a[rng.permutation(len(a))[:n]]
        if len(b) > n:
            b = b[rng.permutation(len(b))[:n]]
    return a, b, truncated


def w1_1d_detail(a, b, seed=0):
    """W1 of two 1D samples with truncation bookkeeping.

    Returns ``(distance, n_used, truncated)``.  Unequal samples are
    shuffled with ``seed`` and cut to the smaller size.
    """
    a = as_samples(a)
    b = as_samples(b)
    if a.shape[1] != 1 or b.shape[1] != 1:
        raise ConfigError("w1_1d needs one-dimensional samples")
    a, b, truncated = _equalize(a[:, 0], b[:, 0], seed)
    dist = float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    return dist, len(a), truncated


def w1_1d(a, b, seed=0):
    """Wasserstein-1 distance between 1D empirical measures via order statistics."""
    return w1_1d_detail(a, b, seed)[0]


def w1_standard_error(a, b):
    """Monte Carlo standard error of the two-sample W1 estimate.

    Integrates the pointwise standard deviation of the difference of the
    two empirical CDFs, ``sqrt(F (1 - F) (1/n_a + 1/n_b))``, with ``F`` the
    pooled CDF.  For independent samples from one law the expected W1
    estimate is about ``0.8`` times this value.
    """
    a = np.sort(as_samples(a)[:, 0])
    b = np.sort(as_samples(b)[:, 0])
    pooled = np.sort(np.concatenate([a, b]))
    n = len(pooled)
    if n < 2:
        return 0.0
    F = np.arange(1, n) / n
    widths = np.diff(pooled)
    scale = 1.0 / len(a) + 1.0 / len(b)
    return float(np.sum(np.sqrt(F * (1.0 - F) * scale) * widths))


def sliced_w1(a, b, n_proj=64, seed=0, directions=None):
    """Average of 1D W1 over random projections; a lower bound on W1.

    ``directions`` (shape ``(n_proj, d)``) overrides the random unit
    vectors drawn from ``seed``.
    """
    a = as_samples(a)
    b = as_samples(b)
    if a.shape[1] != b.shape[1]:
        raise ConfigError("samples have different dimensions")
    if n_proj < 1:
        raise ConfigError("n_proj must be >= 1")
    d = a.shape[1]
    a, b, _ = _equalize(a, b, seed)
    if directions is None:
        rng = np.random.default_rng(seed)
        directions = rng.standard_normal((n_proj, d))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    else:
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
    pa = np.sort(a @ directions.T, axis=0)
    pb = np.sort(b @ directions.T, axis=0)
    return float(np.mean(np.mean(np.abs(pa - pb), axis=0)))


def jackknife(statistic, groups):
    """Delete-one-group jackknife estimate and standard error.

    ``statistic`` maps a boolean keep-mask over groups to a float.
    Returns ``(full_value, standard_error)``.
    """
    g = int(groups)
    if g < 2:
        raise ConfigError("jackknife needs at least two groups")
    full = statistic(np.ones(g, dtype=bool))
    loo = np.empty(g)
    for k in range(g):
        mask = np.ones(g, dtype=bool)
        mask[k] = False
        loo[k] = statistic(mask)
    se = math.sqrt((g - 1) / g * np.sum((loo - loo.mean()) ** 2))
    return float(full), se


def moment(a, p):
    """Empirical absolute moment ``mean |x|^p`` (Euclidean norm)."""
    if not p >= 1:
        raise ConfigError("moment order p must be >= 1")
    x = as_samples(a)
    return float(np.mean(np.linalg.norm(x, axis=1) ** p))


@dataclass(frozen=True)
class RateFit:
    """Least-squares line ``log y = intercept + slope * u``.

    ``u`` is ``log x`` for power-law fits and ``t`` for exponential fits;
    for the latter ``rate = -slope`` and ``prefactor = exp(intercept)``.
    """

    slope: float
    intercept: float
    r_squared: float
    rate: float = math.nan
    prefactor: float = math.nan
    slope_stderr: float = math.nan

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _weighted_line(u, v, w):
    W = np.sum(w)
    ub = np.sum(w * u) / W
    vb = np.sum(w * v) / W
    suu = np.sum(w * (u - ub) ** 2)
    if suu == 0:
        raise ConfigError("fit needs at least two distinct abscissae")
    slope = np.sum(w * (u - ub) * (v - vb)) / suu
    intercept = vb - slope * ub
    resid = v - intercept - slope * u
    ss_res = float(np.sum(w * resid ** 2))
    ss_tot = float(np.sum(w * (v - vb) ** 2))
    if ss_tot <= 1e-30 * max(1.0, float(np.sum(w * v * v))):
        r2 = 1.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    dof = len(u) - 2
    se = math.sqrt(ss_res / dof / suu) if dof > 0 else math.nan
    return float(slope), float(intercept), r2, se


def _prepare(xs, ys, stderr, need_positive_x):
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ConfigError("xs and ys must be 1D arrays of equal length")
    if len(x) < 3:
        raise ConfigError("a rate fit needs at least 3 points")
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise ConfigError("fit data must be finite")
    if np.any(y <= 0) or (need_positive_x and np.any(x <= 0)):
        raise ConfigError("fit data must be positive")
    if stderr is None:
        w = np.ones_like(y)
    else:
        s = np.asarray(stderr, dtype=float)
        rel = s / y
        if np.any(rel <= 0) or not np.all(np.isfinite(rel)):
            w = np.ones_like(y)
        else:
            w = 1.0 / rel ** 2
    return x, y, w


def fit_loglog_slope(xs, ys, stderr=None):
    """Fit ``y ~ C x^slope``.

    With ``stderr`` the points are weighted by the inverse variance of
    ``log y``, approximated by ``(stderr / y)^2``.
    """
    x, y, w = _prepare(xs, ys, stderr, True)
    slope, intercept, r2, se = _weighted_line(np.log(x), np.log(y), w)
    return RateFit(slope, intercept, r2, slope_stderr=se)


def fit_exp_decay(ts, ys, stderr=None):
    """Fit ``y ~ A exp(-rate t)``."""
    t, y, w = _prepare(ts, ys, stderr, False)
    slope, intercept, r2, se = _weighted_line(t, np.log(y), w)
    return RateFit(slope, intercept, r2, rate=-slope, prefactor=math.exp(intercept),
                   slope_stderr=se)
