"""Time-stepping schemes for interacting particle systems.

Every scheme freezes the empirical measure at the start of the step.
Step functions accept an :class:`~mvsde.model.Ensemble` whose positions
may carry leading batch axes (independent systems) and return a new
ensemble; :func:`simulate` drives them over a horizon with counter-based
noise.
"""

from __future__ import annotations

import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, SolverError
from .model import (Ensemble, conv_field, drift_field, grad_b1_hs_norm, interaction_conv,
                    is_blown_up)
from .paths import BridgedPath, NoiseBank, standard_normals, standard_uniforms, stream_key

__all__ = [
    "KINDS",
    "SchemeConfig",
    "InitialLaw",
    "DelayHistory",
    "SimulationResult",
    "backward_step_bound",
    "delta_star_backward",
    "delta_star_tamed",
    "explicit_em_step",
    "backward_em_step",
    "solve_implicit",
    "tamed_drift",
    "tamed_drift_field",
    "tamed_em_step",
    "adaptive_step_size",
    "adaptive_em_step",
    "IndependentAdaptiveNoise",
    "delay_em_step",
    "simulate",
]

KINDS = ("explicit", "backward", "tamed", "adaptive", "delay")
TAMING_MODES = ("gradient_norm", "drift_norm")


# --------------------------------------------------------------------------
# step-size thresholds
# --------------------------------------------------------------------------


def backward_step_bound(model):
    """Largest step for which the implicit equation is uniquely solvable."""
    c = model.constants
    return 1.0 / (2.0 * (c.lambda0 + c.K)) if c.lambda0 + c.K > 0 else math.inf


def delta_star_backward(model):
    """Step-size threshold under which the backward scheme's rate holds."""
    c = model.constants
    m = math.floor(max(1.0, c.lstar) * (1.0 + c.lstar)) + 1
    third = 3.0 * (c.lam - 2.0 * c.K) / (4.0 * m * (1.0 + c.K) ** m)
    return min(1.0, backward_step_bound(model), third)


def delta_star_tamed(model):
    """Step-size threshold for the gradient-norm tamed scheme.

    Requires ``alpha * lambda_b1 > 2 K``; returns 0.0 otherwise.
    """
    c = model.constants
    margin = c.alpha * c.lambda_b1 - 2.0 * c.K
    if margin <= 0 or c.alpha <= 0 or c.lambda_hat_b1 <= 0:
        return 0.0
    rho = 4.0 * c.K * (c.K + c.lambda_hat_b1)
    inner = 2.0 * c.K + rho * (1.0 + 1.0 / c.alpha) + c.lambda_hat_b1 ** 2
    return min(
        1.0,
        c.alpha ** -0.5,
        c.lambda_b1 ** 2 / c.lambda_hat_b1 ** 4,
        margin ** 2 / (2.0 * c.alpha * inner ** 2),
        1.0 / (margin / 4.0 + c.K + rho),
    )


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SchemeConfig:
    """Scheme kind, base step and solver settings.

    ``kappa`` is the taming exponent of the ``drift_norm`` mode; the
    ``gradient_norm`` mode always tames with ``delta ** 0.5``.
    """

    kind: str = "explicit"
    delta: float = 0.01
    horizon: float = 1.0
    taming_mode: str = "gradient_norm"
    kappa: float = 0.5
    implicit_tol: float = 1e-12
    implicit_max_iter: int = 100
    r0: float = 0.0
    max_steps: int = 100_000_000

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown scheme {self.kind!r}; choose from {KINDS}")
        if not self.delta >= 0 or not math.isfinite(self.delta):
            raise ConfigError("delta must be finite and >= 0")
        if not self.horizon >= 0:
            raise ConfigError("horizon must be >= 0")
        if self.taming_mode not in TAMING_MODES:
            raise ConfigError(f"taming_mode must be one of {TAMING_MODES}")
        if self.kind == "tamed" and self.taming_mode == "drift_norm":
            if not 0 < self.kappa <= 0.5:
                raise ConfigError("kappa must lie in (0, 1/2]")
        if self.r0 < 0:
            raise ConfigError("r0 must be >= 0")

    @property
    def delay_lag(self):
        """Number of steps spanned by the delay, checked to be an integer."""
        if self.r0 == 0:
            return 0
        if self.delta <= 0:
            raise ConfigError("delay scheme needs delta > 0")
        ratio = self.r0 / self.delta
        lag = int(round(ratio))
        if abs(ratio - lag) > 1e-9 * max(1.0, ratio):
            raise ConfigError(f"r0={self.r0} is not a multiple of delta={self.delta}")
        return lag

    def check(self, model):
        """Validate the step size against the model's thresholds."""
        if self.kind != "explicit" and self.kind != "delay" and model.has_multiplicative_noise:
            raise ConfigError(f"scheme {self.kind!r} supports additive noise only")
        if self.kind == "backward":
            bound = backward_step_bound(model)
            if not self.delta < bound:
                raise ConfigError(
                    f"backward step delta={self.delta} violates "
                    f"delta < 1/(2(lambda0+K)) = {bound:.6g}")
        elif self.kind == "tamed" and self.taming_mode == "gradient_norm":
            bound = delta_star_tamed(model)
            if not self.delta <= bound:
                raise ConfigError(
                    f"tamed step delta={self.delta} exceeds the threshold "
                    f"delta*_kappa = {bound:.6g}")
        elif self.kind == "adaptive":
            if not 0 < self.delta < 1:
                raise ConfigError("adaptive scheme needs delta in (0, 1)")
        elif self.kind == "delay":
            _ = self.delay_lag
        return self


# --------------------------------------------------------------------------
# initial laws
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class InitialLaw:
    """Point mass, Gaussian or uniform-box initial distribution.

    ``loc`` is the atom / mean / lower corner, ``scale`` the standard
    deviation or box width.  Samples come from the ``"X0"`` counter stream.
    """

    kind: str = "point"
    loc: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("point", "gaussian", "uniform"):
            raise ConfigError(f"unknown initial law {self.kind!r}")
        if self.scale < 0:
            raise ConfigError("scale must be >= 0")

    def sample(self, seed, experiment, shape):
        """Array of shape ``shape = (..., N, d)``; particle ids run row-major."""
        shape = tuple(shape)
        dim = shape[-1]
        count = int(np.prod(shape[:-1], dtype=np.int64))
        if self.kind == "point":
            return np.full(shape, float(self.loc))
        key = stream_key(seed, experiment, "X0")
        particles = np.arange(count, dtype=np.uint64)
        if self.kind == "gaussian":
            x = self.loc + self.scale * standard_normals(key, particles, 0, dim)
        else:
            x = self.loc + self.scale * standard_uniforms(key, particles, 0, dim)
        return x.reshape(shape)


# --------------------------------------------------------------------------
# single steps
# --------------------------------------------------------------------------


def _check_shape(name, arr, shape):
    if arr is None:
        return
    if np.shape(arr) != tuple(shape):
        raise ConfigError(f"{name} has shape {np.shape(arr)}, expected {tuple(shape)}")


def _multiplicative(model, x, dB):
    if model.sigma0 is None:
        if dB is not None and np.any(dB):
            raise ConfigError("dB supplied but model has no sigma0")
        return 0.0
    if dB is None:
        raise ConfigError("model has sigma0 but no dB was supplied")
    _check_shape("dB", dB, x.shape[:-1] + (model.noise_dim_b,))
    return np.einsum("...ij,...j->...i", model.sigma0(x), dB)


def _advance(ens, positions, dt):
    return Ensemble(positions, np.asarray(ens.time) + dt if np.ndim(dt) else ens.time + dt)


def explicit_em_step(ens, model, cfg, dW, dB=None):
    """One Euler-Maruyama step with the empirical measure frozen at step start."""
    x = ens.positions
    _check_shape("dW", dW, x.shape)
    with np.errstate(over="ignore", invalid="ignore"):
        b = drift_field(x, model, ens.mean)
        new = x + b * cfg.delta + model.sigma * dW
        if model.sigma0 is not None or dB is not None:
            new = new + _multiplicative(model, x, dB)
    return _advance(ens, new, cfg.delta)


def solve_implicit(c, model, delta, tol=1e-12, max_iter=100):
    """Solve ``x - delta * b1(x) = c`` particle-wise.

    Newton with backtracking on the residual norm, then a damped
    fixed-point sweep for any particle Newton left unconverged.

    Returns
    -------
    x : ndarray
    residual : ndarray
        Residual norm per particle, shape ``c.shape[:-1]``.
    """
    def resid(x):
        return x - delta * model.b1(x) - c

    x = c.copy()
    if delta == 0:
        return x, np.zeros(c.shape[:-1])
    dim = c.shape[-1]
    eye = np.eye(dim)
    F = resid(x)
    nrm = np.linalg.norm(F, axis=-1)
    for _ in range(max_iter):
        if np.all(nrm <= tol):
            return x, nrm
        J = eye - delta * model.grad_b1(x)
        if dim == 1:
            step = F / J[..., 0]
        else:
            step = np.linalg.solve(J, F[..., None])[..., 0]
        t = np.ones(nrm.shape)
        active = nrm > tol
        for _ in range(30):
            trial = x - (t * active)[..., None] * step
            Ft = resid(trial)
            nt = np.linalg.norm(Ft, axis=-1)
            worse = active & ~(nt < nrm)
            if not worse.any():
                break
            t = np.where(worse, 0.5 * t, t)
        accept = nt < nrm
        x = np.where(accept[..., None], trial, x)
        F = np.where(accept[..., None], Ft, F)
        nrm = np.where(accept, nt, nrm)
        if not np.any(accept & active):
            break

    omega = 0.5
    for _ in range(max_iter):
        bad = nrm > tol
        if not bad.any():
            break
        fp = (1.0 - omega) * x + omega * (c + delta * model.b1(x))
        x = np.where(bad[..., None], fp, x)
        F = resid(x)
        nrm = np.linalg.norm(F, axis=-1)
    return x, nrm


def backward_em_step(ens, model, cfg, dW, return_residual=False):
    """Implicit step ``x = x_n + b1(x) delta + conv(x_n) delta + sigma dW``.

    The interaction term is evaluated at the step-start positions.
    Raises :class:`SolverError` if any particle's residual stays above
    ``cfg.implicit_tol``.
    """
    x = ens.positions
    _check_shape("dW", dW, x.shape)
    c = x + cfg.delta * conv_field(x, model, ens.mean) + model.sigma * dW
    new, res = solve_implicit(c, model, cfg.delta, cfg.implicit_tol,
                              cfg.implicit_max_iter)
    worst = float(res.max()) if res.size else 0.0
    if not worst <= cfg.implicit_tol:
        raise SolverError(
            f"implicit step did not converge: residual {worst:.3e} > "
            f"{cfg.implicit_tol:.1e}", worst)
    out = _advance(ens, new, cfg.delta)
    return (out, res) if return_residual else out


def _tame(b, size, delta, power):
    return b / (1.0 + delta ** power * size[..., None])


def tamed_drift_field(positions, model, cfg, mean=None):
    if cfg.taming_mode == "gradient_norm":
        b1 = model.b1(positions)
        tamed = _tame(b1, grad_b1_hs_norm(positions, model), cfg.delta, 0.5)
        return tamed + conv_field(positions, model, mean)
    b = drift_field(positions, model, mean)
    return _tame(b, np.linalg.norm(b, axis=-1), cfg.delta, cfg.kappa)


def tamed_drift(x, ens, model, cfg):
    """Tamed drift at ``x`` against the empirical measure of ``ens``.

    ``gradient_norm`` tames only ``b1`` by ``1 + sqrt(delta) |grad b1|_HS``;
    ``drift_norm`` tames the whole drift by ``1 + delta**kappa |b|``.
    """
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    conv = interaction_conv(pts, ens, model)
    if cfg.taming_mode == "gradient_norm":
        b1 = model.b1(pts)
        out = _tame(b1, grad_b1_hs_norm(pts, model), cfg.delta, 0.5) + conv
    else:
        b = model.b1(pts) + conv
        out = _tame(b, np.linalg.norm(b, axis=-1), cfg.delta, cfg.kappa)
    return out[0] if single else out


def tamed_em_step(ens, model, cfg, dW):
    x = ens.positions
    _check_shape("dW", dW, x.shape)
    b = tamed_drift_field(x, model, cfg, ens.mean)
    return _advance(ens, x + b * cfg.delta + model.sigma * dW, cfg.delta)


def _step_from_max(delta, max_sq):
    h = delta * (1.0 / (1.0 + max_sq))
    # keep (1 + max|b|^2) h <= delta exact in floating point
    over = (1.0 + max_sq) * h > delta
    while np.any(over):
        h = np.where(over, np.nextafter(h, 0.0), h)
        over = (1.0 + max_sq) * h > delta
    return h


def adaptive_step_size(ens, model, cfg, drift_values=None):
    """``h = delta * min_i 1 / (1 + |b(x_i, mu)|^2)`` for each system."""
    b = drift_field(ens.positions, model, ens.mean) if drift_values is None else drift_values
    max_sq = np.max(np.sum(b * b, axis=-1), axis=-1)
    h = _step_from_max(cfg.delta, max_sq)
    return float(h) if np.ndim(h) == 0 else h


class IndependentAdaptiveNoise:
    """Fresh ``N(0, h I)`` increments keyed by the adaptive step counter."""

    def __init__(self, bank, first, shape):
        self.bank = bank
        self.first = first
        self.shape = tuple(shape)

    def increments(self, step_index, t, h):
        count = int(np.prod(self.shape[:-1], dtype=np.int64))
        z = self.bank.normals([step_index], self.first, count)[0]
        z = z.reshape(self.shape)
        h = np.asarray(h, dtype=float)
        return np.sqrt(h)[..., None, None] * z if h.ndim else math.sqrt(h) * z


def adaptive_em_step(ens, model, cfg, noise, step_index=0, active=None):
    """One adaptive step; every particle of a system advances by the same h.

    Returns ``(ensemble, h, max_sq_drift)``.  ``active`` masks systems that
    already reached the horizon; they are left unchanged with ``h = 0``.
    """
    x = ens.positions
    b = drift_field(x, model, ens.mean)
    max_sq = np.max(np.sum(b * b, axis=-1), axis=-1)
    h = _step_from_max(cfg.delta, max_sq)
    if active is not None:
        h = np.where(active, h, 0.0)
    dW = noise.increments(step_index, ens.time, h)
    hb = h[..., None, None] if np.ndim(h) else h
    new = x + b * hb + model.sigma * dW
    return Ensemble(new, np.asarray(ens.time) + h), h, max_sq


class DelayHistory:
    """Ring buffer of the last ``lag + 1`` ensembles on the step grid.

    ``segment`` is either one array (constant initial path) or a sequence
    of ``lag + 1`` arrays for the grid times ``-r0, ..., 0`` in order.
    """

    def __init__(self, segment, cfg, time=0.0):
        self.lag = cfg.delay_lag
        if isinstance(segment, (list, tuple)):
            if len(segment) != self.lag + 1:
                raise ConfigError(f"initial segment needs {self.lag + 1} grid values")
            frames = [np.array(s, dtype=float) for s in segment]
        else:
            frames = [np.array(segment, dtype=float)] * (self.lag + 1)
        self.buffer = deque(frames, maxlen=self.lag + 1)
        self.time = time

    @property
    def current(self):
        return self.buffer[-1]

    @property
    def lagged(self):
        return self.buffer[0]

    def push(self, positions, dt):
        self.buffer.append(positions)
        self.time = self.time + dt

    def ensemble(self):
        return Ensemble(self.current, self.time)


def delay_em_step(hist, model, cfg, dW, dB=None):
    """Step the delay equation: drift read at ``t - r0``, noise at ``t``.

    Drift is ``b(y(t - r0), mu(t - r0))``; for the OU model without
    interaction this is ``beta (alpha - y(t - r0))``.  Mutates ``hist``
    and returns the new current ensemble.
    """
    y = hist.current
    lagged = hist.lagged
    _check_shape("dW", dW, y.shape)
    b = drift_field(lagged, model)
    new = y + b * cfg.delta + model.sigma * dW
    if model.sigma0 is not None or dB is not None:
        new = new + _multiplicative(model, y, dB)
    hist.push(new, cfg.delta)
    return hist.ensemble()


# --------------------------------------------------------------------------
# trajectory driver
# --------------------------------------------------------------------------


@dataclass
class SimulationResult:
    """Snapshots and diagnostics of a batch of independent systems.

    ``snapshots[k]`` has shape ``(R, N, d)`` (or whatever ``reduce``
    returns) and is NaN for systems that blew up before ``times[k]``.
    ``snapshot_times[k]`` holds the realised time stamp per system.
    """

    times: np.ndarray
    snapshots: list
    snapshot_times: np.ndarray
    valid: np.ndarray
    blowup: np.ndarray
    blowup_time: np.ndarray
    steps: int
    max_residual: float = 0.0
    adaptive_violations: int = 0
    reached_horizon: Optional[np.ndarray] = None
    min_h: float = math.nan
    grids: Optional[list] = None
    meta: dict = field(default_factory=dict)

    @property
    def any_blowup(self):
        return bool(self.blowup.any())

    def final(self):
        return self.snapshots[-1]


def _snapshot_indices(times, delta):
    idx = []
    for t in times:
        k = t / delta
        ki = int(round(k))
        if abs(k - ki) > 1e-9 * max(1.0, k):
            raise ConfigError(f"snapshot time {t} is not on the delta={delta} grid")
        idx.append(ki)
    return idx


def _noise_banks(model, seed, experiment, base_dt):
    W = NoiseBank(seed, experiment, "W", model.dim, base_dt)
    B = None
    if model.sigma0 is not None:
        B = NoiseBank(seed, experiment, "B", model.noise_dim_b, base_dt)
    return W, B


def _run_fixed(model, cfg, x0, seed, experiment, first, times, base_delta, reduce):
    R, N, d = x0.shape
    delta = cfg.delta
    base = base_delta or delta
    factor = delta / base
    fi = int(round(factor))
    if delta > 0 and (fi < 1 or abs(factor - fi) > 1e-9 * factor):
        raise ConfigError(f"delta={delta} is not a multiple of base step {base}")
    n_steps = _snapshot_indices([cfg.horizon], delta)[0] if delta > 0 else 0
    snap_idx = _snapshot_indices(times, delta) if delta > 0 else [0] * len(times)
    W, B = _noise_banks(model, seed, experiment, base)
    count = R * N

    def incr(bank, n):
        if fi == 1:
            z = bank.increments(n, first, count)
        else:
            z = bank.coarse_increments(n, fi, first, count)
        return z.reshape(R, N, bank.dim)

    reduce = reduce or (lambda a: a.copy())
    snaps = [None] * len(times)
    valid = np.ones((R, len(times)), dtype=bool)
    blow = np.zeros(R, dtype=bool)
    blow_t = np.full(R, np.nan)
    max_res = 0.0

    hist = DelayHistory(x0, cfg) if cfg.kind == "delay" else None
    ens = Ensemble(x0, 0.0)

    def record(k_step, positions):
        for j, s in enumerate(snap_idx):
            if s == k_step:
                p = positions.copy()
                p[blow] = np.nan
                valid[blow, j] = False
                snaps[j] = reduce(p)

    record(0, ens.positions)
    for n in range(n_steps):
        dW = incr(W, n)
        dB = incr(B, n) if B is not None else None
        with np.errstate(over="ignore", invalid="ignore"):
            if cfg.kind == "explicit":
                ens = explicit_em_step(ens, model, cfg, dW, dB)
            elif cfg.kind == "tamed":
                ens = tamed_em_step(ens, model, cfg, dW)
            elif cfg.kind == "backward":
                ens, res = backward_em_step(ens, model, cfg, dW, return_residual=True)
                max_res = max(max_res, float(res.max()))
            elif cfg.kind == "delay":
                ens = delay_em_step(hist, model, cfg, dW, dB)
        bad = is_blown_up(ens.positions, axis=(-2, -1)) & ~blow
        if bad.any():
            blow_t[bad] = (n + 1) * delta
            blow |= bad
            pos = ens.positions.copy()
            pos[blow] = np.nan
            ens = Ensemble(pos, ens.time)
            if hist is not None:
                hist.buffer[-1] = pos
            if blow.all():
                for j, s in enumerate(snap_idx):
                    if s > n + 1:
                        valid[:, j] = False
                        snaps[j] = reduce(np.full_like(pos, np.nan))
                break
        record(n + 1, ens.positions)
    st = np.array([[t] * R for t in times], dtype=float)
    return dict(snaps=snaps, valid=valid, blow=blow, blow_t=blow_t, steps=n_steps,
                max_res=max_res, snapshot_times=st)


def _run_adaptive(model, cfg, x0, seed, experiment, first, times, reduce, noise,
                  base_delta=None):
    R, N, d = x0.shape
    if noise is None and base_delta:
        noise = BridgedPath(seed, experiment, "W", base_delta, x0.shape, first)
    elif noise is None:
        bank = NoiseBank(seed, experiment, "W", d, 1.0)
        noise = IndependentAdaptiveNoise(bank, first, x0.shape)
    reduce = reduce or (lambda a: a.copy())
    times = np.asarray(times, dtype=float)
    n_snap = len(times)
    snaps = [[None] * R for _ in range(n_snap)]
    snap_t = np.full((n_snap, R), np.nan)
    nxt = np.zeros(R, dtype=int)
    ens = Ensemble(x0, np.zeros(R))
    grids = [[0.0] for _ in range(R)]
    violations = 0
    min_h = math.inf

    def record(positions, t):
        for r in range(R):
            while nxt[r] < n_snap and t[r] >= times[nxt[r]] - 1e-12:
                snaps[nxt[r]][r] = positions[r].copy()
                snap_t[nxt[r], r] = t[r]
                nxt[r] += 1

    record(ens.positions, ens.time)
    step = 0
    while np.any(ens.time < cfg.horizon - 1e-12):
        if step >= cfg.max_steps:
            raise ConfigError(f"adaptive run exceeded max_steps={cfg.max_steps}")
        active = ens.time < cfg.horizon - 1e-12
        ens, h, max_sq = adaptive_em_step(ens, model, cfg, noise, step, active)
        ha = h[active]
        violations += int(np.sum(ha > cfg.delta) + np.sum(max_sq[active] * ha > cfg.delta))
        min_h = min(min_h, float(ha.min()))
        for r in np.flatnonzero(active):
            grids[r].append(float(ens.time[r]))
        record(ens.positions, ens.time)
        step += 1
    out = []
    for k in range(n_snap):
        out.append(reduce(np.stack(snaps[k])))
    return dict(snaps=out, valid=np.ones((R, n_snap), dtype=bool),
                blow=np.zeros(R, dtype=bool), blow_t=np.full(R, np.nan), steps=step,
                max_res=0.0, snapshot_times=snap_t, violations=violations,
                min_h=min_h, grids=[np.array(g) for g in grids],
                reached=ens.time >= cfg.horizon - 1e-12)


def simulate(model, cfg, N, init, seed, snapshot_times, repetitions=1,
             experiment="sim", base_delta=None, threads=1, reduce=None,
             adaptive_noise=None):
    """Run ``repetitions`` independent N-particle systems.

    Parameters
    ----------
    init : InitialLaw or ndarray
        Initial law, or explicit initial positions of shape ``(R, N, d)``.
    snapshot_times : sequence of float
        Must lie on the step grid for fixed-step schemes; adaptive runs
        record the first grid time at or after each request.
    base_delta : float, optional
        Step of the underlying Brownian increments; ``cfg.delta`` must be
        an integer multiple of it.  Runs sharing ``seed``, ``experiment``
        and ``base_delta`` are driven by the same Brownian paths; adaptive
        runs follow the same paths refined by Brownian bridges.
    threads : int
        Repetitions are split across this many worker threads.  The output
        does not depend on it.
    reduce : callable, optional
        Applied to each ``(R, N, d)`` snapshot before storing it.
    """
    cfg.check(model)
    d = model.dim
    times = np.asarray(sorted(snapshot_times), dtype=float)
    if len(times) == 0:
        times = np.array([cfg.horizon])
    if times[0] < 0 or times[-1] > cfg.horizon + 1e-12:
        raise ConfigError("snapshot times must lie in [0, horizon]")
    if isinstance(init, InitialLaw):
        x0 = init.sample(seed, experiment, (repetitions, N, d))
    else:
        x0 = np.array(init, dtype=float).reshape(repetitions, N, d)

    threads = max(1, int(threads))
    chunks = np.array_split(np.arange(repetitions), min(threads, repetitions))

    def run(idx):
        sub = x0[idx]
        first = int(idx[0]) * N
        if cfg.kind == "adaptive":
            return _run_adaptive(model, cfg, sub, seed, experiment, first, times,
                                 reduce=None, noise=adaptive_noise,
                                 base_delta=base_delta)
        return _run_fixed(model, cfg, sub, seed, experiment, first, times,
                          base_delta, reduce=None)

    if len(chunks) == 1:
        parts = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(len(chunks)) as pool:
            parts = list(pool.map(run, chunks))

    reduce = reduce or (lambda a: a)
    snaps = [reduce(np.concatenate([p["snaps"][k] for p in parts]))
             for k in range(len(times))]
    res = SimulationResult(
        times=times,
        snapshots=snaps,
        snapshot_times=np.concatenate([p["snapshot_times"] for p in parts], axis=1),
        valid=np.concatenate([p["valid"] for p in parts]),
        blowup=np.concatenate([p["blow"] for p in parts]),
        blowup_time=np.concatenate([p["blow_t"] for p in parts]),
        steps=max(p["steps"] for p in parts),
        max_residual=max(p["max_res"] for p in parts),
    )
    if cfg.kind == "adaptive":
        res.adaptive_violations = sum(p["violations"] for p in parts)
        res.reached_horizon = np.concatenate([p["reached"] for p in parts])
        res.min_h = min(p["min_h"] for p in parts)
        res.grids = [g for p in parts for g in p["grids"]]
    return res
