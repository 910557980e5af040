"""Reflection coupling of two particle systems with different drifts.

Two systems are driven by shared Brownian motions ``W1, W2``.  Far apart
(``|Z| >= 2 eps``) the second system receives the mirror image of ``W1``
across the hyperplane orthogonal to the difference ``Z``; close together
(``|Z| <= eps``) both receive the same ``W2`` increment.  The cutoff ``h``
interpolates in between.  Each component on its own is an ordinary
Euler-Maruyama system, which :func:`marginal_validation` checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .metrics import w1_1d, w1_standard_error, sliced_w1
from .model import Ensemble, conv_at, drift_field, is_blown_up
from .paths import NoiseBank, stream_key
from .schemes import DelayHistory, InitialLaw, SchemeConfig, tamed_drift_field

__all__ = [
    "CouplingConfig",
    "CoupledState",
    "cutoff_h",
    "cutoff_h_star",
    "reflection_matrix",
    "reflect",
    "coupled_step",
    "CoupledRun",
    "simulate_coupled",
    "MarginalReport",
    "marginal_validation",
    "SECOND_MODES",
    "stream_keys",
]

SECOND_MODES = ("explicit", "tamed", "delay")


def cutoff_h(epsilon, r):
    """C^1 cutoff: 0 on ``[0, eps]``, 1 on ``[2 eps, inf)``, cubic smoothstep between."""
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0")
    r = np.asarray(r, dtype=float)
    s = np.clip((r - epsilon) / epsilon, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def cutoff_h_star(epsilon, r):
    """Complementary weight ``sqrt(1 - h^2)``."""
    h = cutoff_h(epsilon, r)
    return np.sqrt(np.clip(1.0 - h * h, 0.0, 1.0))


def reflection_matrix(z):
    """Householder matrix ``I - 2 e e^T`` with ``e = z / |z|``; identity at ``z = 0``.

    Accepts a stack ``(..., d)`` and returns ``(..., d, d)``.
    """
    z = np.asarray(z, dtype=float)
    d = z.shape[-1]
    nrm = np.linalg.norm(z, axis=-1, keepdims=True)
    e = np.divide(z, nrm, out=np.zeros_like(z), where=nrm > 0)
    return np.eye(d) - 2.0 * e[..., :, None] * e[..., None, :]


def reflect(z, v):
    """Apply ``reflection_matrix(z)`` to ``v`` without forming the matrix."""
    nrm = np.linalg.norm(z, axis=-1, keepdims=True)
    e = np.divide(z, nrm, out=np.zeros_like(z), where=nrm > 0)
    return v - 2.0 * e * np.sum(e * v, axis=-1, keepdims=True)


@dataclass(frozen=True)
class CouplingConfig:
    """Coupling radius, inner step and horizon.

    ``proxy_size`` particles (per system) evolve alongside the first
    component and stand in for its law; ``proxy_size = 0`` lets the first
    component use its own empirical measure instead.  ``second`` selects
    the drift of the second component: the exact drift, the tamed drift
    frozen on the ``scheme.delta`` grid, or the delayed drift.
    """

    epsilon: float = 1e-3
    inner_delta: Optional[float] = None
    horizon: float = 1.0
    proxy_size: int = 0
    second: str = "explicit"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if self.inner_delta is not None and not self.inner_delta > 0:
            raise ConfigError("inner_delta must be > 0")
        if not self.horizon >= 0:
            raise ConfigError("horizon must be >= 0")
        if self.proxy_size < 0:
            raise ConfigError("proxy_size must be >= 0")
        if self.second not in SECOND_MODES:
            raise ConfigError(f"second must be one of {SECOND_MODES}")

    @property
    def step(self):
        if self.inner_delta is not None:
            return float(self.inner_delta)
        return min(1e-3, self.epsilon / 4.0)

    @property
    def n_steps(self):
        k = self.horizon / self.step
        n = int(round(k))
        if abs(k - n) > 1e-9 * max(1.0, k):
            raise ConfigError("horizon must be a multiple of the inner step")
        return n


@dataclass
class CoupledState:
    """Paired ensembles, optional law proxy and step bookkeeping.

    ``z`` is recomputed from the two ensembles on access.
    """

    y: Ensemble
    y_n: Ensemble
    proxy: Optional[Ensemble] = None
    history: Optional[DelayHistory] = None
    frozen_drift: Optional[np.ndarray] = None
    step_index: int = 0

    def __post_init__(self):
        if self.y.positions.shape != self.y_n.positions.shape:
            raise ConfigError("coupled components must have equal shapes")

    @property
    def z(self):
        return self.y.positions - self.y_n.positions

    @property
    def time(self):
        return self.y.time


def _first_drift(state, model):
    y = state.y.positions
    if state.proxy is None:
        return drift_field(y, model, state.y.mean)
    if model.kernel_K is not None:
        return drift_field(y, model, state.proxy.mean)
    return model.b1(y) + conv_at(y, state.proxy.positions, model)


def _second_drift(state, model, ccfg, scheme):
    x = state.y_n.positions
    if ccfg.second == "explicit":
        return drift_field(x, model, state.y_n.mean)
    if ccfg.second == "delay":
        return drift_field(state.history.lagged, model)
    ratio = int(round(scheme.delta / ccfg.step))
    if state.frozen_drift is None or state.step_index % ratio == 0:
        state.frozen_drift = tamed_drift_field(x, model, scheme, state.y_n.mean)
    return state.frozen_drift


def _check(name, arr, shape):
    if arr is not None and np.shape(arr) != tuple(shape):
        raise ConfigError(f"{name} has shape {np.shape(arr)}, expected {tuple(shape)}")


def coupled_step(state, model, ccfg, scheme=None, dW1=None, dW2=None, dB=None,
                 dW_proxy=None, dB_proxy=None):
    """Advance both components by one inner step.

    The cutoff and the reflection use ``Z`` at the step start.  The first
    component gets ``sigma (h dW1 + h* dW2)``; the second gets
    ``sigma (h Pi(Z) dW1 + h* dW2)``.  Both share ``sigma0(.) dB``.
    Returns a new :class:`CoupledState`.
    """
    dt = ccfg.step
    y = state.y.positions
    x = state.y_n.positions
    shape = y.shape
    _check("dW1", dW1, shape)
    _check("dW2", dW2, shape)
    if ccfg.second != "explicit" and scheme is None:
        raise ConfigError(f"second component {ccfg.second!r} needs a scheme config")
    if ccfg.second == "tamed":
        ratio = scheme.delta / dt
        if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
            raise ConfigError("tamed delta must be a multiple of inner_delta")
    if ccfg.second == "delay" and state.history is None:
        raise ConfigError("delay mode needs a history buffer")

    z = y - x
    r = np.linalg.norm(z, axis=-1)
    h = cutoff_h(ccfg.epsilon, r)[..., None]
    hs = cutoff_h_star(ccfg.epsilon, r)[..., None]
    a = h * dW1
    c = hs * dW2
    noise_first = model.sigma * a + model.sigma * c
    noise_second = model.sigma * reflect(z, a) + model.sigma * c

    with np.errstate(over="ignore", invalid="ignore"):
        b_first = _first_drift(state, model)
        b_second = _second_drift(state, model, ccfg, scheme)
        new_y = y + b_first * dt + noise_first
        new_x = x + b_second * dt + noise_second
        if model.sigma0 is not None:
            _check("dB", dB, shape[:-1] + (model.noise_dim_b,))
            new_y = new_y + np.einsum("...ij,...j->...i", model.sigma0(y), dB)
            new_x = new_x + np.einsum("...ij,...j->...i", model.sigma0(x), dB)

        proxy = state.proxy
        if proxy is not None:
            p = proxy.positions
            _check("dW_proxy", dW_proxy, p.shape)
            new_p = p + drift_field(p, model, proxy.mean) * dt + model.sigma * dW_proxy
            if model.sigma0 is not None:
                new_p = new_p + np.einsum("...ij,...j->...i", model.sigma0(p), dB_proxy)
            proxy = Ensemble(new_p, proxy.time + dt)

    history = state.history
    if history is not None:
        history.push(new_x, dt)
    return CoupledState(
        y=Ensemble(new_y, state.y.time + dt),
        y_n=Ensemble(new_x, state.y_n.time + dt),
        proxy=proxy,
        history=history,
        frozen_drift=state.frozen_drift,
        step_index=state.step_index + 1,
    )


# --------------------------------------------------------------------------
# drivers
# --------------------------------------------------------------------------


def _banks(model, seed, experiment, dim, dt):
    banks = {t: NoiseBank(seed, experiment, t, dim, dt) for t in ("W1", "W2", "Wp")}
    if model.sigma0 is not None:
        banks["B"] = NoiseBank(seed, experiment, "B", model.noise_dim_b, dt)
        banks["Bp"] = NoiseBank(seed, experiment, "Bp", model.noise_dim_b, dt)
    return banks


def _sample(init, seed, experiment, tag, shape):
    if isinstance(init, InitialLaw):
        return init.sample(seed, f"{experiment}/{tag}", shape)
    return np.broadcast_to(np.asarray(init, dtype=float), shape).copy()


@dataclass
class CoupledRun:
    """Output of :func:`simulate_coupled`.

    ``mean_abs_z[k]`` is the average of ``|Z|`` over all particles and
    systems at ``times[k]``; ``final`` holds the terminal state.
    """

    times: np.ndarray
    mean_abs_z: np.ndarray
    stderr_abs_z: np.ndarray
    final: CoupledState
    blowup: bool
    max_sync_error: float = 0.0


def simulate_coupled(model, ccfg, N, init_first, init_second, seed, repetitions=1,
                     scheme=None, experiment="couple", record_every=None):
    """Run ``repetitions`` independent coupled pairs of N-particle systems.

    Returns a :class:`CoupledRun` with ``E|Z_t|`` recorded every
    ``record_every`` inner steps (default: about 200 records).  With
    ``sigma == 0`` the reflection has no noise to act on and the pair
    degenerates to a synchronous coupling.
    """
    d = model.dim
    shape = (repetitions, N, d)
    y0 = _sample(init_first, seed, experiment, "Y0", shape)
    x0 = _sample(init_second, seed, experiment, "X0", shape)
    n_steps = ccfg.n_steps
    dt = ccfg.step
    banks = _banks(model, seed, experiment, d, dt)
    count = repetitions * N

    proxy = None
    pcount = repetitions * ccfg.proxy_size
    if ccfg.proxy_size:
        pshape = (repetitions, ccfg.proxy_size, d)
        proxy = Ensemble(_sample(init_first, seed, experiment, "P0", pshape), 0.0)

    history = None
    if ccfg.second == "delay":
        if scheme is None:
            raise ConfigError("delay mode needs a scheme config with r0")
        history = DelayHistory(x0, SchemeConfig("delay", dt, ccfg.horizon, r0=scheme.r0))

    state = CoupledState(Ensemble(y0, 0.0), Ensemble(x0, 0.0), proxy, history)
    every = record_every or max(1, n_steps // 200)
    times, means, ses = [], [], []

    def record(st):
        a = np.linalg.norm(st.z, axis=-1)
        times.append(st.time)
        means.append(float(a.mean()))
        per_rep = a.mean(axis=-1)
        ses.append(float(per_rep.std(ddof=1) / math.sqrt(len(per_rep)))
                   if len(per_rep) > 1 else float(a.std() / math.sqrt(a.size)))

    record(state)
    blow = False
    for n in range(n_steps):
        def draw(tag, c, dim):
            return banks[tag].increments(n, 0, c).reshape(repetitions, -1, dim)
        dW1 = draw("W1", count, d)
        dW2 = draw("W2", count, d)
        dB = draw("B", count, model.noise_dim_b) if "B" in banks else None
        dWp = draw("Wp", pcount, d) if proxy is not None else None
        dBp = draw("Bp", pcount, model.noise_dim_b) if proxy is not None and "Bp" in banks else None
        state = coupled_step(state, model, ccfg, scheme, dW1, dW2, dB, dWp, dBp)
        if is_blown_up(state.y.positions) or is_blown_up(state.y_n.positions):
            blow = True
            break
        if (n + 1) % every == 0 or n + 1 == n_steps:
            record(state)
    return CoupledRun(np.array(times), np.array(means), np.array(ses), state, blow)


def _uncoupled(model, ccfg, N, init, seed, repetitions, experiment, which, scheme):
    """Plain Euler run of one component with its own independent streams."""
    d = model.dim
    shape = (repetitions, N, d)
    tag = "Y0" if which == "first" else "X0"
    x = _sample(init, seed, experiment, tag, shape)
    dt = ccfg.step
    count = repetitions * N
    W = NoiseBank(seed, experiment, "W", d, dt)
    B = NoiseBank(seed, experiment, "B", model.noise_dim_b, dt) if model.sigma0 is not None else None
    proxy = None
    if which == "first" and ccfg.proxy_size:
        pshape = (repetitions, ccfg.proxy_size, d)
        proxy = _sample(init, seed, experiment, "P0", pshape)
        Wp = NoiseBank(seed, experiment, "Wp", d, dt)
        Bp = NoiseBank(seed, experiment, "Bp", model.noise_dim_b, dt) if B else None
    hist = None
    if which == "second" and ccfg.second == "delay":
        hist = DelayHistory(x, SchemeConfig("delay", dt, ccfg.horizon, r0=scheme.r0))
    frozen = None
    ratio = int(round(scheme.delta / dt)) if which == "second" and ccfg.second == "tamed" else 1
    for n in range(ccfg.n_steps):
        dW = W.increments(n, 0, count).reshape(shape)
        if which == "first":
            if proxy is None:
                b = drift_field(x, model)
            elif model.kernel_K is not None:
                b = drift_field(x, model, proxy.mean(axis=-2))
            else:
                        b = model.b1(x) + conv_at(x, proxy, model)
        elif ccfg.second == "explicit":
            b = drift_field(x, model)
        elif ccfg.second == "delay":
            b = drift_field(hist.lagged, model)
        else:
            if n % ratio == 0:
                frozen = tamed_drift_field(x, model, scheme)
            b = frozen
        new = x + b * dt + model.sigma * dW
        if B is not None:
            dB = B.increments(n, 0, count).reshape(shape[:-1] + (model.noise_dim_b,))
            new = new + np.einsum("...ij,...j->...i", model.sigma0(x), dB)
        if proxy is not None:
            pc = repetitions * ccfg.proxy_size
            dWp = Wp.increments(n, 0, pc).reshape(proxy.shape)
            newp = proxy + drift_field(proxy, model) * dt + model.sigma * dWp
            if B is not None:
                dBp = Bp.increments(n, 0, pc).reshape(proxy.shape[:-1] + (model.noise_dim_b,))
                newp = newp + np.einsum("...ij,...j->...i", model.sigma0(proxy), dBp)
            proxy = newp
        if hist is not None:
            hist.push(new, dt)
        x = new
    return x


@dataclass
class MarginalReport:
    """W1 between each coupled component and its uncoupled counterpart."""

    passed: bool
    w1: dict
    stderr: dict
    n_samples: int
    epsilon: float
    inner_delta: float
    horizon: float
    cutoff: str = "cubic smoothstep"
    experiment_ids: dict = field(default_factory=dict)

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _distance(a, b, dim, seed):
    if dim == 1:
        return w1_1d(a, b, seed), w1_standard_error(a, b)
    # sliced distance: standard error of the first projection as a proxy
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((64, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    se = float(np.mean([w1_standard_error(a @ v, b @ v) for v in u]))
    return sliced_w1(a, b, directions=u), se


def marginal_validation(model, ccfg, n_runs, seed, N=1, init_first=None,
                        init_second=None, scheme=None, experiment="marginal",
                        factor=3.0):
    """Compare coupled marginals with independently simulated uncoupled runs.

    ``n_runs`` independent systems of ``N`` particles are run three times:
    coupled, first component alone, second component alone.  All particle
    positions at the horizon are pooled.  Passes iff each W1 is at most
    ``factor`` times its Monte Carlo standard error.
    """
    if n_runs * N < 1:
        raise ConfigError("need at least one sample")
    init_first = InitialLaw("gaussian", 1.0, 1.0) if init_first is None else init_first
    init_second = InitialLaw("gaussian", -1.0, 1.0) if init_second is None else init_second
    ids = {"coupled": f"{experiment}/coupled",
           "first": f"{experiment}/uncoupled-first",
           "second": f"{experiment}/uncoupled-second"}
    run = simulate_coupled(model, ccfg, N, init_first, init_second, seed, n_runs,
                           scheme, ids["coupled"])
    y = run.final.y.positions.reshape(-1, model.dim)
    x = run.final.y_n.positions.reshape(-1, model.dim)
    u1 = _uncoupled(model, ccfg, N, init_first, seed, n_runs, ids["first"], "first",
                    scheme).reshape(-1, model.dim)
    u2 = _uncoupled(model, ccfg, N, init_second, seed, n_runs, ids["second"], "second",
                    scheme).reshape(-1, model.dim)
    w = {}
    se = {}
    for name, a, b in (("first", y, u1), ("second", x, u2)):
        w[name], se[name] = _distance(a, b, model.dim, seed)
    passed = all(w[k] <= factor * se[k] or w[k] == 0.0 for k in w)
    return MarginalReport(
        passed=bool(passed and not run.blowup),
        w1=w,
        stderr=se,
        n_samples=int(y.shape[0]),
        epsilon=ccfg.epsilon,
        inner_delta=ccfg.step,
        horizon=ccfg.horizon,
        experiment_ids=ids,
    )


def stream_keys(seed, experiment="marginal"):
    """All noise stream keys used by :func:`marginal_validation`, by role."""
    keys = {}
    for role in ("coupled", "uncoupled-first", "uncoupled-second"):
        exp = f"{experiment}/{role}"
        tags = ("W1", "W2", "Wp", "B", "Bp") if role == "coupled" else ("W", "Wp", "B", "Bp")
        for t in tags:
            keys[(role, t)] = stream_key(seed, exp, t)
    return keys
