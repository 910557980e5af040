"""Experiment drivers: rates in N, delta, r0 and t, moments, coupling checks.

Each driver takes an :class:`~mvsde.config.ExperimentConfig`, runs the
simulations and returns an :class:`ExperimentReport` holding the measured
series, the fitted rate and the pass/fail verdict against the acceptance
window stored in the config.
"""

from __future__ import annotations

import csv
import json
import math
import os
import subprocess
import time
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .contraction import lyapunov_constants, verify_contraction
from .coupling import CouplingConfig, marginal_validation
from .errors import ConfigError, MVSDEError
from .metrics import (fit_exp_decay, fit_loglog_slope, jackknife, moment, sliced_w1,
                      w1_1d)
from .schemes import InitialLaw, simulate

__all__ = [
    "ExperimentReport",
    "DEFAULTS",
    "defaults_for",
    "run_experiment",
    "run_chaos_experiment",
    "run_delta_experiment",
    "run_decay_experiment",
    "run_delay_experiment",
    "run_moment_experiment",
    "run_couple_check",
    "run_contraction_check",
    "run_simulation",
]

# Settings that differ from the dataclass defaults, per experiment kind.
DEFAULTS = {
    "chaos": dict(model="double-well-1d", K_interaction=0.05, sigma=1.0,
                  scheme="explicit", delta=0.01, horizon=10.0,
                  grid=[64, 128, 256, 512, 1024, 2048], n_ref=16384,
                  ref_repetitions=4, repetitions=32,
                  window_low=-0.65, window_high=-0.35, min_r2=0.85),
    "delta-rate": dict(model="double-well-1d", scheme="tamed", horizon=10.24,
                       grid=[0.02, 0.04, 0.08, 0.16], N=512, repetitions=16,
                       reference_scheme="same",
                       window_low=0.35, window_high=0.8, min_r2=0.8),
    "decay": dict(model="double-well-1d", scheme="explicit", delta=0.01,
                  horizon=8.0, init="point", init_locs=[2.0, -2.0], N=512,
                  repetitions=16, fit_window=[1.0, 4.0], min_r2=0.9,
                  window_low=0.0),
    "delay-rate": dict(model="ou", beta=1.0, alpha=0.0, sigma=1.0, scheme="delay",
                       delta=0.01, horizon=5.0,
                       grid=[0.0, 0.02, 0.04, 0.08, 0.16, 0.32], N=1000,
                       repetitions=10, window_low=0.3, window_high=0.8,
                       min_r2=0.8),
    "moments": dict(model="double-well-1d", delta=0.25, horizon=200.0, init="point",
                    init_loc=3.0, N=128, repetitions=4,
                    schemes=["backward", "tamed", "adaptive"], growth_factor=2.0),
    "couple-check": dict(model="ou", epsilon=0.05, inner_delta=0.01, horizon=5.0,
                         N=256, runs=40),
    "contraction-check": dict(),
    "simulate": dict(),
}


def defaults_for(kind, **overrides):
    """An :class:`ExperimentConfig` with the kind's defaults plus ``overrides``."""
    if kind not in DEFAULTS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    values = dict(DEFAULTS[kind])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(experiment=kind, **values)


def _git_stamp():
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(__file__))
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


@dataclass
class ExperimentReport:
    """Machine-readable outcome of one experiment.

    ``series`` rows carry ``grid_value, time, estimate, stderr``; the fit
    is recomputable from them.  ``checks`` holds named boolean sub-checks
    that enter the verdict, ``extra`` anything informational.
    """

    kind: str
    config: dict
    series: list = field(default_factory=list)
    fit: dict = field(default_factory=dict)
    window: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    passed: bool = False
    failure: str = ""
    seed: int = 0
    wall_clock: float = 0.0
    version: str = __version__
    git: str = ""

    def add(self, grid_value, t, estimate, stderr):
        self.series.append(dict(grid_value=float(grid_value), time=float(t),
                                estimate=float(estimate), stderr=float(stderr)))

    def as_dict(self):
        return _jsonable({k: getattr(self, k) for k in self.__dataclass_fields__})

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "series.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["grid_value", "time", "estimate", "stderr"])
            for row in self.series:
                w.writerow([repr(row[k]) for k in ("grid_value", "time", "estimate",
                                                   "stderr")])
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)

    def summary(self):
        verdict = "PASS" if self.passed else "FAIL"
        parts = [f"{self.kind}: {verdict}"]
        for key in ("slope", "rate", "r_squared"):
            if key in self.fit and self.fit[key] is not None:
                parts.append(f"{key}={self.fit[key]:.4g}")
        if self.failure:
            parts.append(self.failure)
        return " ".join(parts)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _new_report(cfg):
    return ExperimentReport(kind=cfg.experiment, config=cfg.as_dict(), seed=cfg.seed,
                            git=_git_stamp())


def _finish(report, start, failures):
    report.wall_clock = time.perf_counter() - start
    report.passed = not failures and all(report.checks.values())
    bad = [k for k, v in report.checks.items() if not v]
    report.failure = "; ".join(list(failures) + [f"check {k} failed" for k in bad])
    return report


def _distance(a, b, cfg):
    """W1 (exact in 1D, sliced otherwise) between two (n, d) samples."""
    if a.shape[-1] == 1:
        return w1_1d(a, b, cfg.seed)
    return sliced_w1(a, b, cfg.n_proj, cfg.seed)


def _grouped_distance(snap, ref, cfg, ref_groups=None):
    """W1 between pooled groups and its delete-one-group jackknife error.

    ``snap`` has shape ``(R, N, d)``.  When ``ref_groups`` is true the
    reference ``(R, M, d)`` is paired with ``snap`` group by group, so a
    deleted group is removed from both pools.
    """
    R = snap.shape[0]
    d = snap.shape[-1]

    def stat(mask):
        a = snap[mask].reshape(-1, d)
        b = ref[mask].reshape(-1, d) if ref_groups else ref.reshape(-1, d)
        return _distance(a, b, cfg)

    if R < 2:
        return stat(np.ones(R, dtype=bool)), math.nan
    return jackknife(stat, R)


def _window_check(report, value, cfg, name, high=None):
    high = cfg.window_high if high is None else high
    lo = -math.inf if cfg.window_low is None else cfg.window_low
    hi = math.inf if high is None else high
    report.window = dict(quantity=name, low=cfg.window_low,
                         high=None if math.isinf(hi) else high, min_r2=cfg.min_r2)
    report.checks[f"{name}_in_window"] = bool(lo <= value <= hi)
    if cfg.min_r2 is not None:
        report.checks["r_squared"] = bool(report.fit.get("r_squared", 0.0) >= cfg.min_r2)


def _blowup_failure(res, what):
    if res.any_blowup:
        reps = np.flatnonzero(res.blowup).tolist()
        return [f"blow-up in {what} (repetitions {reps})"]
    return []


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


def run_chaos_experiment(cfg):
    """Distance between one-particle marginals and a large-N reference, versus N."""
    start = time.perf_counter()
    report = _new_report(cfg)
    if not cfg.grid:
        raise ConfigError("key 'grid' must list particle numbers")
    model = cfg.build_model()
    scheme = cfg.scheme_config()
    t = cfg.horizon
    law = cfg.initial_law()
    failures = []

    ref = simulate(model, scheme, cfg.n_ref, law, cfg.seed, [t], cfg.ref_repetitions,
                   experiment="chaos/ref", threads=cfg.threads)
    failures += _blowup_failure(ref, f"reference N={cfg.n_ref}")
    ref_pool = ref.final()
    report.extra["reference_samples"] = int(ref_pool.shape[0] * ref_pool.shape[1])

    Ns, est, se = [], [], []
    for N in sorted(int(n) for n in cfg.grid):
        res = simulate(model, scheme, N, law, cfg.seed, [t], cfg.repetitions,
                       experiment=f"chaos/N={N}", threads=cfg.threads)
        failures += _blowup_failure(res, f"N={N}")
        if res.any_blowup:
            continue
        value, err = _grouped_distance(res.final(), ref_pool, cfg)
        report.add(N, t, value, err)
        Ns.append(N)
        est.append(value)
        se.append(err)
    if len(Ns) >= 3:
        fit = fit_loglog_slope(Ns, est, se)
        report.fit = fit.as_dict()
        _window_check(report, fit.slope, cfg, "slope")
    else:
        failures.append("fewer than 3 usable grid points")
    return _finish(report, start, failures)


def _check_delta_grid(grid, horizon):
    fine = min(grid)
    for d in grid:
        k = d / fine
        if abs(k - round(k)) > 1e-9 * k or (int(round(k)) & (int(round(k)) - 1)):
            raise ConfigError(f"key 'grid': {d} is not a power-of-two multiple of {fine}")
        steps = horizon / d
        if abs(steps - round(steps)) > 1e-9 * steps:
            raise ConfigError(f"key 'horizon': {horizon} is not a multiple of delta={d}")


def run_delta_experiment(cfg, scheme_kind=None):
    """Terminal distance to a fine-step reference versus the step size.

    All runs share the Brownian paths of the reference grid (coarsened for
    fixed steps, bridged for the adaptive scheme).
    """
    start = time.perf_counter()
    kind = scheme_kind or cfg.scheme
    if kind not in ("backward", "tamed", "adaptive", "explicit"):
        raise ConfigError(f"delta-rate needs a backward, tamed or adaptive scheme, got {kind!r}")
    cfg = cfg.replace(scheme=kind)
    report = _new_report(cfg)
    grid = sorted(float(d) for d in cfg.grid)
    if len(grid) < 3:
        raise ConfigError("key 'grid' needs at least 3 step sizes")
    delta_ref = cfg.delta_ref or grid[0] / 8.0
    _check_delta_grid(grid + [delta_ref], cfg.horizon)
    model = cfg.build_model()
    t = cfg.horizon
    law = cfg.initial_law()
    failures = []
    ref_kind = kind if cfg.reference_scheme == "same" else cfg.reference_scheme

    # validate every step size before spending time on simulations
    for d in grid:
        cfg.scheme_config(kind, d).check(model)

    adaptive = {"violations": 0, "reached": True, "min_h": math.inf}

    def run(k, d):
        res = simulate(model, cfg.scheme_config(k, d), cfg.N, law, cfg.seed, [t],
                       cfg.repetitions, experiment="delta", base_delta=delta_ref,
                       threads=cfg.threads)
        if k == "adaptive":
            adaptive["violations"] += res.adaptive_violations
            adaptive["reached"] &= bool(np.all(res.reached_horizon))
            adaptive["min_h"] = min(adaptive["min_h"], res.min_h)
        if k == "backward":
            report.extra.setdefault("max_residual", 0.0)
            report.extra["max_residual"] = max(report.extra["max_residual"],
                                               res.max_residual)
        return res

    ref = run(ref_kind, delta_ref)
    failures += _blowup_failure(ref, f"reference delta={delta_ref}")
    report.extra["delta_ref"] = delta_ref
    report.extra["reference_scheme"] = ref_kind
    deltas, est, se = [], [], []
    for d in grid:
        res = run(kind, d)
        failures += _blowup_failure(res, f"delta={d}")
        if res.any_blowup:
            continue
        value, err = _grouped_distance(res.final(), ref.final(), cfg, ref_groups=True)
        report.add(d, t, value, err)
        deltas.append(d)
        est.append(value)
        se.append(err)
    if kind == "adaptive" or ref_kind == "adaptive":
        report.checks["adaptive_step_bounds"] = adaptive["violations"] == 0
        report.checks["adaptive_reached_horizon"] = adaptive["reached"]
        report.extra["adaptive_min_h"] = adaptive["min_h"]
    if "max_residual" in report.extra:
        report.checks["implicit_residual"] = report.extra["max_residual"] <= cfg.implicit_tol
    if len(deltas) >= 3 and all(e > 0 for e in est):
        fit = fit_loglog_slope(deltas, est, se)
        report.fit = fit.as_dict()
        # backward EM may converge faster than order 1/2, so only its
        # lower window edge applies unless backward_window_high is set
        high = None
        if kind == "backward":
            high = math.inf if cfg.backward_window_high is None else cfg.backward_window_high
        _window_check(report, fit.slope, cfg, "slope", high=high)
    else:
        failures.append("fewer than 3 usable grid points")
    return _finish(report, start, failures)


def _gaussian_quantiles(mean, var, n):
    nd = NormalDist(mean, math.sqrt(var)) if var > 0 else None
    if nd is None:
        return np.full(n, float(mean))
    return np.array([nd.inv_cdf((i + 0.5) / n) for i in range(n)])


def _ou_law(model, x0, t):
    """Mean and variance at time t of the OU model started at the point x0."""
    beta = model.ou_beta
    a = model.ou_mean
    m = a + (x0 - a) * math.exp(-beta * t)
    v = model.sigma ** 2 * (1.0 - math.exp(-2.0 * beta * t)) / (2.0 * beta)
    return m, v


def run_decay_experiment(cfg):
    """Distance between the laws started from two initial conditions, over time.

    With ``control = true`` (OU model, no interaction) the simulated law
    from the first initial point is compared with the closed-form Gaussian
    law from the second and the fitted rate is checked against
    ``expected_rate`` (default ``beta``) within ``rate_tolerance``.
    """
    start = time.perf_counter()
    report = _new_report(cfg)
    model = cfg.build_model()
    scheme = cfg.scheme_config()
    times = list(cfg.times) or list(np.round(np.arange(0.0, cfg.horizon + 1e-9,
                                                        max(cfg.delta, 0.25)), 10))
    loc_a, loc_b = (float(v) for v in cfg.init_locs[:2])
    failures = []

    res_a = simulate(model, scheme, cfg.N, cfg.initial_law(loc_a), cfg.seed, times,
                     cfg.repetitions, experiment=f"decay/{loc_a!r}", threads=cfg.threads)
    failures += _blowup_failure(res_a, f"start {loc_a}")
    if cfg.control:
        if model.ou_beta is None or model.constants.K != 0:
            raise ConfigError("the control case needs the OU model without interaction")
        n = cfg.N * cfg.repetitions
        laws = [_ou_law(model, loc_b, t) for t in times]
        refs = [np.broadcast_to(_gaussian_quantiles(m, v, cfg.N)[None, :, None],
                                (cfg.repetitions, cfg.N, 1)) for m, v in laws]
        report.extra["reference"] = "closed-form Gaussian law"
        report.extra["reference_points"] = n
    else:
        res_b = simulate(model, scheme, cfg.N, cfg.initial_law(loc_b), cfg.seed, times,
                         cfg.repetitions, experiment=f"decay/{loc_b!r}",
                         threads=cfg.threads)
        failures += _blowup_failure(res_b, f"start {loc_b}")
        refs = res_b.snapshots

    ts, est, se = [], [], []
    for k, t in enumerate(times):
        value, err = _grouped_distance(res_a.snapshots[k], np.asarray(refs[k]), cfg,
                                       ref_groups=True)
        report.add(0.0, t, value, err)
        ts.append(t)
        est.append(value)
        se.append(err)

    lo, hi = (cfg.fit_window + [None, None])[:2] if cfg.fit_window else (None, None)
    lo = times[0] if lo is None else lo
    hi = times[-1] if hi is None else hi
    sel = [i for i, t in enumerate(ts) if lo - 1e-12 <= t <= hi + 1e-12 and est[i] > 0]
    if len(sel) < 3:
        failures.append("fewer than 3 positive points in the fit window")
        return _finish(report, start, failures)
    fit = fit_exp_decay([ts[i] for i in sel], [est[i] for i in sel],
                        [se[i] for i in sel])
    report.fit = fit.as_dict()
    report.extra["fit_window"] = [lo, hi]
    try:
        report.extra["lambda_star"] = lyapunov_constants(model).lambda_star
    except MVSDEError as exc:
        report.extra["lambda_star"] = None
        report.extra["lambda_star_error"] = str(exc)
    if cfg.control:
        expected = model.ou_beta if cfg.expected_rate is None else cfg.expected_rate
        tol = 0.1 if cfg.rate_tolerance is None else cfg.rate_tolerance
        report.window = dict(quantity="rate", expected=expected, tolerance=tol)
        report.checks["rate_matches"] = bool(abs(fit.rate - expected) <= tol)
    else:
        floor = cfg.window_low or 0.0
        report.window = dict(quantity="rate", low=floor, min_r2=cfg.min_r2)
        report.checks["rate_positive"] = bool(fit.rate > floor)
        if cfg.min_r2 is not None:
            report.checks["r_squared"] = bool(fit.r_squared >= cfg.min_r2)
    return _finish(report, start, failures)


def run_delay_experiment(cfg):
    """Terminal distance between delayed and undelayed dynamics versus r0.

    Both share the initial values and all Brownian increments.  The grid
    point ``r0 = 0`` is excluded from the fit and checked against zero.
    """
    start = time.perf_counter()
    report = _new_report(cfg)
    model = cfg.build_model()
    t = cfg.horizon
    law = cfg.initial_law()
    failures = []
    base = simulate(model, cfg.scheme_config("explicit"), cfg.N, law, cfg.seed, [t],
                    cfg.repetitions, experiment="delay", threads=cfg.threads)
    failures += _blowup_failure(base, "undelayed run")
    xs, est, se = [], [], []
    for r0 in sorted(float(r) for r in cfg.grid):
        res = simulate(model, cfg.scheme_config("delay", r0=r0), cfg.N, law, cfg.seed,
                       [t], cfg.repetitions, experiment="delay", threads=cfg.threads)
        failures += _blowup_failure(res, f"r0={r0}")
        value, err = _grouped_distance(res.final(), base.final(), cfg, ref_groups=True)
        report.add(r0, t, value, err)
        if r0 == 0:
            report.extra["zero_delay_distance"] = value
            report.extra["zero_delay_stderr"] = err
            bound = cfg.zero_factor * (err if math.isfinite(err) else 0.0)
            report.checks["zero_delay_consistent"] = bool(value <= bound)
            continue
        xs.append(r0)
        est.append(value)
        se.append(err)
    if len(xs) >= 3 and all(e > 0 for e in est):
        fit = fit_loglog_slope(xs, est, se)
        report.fit = fit.as_dict()
        _window_check(report, fit.slope, cfg, "slope")
    else:
        failures.append("fewer than 3 usable grid points")
    return _finish(report, start, failures)


def _quartile_means(ts, values, horizon):
    ts = np.asarray(ts)
    values = np.asarray(values)
    mid = (ts >= horizon / 4) & (ts <= 3 * horizon / 4)
    last = ts >= 3 * horizon / 4
    return float(values[mid].mean()), float(values[last].mean())


def run_moment_experiment(cfg):
    """Long-run p-th moments per scheme and the explicit scheme's blow-up flag.

    A scheme keeps its moments bounded when the mean over the last quarter
    of the horizon is at most ``growth_factor`` times the mean over the
    middle half ``[T/4, 3T/4]``.
    """
    start = time.perf_counter()
    report = _new_report(cfg)
    model = cfg.build_model()
    law = cfg.initial_law()
    T = cfg.horizon
    step = cfg.record_every
    times = list(np.round(np.arange(0.0, T + 1e-9, step), 10))
    failures = []
    ps = [float(p) for p in cfg.p_grid]
    kinds = list(cfg.schemes)

    def moments_of(batch):
        # batch (R, N, d); NaN rows (blown-up systems) give NaN moments
        nrm = np.linalg.norm(batch, axis=-1)
        return np.array([np.mean(nrm ** p) for p in ps])

    for idx, kind in enumerate(kinds):
        sc = cfg.scheme_config(kind)
        res = simulate(model, sc, cfg.N, law, cfg.seed, times, cfg.repetitions,
                       experiment=f"moments/{kind}", threads=cfg.threads,
                       reduce=moments_of)
        failures += _blowup_failure(res, f"scheme {kind}")
        series = np.array(res.snapshots)            # (len(times), len(ps))
        stamps = np.nanmean(res.snapshot_times, axis=1)
        for j, p in enumerate(ps):
            for k, t in enumerate(stamps):
                report.add(idx + p / 100.0, t, series[k, j], 0.0)
            mid, last = _quartile_means(stamps, series[:, j], T)
            ok = bool(np.isfinite(last) and last <= cfg.growth_factor * mid)
            report.checks[f"{kind}_p{p:g}_bounded"] = ok
            report.extra[f"{kind}_p{p:g}"] = dict(middle=mid, last=last)
        if kind == "adaptive":
            report.checks["adaptive_step_bounds"] = res.adaptive_violations == 0
            report.checks["adaptive_reached_horizon"] = bool(np.all(res.reached_horizon))
            report.extra["adaptive_min_h"] = res.min_h
        if kind == "backward":
            report.extra["max_residual"] = res.max_residual
            report.checks["implicit_residual"] = res.max_residual <= cfg.implicit_tol
    report.extra["grid_value_encoding"] = {f"{i}": k for i, k in enumerate(kinds)}

    ex_delta = cfg.explicit_delta or cfg.delta
    ex = simulate(model, cfg.scheme_config("explicit", ex_delta), cfg.N, law, cfg.seed,
                  [T], cfg.repetitions, experiment="moments/explicit",
                  threads=cfg.threads)
    report.extra["explicit_blowup"] = ex.any_blowup
    report.extra["explicit_blowup_times"] = ex.blowup_time
    report.checks["explicit_blows_up"] = ex.any_blowup
    return _finish(report, start, failures)


def run_couple_check(cfg):
    """Marginal fidelity of the coupled system and the decay of E|Z|."""
    start = time.perf_counter()
    report = _new_report(cfg)
    model = cfg.build_model()
    scheme = cfg.scheme_config() if cfg.second != "explicit" else None
    ccfg = CouplingConfig(cfg.epsilon, cfg.inner_delta, cfg.horizon, cfg.proxy_size,
                          cfg.second)
    loc_a, loc_b = (float(v) for v in cfg.init_locs[:2])
    law_a = InitialLaw(cfg.init, loc_a, cfg.init_scale)
    law_b = InitialLaw(cfg.init, loc_b, cfg.init_scale)
    rep = marginal_validation(model, ccfg, cfg.runs, cfg.seed, N=cfg.N,
                              init_first=law_a, init_second=law_b, scheme=scheme,
                              factor=cfg.zero_factor)
    for i, name in enumerate(("first", "second")):
        report.add(i, cfg.horizon, rep.w1[name], rep.stderr[name])
    report.extra["marginal"] = rep.as_dict()
    report.checks["marginals_match"] = rep.passed
    report.window = dict(quantity="w1", max_stderr_multiple=cfg.zero_factor)
    return _finish(report, start, [])


def run_contraction_check(cfg):
    start = time.perf_counter()
    report = _new_report(cfg)
    model = cfg.build_model()
    r_max = cfg.rmax or cfg.rmax_factor * model.constants.ell0
    res = verify_contraction(lyapunov_constants(model), r_max, cfg.n_grid)
    report.extra["contraction"] = res.as_dict()
    report.extra["note"] = "c1 uses ell0 in the (L + 2K) ell0 / 2 term"
    report.add(r_max, 0.0, res.max_violation, 0.0)
    report.checks["inequality_holds"] = res.passed
    report.checks["f_increasing"] = res.f_increasing
    report.checks["f_concave"] = res.f_concave
    report.window = dict(quantity="max_violation", tolerance=res.tolerance)
    report.extra["lambda_star_star_positive"] = res.constants.closes
    return _finish(report, start, [])


def run_simulation(cfg, out_dir=None):
    """Plain trajectory run; snapshots go to ``<out>/snapshots.csv`` or ``.npy``."""
    start = time.perf_counter()
    report = _new_report(cfg)
    model = cfg.build_model()
    sc = cfg.scheme_config()
    times = list(cfg.times) or [cfg.horizon]
    res = simulate(model, sc, cfg.N, cfg.initial_law(), cfg.seed, times, 1,
                   experiment="simulate", threads=cfg.threads)
    for k, t in enumerate(res.times):
        snap = res.snapshots[k][0]
        report.add(0.0, res.snapshot_times[k, 0], moment(snap, 2)
                   if np.all(np.isfinite(snap)) else math.nan, 0.0)
    report.extra["blowup"] = res.any_blowup
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if cfg.snapshot_format == "npy":
            np.save(os.path.join(out_dir, "snapshots.npy"),
                    np.stack([s[0] for s in res.snapshots]))
        else:
            with open(os.path.join(out_dir, "snapshots.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["time", "particle"] + [f"coord_{i}" for i in range(model.dim)])
                for k in range(len(res.times)):
                    for i, row in enumerate(res.snapshots[k][0]):
                        w.writerow([repr(float(res.snapshot_times[k, 0])), i]
                                   + [repr(float(v)) for v in row])
    report.checks["no_blowup"] = not res.any_blowup
    return _finish(report, start, [])


_DISPATCH = {
    "chaos": run_chaos_experiment,
    "delta-rate": run_delta_experiment,
    "decay": run_decay_experiment,
    "delay-rate": run_delay_experiment,
    "moments": run_moment_experiment,
    "couple-check": run_couple_check,
    "contraction-check": run_contraction_check,
}


def run_experiment(cfg, out_dir=None):
    """Dispatch on ``cfg.experiment`` and optionally write the outputs."""
    if cfg.experiment == "simulate":
        report = run_simulation(cfg, out_dir)
    else:
        report = _DISPATCH[cfg.experiment](cfg)
    if out_dir is not None:
        report.write(out_dir)
    return report
