"""Diagnostics: straightness and sequential straightness, GTE-vs-NFE curves,
empirical Lipschitz and field-norm statistics, gradient-variance estimates
under different couplings, and small-sample distribution distances.

All estimators are pure functions of (field snapshot, rng seed); every
report records the solver spec and sample count it was computed with,
because the finite-difference velocity makes the value solver-dependent.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import nn
from .errors import ConfigError
from .solvers import SolverSpec, solve

EXACT_TRACE_PARAM_LIMIT = 512  # exact gradient-covariance traces only on probe nets


@dataclass
class StraightnessReport:
    """Chord-deviation integral, overall and per time bin."""

    value: float
    bin_times: np.ndarray  # step midpoints, ordered along t
    bin_values: np.ndarray  # mean squared deviation at each midpoint
    boundaries: np.ndarray  # segmentation used
    solver_desc: str
    n_trajectories: int
    kind: str  # "straightness" | "sequential"


def straightness_of_trajectories(times, states) -> tuple[float, np.ndarray, np.ndarray]:
    """Integral of ||chord slope - finite-difference velocity||^2 over one
    segment, averaged over trajectories.

    ``times`` is (m+1,), ``states`` is (m+1, n, D) (or (m+1, D) for a single
    trajectory). The chord is taken between the trajectory's own endpoints.
    Returns (value, step midpoints, per-step mean deviation).
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 2:
        states = states[:, None, :]
    times = np.asarray(times, dtype=np.float64)
    hs = np.diff(times)
    if np.any(hs <= 0):
        raise ConfigError("trajectory times must be strictly increasing")
    span = times[-1] - times[0]
    chord = (states[-1] - states[0]) / span  # (n, D)
    vel = np.diff(states, axis=0) / hs[:, None, None]  # (m, n, D)
    dev = ((chord[None] - vel) ** 2).sum(axis=2)  # (m, n)
    per_step = dev.mean(axis=1)
    value = float((hs * per_step).sum())
    mids = 0.5 * (times[:-1] + times[1:])
    return value, mids, per_step


def sequential_straightness(field, boundaries, n, solver_spec: SolverSpec,
                            coupling, rng) -> StraightnessReport:
    """Sum over segments of the within-segment chord-deviation integral.

    Per segment k: draw fresh endpoint pairs, start at the interpolant point
    Z_{t_k} = (1 - t_k) X0 + t_k X1, solve across the segment, and compare
    finite-difference velocities with the segment chord slope formed from
    the trajectory's own endpoints.
    """
    if n < 1:
        raise ConfigError("need n >= 1 trajectories")
    boundaries = np.asarray(boundaries, dtype=np.float64)
    k_total = boundaries.size - 1
    total = 0.0
    all_mids, all_devs = [], []
    for k in range(k_total):
        n_k = n // k_total + (1 if k < n % k_total else 0)
        n_k = max(n_k, 1)
        x0, x1 = coupling.draw(n_k, rng)
        t_k = boundaries[k]
        z0 = (1.0 - t_k) * x0 + t_k * x1
        spec = dataclasses.replace(solver_spec, interval=(boundaries[k], boundaries[k + 1]))
        run = solve(field, z0, spec)
        value, mids, devs = straightness_of_trajectories(run.times, run.states)
        total += value
        all_mids.append(mids)
        all_devs.append(devs)
    return StraightnessReport(
        value=total,
        bin_times=np.concatenate(all_mids),
        bin_values=np.concatenate(all_devs),
        boundaries=boundaries,
        solver_desc=solver_spec.describe(),
        n_trajectories=n,
        kind="sequential" if k_total > 1 else "straightness",
    )


def straightness(field, n, solver_spec: SolverSpec, coupling, rng) -> StraightnessReport:
    """Full-interval straightness: the K=1 case of sequential straightness
    (same trajectories, same estimator)."""
    a, b = solver_spec.interval
    report = sequential_straightness(field, np.array([a, b]), n, solver_spec, coupling, rng)
    return dataclasses.replace(report, kind="straightness")


@dataclass
class GteCurveReport:
    nfe: np.ndarray
    mean_gte: np.ndarray
    oracle_desc: str
    n: int
    method: str


def gte_curve(field, nfe_list, n, noise_dist, rng, oracle_spec: SolverSpec | None = None,
              method: str = "euler", interval=(0.0, 1.0)) -> GteCurveReport:
    """Mean endpoint distance between few-step and oracle solves.

    The same noise draws feed every entry; the oracle defaults to Euler-480
    on the same field and interval.
    """
    if oracle_spec is None:
        oracle_spec = SolverSpec("euler", interval=interval, n_steps=480)
    x = noise_dist.sample(n, rng)
    ref = solve(field, x, oracle_spec).final
    nfes, gtes = [], []
    for nfe in nfe_list:
        spec = SolverSpec(method, interval=interval, n_steps=int(nfe))
        end = solve(field, x, spec).final
        nfes.append(int(nfe))
        gtes.append(float(np.mean(np.linalg.norm(end - ref, axis=1))))
    return GteCurveReport(np.asarray(nfes), np.asarray(gtes), oracle_spec.describe(), n, method)


@dataclass
class LipschitzReport:
    t_grid: np.ndarray
    m_hat: np.ndarray  # max perturbation ratio per time (a lower bound on M_sup)
    mean_sq_norm: np.ndarray  # mean ||v(x_t, t)||^2 per time
    n_probes: int
    eps: float


def lipschitz_estimate(field, t_grid, coupling, n_probes, eps, rng) -> LipschitzReport:
    """Probe-based estimate of the Lipschitz constant over x_t, per time.

    M_hat(t) = max over probes and random directions of
    ||v(x + d, t) - v(x, t)|| / ||d||, a lower bound on the true constant.
    Also records the mean squared field norm curve.
    """
    if eps <= 0:
        raise ConfigError("perturbation scale must be > 0")
    t_grid = np.asarray(t_grid, dtype=np.float64)
    m_hat = np.empty(t_grid.size)
    norms = np.empty(t_grid.size)
    for i, t in enumerate(t_grid):
        batch = coupling.sample_interpolant(n_probes, float(t), rng)
        x = batch.xt
        d = rng.standard_normal(x.shape)
        d *= eps / np.linalg.norm(d, axis=1, keepdims=True)
        v0 = field(x, float(t))
        v1 = field(x + d, float(t))
        m_hat[i] = float(np.max(np.linalg.norm(v1 - v0, axis=1) / eps))
        norms[i] = float(np.mean((v0 * v0).sum(axis=1)))
    return LipschitzReport(t_grid, m_hat, norms, n_probes, eps)


# ---------------------------------------------------------------------------
# gradient variance under a coupling (fixed (x, t) bins)


@dataclass
class VarianceBin:
    t: float
    code: tuple
    count: int
    target_var: float  # unbiased mean ||u - ubar||^2 within the bin
    exact_trace: float | None  # Tr Cov of the per-sample loss gradient, probe nets only


@dataclass
class VarianceReport:
    bins: list[VarianceBin]
    aggregate_target_var: float
    aggregate_trace: float | None
    n_draws: int
    min_count: int


def _bin_codes(x, edges):
    return tuple(np.digitize(x[:, d], edges) for d in range(x.shape[1]))


def target_variance_bins(coupling, t_values, edges, n_draws, rng, min_count=32):
    """Per-(t, spatial bin) count, target variance and bin payload."""
    out = {}
    for t in t_values:
        batch = coupling.sample_interpolant(n_draws, float(t), rng)
        codes = np.stack(_bin_codes(batch.xt, edges), axis=1)
        uniq, inv = np.unique(codes, axis=0, return_inverse=True)
        for b in range(uniq.shape[0]):
            rows = np.flatnonzero(inv == b)
            if rows.size < min_count:
                continue
            u = batch.target[rows]
            ubar = u.mean(axis=0)
            var = float(((u - ubar) ** 2).sum() / (rows.size - 1))
            out[(float(t), tuple(int(c) for c in uniq[b]))] = {
                "count": int(rows.size),
                "var": var,
                "x_rep": batch.xt[rows].mean(axis=0),
                "u": u,
            }
    return out


def gradient_variance(params: nn.MlpParams, coupling, t_values, edges, n_draws, rng,
                      min_count=32, param_mask=None) -> VarianceReport:
    """Trace of the per-sample loss-gradient covariance at fixed (x, t) bins.

    The gradient of ||v(x, t) - u||^2 at fixed (x, t) is linear in the draw
    u, so Tr Cov = 4 * sum_dd' Cov(u)_dd' (J J^T)_dd' with J the parameter
    Jacobian at the bin representative. The exact trace is only computed on
    probe nets; the target variance E||u - ubar||^2 (the bound's driver) is
    always reported.
    """
    bins_raw = target_variance_bins(coupling, t_values, edges, n_draws, rng, min_count)
    do_exact = params.n_params <= EXACT_TRACE_PARAM_LIMIT
    bins = []
    w_sum = v_sum = tr_sum = 0.0
    for (t, code), payload in sorted(bins_raw.items()):
        trace = None
        if do_exact:
            jac = nn.jacobian(params, payload["x_rep"], t)
            if param_mask is not None:
                jac = jac * np.asarray(param_mask, dtype=np.float64)[None, :]
            cov_u = np.atleast_2d(np.cov(payload["u"].T, ddof=1))
            trace = float(4.0 * np.sum(cov_u * (jac @ jac.T)))
            tr_sum += payload["count"] * trace
        bins.append(VarianceBin(t, code, payload["count"], payload["var"], trace))
        w_sum += payload["count"]
        v_sum += payload["count"] * payload["var"]
    agg_var = v_sum / w_sum if w_sum else float("nan")
    agg_tr = (tr_sum / w_sum) if (do_exact and w_sum) else None
    return VarianceReport(bins, agg_var, agg_tr, n_draws, min_count)


def compare_target_variance(coupling_a, coupling_b, t_values, edges, n_draws, rng,
                            min_count=32):
    """Matched-bin aggregate target variance for two couplings.

    Only bins populated by both couplings enter; each is weighted by the
    smaller of the two counts (conservative matching). Returns
    (aggregate_a, aggregate_b, n_matched_bins).
    """
    bins_a = target_variance_bins(coupling_a, t_values, edges, n_draws, rng, min_count)
    bins_b = target_variance_bins(coupling_b, t_values, edges, n_draws, rng, min_count)
    common = sorted(set(bins_a) & set(bins_b))
    if not common:
        raise ConfigError("no matched (x, t) bins; widen bins or draw more samples")
    w = np.array([min(bins_a[k]["count"], bins_b[k]["count"]) for k in common], dtype=float)
    va = np.array([bins_a[k]["var"] for k in common])
    vb = np.array([bins_b[k]["var"] for k in common])
    return float((w * va).sum() / w.sum()), float((w * vb).sum() / w.sum()), len(common)


# ---------------------------------------------------------------------------
# sample-quality distances (desk-scale stand-ins for perceptual metrics)

W2_EXACT_MAX = 2048


def wasserstein2_exact(a, b) -> float:
    """Exact 2-Wasserstein between equal-size empirical measures.

    Solves the optimal assignment on squared distances;
    W2 = sqrt(mean_i ||a_i - b_{pi(i)}||^2).
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] != b.shape[0]:
        raise ConfigError(f"exact W2 needs equal sizes, got {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] > W2_EXACT_MAX:
        raise ConfigError(f"exact W2 limited to n <= {W2_EXACT_MAX}, got {a.shape[0]}")
    cost = cdist(a, b, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def energy_distance(a, b) -> float:
    """V-statistic energy distance 2 E||A-B|| - E||A-A'|| - E||B-B'||."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    return float(
        2.0 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean()
    )


@dataclass
class DistanceReport:
    w2: float | None  # exact assignment W2; None when sizes differ or n too large
    energy: float
    mean_a: np.ndarray
    mean_b: np.ndarray
    cov_a: np.ndarray
    cov_b: np.ndarray
    n_a: int
    n_b: int
    note: str = ""


def sample_distance(a, b) -> DistanceReport:
    """Distance report between two point clouds; never raises on size."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    note = ""
    w2 = None
    try:
        w2 = wasserstein2_exact(a, b)
    except ConfigError as exc:
        note = str(exc)
    return DistanceReport(
        w2=w2,
        energy=energy_distance(a, b),
        mean_a=a.mean(axis=0),
        mean_b=b.mean(axis=0),
        cov_a=np.atleast_2d(np.cov(a.T, ddof=1)),
        cov_b=np.atleast_2d(np.cov(b.T, ddof=1)),
        n_a=a.shape[0],
        n_b=b.shape[0],
        note=note,
    )
