"""Instrumented one-step and adaptive ODE solvers over velocity fields.

All solvers integrate batches of points vectorially (one field evaluation
per stage regardless of batch size) and record NFE, per-step sizes, and
accept/reject counts. Truncation-error measurement restarts an oracle —
a closed-form flow map or a fine-grid reference solve — from every accepted
step point, and the global error is taken at the endpoint.

Fixed-step NFE accounting is exact: Euler N, Heun 2N, RK4 4N. The adaptive
method is the Dormand–Prince 5(4) embedded pair (FSAL) with a PI step-size
controller (safety 0.9, step-factor clamp [0.2, 5]).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DivergenceError, StiffnessError

FIXED_METHODS = ("euler", "heun", "rk4")
NFE_PER_STEP = {"euler": 1, "heun": 2, "rk4": 4}

# Dormand–Prince 5(4) tableau. B5 propagates; B5 - B4 estimates the error.
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)


@dataclass(frozen=True)
class SolverSpec:
    """Method + interval + stepping parameters.

    For fixed-step methods set ``n_steps``; for ``rk45`` set tolerances and
    optionally initial/min/max step magnitudes. Backward integration
    (a > b) is allowed.
    """

    method: str
    interval: tuple[float, float] = (0.0, 1.0)
    n_steps: int | None = None
    rtol: float = 1e-6
    atol: float = 1e-9
    h_init: float | None = None
    h_min: float | None = None
    h_max: float | None = None

    def __post_init__(self):
        if self.method not in FIXED_METHODS + ("rk45",):
            raise ConfigError(f"unknown solver method {self.method!r}")
        a, b = self.interval
        if not (np.isfinite(a) and np.isfinite(b)) or a == b:
            raise ConfigError(f"bad interval {self.interval}")
        if self.method in FIXED_METHODS:
            if self.n_steps is None or self.n_steps < 1:
                raise ConfigError(f"{self.method} needs n_steps >= 1, got {self.n_steps}")
        else:
            if self.rtol <= 0 or self.atol <= 0:
                raise ConfigError("rk45 tolerances must be > 0")

    def describe(self) -> str:
        a, b = self.interval
        if self.method in FIXED_METHODS:
            return f"{self.method}-{self.n_steps}[{a:g}:{b:g}]"
        return f"rk45(rtol={self.rtol:g};atol={self.atol:g})[{a:g}:{b:g}]"


@dataclass
class SolverRun:
    """Trajectory plus instrumentation for one (possibly batched) solve."""

    times: np.ndarray  # (m+1,)
    states: np.ndarray  # (m+1, n, D), endpoints included
    nfe: int
    accepted: int
    rejected: int
    step_sizes: np.ndarray  # (m,)
    spec: SolverSpec
    nfe_after_step: np.ndarray | None = None  # (m,) cumulative NFE at each accepted step

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def validate(self) -> None:
        dt = np.diff(self.times)
        a, b = self.spec.interval
        sign = 1.0 if b > a else -1.0
        if not np.all(sign * dt > 0):
            raise ValueError("trajectory times are not strictly monotone")
        if self.spec.method in FIXED_METHODS:
            expected = NFE_PER_STEP[self.spec.method] * self.spec.n_steps
            if self.nfe != expected:
                raise ValueError(f"NFE {self.nfe} != expected {expected}")


def _partial_run(times, states, nfe, accepted, rejected, hs, spec):
    return SolverRun(
        np.asarray(times), np.asarray(states), nfe, accepted, rejected, np.asarray(hs), spec
    )


def _fixed_step(field, x, t, h, method):
    """One fixed step; returns (new state, evals used)."""
    if method == "euler":
        return x + h * field(x, t), 1
    if method == "heun":
        k1 = field(x, t)
        k2 = field(x + h * k1, t + h)
        return x + 0.5 * h * (k1 + k2), 2
    k1 = field(x, t)
    k2 = field(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = field(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = field(x + h * k3, t + h)
    return x + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0, 4


def solve(field, x_init, spec: SolverSpec) -> SolverRun:
    """Integrate dx/dt = field(x, t) over spec.interval from x_init."""
    x = np.atleast_2d(np.asarray(x_init, dtype=np.float64)).copy()
    if not np.all(np.isfinite(x)):
        raise DivergenceError("non-finite initial state")
    if spec.method in FIXED_METHODS:
        return _solve_fixed(field, x, spec)
    return _solve_dopri(field, x, spec)


def _solve_fixed(field, x, spec):
    a, b = spec.interval
    n = spec.n_steps
    times = np.linspace(a, b, n + 1)
    states = np.empty((n + 1,) + x.shape)
    states[0] = x
    nfe = 0
    for i in range(n):
        h = times[i + 1] - times[i]
        x, used = _fixed_step(field, x, times[i], h, spec.method)
        nfe += used
        if not np.all(np.isfinite(x)):
            partial = _partial_run(times[: i + 1], states[: i + 1], nfe, i, 0, np.diff(times[: i + 1]), spec)
            raise DivergenceError(f"state diverged at step {i + 1}/{n} (t={times[i + 1]:g})", partial=partial)
        states[i + 1] = x
    per = NFE_PER_STEP[spec.method]
    return SolverRun(times, states, nfe, n, 0, np.diff(times), spec,
                     nfe_after_step=per * np.arange(1, n + 1))


def _solve_dopri(field, x, spec):
    a, b = spec.interval
    sign = 1.0 if b > a else -1.0
    span = abs(b - a)
    h_max = spec.h_max if spec.h_max is not None else span
    h_min = spec.h_min if spec.h_min is not None else span * 1e-14
    h = sign * min(abs(spec.h_init) if spec.h_init is not None else span / 100.0, h_max)

    times = [a]
    states = [x.copy()]
    hs = []
    nfe_marks = []
    t = a
    k = [None] * 7
    k[0] = field(x, t)
    nfe = 1
    accepted = rejected = 0
    err_prev = 1.0
    while sign * (b - t) > 0:
        h = sign * min(abs(h), h_max)
        if sign * (t + h - b) > 0:
            h = b - t
        for s in range(1, 7):
            xs = x + h * sum(c * k[j] for j, c in enumerate(_DP_A[s]) if c != 0.0)
            k[s] = field(xs, t + _DP_C[s] * h)
        nfe += 6
        x_new = x + h * sum(c * k[j] for j, c in enumerate(_DP_B5) if c != 0.0)
        err_vec = h * sum(c * k[j] for j, c in enumerate(_DP_E) if c != 0.0)
        scale = spec.atol + spec.rtol * np.maximum(np.abs(x), np.abs(x_new))
        # max over the batch of per-point RMS norms: conservative step control
        err = float(np.max(np.sqrt(np.mean((err_vec / scale) ** 2, axis=1))))
        if not np.isfinite(err) or not np.all(np.isfinite(x_new)):
            partial = _partial_run(times, states, nfe, accepted, rejected, hs, spec)
            raise DivergenceError(f"state diverged at t={t:g}", partial=partial)
        if err <= 1.0:
            accepted += 1
            hs.append(h)
            t = t + h
            x = x_new
            times.append(t)
            states.append(x.copy())
            nfe_marks.append(nfe)
            k[0] = k[6]  # FSAL: stage 7 was evaluated at (t, x_new)
            # PI controller, Hairer DOPRI5 constants: beta=0.04, expo=0.2-0.75*beta
            factor = 0.9 * (err**-0.17 if err > 0 else 5.0) * err_prev**0.04
            err_prev = max(err, 1e-4)
            h = h * min(5.0, max(0.2, factor))
        else:
            rejected += 1
            h = h * min(1.0, max(0.2, 0.9 * err**-0.2))
        if abs(h) < h_min and sign * (b - t) > 0:
            partial = _partial_run(times, states, nfe, accepted, rejected, hs, spec)
            raise StiffnessError(
                f"step size underflow at t={t:g} (|h|={abs(h):.3e} < {h_min:.3e})", partial=partial
            )
    return SolverRun(np.array(times), np.array(states), nfe, accepted, rejected, np.array(hs), spec,
                     nfe_after_step=np.array(nfe_marks))


def solve_segmented(field, x_init, boundaries, per_segment_spec: SolverSpec) -> SolverRun:
    """Solve each [t_k, t_{k+1}] with the per-segment spec and concatenate.

    The state carries over, so the trajectory is continuous at boundaries;
    total NFE is the sum over segments.
    """
    boundaries = np.asarray(boundaries, dtype=np.float64)
    if boundaries.ndim != 1 or boundaries.size < 2 or not np.all(np.diff(boundaries) > 0):
        raise ConfigError("segment boundaries must be strictly increasing with >= 2 entries")
    x = np.atleast_2d(np.asarray(x_init, dtype=np.float64))
    all_times = [np.array([boundaries[0]])]
    all_states = [x[None].copy()]
    all_h = []
    all_marks = []
    nfe = accepted = rejected = 0
    for k in range(boundaries.size - 1):
        seg_spec = dataclasses.replace(per_segment_spec, interval=(boundaries[k], boundaries[k + 1]))
        run = solve(field, x, seg_spec)
        all_times.append(run.times[1:])
        all_states.append(run.states[1:])
        all_h.append(run.step_sizes)
        if run.nfe_after_step is not None:
            all_marks.append(nfe + run.nfe_after_step)
        nfe += run.nfe
        accepted += run.accepted
        rejected += run.rejected
        x = run.final
    full_spec = dataclasses.replace(per_segment_spec, interval=(boundaries[0], boundaries[-1]))
    return SolverRun(
        np.concatenate(all_times),
        np.concatenate(all_states),
        nfe,
        accepted,
        rejected,
        np.concatenate(all_h) if all_h else np.empty(0),
        full_spec,
        nfe_after_step=np.concatenate(all_marks) if all_marks else None,
    )


@dataclass
class TruncationReport:
    """Per-step restart local errors and the endpoint global error.

    ``local_errors[i, p]`` is the L2 distance at t_{i+1} between the solver
    step from (t_i, x_i) and the oracle restarted at the same point; the
    per-unit-time rate is ``local_errors[i] / |h_i|``. ``gte[p]`` is the L2
    endpoint distance to the oracle solution started from the original
    initial condition.
    """

    times: np.ndarray  # (m+1,)
    step_sizes: np.ndarray  # (m,)
    local_errors: np.ndarray  # (m, n)
    gte: np.ndarray  # (n,)
    oracle_desc: str
    run: SolverRun

    @property
    def lte_rate(self) -> np.ndarray:
        return self.local_errors / np.abs(self.step_sizes)[:, None]

    @property
    def mean_gte(self) -> float:
        return float(np.mean(self.gte))


def _oracle_solution(field, x, t0, t1, oracle, full_interval):
    if oracle is None:
        return field.exact_solution(x, t0, t1)
    # fine-grid reference: scale the full-interval step budget to the subinterval
    if oracle.method in FIXED_METHODS:
        frac = abs(t1 - t0) / abs(full_interval[1] - full_interval[0])
        n_sub = max(1, int(np.ceil(oracle.n_steps * frac)))
        sub = dataclasses.replace(oracle, interval=(t0, t1), n_steps=n_sub)
    else:
        sub = dataclasses.replace(oracle, interval=(t0, t1))
    return solve(field, x, sub).final


def measure_gte(field, x_init, spec: SolverSpec, oracle: SolverSpec | None = None,
                per_step=True) -> TruncationReport:
    """Run the solver and measure truncation errors against an oracle.

    ``oracle=None`` uses the field's closed-form ``exact_solution``; passing
    a SolverSpec uses a fine-grid reference solve of the same field instead
    (required for learned fields, which have no closed form).
    """
    if oracle is None and not hasattr(field, "exact_solution"):
        raise ConfigError("field has no closed form; pass a fine-grid oracle SolverSpec")
    run = solve(field, x_init, spec)
    a, b = spec.interval
    ref_end = _oracle_solution(field, run.states[0], a, b, oracle, spec.interval)
    gte = np.linalg.norm(ref_end - run.final, axis=1)
    m = run.step_sizes.size
    if per_step:
        local = np.empty((m, run.states.shape[1]))
        for i in range(m):
            ref = _oracle_solution(
                field, run.states[i], run.times[i], run.times[i + 1], oracle, spec.interval
            )
            local[i] = np.linalg.norm(ref - run.states[i + 1], axis=1)
    else:
        local = np.zeros((0, run.states.shape[1]))
    desc = "closed-form" if oracle is None else oracle.describe()
    return TruncationReport(run.times, run.step_sizes, local, gte, desc, run)


def gte_bound_from_lte(report: TruncationReport, m_sup: float) -> np.ndarray:
    """Quadrature of the Grönwall bound: sum_i lte_i * exp(M (b - t_{i+1})).

    With the restart definition of the local error this telescopes to the
    exact global error when the field's growth rate equals +M, so the bound
    is tight there and conservative otherwise.
    """
    if report.local_errors.shape[0] != report.step_sizes.size:
        raise ConfigError("report carries no per-step local errors")
    b = report.times[-1]
    amp = np.exp(m_sup * np.abs(b - report.times[1:]))
    return (report.local_errors * amp[:, None]).sum(axis=0)


@dataclass
class OrderFit:
    order: float
    h_values: np.ndarray
    gte_values: np.ndarray
    residual: float
    reliable: bool


def empirical_order(field, x_init, method, interval, n_list, oracle: SolverSpec | None = None) -> OrderFit:
    """Least-squares slope of log GTE vs log h over a family of step counts."""
    n_list = sorted(int(n) for n in n_list)
    if len(n_list) < 3:
        raise ConfigError("need at least 3 step counts for an order fit")
    span = abs(interval[1] - interval[0])
    if n_list[-1] / n_list[0] < 4:
        raise ConfigError("step counts must span at least a factor of 4 in h")
    hs, gtes = [], []
    for n in n_list:
        spec = SolverSpec(method, interval=interval, n_steps=n)
        rep = measure_gte(field, x_init, spec, oracle=oracle, per_step=False)
        hs.append(span / n)
        gtes.append(rep.mean_gte)
    hs = np.asarray(hs)
    gtes = np.asarray(gtes)
    scale = float(np.max(np.abs(x_init))) + 1.0
    reliable = bool(np.all(gtes > 1e-13 * scale))
    coeffs, res = np.polyfit(np.log(hs), np.log(np.maximum(gtes, 1e-300)), 1, full=True)[:2]
    residual = float(res[0]) if len(res) else 0.0
    return OrderFit(float(coeffs[0]), hs, gtes, residual, reliable)


@dataclass
class SegmentScalingStudy:
    k_values: np.ndarray
    total_errors: np.ndarray  # sum over segments of per-unit-length endpoint errors
    raw_errors: np.ndarray  # plain sum of per-segment endpoint errors
    slope: float  # log total_errors vs log K


def segment_scaling_study(field, x_init, interval, method, n_per_segment, k_list) -> SegmentScalingStudy:
    """Error of oracle-restarted segmented solves versus the segment count K.

    Each segment keeps the K=1 baseline's step count (so the in-segment step
    is h/K) and starts from the exact solution at its boundary, so only
    within-segment error accumulates. Per-segment endpoint errors are
    normalized by segment length before summing: the K^(1-p) law treats each
    segment as a scale-free subproblem with GTE O((h/K)^p), and the raw sum
    would carry an extra 1/K length factor (scaling as K^-p instead).
    """
    if not hasattr(field, "exact_solution"):
        raise ConfigError("segment scaling study needs a closed-form field")
    a, b = interval
    x0 = np.atleast_2d(np.asarray(x_init, dtype=np.float64))
    ks, totals, raws = [], [], []
    for k_count in k_list:
        bounds = np.linspace(a, b, int(k_count) + 1)
        total = raw = 0.0
        for k in range(int(k_count)):
            x_start = field.exact_solution(x0, a, bounds[k])
            spec = SolverSpec(method, interval=(bounds[k], bounds[k + 1]), n_steps=n_per_segment)
            run = solve(field, x_start, spec)
            ref = field.exact_solution(x0, a, bounds[k + 1])
            err = float(np.mean(np.linalg.norm(run.final - ref, axis=1)))
            raw += err
            total += err / (bounds[k + 1] - bounds[k])
        ks.append(float(k_count))
        totals.append(total)
        raws.append(raw)
    ks = np.asarray(ks)
    totals = np.asarray(totals)
    slope = float(np.polyfit(np.log(ks), np.log(totals), 1)[0])
    return SegmentScalingStudy(ks, totals, np.asarray(raws), slope)
