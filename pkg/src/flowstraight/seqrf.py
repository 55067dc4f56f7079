"""Sequential reflow: time segmentation, joint-pair generation by partial
ODE solves, segment-slope fine-tuning, per-segment distillation, and
few-step sampling.

Pairs are (x_src at t_k, solver output at t_{k+1}); the regression target
is always the segment's constant slope (x_dst - x_src) / (t_dst - t_src).
With K=1 the whole machinery degenerates to plain reflow: noise-to-data
pairs and the full-interval slope.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import PairDataset, params_hash
from .errors import ConfigError, DataError, DivergenceError, NonFiniteGradError
from .solvers import SolverSpec, solve, solve_segmented
from .training import LossRecord, TrainConfig

log = logging.getLogger(__name__)


def make_segmentation(k: int, a: float = 0.0, b: float = 1.0) -> np.ndarray:
    """Uniform boundaries t_i = a + (i/K)(b - a), i = 0..K."""
    if k < 1:
        raise ConfigError(f"segment count must be >= 1, got {k}")
    if not b > a:
        raise ConfigError(f"bad segmentation interval ({a}, {b})")
    return a + (b - a) * np.arange(k + 1) / k


def _solve_surviving(field, x, spec):
    """Vectorized solve that isolates diverging rows by bisection.

    Returns (final states, ok mask, per-trajectory NFE tally). Rows whose
    sub-solve diverged come back masked out.
    """
    n = x.shape[0]
    try:
        run = solve(field, x, spec)
        return run.final, np.ones(n, dtype=bool), n * run.nfe
    except DivergenceError:
        if n == 1:
            return np.full_like(x, np.nan), np.zeros(1, dtype=bool), 0
        half = n // 2
        f1, ok1, nfe1 = _solve_surviving(field, x[:half], spec)
        f2, ok2, nfe2 = _solve_surviving(field, x[half:], spec)
        return np.concatenate([f1, f2]), np.concatenate([ok1, ok2]), nfe1 + nfe2


def generate_pairs(field, boundaries, per_segment_n, solver_spec: SolverSpec,
                   coupling, rng, generator_hash: str = "") -> PairDataset:
    """Generate the joint dataset: interpolant sources, partial-solve targets.

    For each segment k the source is x_src = (1 - t_k) x0 + t_k x1 with a
    fresh independent endpoint pair, and the destination is the solver
    endpoint of the field over [t_k, t_{k+1}] started at x_src. Diverged
    records are dropped; more than 1% drops is a generation error.
    """
    boundaries = np.asarray(boundaries, dtype=np.float64)
    if per_segment_n < 1:
        raise ConfigError("per_segment_n must be >= 1")
    k_total = boundaries.size - 1
    seg_list, src_list, dst_list = [], [], []
    total_nfe = 0
    dropped = 0
    for k in range(k_total):
        x0, x1 = coupling.draw(per_segment_n, rng)
        t_k = boundaries[k]
        x_src = (1.0 - t_k) * x0 + t_k * x1
        spec = dataclasses.replace(solver_spec, interval=(boundaries[k], boundaries[k + 1]))
        x_dst, ok, nfe = _solve_surviving(field, x_src, spec)
        total_nfe += nfe
        dropped += int((~ok).sum())
        seg_list.append(np.full(int(ok.sum()), k, dtype=np.int64))
        src_list.append(x_src[ok])
        dst_list.append(x_dst[ok])
    total = per_segment_n * k_total
    if dropped > 0.01 * total:
        raise DataError(f"pair generation dropped {dropped}/{total} records (> 1%)")
    if dropped:
        log.warning("pair generation dropped %d/%d diverged records", dropped, total)
    ds = PairDataset(
        boundaries=boundaries,
        segment=np.concatenate(seg_list),
        x_src=np.concatenate(src_list),
        x_dst=np.concatenate(dst_list),
        solver_desc=solver_spec.describe(),
        generator_hash=generator_hash or (params_hash(field.params) if hasattr(field, "params") else ""),
        total_nfe=total_nfe,
    )
    ds.validate()
    return ds


def seqrf_loss(params: nn.MlpParams, x_src, x_dst, t_src, t_dst, r):
    """Segment-slope regression at the blended point.

    s = t_src + r (t_dst - t_src), x_s = (1 - r) x_src + r x_dst,
    loss = mean ||v(x_s, s) - (x_dst - x_src) / (t_dst - t_src)||^2.
    """
    x_src = np.atleast_2d(np.asarray(x_src, dtype=np.float64))
    x_dst = np.atleast_2d(np.asarray(x_dst, dtype=np.float64))
    t_src = np.broadcast_to(np.asarray(t_src, dtype=np.float64), x_src.shape[:1])
    t_dst = np.broadcast_to(np.asarray(t_dst, dtype=np.float64), x_src.shape[:1])
    if np.any(t_dst == t_src):
        raise DataError("degenerate segment: t_dst == t_src")
    r = np.broadcast_to(np.asarray(r, dtype=np.float64), x_src.shape[:1])
    s = t_src + r * (t_dst - t_src)
    xs = (1.0 - r)[:, None] * x_src + r[:, None] * x_dst
    target = (x_dst - x_src) / (t_dst - t_src)[:, None]
    v = nn.forward(params, xs, s)
    resid = v - target
    n = x_src.shape[0]
    loss = float((resid * resid).sum() / n)
    grads = nn.backward(params, xs, s, (2.0 / n) * resid)
    per_sample = (resid * resid).sum(axis=1)
    return loss, grads, per_sample


def distill_loss(params: nn.MlpParams, x_src, x_dst, t_src, t_dst):
    """Same target with the time pinned to the segment start (r = 0)."""
    return seqrf_loss(params, x_src, x_dst, t_src, t_dst, 0.0)


@dataclass
class Stage2Result:
    params: nn.MlpParams
    ema: nn.EmaState
    adam: nn.AdamState
    records: list[LossRecord] = field(default_factory=list)
    segment_losses: list[np.ndarray] = field(default_factory=list)  # per record, (K,)


def train_stage2(init_params: nn.MlpParams, pairs: PairDataset, mode: str,
                 cfg: TrainConfig) -> Stage2Result:
    """Fine-tune on a fixed pair dataset (mode "reflow" or "distill").

    Each batch element draws a segment uniformly, then a record uniformly
    within it; reflow blends with r ~ U(0,1), distillation pins r = 0.
    """
    if mode not in ("reflow", "distill"):
        raise ConfigError(f"unknown stage-2 mode {mode!r}")
    if pairs.n_records == 0:
        raise DataError("stage-2 training needs a non-empty pair dataset")
    counts = pairs.segment_counts()
    if np.any(counts == 0):
        raise DataError("every segment needs at least one pair record")
    order = np.argsort(pairs.segment, kind="stable")
    seg_sorted = pairs.segment[order]
    src_sorted = pairs.x_src[order]
    dst_sorted = pairs.x_dst[order]
    offsets = np.concatenate([[0], np.cumsum(counts)])
    k_total = pairs.n_segments
    boundaries = pairs.boundaries

    rng = np.random.default_rng(cfg.seed)
    params = init_params.copy()
    adam = nn.AdamState.fresh(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    ema = nn.EmaState.fresh(params, decay=cfg.ema_decay, warmup=cfg.ema_warmup)
    result = Stage2Result(params, ema, adam)
    consecutive_bad = 0
    t_start = time.perf_counter()
    for step in range(cfg.steps):
        seg = rng.integers(0, k_total, size=cfg.batch_size)
        within = rng.integers(0, counts[seg])
        idx = offsets[seg] + within
        r = rng.uniform(0.0, 1.0, size=cfg.batch_size) if mode == "reflow" else np.zeros(cfg.batch_size)
        try:
            loss, grads, per_sample = seqrf_loss(
                params, src_sorted[idx], dst_sorted[idx],
                boundaries[seg_sorted[idx]], boundaries[seg_sorted[idx] + 1], r,
            )
            if not np.isfinite(loss):
                raise NonFiniteGradError(f"non-finite loss {loss}")
            params, adam = nn.adam_step(params, grads, adam)
        except NonFiniteGradError as exc:
            consecutive_bad += 1
            log.warning("stage-2 step %d skipped: %s (%d consecutive)", step, exc, consecutive_bad)
            if consecutive_bad >= 10:
                raise DivergenceError(
                    f"stage-2 training diverged: 10 consecutive bad batches at step {step}",
                    partial=result,
                ) from exc
            continue
        consecutive_bad = 0
        ema = nn.ema_update(ema, params, step)
        seg_hits = np.bincount(seg, minlength=k_total).astype(float)
        seg_loss = np.bincount(seg, weights=per_sample, minlength=k_total)
        with np.errstate(invalid="ignore"):
            seg_loss = np.where(seg_hits > 0, seg_loss / np.maximum(seg_hits, 1), np.nan)
        result.records.append(LossRecord(step, loss, nn.grad_norm(grads), time.perf_counter() - t_start))
        result.segment_losses.append(seg_loss)
        result.params, result.ema, result.adam = params, ema, adam
    return result


def sample(field, boundaries, n, noise_dist, rng, solver_spec: SolverSpec | None = None,
           distilled: bool = False):
    """Draw n noise points and transport them to the data end.

    Distilled mode takes one Euler step per segment (NFE = K); otherwise
    each segment is solved with the per-segment solver spec.

    Returns (samples, nfe).
    """
    boundaries = np.asarray(boundaries, dtype=np.float64)
    x = noise_dist.sample(n, rng)
    if distilled:
        nfe = 0
        for k in range(boundaries.size - 1):
            h = boundaries[k + 1] - boundaries[k]
            x = x + h * field(x, boundaries[k])
            nfe += 1
        if not np.all(np.isfinite(x)):
            raise DivergenceError("distilled sampling produced non-finite points")
        return x, nfe
    if solver_spec is None:
        raise ConfigError("solver sampling needs a per-segment solver spec")
    run = solve_segmented(field, x, boundaries, solver_spec)
    return run.final, run.nfe
