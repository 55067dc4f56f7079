"""Stage-1 training: conditional flow matching / rectified flow regression.

The loss regresses the network velocity at interpolated points onto the
straight-line target x1 - x0, with per-sample uniform times. The optimizer
state is owned by one loop; evaluation always reads the EMA shadow.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, DivergenceError, NonFiniteGradError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    steps: int = 5000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.999
    ema_warmup: bool = True
    seed: int = 0
    time_sampling: str = "uniform"
    loss_reduction: str = "mean"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.time_sampling != "uniform":
            raise ConfigError(f"unsupported time sampling {self.time_sampling!r}")
        if self.loss_reduction != "mean":
            raise ConfigError(f"unsupported loss reduction {self.loss_reduction!r}")


@dataclass
class LossRecord:
    step: int
    loss: float
    grad_norm: float
    seconds: float  # wall time; kept out of the deterministic CSV contract


@dataclass
class TrainResult:
    params: nn.MlpParams
    ema: nn.EmaState
    adam: nn.AdamState
    records: list[LossRecord] = field(default_factory=list)


def cfm_loss(params: nn.MlpParams, x0, x1, t):
    """Mean over the batch of ||v(x_t, t) - (x1 - x0)||^2, plus gradients.

    x_t = (1 - t) x0 + t x1 per sample; t may be scalar or per-sample.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    if x0.shape != x1.shape:
        raise ValueError(f"x0 shape {x0.shape} != x1 shape {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    tv = np.full(x0.shape[0], float(t)) if t.ndim == 0 else t
    xt = (1.0 - tv)[:, None] * x0 + tv[:, None] * x1
    v = nn.forward(params, xt, tv)
    resid = v - (x1 - x0)
    n = x0.shape[0]
    loss = float((resid * resid).sum() / n)
    grads = nn.backward(params, xt, tv, (2.0 / n) * resid)
    return loss, grads


def train_stage1(init_params: nn.MlpParams, coupling, cfg: TrainConfig) -> TrainResult:
    """Alg. Stage-1 loop over a coupling with .draw(n, rng) endpoint pairs.

    Non-finite batches are skipped and logged; ten consecutive skips abort
    with the last finite state attached to the raised DivergenceError.
    """
    rng = np.random.default_rng(cfg.seed)
    params = init_params.copy()
    adam = nn.AdamState.fresh(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    ema = nn.EmaState.fresh(params, decay=cfg.ema_decay, warmup=cfg.ema_warmup)
    records: list[LossRecord] = []
    result = TrainResult(params, ema, adam, records)
    consecutive_bad = 0
    t_start = time.perf_counter()
    for step in range(cfg.steps):
        x0, x1 = coupling.draw(cfg.batch_size, rng)
        t = rng.uniform(0.0, 1.0, size=cfg.batch_size)
        try:
            loss, grads = cfm_loss(params, x0, x1, t)
            if not np.isfinite(loss):
                raise NonFiniteGradError(f"non-finite loss {loss}")
            params, adam = nn.adam_step(params, grads, adam)
        except NonFiniteGradError as exc:
            consecutive_bad += 1
            log.warning("step %d skipped: %s (%d consecutive)", step, exc, consecutive_bad)
            if consecutive_bad >= 10:
                raise DivergenceError(
                    f"training diverged: 10 consecutive bad batches at step {step}", partial=result
                ) from exc
            continue
        consecutive_bad = 0
        ema = nn.ema_update(ema, params, step)
        records.append(LossRecord(step, loss, nn.grad_norm(grads), time.perf_counter() - t_start))
        result.params, result.ema, result.adam = params, ema, adam
    return result


@dataclass
class GradCheckReport:
    """Paired Monte-Carlo comparison of the FM and CFM objective gradients."""

    n_mc: int
    mean_diff: np.ndarray  # (P,) mean per-coordinate gradient difference (CFM - FM)
    se_diff: np.ndarray  # (P,) standard error of that mean
    frac_outside: float  # fraction of coordinates with |mean| > 3 se
    constant_c: float  # mean of ||v-u_cond||^2 - ||v-u_marg||^2 (Prop-style gap)
    constant_c_se: float
    grad_fm: np.ndarray  # (P,) MC gradient of the marginal-target objective
    grad_cfm: np.ndarray  # (P,) MC gradient of the conditional-target objective
    status: str  # "ok" | "inconclusive"


def fm_cfm_gradient_check(params: nn.MlpParams, marginal_field, coupling, n_mc,
                          rng, chunk=4096) -> GradCheckReport:
    """Check that the FM and CFM objectives agree in gradient, per coordinate.

    Both estimators consume the same (x_t, t) stream: the conditional target
    is x1 - x0, the marginal target is marginal_field(x_t, t). Per-sample
    gradient differences are 2 J^T (u_marg - u_cond), whose mean should be
    zero within Monte-Carlo error. ``status`` is "inconclusive" when the
    standard error is too large to resolve a discrepancy comparable to the
    gradient magnitude itself.
    """
    if n_mc < 2:
        raise ConfigError("need n_mc >= 2")
    p = params.n_params
    sum_d = np.zeros(p)
    sumsq_d = np.zeros(p)
    g_fm = np.zeros(p)
    g_cfm = np.zeros(p)
    sum_c = 0.0
    sumsq_c = 0.0
    done = 0
    while done < n_mc:
        m = min(chunk, n_mc - done)
        t = rng.uniform(0.0, 1.0, size=m)
        x0, x1 = coupling.draw(m, rng)
        xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
        u_cond = x1 - x0
        u_marg = marginal_field(xt, t)
        v = nn.forward(params, xt, t)
        diffs = nn.per_sample_grads(params, xt, t, 2.0 * (u_marg - u_cond))
        sum_d += diffs.sum(axis=0)
        sumsq_d += (diffs * diffs).sum(axis=0)
        g_cfm += nn.flatten_grads(nn.backward(params, xt, t, 2.0 * (v - u_cond)))
        g_fm += nn.flatten_grads(nn.backward(params, xt, t, 2.0 * (v - u_marg)))
        c_samples = ((v - u_cond) ** 2).sum(axis=1) - ((v - u_marg) ** 2).sum(axis=1)
        sum_c += float(c_samples.sum())
        sumsq_c += float((c_samples * c_samples).sum())
        done += m
    mean_d = sum_d / n_mc
    var_d = np.maximum(sumsq_d / n_mc - mean_d**2, 0.0)
    se_d = np.sqrt(var_d / n_mc)
    with np.errstate(invalid="ignore"):
        outside = np.where(se_d > 0, np.abs(mean_d) > 3.0 * se_d, mean_d != 0.0)
    mean_c = sum_c / n_mc
    se_c = float(np.sqrt(max(sumsq_c / n_mc - mean_c**2, 0.0) / n_mc))
    g_fm /= n_mc
    g_cfm /= n_mc
    rms_se = float(np.sqrt(np.mean(se_d**2)))
    rms_grad = float(np.sqrt(np.mean(g_fm**2)))
    status = "ok" if 3.0 * rms_se <= max(0.25 * rms_grad, 1e-9) else "inconclusive"
    return GradCheckReport(
        n_mc, mean_d, se_d, float(np.mean(outside)), mean_c, se_c, g_fm, g_cfm, status
    )
