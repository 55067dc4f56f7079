"""The `flowstraight` command: pipeline orchestration and report emission.

Every command reads a JSON config, does its work inside a run directory,
writes CSV reports (the deterministic contract), renders a PNG next to each
CSV under figures/, and finalizes the run with an atomically-written
manifest listing content hashes of every output. Exit codes: 0 ok,
2 configuration, 3 data/format, 4 numeric divergence.
"""

from __future__ import annotations

import os

# Cap BLAS/OpenMP parallelism before numpy is imported anywhere below.
_threads = os.environ.get("FLOWSTRAIGHT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import dataclasses
import logging
import shutil
import sys

import numpy as np

from . import data, fields, metrics, nn, plotting, seqrf, solvers, training
from .config import load_config
from .errors import ConfigError, FlowstraightError
from .solvers import SolverSpec

log = logging.getLogger("flowstraight")


# ---------------------------------------------------------------------------
# helpers


class _Run:
    """A run directory: collects output paths for the final manifest."""

    def __init__(self, out_dir, run_id, seed, config_path, config_hash):
        self.dir = out_dir
        self.run_id = run_id
        self.seed = seed
        self.config_hash = config_hash
        self.outputs = []
        self.inputs = {}
        os.makedirs(out_dir, exist_ok=True)
        os.makedirs(os.path.join(out_dir, "figures"), exist_ok=True)
        copied = os.path.join(out_dir, "config.json")
        if os.path.abspath(config_path) != os.path.abspath(copied):
            shutil.copyfile(config_path, copied)

    def path(self, name):
        p = os.path.join(self.dir, name)
        self.outputs.append(p)
        return p

    def figure(self, name):
        return os.path.join(self.dir, "figures", name)

    def note_input(self, name, path):
        self.inputs[name] = data.sha256_file(path)

    def finalize(self, extra=None):
        doc = data.write_manifest(
            self.dir, self.run_id, self.seed, self.config_hash, self.inputs, self.outputs, extra
        )
        return doc


def _require(cfg, key, cmd):
    if key not in cfg:
        raise ConfigError(f"'{cmd}' needs a '{key}' config section")
    return cfg[key]


def _coupling_from_cfg(cfg, cmd):
    sec = _require(cfg, "data", cmd)
    if "source" not in sec or "target" not in sec:
        raise ConfigError("data section needs 'source' and 'target' distributions")
    return fields.IndependentCoupling(
        data.distribution_from_spec(sec["source"]), data.distribution_from_spec(sec["target"])
    )


def _noise_from_cfg(cfg, cmd):
    sec = _require(cfg, "data", cmd)
    return data.distribution_from_spec(sec["source"])


def _model_params(cfg, dim, seed):
    sec = cfg.get("model", {})
    return nn.init_mlp(
        dim,
        hidden=tuple(sec.get("hidden", [64, 64])),
        n_freqs=sec.get("n_freqs", 16),
        activation=sec.get("activation", "silu"),
        rng=np.random.default_rng([seed, 0]),
    )


def _train_config(sec, seed):
    return training.TrainConfig(
        batch_size=sec.get("batch_size", 256),
        steps=sec.get("steps", 4000),
        lr=sec.get("lr", 2e-3),
        beta1=sec.get("beta1", 0.9),
        beta2=sec.get("beta2", 0.999),
        eps=sec.get("eps", 1e-8),
        ema_decay=sec.get("ema_decay", 0.999),
        ema_warmup=sec.get("ema_warmup", True),
        seed=seed,
    )


def _solver_spec(sec, args=None, interval=(0.0, 1.0)):
    method = sec.get("method", "rk4")
    if args is not None and args.solver:
        method = args.solver
    kwargs = dict(interval=tuple(interval))
    if method == "rk45":
        tol_sec = sec.get("rtol", 1e-6)
        if args is not None and args.tol is not None:
            tol_sec = args.tol
        kwargs.update(rtol=tol_sec, atol=sec.get("atol", tol_sec * 1e-3))
        if "h_init" in sec:
            kwargs.update(h_init=sec["h_init"])
    else:
        n = sec.get("n_steps", 25)
        kwargs.update(n_steps=n)
    return SolverSpec(method, **kwargs)


def _load_eval_field(path, run=None):
    ckpt = data.load_checkpoint(path)
    if run is not None:
        run.note_input(os.path.basename(path), path)
    return fields.MlpField(ckpt.eval_params), data.params_hash(ckpt.eval_params)


def _write_loss_csv(run, name, records, seg_losses=None, k=None):
    if seg_losses is None:
        cols = ["step", "loss", "grad_norm"]
        rows = [(r.step, r.loss, r.grad_norm) for r in records]
    else:
        cols = ["step", "loss", "grad_norm"] + [f"loss_seg{j}" for j in range(k)]
        rows = [
            (r.step, r.loss, r.grad_norm) + tuple(sl) for r, sl in zip(records, seg_losses)
        ]
    path = run.path(name)
    data.write_csv(path, cols, rows, meta={"metric": "training_loss", "seed": run.seed})
    if records:
        plotting.loss_curve(
            [r.step for r in records], [r.loss for r in records],
            run.figure(name.replace(".csv", ".png")),
        )
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg, args, run: _Run):
    coupling = _coupling_from_cfg(cfg, "train")
    dim = coupling.source.dim
    params = _model_params(cfg, dim, run.seed)
    tcfg = _train_config(_require(cfg, "train", "train"), run.seed)
    result = training.train_stage1(params, coupling, tcfg)
    data.save_checkpoint(run.path("stage1.fsck"), result.params, result.ema, result.adam)
    _write_loss_csv(run, "loss.csv", result.records)
    seconds = result.records[-1].seconds if result.records else 0.0
    run.finalize(extra={"command": "train", "wall_seconds": seconds})
    return 0


def cmd_reflow(cfg, args, run: _Run):
    ckpt_path = args.checkpoint
    if not ckpt_path:
        raise ConfigError("reflow needs --checkpoint (the stage-1 model)")
    field, field_hash = _load_eval_field(ckpt_path, run)
    coupling = _coupling_from_cfg(cfg, "reflow")
    k = args.k or cfg.get("segmentation", {}).get("k", 1)
    boundaries = seqrf.make_segmentation(k)
    sec = cfg.get("reflow", {})
    spec = _solver_spec(cfg.get("solver", {}), args)
    pairs = seqrf.generate_pairs(
        field, boundaries, sec.get("per_segment_n", 16384), spec, coupling,
        np.random.default_rng([run.seed, 1]), generator_hash=field_hash,
    )
    data.save_pairs(run.path(f"pairs_k{k}.fspd"), pairs)
    base = data.load_checkpoint(ckpt_path)
    if sec.get("cold_start", False):
        init = _model_params(cfg, base.params.data_dim, run.seed)
    else:
        init = base.eval_params
    tcfg = _train_config(sec.get("train", {"steps": 600, "lr": 2e-4}), run.seed)
    result = seqrf.train_stage2(init, pairs, "reflow", tcfg)
    data.save_checkpoint(run.path(f"seqrf_k{k}.fsck"), result.params, result.ema, result.adam)
    _write_loss_csv(run, f"stage2_loss_k{k}.csv", result.records, result.segment_losses, k)
    run.finalize(extra={"command": "reflow", "k": k, "pairs_nfe": pairs.total_nfe})
    return 0


def cmd_distill(cfg, args, run: _Run):
    if not args.checkpoint:
        raise ConfigError("distill needs --checkpoint (the model to fine-tune)")
    if not args.pairs:
        raise ConfigError("distill needs --pairs (the reflow pair dataset)")
    base = data.load_checkpoint(args.checkpoint)
    run.note_input(os.path.basename(args.checkpoint), args.checkpoint)
    pairs = data.load_pairs(args.pairs)
    run.note_input(os.path.basename(args.pairs), args.pairs)
    k = pairs.n_segments
    sec = cfg.get("reflow", {})
    tcfg = _train_config(sec.get("train", {"steps": 2500, "lr": 1e-3}), run.seed)
    result = seqrf.train_stage2(base.eval_params, pairs, "distill", tcfg)
    data.save_checkpoint(run.path(f"distill_k{k}.fsck"), result.params, result.ema, result.adam)
    _write_loss_csv(run, f"distill_loss_k{k}.csv", result.records, result.segment_losses, k)
    run.finalize(extra={"command": "distill", "k": k})
    return 0


def cmd_sample(cfg, args, run: _Run):
    if not args.checkpoint:
        raise ConfigError("sample needs --checkpoint")
    field, field_hash = _load_eval_field(args.checkpoint, run)
    noise = _noise_from_cfg(cfg, "sample")
    sec = cfg.get("sample", {})
    n = sec.get("n", 512)
    mode = sec.get("mode", "solver")
    k = args.k or cfg.get("segmentation", {}).get("k", 1)
    boundaries = seqrf.make_segmentation(k)
    rng = np.random.default_rng([run.seed, 2])
    if mode == "distilled":
        points, nfe = seqrf.sample(field, boundaries, n, noise, rng, distilled=True)
        solver_desc = f"distilled-euler-{k}"
    elif mode == "solver":
        spec = _solver_spec(cfg.get("solver", {}), args)
        if args.nfe:
            per_step = solvers.NFE_PER_STEP.get(spec.method)
            if per_step is None:
                raise ConfigError("--nfe applies to fixed-step solvers only")
            budget = int(args.nfe[0])
            n_steps = max(1, budget // (per_step * k))
            spec = dataclasses.replace(spec, n_steps=n_steps)
        points, nfe = seqrf.sample(field, boundaries, n, noise, rng, solver_spec=spec)
        solver_desc = spec.describe()
    else:
        raise ConfigError(f"unknown sample mode {mode!r}")
    cols = [f"x{d}" for d in range(points.shape[1])]
    path = run.path("samples.csv")
    data.write_csv(
        path, cols, points.tolist(),
        meta={"metric": "samples", "field": field_hash, "solver": solver_desc,
              "seed": run.seed, "n": n, "nfe": nfe, "k": k},
    )
    reference = None
    if "data" in cfg and "target" in cfg["data"] and points.shape[1] == 2:
        reference = data.distribution_from_spec(cfg["data"]["target"]).sample(
            n, np.random.default_rng([run.seed, 3])
        )
    if points.shape[1] == 2:
        plotting.scatter_samples(points, run.figure("samples.png"), reference=reference)
    run.finalize(extra={"command": "sample", "nfe": nfe})
    return 0


def _eval_straightness(cfg, run, field, field_hash, coupling, sequential):
    msec = cfg.get("metrics", {})
    n = msec.get("n", 1024)
    k = cfg.get("segmentation", {}).get("k", 1) if sequential else 1
    boundaries = seqrf.make_segmentation(k)
    base = _solver_spec(cfg.get("solver", {"method": "rk4", "n_steps": 50}))
    per_seg = dataclasses.replace(base, n_steps=max(base.n_steps // k, 4)) if base.n_steps else base
    rng = np.random.default_rng([run.seed, 4])
    rep = metrics.sequential_straightness(field, boundaries, n, per_seg, coupling, rng)
    name = "seq_straightness.csv" if sequential else "straightness.csv"
    path = run.path(name)
    data.write_csv(
        path, ["t_mid", "mean_sq_deviation"],
        list(zip(rep.bin_times.tolist(), rep.bin_values.tolist())),
        meta={"metric": "seq_straightness" if sequential else "straightness",
              "field": field_hash, "solver": rep.solver_desc, "seed": run.seed,
              "n": n, "k": k, "value": rep.value},
    )
    plotting.straightness_curve(
        rep.bin_times, rep.bin_values, run.figure(name.replace(".csv", ".png")),
        boundaries=boundaries,
    )
    return rep.value


def cmd_eval(cfg, args, run: _Run):
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    field, field_hash = _load_eval_field(args.checkpoint, run)
    coupling = _coupling_from_cfg(cfg, "eval")
    noise = coupling.source
    msec = cfg.get("metrics", {})
    selected = msec.get("set", ["straightness", "seq_straightness", "gte_curve", "lipschitz"])
    summary = {}
    for metric in selected:
        if metric == "straightness":
            summary[metric] = _eval_straightness(cfg, run, field, field_hash, coupling, False)
        elif metric == "seq_straightness":
            summary[metric] = _eval_straightness(cfg, run, field, field_hash, coupling, True)
        elif metric == "gte_curve":
            nfe_list = [int(v) for v in (args.nfe or msec.get("nfe_list", [2, 4, 8, 16, 32]))]
            rep = metrics.gte_curve(
                field, nfe_list, msec.get("n", 1024), noise, np.random.default_rng([run.seed, 5])
            )
            path = run.path("gte_curve.csv")
            data.write_csv(
                path, ["nfe", "mean_gte"], list(zip(rep.nfe.tolist(), rep.mean_gte.tolist())),
                meta={"metric": "gte_curve", "field": field_hash, "solver": rep.oracle_desc,
                      "seed": run.seed, "n": rep.n},
            )
            plotting.gte_curve_plot([("model", rep.nfe, rep.mean_gte)], run.figure("gte_curve.png"))
        elif metric == "lipschitz":
            t_grid = msec.get("t_grid", [round(0.05 + 0.1 * i, 2) for i in range(10)])
            rep = metrics.lipschitz_estimate(
                field, t_grid, coupling, msec.get("n", 1024),
                msec.get("lipschitz_eps", 1e-3), np.random.default_rng([run.seed, 6]),
            )
            path = run.path("lipschitz.csv")
            data.write_csv(
                path, ["t", "lipschitz_lower_bound", "mean_sq_field_norm"],
                list(zip(rep.t_grid.tolist(), rep.m_hat.tolist(), rep.mean_sq_norm.tolist())),
                meta={"metric": "lipschitz", "field": field_hash, "solver": "none",
                      "seed": run.seed, "n": rep.n_probes, "eps": rep.eps},
            )
            plotting.lipschitz_plot(rep.t_grid, rep.m_hat, rep.mean_sq_norm, run.figure("lipschitz.png"))
        elif metric == "variance":
            if not args.pairs:
                raise ConfigError("the variance metric needs --pairs (the joint dataset)")
            pairs = data.load_pairs(args.pairs)
            run.note_input(os.path.basename(args.pairs), args.pairs)
            joint = fields.JointCoupling(pairs)
            b = pairs.boundaries
            t_values = [float((b[i] + b[i + 1]) / 2) for i in range(pairs.n_segments)]
            lo, hi, count = msec.get("variance_edges", [-3.0, 3.0, 13])
            edges = np.linspace(lo, hi, int(count))
            jv, iv, n_bins = metrics.compare_target_variance(
                joint, coupling, t_values, edges, msec.get("variance_draws", 8192),
                np.random.default_rng([run.seed, 7]),
                min_count=msec.get("variance_min_count", 16),
            )
            path = run.path("variance.csv")
            data.write_csv(
                path, ["k", "joint_target_var", "indep_target_var", "matched_bins"],
                [(pairs.n_segments, jv, iv, n_bins)],
                meta={"metric": "target_variance", "field": field_hash,
                      "solver": pairs.solver_desc, "seed": run.seed,
                      "n": msec.get("variance_draws", 8192)},
            )
            plotting.variance_bars([f"K={pairs.n_segments}"], [jv], [iv], run.figure("variance.png"))
            summary[metric] = (jv, iv)
        else:
            raise ConfigError(f"unknown metric {metric!r}")
    run.finalize(extra={"command": "eval", "summary": {k: v for k, v in summary.items() if v is not None}})
    return 0


def cmd_solve(cfg, args, run: _Run):
    sec = _require(cfg, "solve", "solve")
    field = fields.field_from_spec(sec["field"])
    x0 = np.atleast_2d(np.asarray(sec.get("x0", [[1.0]]), dtype=np.float64))
    interval = tuple(sec.get("interval", [0.0, 1.0]))
    spec = _solver_spec(sec.get("solver", {"method": "euler", "n_steps": 16}), args, interval)
    extra = {"command": "solve"}

    has_oracle = hasattr(field, "exact_solution")
    if has_oracle:
        rep = solvers.measure_gte(field, x0, spec)
        run_obj = rep.run
        lte_col = rep.local_errors.mean(axis=1)
        extra["mean_gte"] = rep.mean_gte
        if "lipschitz_const" in sec:
            bound = solvers.gte_bound_from_lte(rep, sec["lipschitz_const"])
            extra["gte_bound"] = float(np.mean(bound))
    else:
        run_obj = solvers.solve(field, x0, spec)
        lte_col = np.full(run_obj.step_sizes.size, float("nan"))
    if x0.shape[0] != 1:
        raise ConfigError("solve CSV export expects a single initial point")
    rows = []
    nfe_marks = run_obj.nfe_after_step
    for i in range(run_obj.times.size):
        state = run_obj.states[i, 0]
        h = run_obj.step_sizes[i - 1] if i > 0 else 0.0
        lte = lte_col[i - 1] if i > 0 else 0.0
        cum = int(nfe_marks[i - 1]) if (i > 0 and nfe_marks is not None) else 0
        rows.append((run_obj.times[i],) + tuple(state.tolist()) + (h, lte, cum))
    cols = ["t"] + [f"x{d}" for d in range(x0.shape[1])] + ["h", "lte", "cumulative_nfe"]
    data.write_csv(
        run.path("run.csv"), cols, rows,
        meta={"metric": "solver_run", "field": sec["field"]["kind"], "solver": spec.describe(),
              "seed": run.seed, "n": 1, "nfe": run_obj.nfe,
              "accepted": run_obj.accepted, "rejected": run_obj.rejected},
    )
    plotting.trajectory_plot(run_obj.times, run_obj.states, run.figure("run.png"))

    if "study_n_list" in sec:
        if not has_oracle:
            raise ConfigError("order study needs a closed-form field")
        methods = sec.get("study_methods", ["euler", "heun", "rk4"])
        rows, series, orders = [], [], {}
        for method in methods:
            fit = solvers.empirical_order(field, x0, method, interval, sec["study_n_list"])
            orders[method] = fit.order
            series.append((method, fit.h_values, fit.gte_values, fit.order))
            for h, g in zip(fit.h_values, fit.gte_values):
                rows.append((method, h, g))
            if not fit.reliable:
                log.warning("order fit for %s is near round-off; slope unreliable", method)
        meta = {"metric": "order_study", "field": sec["field"]["kind"],
                "solver": "+".join(methods), "seed": run.seed, "n": len(sec["study_n_list"])}
        meta.update({f"order_{m}": o for m, o in orders.items()})
        data.write_csv(run.path("orders.csv"), ["method", "h", "mean_gte"], rows, meta=meta)
        plotting.order_plot(series, run.figure("orders.png"))
        extra["orders"] = orders

    if "segment_k_list" in sec:
        if not has_oracle:
            raise ConfigError("segment scaling study needs a closed-form field")
        method = sec.get("solver", {}).get("method", "heun")
        study = solvers.segment_scaling_study(
            field, x0, interval, method, sec.get("segment_n_per", 4), sec["segment_k_list"]
        )
        data.write_csv(
            run.path("scaling.csv"), ["k", "normalized_error", "raw_error"],
            list(zip(study.k_values.tolist(), study.total_errors.tolist(), study.raw_errors.tolist())),
            meta={"metric": "segment_scaling", "field": sec["field"]["kind"], "solver": method,
                  "seed": run.seed, "n": sec.get("segment_n_per", 4), "slope": study.slope},
        )
        plotting.gte_curve_plot(
            [(f"{method} (slope {study.slope:.2f})", study.k_values, study.total_errors)],
            run.figure("scaling.png"), title="segmented error vs K",
        )
        extra["scaling_slope"] = study.slope

    run.finalize(extra=extra)
    return 0


# ---------------------------------------------------------------------------
# recipes: multi-stage pipelines plus comparison reports


def _resolve_refs(value, step_dirs):
    if isinstance(value, str):
        for i, d in enumerate(step_dirs):
            value = value.replace(f"$step{i}", d)
    return value


def cmd_recipe(cfg, args, run: _Run):
    steps = _require(cfg, "pipeline", "recipe")
    step_dirs = []
    handlers = {
        "train": cmd_train, "reflow": cmd_reflow, "distill": cmd_distill,
        "sample": cmd_sample, "eval": cmd_eval, "solve": cmd_solve,
    }
    for i, step in enumerate(steps):
        if not isinstance(step, dict) or "cmd" not in step:
            raise ConfigError(f"pipeline[{i}]: each step needs a 'cmd'")
        name = step.get("name", f"{i:02d}_{step['cmd']}")
        sub_dir = os.path.join(run.dir, name)
        if step["cmd"] in handlers:
            sub_args = argparse.Namespace(
                checkpoint=_resolve_refs(step.get("checkpoint"), step_dirs),
                pairs=_resolve_refs(step.get("pairs"), step_dirs),
                k=step.get("k"),
                nfe=step.get("nfe"),
                solver=step.get("solver"),
                tol=step.get("tol"),
            )
            sub_cfg = dict(cfg)
            sub_cfg.update(step.get("config", {}))
            sub_run = _Run(sub_dir, f"{run.run_id}/{name}", step.get("seed", run.seed),
                           os.path.join(run.dir, "config.json"), run.config_hash)
            handlers[step["cmd"]](sub_cfg, sub_args, sub_run)
        elif step["cmd"] == "gte_compare":
            _step_gte_compare(cfg, step, run, step_dirs)
        elif step["cmd"] == "sseq_compare":
            _step_sseq_compare(cfg, step, run, step_dirs)
        elif step["cmd"] == "w2_table":
            _step_w2_table(cfg, step, run, step_dirs)
        elif step["cmd"] == "variance_compare":
            _step_variance_compare(cfg, step, run, step_dirs)
        else:
            raise ConfigError(f"pipeline[{i}]: unknown step command {step['cmd']!r}")
        step_dirs.append(sub_dir)
    run.finalize(extra={"command": "recipe", "steps": [s["cmd"] for s in steps]})
    return 0


def _step_gte_compare(cfg, step, run, step_dirs):
    noise = _noise_from_cfg(cfg, "gte_compare")
    nfe_list = [int(v) for v in step.get("nfe", [4, 8])]
    labels = step.get("labels", [f"model{i}" for i in range(len(step["checkpoints"]))])
    curves = []
    for path in step["checkpoints"]:
        field, _ = _load_eval_field(_resolve_refs(path, step_dirs), run)
        curves.append(metrics.gte_curve(
            field, nfe_list, step.get("n", 512), noise, np.random.default_rng([run.seed, 8])
        ))
    cols = ["nfe"] + [f"gte_{lab}" for lab in labels]
    rows = [tuple([nfe] + [float(c.mean_gte[j]) for c in curves]) for j, nfe in enumerate(nfe_list)]
    data.write_csv(
        run.path("gte_compare.csv"), cols, rows,
        meta={"metric": "gte_compare", "field": ";".join(labels),
              "solver": curves[0].oracle_desc, "seed": run.seed, "n": step.get("n", 512)},
    )
    plotting.gte_curve_plot(
        [(lab, c.nfe, c.mean_gte) for lab, c in zip(labels, curves)], run.figure("gte_compare.png")
    )


def _step_sseq_compare(cfg, step, run, step_dirs):
    coupling = _coupling_from_cfg(cfg, "sseq_compare")
    rows = []
    for item in step["items"]:
        field, _ = _load_eval_field(_resolve_refs(item["checkpoint"], step_dirs), run)
        k = int(item["k"])
        boundaries = seqrf.make_segmentation(k)
        spec = SolverSpec("rk4", (0.0, 1.0), n_steps=max(50 // k, 10))
        rep = metrics.sequential_straightness(
            field, boundaries, step.get("n", 1024), spec, coupling, np.random.default_rng([run.seed, 9])
        )
        rows.append((item.get("label", f"k{k}"), k, rep.value))
    data.write_csv(
        run.path("sseq_compare.csv"), ["label", "k", "s_seq"], rows,
        meta={"metric": "sseq_compare", "field": ";".join(r[0] for r in rows),
              "solver": "rk4-per-seg", "seed": run.seed, "n": step.get("n", 1024)},
    )


def _step_w2_table(cfg, step, run, step_dirs):
    coupling = _coupling_from_cfg(cfg, "w2_table")
    noise, target = coupling.source, coupling.target
    baseline, _ = _load_eval_field(_resolve_refs(step["baseline"], step_dirs), run)
    n = step.get("n", 512)
    seeds = step.get("seeds", [101, 102, 103])
    rows = []
    for item in step["items"]:
        field, _ = _load_eval_field(_resolve_refs(item["checkpoint"], step_dirs), run)
        k = int(item["k"])
        for seed in seeds:
            rng = np.random.default_rng(seed)
            samp, _ = seqrf.sample(field, seqrf.make_segmentation(k), n, noise, rng, distilled=True)
            w_distill = metrics.wasserstein2_exact(samp, target.sample(n, rng))
            rng2 = np.random.default_rng(seed)
            euler = solvers.solve(
                baseline, noise.sample(n, rng2), SolverSpec("euler", (0.0, 1.0), n_steps=k)
            ).final
            w_euler = metrics.wasserstein2_exact(euler, target.sample(n, rng2))
            rows.append((k, seed, w_distill, w_euler))
    data.write_csv(
        run.path("w2_table.csv"), ["k", "seed", "w2_distilled", "w2_stage1_euler"], rows,
        meta={"metric": "w2_table", "field": "distilled;stage1", "solver": "distilled-vs-euler",
              "seed": run.seed, "n": n},
    )


def _step_variance_compare(cfg, step, run, step_dirs):
    coupling = _coupling_from_cfg(cfg, "variance_compare")
    lo, hi, count = step.get("edges", [-3.0, 3.0, 13])
    edges = np.linspace(lo, hi, int(count))
    rows = []
    for item in step["pairs"]:
        pairs = data.load_pairs(_resolve_refs(item, step_dirs))
        joint = fields.JointCoupling(pairs)
        b = pairs.boundaries
        t_values = [float((b[i] + b[i + 1]) / 2) for i in range(pairs.n_segments)]
        jv, iv, n_bins = metrics.compare_target_variance(
            joint, coupling, t_values, edges, step.get("draws", 8192),
            np.random.default_rng([run.seed, 10]), min_count=step.get("min_count", 16),
        )
        rows.append((pairs.n_segments, jv, iv, n_bins))
    data.write_csv(
        run.path("variance_compare.csv"), ["k", "joint_target_var", "indep_target_var", "matched_bins"],
        rows,
        meta={"metric": "variance_compare", "field": "pairs", "solver": "n/a",
              "seed": run.seed, "n": step.get("draws", 8192)},
    )
    plotting.variance_bars(
        [f"K={r[0]}" for r in rows], [r[1] for r in rows], [r[2] for r in rows],
        run.figure("variance_compare.png"),
    )


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flowstraight",
        description="Desk-scale rectified flow / sequential reflow lab.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "train": "Stage-1 flow-matching training",
        "reflow": "generate segment pairs and fine-tune (stage 2)",
        "distill": "per-segment distillation of a reflowed model",
        "sample": "draw samples from a checkpoint",
        "eval": "compute diagnostic metrics for a checkpoint",
        "solve": "standalone instrumented ODE solves and convergence studies",
        "recipe": "run a multi-stage pipeline from one config",
    }
    for name, help_text in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="run directory (default: config 'out')")
        p.add_argument("--checkpoint", default=None, help="input checkpoint path")
        p.add_argument("--pairs", default=None, help="input pair dataset path")
        p.add_argument("--k", type=int, default=None, help="number of time segments")
        p.add_argument("--nfe", type=lambda s: [int(v) for v in s.split(",")],
                       default=None, help="comma-separated NFE list")
        p.add_argument("--solver", choices=["euler", "heun", "rk4", "rk45"],
                       default=None, help="override the solver method")
        p.add_argument("--tol", type=float, default=None, help="rk45 tolerance override")
    return parser


COMMANDS = {
    "train": cmd_train,
    "reflow": cmd_reflow,
    "distill": cmd_distill,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "solve": cmd_solve,
    "recipe": cmd_recipe,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg, cfg_hash = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        out_dir = args.out or cfg.get("out")
        if not out_dir:
            raise ConfigError("no output directory: pass --out or set 'out' in the config")
        run = _Run(out_dir, os.path.basename(os.path.normpath(out_dir)), seed, args.config, cfg_hash)
        return COMMANDS[args.command](cfg, args, run)
    except FlowstraightError as exc:
        log.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
