"""Experiment orchestration: evaluation series, pipelines and JSON/CSV reports.

Every pipeline takes a :class:`~cdeq.config.RunConfig` and an output directory,
writes its artifacts there and returns the report dict it also wrote as JSON.
Reports keep deterministic quantities under ``metrics`` and wall-clock numbers
under ``timing`` so repeated runs can be compared key by key.
"""

import csv
import json
import logging
import os
import time
from dataclasses import asdict

import numpy as np

from .backbone import TeacherConfig, equilibrium, evaluate_teacher, load_teacher, save_teacher, train_teacher
from .consistency import load_student, save_student
from .datasets import make_dataset
from .distill import DistillConfig, LossConfig, StudentModel, distill
from .errors import DegenerateStateError, ValidationError
from .numeric import make_rng
from .solver import SolverConfig, rel_residual_rows, solve
from .trajectory import AugmentConfig, TimeMap, read_cache, sample_trajectories, tmap_from_meta, write_cache

log = logging.getLogger(__name__)

TEACHER_FILE = "teacher.ckpt"
CACHE_FILE = "trajectories.cache"
STUDENT_FILE = "student.ckpt"


class CallCounter:
    """Wraps a map ``f(z, x)`` and counts evaluations."""

    def __init__(self, f):
        self.f = f
        self.calls = 0

    def __call__(self, z, x):
        self.calls += 1
        return self.f(z, x)


# ---------------------------------------------------------------- config plumbing


def solver_config(cfg):
    return SolverConfig(**asdict(cfg.solver))


def teacher_config(cfg):
    return TeacherConfig(**asdict(cfg.teacher), seed=cfg.seed)


def time_map(cfg):
    tr = cfg.trajectory
    return TimeMap(tr.eps, tr.T, tr.rho)


def augment_config(cfg):
    tr = cfg.trajectory
    return AugmentConfig(tr.p_aug, tr.k_min, tr.k_tail)


def distill_config(cfg, lambda1=None, lambda2=None):
    d = asdict(cfg.distill)
    l1, l2 = d.pop("lambda1"), d.pop("lambda2")
    loss = LossConfig(
        lambda1=l1 if lambda1 is None else lambda1,
        lambda2=l2 if lambda2 is None else lambda2,
        metric=d.pop("metric"), mu=d.pop("mu"), k_task_max=d.pop("k_task_max"),
    )
    return DistillConfig(loss=loss, seed=cfg.seed + 2, **d)


def dataset_of(cfg):
    return make_dataset(cfg.data.name, cfg.data.n, cfg.data.noise, cfg.data.seed, cfg.data.val_fraction)


def _path(out, name):
    return os.path.join(out, name)


def _require(path, what):
    if not os.path.exists(path):
        raise ValidationError(f"{what} not found at {path}; run the producing subcommand first")
    return path


def write_report(out, name, report):
    os.makedirs(out, exist_ok=True)
    path = _path(out, name)
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return path


def _report(command, cfg, metrics, timing, artifacts=()):
    return {
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "metrics": metrics,
        "timing": timing,
        "artifacts": list(artifacts),
    }


# ---------------------------------------------------------------- evaluation


def _mean_rel(f, z, x):
    """Mean relative residual of ``f`` at ``z``; absolute for all-zero states."""
    r = rel_residual_rows(z, f(z, x))
    return float(np.mean(r))


def eval_residual_curve(teacher, x, max_steps=10, student=None, solver_cfg=SolverConfig()):
    """Mean relative residual against the teacher map after each step.

    Baselines are AA and Picard run for exactly ``max_steps`` teacher
    evaluations; the student curve comes from one ``max_steps``-step inference
    run, whose intermediate states are the shorter runs' outputs. Step 0 is the
    shared zero initial state, where the residual is reported in absolute form.

    Returns
    -------
    dict
        ``step`` plus ``baseline_picard``, ``baseline_aa`` and (if given)
        ``student`` lists of length ``max_steps + 1``; ``nfe`` holds call counts.

    Raises
    ------
    DegenerateStateError
        if any state after step 0 has zero norm.
    """
    if max_steps < 1:
        raise ValidationError("max_steps must be >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z0 = np.zeros((x.shape[0], teacher.params.d_z))
    series = {"step": list(range(max_steps + 1))}
    nfe = {}
    for name, method in (("baseline_picard", "picard"), ("baseline_aa", "anderson")):
        counter = CallCounter(teacher.f)
        trace = solve(counter, x, z0, solver_cfg, method=method, fixed_iterations=max_steps)
        nfe[name] = counter.calls
        series[name] = _curve(teacher.f, trace.states, x)
    if student is not None:
        res = student.infer(x, max_steps, z0)
        nfe["student"] = res.nfe
        series["student"] = _curve(teacher.f, res.states, x)
    series["nfe"] = nfe
    return series


def _curve(f, states, x):
    out = []
    for s, z in enumerate(states):
        if s > 0 and np.any(np.linalg.norm(z, axis=-1) == 0.0):
            raise DegenerateStateError(f"zero-norm state at step {s}")
        out.append(_mean_rel(f, z, x))
    return out


def write_residual_csv(path, series):
    cols = ["step", "baseline_picard", "baseline_aa", "student"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i in series["step"]:
            w.writerow([i] + [repr(series[c][i]) if c in series else "" for c in cols[1:]])


def eval_accuracy_vs_nfe(student, teacher, x, y, nfe_list, teacher_iterations=20, solver_cfg=SolverConfig()):
    """Accuracy of the frozen teacher head on the student's output at each NFE.

    The table carries AA and Picard teacher columns at the same budget, plus a
    reference row for AA at ``teacher_iterations``.
    """
    nfe_list = [int(j) for j in nfe_list]
    if not nfe_list or any(j < 1 for j in nfe_list):
        raise ValidationError("NFE list must hold positive integers")
    y = np.asarray(y)
    head = teacher.head
    rows = []
    for j in nfe_list:
        res = student.infer(x, j)
        row = {"nfe": j, "student_accuracy": float(np.mean(head.predict(res.z) == y)), "student_calls": res.nfe}
        for name, method in (("aa", "anderson"), ("picard", "picard")):
            counter = CallCounter(teacher.f)
            z0 = np.zeros((x.shape[0], teacher.params.d_z))
            tr = solve(counter, x, z0, solver_cfg, method=method, fixed_iterations=j)
            row[f"{name}_accuracy"] = float(np.mean(head.predict(tr.final) == y))
            row[f"{name}_calls"] = counter.calls
        rows.append(row)
    ref = evaluate_teacher(teacher, x, y, teacher_iterations, solver_cfg)
    return {"rows": rows, "teacher_reference": {"nfe": teacher_iterations, "aa_accuracy": ref}}


def time_forward(fn, repeats=3):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


# ---------------------------------------------------------------- pipelines


def run_train_teacher(cfg, out):
    t0 = time.perf_counter()
    data = dataset_of(cfg)
    teacher = train_teacher(data, solver_config(cfg), teacher_config(cfg))
    os.makedirs(out, exist_ok=True)
    save_teacher(_path(out, TEACHER_FILE), teacher)
    metrics = {k: v for k, v in teacher.metrics.items() if k != "history"}
    metrics["final_loss"] = teacher.metrics["history"][-1]["loss"] if teacher.metrics["history"] else None
    metrics["min_converged_fraction"] = min((h["converged_fraction"] for h in teacher.metrics["history"]), default=None)
    rep = _report("train-teacher", cfg, metrics, {"seconds": time.perf_counter() - t0}, [TEACHER_FILE])
    write_report(out, "teacher_report.json", rep)
    return rep


def run_sample_traj(cfg, out):
    t0 = time.perf_counter()
    teacher = load_teacher(_require(_path(out, TEACHER_FILE), "teacher checkpoint"))
    data = dataset_of(cfg)
    X, _ = data.train()
    rng = make_rng(cfg.seed + 1)
    tmap, aug = time_map(cfg), augment_config(cfg)
    trajs = sample_trajectories(teacher.f, X, teacher.params.d_z, cfg.trajectory.K, aug, rng, tmap,
                                solver_config(cfg), cfg.trajectory.init)
    write_cache(trajs, _path(out, CACHE_FILE), tmap=tmap, aug=aug, seed=cfg.seed)
    masks = np.stack([t.mask for t in trajs])
    lo, hi = aug.k_min, cfg.trajectory.K - aug.k_tail
    ends = np.stack([t.states[-1] for t in trajs])
    metrics = {
        "n_trajectories": len(trajs),
        "K": cfg.trajectory.K,
        "replaced_fraction": float(masks[:, lo:hi + 1].mean()),
        "endpoint_rel_residual": float(np.mean(rel_residual_rows(ends, teacher.f(ends, X)))),
    }
    rep = _report("sample-traj", cfg, metrics, {"seconds": time.perf_counter() - t0}, [CACHE_FILE])
    write_report(out, "sample_report.json", rep)
    return rep


def _labels_for(data, lambda2):
    _, y = data.train()
    if data.labels is None:
        if lambda2:
            raise ValidationError("the task regulariser needs a classification dataset; set distill.lambda2 = 0")
        return None
    return y


def _distill_from(cfg, out, lambda1=None, lambda2=None, epochs=None):
    teacher = load_teacher(_require(_path(out, TEACHER_FILE), "teacher checkpoint"))
    trajs, meta = read_cache(_require(_path(out, CACHE_FILE), "trajectory cache"), with_meta=True)
    data = dataset_of(cfg)
    dcfg = distill_config(cfg, lambda1, lambda2)
    labels = _labels_for(data, dcfg.loss.lambda2)
    val = data.val() if data.labels is not None else None
    result = distill(teacher, trajs, dcfg, tmap_from_meta(meta), labels, val, epochs)
    return teacher, data, result


def run_distill(cfg, out):
    t0 = time.perf_counter()
    teacher, data, result = _distill_from(cfg, out)
    model = result.model
    save_student(_path(out, STUDENT_FILE), model.params, model.coeffs, time_map(cfg),
                 extra={"beta_sched": model.beta_sched, "beta_aa": model.beta_aa, "ridge": model.ridge})
    with open(_path(out, "distill_log.jsonl"), "w") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    last = result.log[-1] if result.log else {}
    metrics = {"final": {k: v for k, v in last.items() if k.startswith(("loss_", "val_"))},
               "epochs": len(result.log), "events": result.events}
    rep = _report("distill", cfg, metrics, {"seconds": time.perf_counter() - t0},
                  [STUDENT_FILE, "distill_log.jsonl"])
    write_report(out, "distill_report.json", rep)
    return rep


def load_model(out):
    params, coeffs, _, meta = load_student(_require(_path(out, STUDENT_FILE), "student checkpoint"))
    extra = meta.get("extra", {})
    return StudentModel(params, coeffs, extra.get("beta_sched", 0.5), extra.get("beta_aa", 1.0),
                        extra.get("ridge", SolverConfig().ridge))


def run_eval(cfg, out):
    teacher = load_teacher(_require(_path(out, TEACHER_FILE), "teacher checkpoint"))
    student = load_model(out)
    data = dataset_of(cfg)
    if data.labels is None:
        raise ValidationError("accuracy evaluation needs a classification dataset")
    Xv, yv = data.val()
    table = eval_accuracy_vs_nfe(student, teacher, Xv, yv, cfg.eval.nfe, cfg.eval.teacher_iterations,
                                 solver_config(cfg))
    timing = {
        f"student_nfe{j}_seconds": time_forward(lambda j=j: student.infer(Xv, j)) for j in cfg.eval.nfe
    }
    timing["teacher_aa_seconds"] = time_forward(
        lambda: equilibrium(teacher.params, Xv, solver_config(cfg), iterations=cfg.eval.teacher_iterations))
    rep = _report("eval", cfg, table, timing)
    write_report(out, "eval_report.json", rep)
    return rep


def run_residuals(cfg, out):
    teacher = load_teacher(_require(_path(out, TEACHER_FILE), "teacher checkpoint"))
    student = load_model(out)
    Xv, _ = dataset_of(cfg).val()
    t0 = time.perf_counter()
    series = eval_residual_curve(teacher, Xv, cfg.eval.max_steps, student, solver_config(cfg))
    write_residual_csv(_path(out, "residuals.csv"), series)
    rep = _report("residuals", cfg, series, {"seconds": time.perf_counter() - t0}, ["residuals.csv"])
    write_report(out, "residuals_report.json", rep)
    return rep


def run_ablate(cfg, out):
    """Distil one student per (lambda1, lambda2) cell and record NFE accuracy."""
    t0 = time.perf_counter()
    ab = cfg.ablation
    grid = []
    for l2 in ab.lambda2:
        for l1 in ab.lambda1:
            teacher, data, result = _distill_from(cfg, out, l1, l2, ab.epochs)
            Xv, yv = data.val()
            res = result.model.infer(Xv, ab.nfe)
            acc = float(np.mean(teacher.head.predict(res.z) == yv))
            grid.append({"lambda1": l1, "lambda2": l2, "nfe": ab.nfe, "accuracy": acc})
            log.info("ablation lambda1=%s lambda2=%s acc=%.4f", l1, l2, acc)
    metrics = {"grid": grid, "comparison": hybrid_comparison(grid)}
    rep = _report("ablate-lambda", cfg, metrics, {"seconds": time.perf_counter() - t0})
    write_report(out, "ablation_report.json", rep)
    return rep


def hybrid_comparison(grid, margin=0.02):
    """Compare hybrid cells (lambda1 in [0.4, 0.8], lambda2 = 0.05) to the pure endpoints.

    ``ok`` is False only when some hybrid cell trails both endpoints by more than ``margin``.
    """
    acc = {(c["lambda1"], c["lambda2"]): c["accuracy"] for c in grid}
    ends = [acc.get((0.0, 0.0)), acc.get((1.0, 0.0))]
    hybrid = {l1: a for (l1, l2), a in acc.items() if 0.4 <= l1 <= 0.8 and l2 == 0.05}
    if None in ends or not hybrid:
        return {"ok": None, "reason": "grid lacks endpoints or hybrid cells"}
    worst = min(hybrid.values())
    return {
        "endpoints": {"lambda1=0": ends[0], "lambda1=1": ends[1]},
        "hybrid": {str(k): v for k, v in sorted(hybrid.items())},
        "hybrid_min": worst,
        "ok": bool(not (worst < ends[0] - margin and worst < ends[1] - margin)),
    }


def run_all(cfg, out):
    """Every stage in order; returns the reports keyed by command."""
    return {
        "train-teacher": run_train_teacher(cfg, out),
        "sample-traj": run_sample_traj(cfg, out),
        "distill": run_distill(cfg, out),
        "eval": run_eval(cfg, out),
        "residuals": run_residuals(cfg, out),
    }
