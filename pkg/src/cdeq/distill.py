"""Consistency distillation: global/local/task losses, EMA target, training loop."""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .consistency import BoundaryCoeffs, InferenceSchedule, StudentParams, g_graph, h_graph, infer, init_student
from .errors import DivergenceError, ValidationError
from .numeric import DEFAULT_RIDGE, make_rng
from .trajectory import TimeMap, stack

log = logging.getLogger(__name__)

METRICS = {"mse": ag.row_mse, "l1": ag.row_l1}


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.8
    lambda2: float = 0.05
    metric: str = "mse"
    mu: float = 0.99
    k_task_max: int = None  # defaults to K // 4

    def __post_init__(self):
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ValidationError("lambda1 must lie in [0, 1]")
        if self.lambda2 < 0:
            raise ValidationError("lambda2 must be >= 0")
        if not 0.0 <= self.mu < 1.0:
            raise ValidationError("mu must lie in [0, 1)")
        if self.metric not in METRICS:
            raise ValidationError(f"metric must be one of {sorted(METRICS)}")


@dataclass(frozen=True)
class DistillConfig:
    loss: LossConfig = LossConfig()
    lr: float = 3e-3
    batch_size: int = 64
    epochs: int = 200
    d_t: int = 4
    gamma: float = 1.0
    init_noise: float = 1e-3
    beta_sched: float = 0.5
    beta_aa: float = 1.0
    ridge: float = DEFAULT_RIDGE
    val_nfe: int = 1
    anchor_k_min: int = 0  # 1 restores the literal k >= 1 anchor draw
    seed: int = 0


@dataclass
class StudentModel:
    """Everything needed to run the student: parameters, coefficients, head settings."""

    params: StudentParams
    coeffs: BoundaryCoeffs
    beta_sched: float = 0.5
    beta_aa: float = 1.0
    ridge: float = DEFAULT_RIDGE

    def infer(self, x, J, z0=None):
        x = np.asarray(x, dtype=np.float64)
        if z0 is None:
            z0 = np.zeros(x.shape[:-1] + (self.params.d_z,))
        sched = InferenceSchedule(J, self.beta_sched, self.coeffs.eps, self.coeffs.T)
        return infer(self.params, self.coeffs, x, z0, sched, self.beta_aa, self.ridge)


@dataclass
class TrainState:
    student: ag.ParamStore
    ema: ag.ParamStore
    step: int = 0
    history: list = field(default_factory=list)
    events: list = field(default_factory=list)


@dataclass
class Batch:
    """Per-sample arrays for one training step; ``k`` indexes the trajectory."""

    x: np.ndarray
    z_k: np.ndarray
    t_k: np.ndarray
    z_prev: np.ndarray
    t_prev: np.ndarray
    z_end: np.ndarray
    k: np.ndarray
    y: np.ndarray = None
    # anchor sample for the global/task terms; defaults to (z_k, t_k, k)
    z_g: np.ndarray = None
    t_g: np.ndarray = None
    k_g: np.ndarray = None

    def __post_init__(self):
        if self.k_g is None:
            self.z_g, self.t_g, self.k_g = self.z_k, self.t_k, self.k


def make_batch(X, S, times, k, y=None, k_g=None):
    rows = np.arange(len(k))
    prev = np.maximum(np.asarray(k) - 1, 0)  # k = 0 only feeds the global/task anchor
    extra = {}
    if k_g is not None:
        extra = {"z_g": S[rows, k_g], "t_g": times[rows, k_g], "k_g": np.asarray(k_g)}
    return Batch(
        x=X, z_k=S[rows, k], t_k=times[rows, k], z_prev=S[rows, prev],
        t_prev=times[rows, prev], z_end=S[:, -1], k=np.asarray(k), y=y, **extra,
    )


def trajectory_batch(trajectories, k, labels=None, k_lo=1):
    """Single-trajectory helpers: turn ``(trajectories, k)`` into a :class:`Batch`."""
    X, S, times, _ = stack(trajectories)
    k = np.atleast_1d(np.asarray(k, dtype=np.int64))
    K = S.shape[1] - 1
    if np.any(k < k_lo) or np.any(k > K):
        raise ValidationError(f"k must lie in [{k_lo}, {K}]")
    return make_batch(X, S, times, k, None if labels is None else np.atleast_1d(labels))


# ---------------------------------------------------------------- losses (graph level)


def consistency_graph(nodes, coeffs, z, t, x, d_t, activation="tanh"):
    """Training-time ``g_phi`` with the single-state head ``P = h_phi``."""
    P = h_graph(nodes, ag.const(z), t, ag.const(x), d_t, activation)
    return g_graph(coeffs, P, z, t)


def global_loss(nodes, coeffs, batch, d_t, metric="mse", activation="tanh"):
    g = consistency_graph(nodes, coeffs, batch.z_g, batch.t_g, batch.x, d_t, activation)
    return ag.mean(METRICS[metric](g, ag.const(batch.z_end)))


def local_loss(nodes, ema_nodes, coeffs, batch, d_t, metric="mse", activation="tanh"):
    g = consistency_graph(nodes, coeffs, batch.z_k, batch.t_k, batch.x, d_t, activation)
    target = ag.stopgrad(consistency_graph(ema_nodes, coeffs, batch.z_prev, batch.t_prev, batch.x, d_t, activation))
    return ag.mean(METRICS[metric](g, target))


def task_loss(nodes, head, coeffs, batch, d_t, k_task_max, activation="tanh"):
    """Cross-entropy of the frozen head on ``g_phi``, averaged over samples with ``k <= k_task_max``."""
    keep = batch.k_g <= k_task_max
    if batch.y is None or not np.any(keep):
        return ag.const(0.0)
    g = consistency_graph(nodes, coeffs, batch.z_g, batch.t_g, batch.x, d_t, activation)
    logits = ag.bias_add(ag.linear(g, ag.const(head.H)), ag.const(head.c))
    per_row = ag.softmax_cross_entropy(logits, batch.y, reduce=False)
    return ag.sum(ag.mul(per_row, keep / keep.sum()))


def total_loss(nodes, ema_nodes, head, coeffs, batch, d_t, loss_cfg, k_task_max, activation="tanh"):
    """Weighted objective; returns ``(total, parts)`` where parts are the three loss nodes."""
    lg = global_loss(nodes, coeffs, batch, d_t, loss_cfg.metric, activation)
    ll = local_loss(nodes, ema_nodes, coeffs, batch, d_t, loss_cfg.metric, activation)
    lt = task_loss(nodes, head, coeffs, batch, d_t, k_task_max, activation) if loss_cfg.lambda2 else ag.const(0.0)
    total = ag.add(ag.add(ag.mul(lg, loss_cfg.lambda1), ag.mul(ll, 1.0 - loss_cfg.lambda1)), ag.mul(lt, loss_cfg.lambda2))
    return total, {"global": lg, "local": ll, "task": lt}


# ---------------------------------------------------------------- scalar conveniences


def _nodes(params):
    return {k: ag.const(v) for k, v in params.arrays().items()}


def loss_global(params, coeffs, trajectory, k, metric="mse"):
    b = trajectory_batch([trajectory], k, k_lo=0)
    return float(global_loss(_nodes(params), coeffs, b, params.d_t, metric, params.backbone.activation).value)


def loss_local(params, ema_params, coeffs, trajectory, k, metric="mse"):
    b = trajectory_batch([trajectory], k)
    act = params.backbone.activation
    return float(local_loss(_nodes(params), _nodes(ema_params), coeffs, b, params.d_t, metric, act).value)


def loss_task(params, head, coeffs, trajectory, k, label, k_task_max):
    b = trajectory_batch([trajectory], k, labels=[label], k_lo=0)
    return float(task_loss(_nodes(params), head, coeffs, b, params.d_t, k_task_max, params.backbone.activation).value)


# ---------------------------------------------------------------- training


def ema_update(ema, store, mu):
    for name in ema.values:
        ema.values[name] = mu * ema.values[name] + (1.0 - mu) * store.values[name]


def new_state(params):
    store = ag.ParamStore(params.arrays())
    return TrainState(student=store, ema=ag.ParamStore(params.arrays()))


def train_step(state, batch, head, coeffs, loss_cfg, lr, d_t, k_task_max, activation="tanh", optimizer="adam"):
    """One optimiser step on the student followed by the EMA update.

    A non-finite loss skips both updates and is recorded in ``state.events``.
    """
    leaves = state.student.leaves()
    ema_nodes = state.ema.constants()
    total, parts = total_loss(leaves, ema_nodes, head, coeffs, batch, d_t, loss_cfg, k_task_max, activation)
    breakdown = {"total": float(total.value), **{k: float(v.value) for k, v in parts.items()}}
    if not np.isfinite(breakdown["total"]):
        state.events.append({"step": state.step, "event": "non-finite loss"})
        return breakdown, False
    grads = ag.backward(total, leaves)
    if optimizer == "adam":
        ag.adam_step(state.student, grads, lr)
    else:
        ag.sgd_step(state.student, grads, lr)
    ema_update(state.ema, state.student, loss_cfg.mu)
    state.step += 1
    return breakdown, True


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class DistillResult:
    model: StudentModel
    log: list
    events: list


def distill(teacher, trajectories, cfg=DistillConfig(), tmap=TimeMap(), labels=None, val=None, epochs=None):
    """Train a consistency student against cached teacher trajectories.

    Parameters
    ----------
    teacher : Teacher
        supplies the initial backbone copy and the frozen head
    trajectories : list of Trajectory
    cfg : DistillConfig
    tmap : TimeMap
        the time map the cached trajectories were built with
    labels : array, optional
        class label per trajectory, needed when ``cfg.loss.lambda2 > 0``
    val : tuple (X_val, y_val), optional
        used for the per-epoch few-step accuracy
    epochs : int, optional
        overrides ``cfg.epochs``

    Returns
    -------
    DistillResult
    """
    if not trajectories:
        raise ValidationError("trajectory cache is empty")
    epochs = cfg.epochs if epochs is None else epochs
    rng = make_rng(cfg.seed)
    X, S, times, _ = stack(trajectories)
    K = S.shape[1] - 1
    coeffs = BoundaryCoeffs(cfg.gamma, tmap.eps, tmap.T)
    k_task_max = cfg.loss.k_task_max if cfg.loss.k_task_max is not None else max(1, K // 4)
    if cfg.loss.lambda2 and labels is None:
        raise ValidationError("labels are required for the task regulariser")
    y_all = None if labels is None else np.asarray(labels, dtype=np.int64)
    act = teacher.params.activation

    params = init_student(teacher.params, cfg.d_t, cfg.init_noise, rng)
    state = new_state(params)
    chash = config_hash(asdict(cfg))
    records = []
    bad_streak = 0
    n = X.shape[0]

    def model_of(store):
        return StudentModel(StudentParams.from_arrays(store.values, act, cfg.d_t), coeffs,
                            cfg.beta_sched, cfg.beta_aa, cfg.ridge)

    for epoch in range(epochs):
        order = rng.permutation(n)
        sums = {"total": 0.0, "global": 0.0, "local": 0.0, "task": 0.0}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            k = rng.integers(1, K + 1, size=idx.size)
            k_g = rng.integers(cfg.anchor_k_min, K + 1, size=idx.size) if cfg.anchor_k_min != 1 else None
            batch = make_batch(X[idx], S[idx], times[idx], k, None if y_all is None else y_all[idx], k_g)
            parts, ok = train_step(state, batch, teacher.head, coeffs, cfg.loss, cfg.lr, cfg.d_t, k_task_max, act)
            if not ok:
                bad_streak += 1
                if bad_streak >= 10:
                    raise DivergenceError("10 consecutive non-finite batches", {"epoch": epoch, "events": state.events})
                continue
            bad_streak = 0
            for key in sums:
                sums[key] += parts[key]
            batches += 1
        rec = {"epoch": epoch, **{f"loss_{k}": v / max(batches, 1) for k, v in sums.items()},
               "seed": cfg.seed, "config_hash": chash}
        if val is not None and teacher.head is not None:
            Xv, yv = val
            res = model_of(state.student).infer(Xv, cfg.val_nfe)
            rec[f"val_accuracy_nfe{cfg.val_nfe}"] = float(np.mean(teacher.head.predict(res.z) == yv))
        records.append(rec)
        state.history.append(rec)
        log.debug("distill epoch %d: %s", epoch, rec)

    return DistillResult(model_of(state.student), records, state.events)
