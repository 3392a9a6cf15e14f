"""Weight-tied transformation ``f(z, x) = act(V z + U x + b)``, its readout head,
and Jacobian-free teacher training."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .blobio import pack_arrays, read_artifact, unpack_arrays, write_artifact
from .errors import CacheError, DivergenceError, ShapeError, ValidationError
from .numeric import make_rng
from .solver import SolverConfig, solve

log = logging.getLogger(__name__)

_ACT = {"tanh": np.tanh, "relu": lambda v: np.maximum(v, 0.0), "identity": lambda v: v}


@dataclass
class BackboneParams:
    U: np.ndarray  # (d_z, d_x)
    V: np.ndarray  # (d_z, d_z)
    b: np.ndarray  # (d_z,)
    activation: str = "tanh"

    def __post_init__(self):
        self.U = np.array(self.U, dtype=np.float64, ndmin=2)
        self.V = np.array(self.V, dtype=np.float64, ndmin=2)
        self.b = np.array(self.b, dtype=np.float64, ndmin=1)
        d_z = self.V.shape[0]
        if self.V.shape != (d_z, d_z) or self.U.shape[0] != d_z or self.b.shape != (d_z,):
            raise ShapeError(f"inconsistent backbone shapes U{self.U.shape} V{self.V.shape} b{self.b.shape}")
        if self.activation not in _ACT:
            raise ValidationError(f"unknown activation {self.activation!r}")

    @property
    def d_z(self):
        return self.V.shape[0]

    @property
    def d_x(self):
        return self.U.shape[1]

    def arrays(self):
        return {"U": self.U, "V": self.V, "b": self.b}

    def copy(self):
        return BackboneParams(self.U.copy(), self.V.copy(), self.b.copy(), self.activation)


@dataclass
class ReadoutHead:
    H: np.ndarray  # (d_y, d_z)
    c: np.ndarray  # (d_y,)

    def __post_init__(self):
        self.H = np.array(self.H, dtype=np.float64, ndmin=2)
        self.c = np.array(self.c, dtype=np.float64, ndmin=1)

    def __call__(self, z):
        return np.asarray(z) @ self.H.T + self.c

    def predict(self, z):
        return np.argmax(self(z), axis=-1)


def _check_dims(params, z, x):
    if np.shape(z)[-1] != params.d_z or np.shape(x)[-1] != params.d_x:
        raise ShapeError(
            f"state width {np.shape(z)[-1]} / input width {np.shape(x)[-1]} do not match "
            f"backbone ({params.d_z}, {params.d_x})"
        )


def f_forward(params, z, x):
    """``act(V z + U x + b)`` for a single state or a batch of row states."""
    _check_dims(params, z, x)
    pre = np.asarray(z) @ params.V.T + np.asarray(x) @ params.U.T + params.b
    return _ACT[params.activation](pre)


def residual_F(params, z, x):
    return f_forward(params, z, x) - z


def f_graph(nodes, z, x, activation="tanh"):
    """Differentiable counterpart of :func:`f_forward`; ``nodes`` holds U, V, b."""
    pre = ag.add(ag.linear(z, nodes["V"]), ag.linear(x, nodes["U"]))
    pre = ag.bias_add(pre, nodes["b"])
    return ag.ACTIVATIONS[activation](pre)


def fixed_point_map(params):
    """Bind ``params`` into a solver-compatible ``f(z, x)``."""
    return lambda z, x: f_forward(params, z, x)


def spectral_norm(M, iters=20):
    """Largest singular value estimated by power iteration on ``M^T M``."""
    v = np.ones(M.shape[1]) / np.sqrt(M.shape[1])
    sigma = 0.0
    for _ in range(iters):
        u = M @ v
        sigma = np.linalg.norm(u)
        if sigma == 0.0:
            return 0.0
        v = M.T @ (u / sigma)
        v /= np.linalg.norm(v)
    return float(np.linalg.norm(M @ v))


def enforce_contractivity(V, sigma_max, iters=None):
    """Rescale ``V`` so its spectral norm is at most ``sigma_max``.

    ``iters=None`` uses the exact norm (SVD); an integer uses that many power
    iterations, which can underestimate and leave the norm slightly above the cap.
    """
    sigma = float(np.linalg.norm(V, 2)) if iters is None else spectral_norm(V, iters)
    if sigma > sigma_max:
        return V * (sigma_max / sigma)
    return V


def init_backbone(d_x, d_z, rng, sigma_max=0.9, activation="tanh"):
    U = rng.standard_normal((d_z, d_x)) / np.sqrt(d_x)
    V = rng.standard_normal((d_z, d_z)) / np.sqrt(d_z)
    V = enforce_contractivity(V, sigma_max) if sigma_max is not None else V
    return BackboneParams(U, V, np.zeros(d_z), activation)


def equilibrium(params, x, cfg=SolverConfig(), z0=None, iterations=None, method="anderson"):
    """Solve for the fixed point from ``z0`` (zeros by default); returns the trace."""
    x = np.asarray(x, dtype=np.float64)
    if z0 is None:
        z0 = np.zeros(x.shape[:-1] + (params.d_z,))
    return solve(fixed_point_map(params), x, z0, cfg, method=method, fixed_iterations=iterations)


# ---------------------------------------------------------------- teacher training


@dataclass
class TeacherConfig:
    d_z: int = 16
    activation: str = "tanh"
    sigma_max: float = 0.9
    contractive: bool = True
    epochs: int = 100
    lr: float = 1e-2
    batch_size: int = 100
    eval_iterations: int = 20
    seed: int = 0


@dataclass
class Teacher:
    params: BackboneParams
    head: ReadoutHead
    sigma_max: float = None
    seed: int = 0
    metrics: dict = field(default_factory=dict)

    def f(self, z, x):
        return f_forward(self.params, z, x)


def _is_classification(dataset):
    return dataset.labels is not None


def _task_loss(out, targets, classification):
    if classification:
        return ag.softmax_cross_entropy(out, targets)
    return ag.mse(out, targets)


def evaluate_teacher(teacher, x, targets, iterations=20, cfg=SolverConfig()):
    """Accuracy (classification) or MSE (regression) after ``iterations`` AA steps."""
    trace = equilibrium(teacher.params, x, cfg, iterations=iterations)
    out = teacher.head(trace.final)
    if np.issubdtype(np.asarray(targets).dtype, np.integer):
        return float(np.mean(np.argmax(out, axis=-1) == targets))
    return float(np.mean((out - targets) ** 2))


def jfb_surrogate_loss(nodes, z_star, x, targets, activation="tanh", classification=True):
    """Task loss of one ``f`` application at a frozen equilibrium ``z_star``.

    Its exact gradient is the Jacobian-free (one-step) approximation of the
    implicit gradient.
    """
    zf = f_graph(nodes, ag.const(z_star), ag.const(x), activation)
    out = ag.bias_add(ag.linear(zf, nodes["H"]), nodes["c"])
    return _task_loss(out, targets, classification)


def train_teacher(dataset, solver_cfg=SolverConfig(), cfg=TeacherConfig()):
    """Train a DEQ teacher with Adam and Jacobian-free gradients.

    Returns
    -------
    Teacher
        with ``metrics`` holding per-epoch loss/convergence and final accuracies.

    Raises
    ------
    DivergenceError
        when the forward solve fails to reach ``solver_cfg.tol`` on most of a batch.
    """
    rng = make_rng(cfg.seed)
    classification = _is_classification(dataset)
    X, Y = dataset.train()
    Xv, Yv = dataset.val()
    d_out = dataset.n_classes if classification else Y.shape[1]
    sigma_max = cfg.sigma_max if cfg.contractive else None
    bb = init_backbone(dataset.d_x, cfg.d_z, rng, sigma_max, cfg.activation)
    H = rng.standard_normal((d_out, cfg.d_z)) / np.sqrt(cfg.d_z)
    store = ag.ParamStore({**bb.arrays(), "H": H, "c": np.zeros(d_out)})

    def current():
        params = BackboneParams(store["U"], store["V"], store["b"], cfg.activation)
        return Teacher(params, ReadoutHead(store["H"], store["c"]), sigma_max, cfg.seed)

    history = []
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses, conv = [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = X[idx], Y[idx]
            teacher = current()
            trace = equilibrium(teacher.params, xb, solver_cfg)
            ok = np.asarray(trace.rel_residuals[-1]) < solver_cfg.tol
            conv.append(float(np.mean(ok)))
            if np.mean(ok) < 0.5:
                raise DivergenceError(
                    "teacher solve failed on a majority of the batch",
                    {"epoch": epoch, "converged_fraction": float(np.mean(ok)),
                     "max_rel_residual": float(np.max(trace.rel_residuals[-1]))},
                )
            leaves = store.leaves()
            loss = jfb_surrogate_loss(leaves, trace.final, xb, yb, cfg.activation, classification)
            grads = ag.backward(loss, leaves)
            ag.adam_step(store, grads, cfg.lr)
            if sigma_max is not None:
                store["V"] = enforce_contractivity(store["V"], sigma_max)
            losses.append(float(loss.value))
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "converged_fraction": float(np.mean(conv))})
        log.debug("teacher epoch %d loss %.4f", epoch, history[-1]["loss"])

    teacher = current()
    key = "accuracy" if classification else "mse"
    teacher.metrics = {
        f"train_{key}": evaluate_teacher(teacher, X, Y, cfg.eval_iterations, solver_cfg),
        f"val_{key}": evaluate_teacher(teacher, Xv, Yv, cfg.eval_iterations, solver_cfg),
        "history": history,
    }
    return teacher


# ---------------------------------------------------------------- checkpoints


def save_teacher(path, teacher):
    p = teacher.params
    layout, payload = pack_arrays({"U": p.U, "V": p.V, "b": p.b, "H": teacher.head.H, "c": teacher.head.c})
    meta = {
        "d_x": p.d_x, "d_z": p.d_z, "d_y": int(teacher.head.H.shape[0]),
        "activation": p.activation, "sigma_max": teacher.sigma_max, "seed": teacher.seed,
        "layout": layout,
    }
    write_artifact(path, "teacher", meta, payload)


def load_teacher(path):
    meta, payload = read_artifact(path, "teacher")
    try:
        arrs = unpack_arrays(meta["layout"], payload)
        params = BackboneParams(arrs["U"], arrs["V"], arrs["b"], meta["activation"])
        head = ReadoutHead(arrs["H"], arrs["c"])
    except KeyError as exc:
        raise CacheError(f"{path}: missing field {exc}") from exc
    return Teacher(params, head, meta.get("sigma_max"), meta.get("seed", 0))
