"""The consistency student: boundary coefficients, time-conditioned head,
Anderson-structured update and few-step inference."""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .backbone import BackboneParams, f_forward, f_graph
from .blobio import pack_arrays, read_artifact, unpack_arrays, write_artifact
from .errors import CacheError, ShapeError, ValidationError
from .numeric import DEFAULT_RIDGE
from .solver import SolverConfig, anderson_step
from .trajectory import TimeMap


@dataclass(frozen=True)
class BoundaryCoeffs:
    gamma: float = 1.0
    eps: float = 0.0
    T: float = 1.0

    def __post_init__(self):
        if self.gamma < 1:
            raise ValidationError("gamma must be >= 1")
        if not self.eps < self.T:
            raise ValidationError("need eps < T")

    def _ratio(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < self.eps) or np.any(t > self.T):
            raise ValidationError(f"time outside [{self.eps}, {self.T}]")
        return (t - self.eps) / (self.T - self.eps)

    def c_skip(self, t):
        return self._ratio(t) ** self.gamma

    def c_out(self, t):
        return 1.0 - self._ratio(t) ** self.gamma


@dataclass(frozen=True)
class InferenceSchedule:
    """``t_j = eps + (1 - beta**j)(T - eps)`` for ``j = 0..J``; ``t_J`` labels the output."""

    J: int = 1
    beta: float = 0.5
    eps: float = 0.0
    T: float = 1.0

    def __post_init__(self):
        if self.J < 1:
            raise ValidationError("J must be >= 1")
        if not 0.0 < self.beta < 1.0:
            raise ValidationError("schedule beta must lie in (0, 1)")

    def times(self):
        j = np.arange(self.J + 1, dtype=np.float64)
        return self.eps + (1.0 - self.beta**j) * (self.T - self.eps)


@dataclass
class StudentParams:
    backbone: BackboneParams  # same architecture as the teacher map, own values
    W: np.ndarray  # (d_z, d_z + d_t)
    d_t: int = 4

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64, ndmin=2)
        d_z = self.backbone.d_z
        if self.W.shape != (d_z, d_z + self.d_t):
            raise ShapeError(f"W must be ({d_z}, {d_z + self.d_t}), got {self.W.shape}")

    @property
    def d_z(self):
        return self.backbone.d_z

    def arrays(self):
        return {**self.backbone.arrays(), "W": self.W}

    @classmethod
    def from_arrays(cls, arrays, activation="tanh", d_t=4):
        bb = BackboneParams(arrays["U"], arrays["V"], arrays["b"], activation)
        return cls(bb, arrays["W"], d_t)

    def copy(self):
        return StudentParams(self.backbone.copy(), self.W.copy(), self.d_t)


def init_student(teacher_params, d_t=4, noise=1e-3, rng=None):
    """Copy the teacher map and set ``W = [I | 0]`` plus optional Gaussian noise."""
    d_z = teacher_params.d_z
    W = np.concatenate([np.eye(d_z), np.zeros((d_z, d_t))], axis=1)
    if noise and rng is not None:
        W = W + noise * rng.standard_normal(W.shape)
    return StudentParams(teacher_params.copy(), W, d_t)


def _time_block(t, batch_shape, d_t):
    t = np.asarray(t, dtype=np.float64)
    return np.broadcast_to(t[..., None] if t.ndim else t, batch_shape + (d_t,)).astype(np.float64)


def h_phi(params, z, t, x):
    """``W [f_phi'(z, x) || t]``; ``t`` is a scalar or one time per row."""
    fz = f_forward(params.backbone, z, x)
    tb = _time_block(t, fz.shape[:-1], params.d_t)
    return np.concatenate([fz, tb], axis=-1) @ params.W.T


def h_graph(nodes, z, t, x, d_t, activation="tanh"):
    """Differentiable ``h_phi``; ``nodes`` holds U, V, b, W."""
    fz = f_graph(nodes, z, x, activation)
    tb = _time_block(t, fz.shape[:-1], d_t)
    return ag.linear(ag.concat([fz, ag.const(tb)], axis=-1), nodes["W"])


def p_phi_one_step(params, z_t, t, x):
    return h_phi(params, z_t, t, x)


class AAProjection(NamedTuple):
    value: np.ndarray
    alpha: np.ndarray
    fallback: np.ndarray


def p_phi_aa(params, z_t, z_prev, t, t_prev, x, beta_aa=1.0, ridge=DEFAULT_RIDGE, h_t=None, h_prev=None):
    """Two-state Anderson update with ``h_phi`` standing in for the fixed-point map.

    Precomputed head values ``h_t`` / ``h_prev`` may be passed to avoid re-evaluating
    the network. Rows whose weight solve fails use ``h_phi(z_t, t, x)`` instead.

    Returns
    -------
    AAProjection
        ``value``, the weights ``alpha`` over ``(z_prev, z_t)`` and a per-row fallback mask.
    """
    if h_t is None:
        h_t = h_phi(params, z_t, t, x)
    if h_prev is None:
        h_prev = h_phi(params, z_prev, t_prev, x)
    step = anderson_step([z_prev, z_t], [h_prev, h_t], SolverConfig(m=1, beta=beta_aa, ridge=ridge))
    value = step.z
    fb = np.asarray(step.fallback)
    if np.any(fb):
        value = np.array(value, copy=True)
        if value.ndim == 1:
            value = np.asarray(h_t, dtype=np.float64).copy()
        else:
            value[fb] = np.asarray(h_t)[fb]
    return AAProjection(value, step.alpha, fb)


def g_phi(coeffs, P_value, z_t, t):
    """``c_skip(t) z_t + c_out(t) P``; defined for ``t`` in ``[eps, T)``."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t >= coeffs.T) or np.any(t < coeffs.eps):
        raise ValidationError(f"time must lie in [{coeffs.eps}, {coeffs.T})")
    cs = coeffs.c_skip(t)
    co = coeffs.c_out(t)
    if cs.ndim:
        cs, co = cs[:, None], co[:, None]
    return cs * z_t + co * P_value


def g_graph(coeffs, P_node, z_t, t):
    t = np.asarray(t, dtype=np.float64)
    cs = coeffs.c_skip(t)
    co = coeffs.c_out(t)
    if cs.ndim:
        cs, co = cs[:, None], co[:, None]
    return ag.add(ag.mul(ag.const(z_t), cs), ag.mul(P_node, co))


@dataclass
class InferenceResult:
    z: np.ndarray
    states: list
    times: np.ndarray
    nfe: int
    fallbacks: list = field(default_factory=list)


def infer(params, coeffs, x, z0, schedule, beta_aa=1.0, ridge=DEFAULT_RIDGE):
    """Multi-step consistency inference.

    Step 0 applies the one-state head at ``t_0 = eps``; every later step forms the
    Anderson combination of the two most recent states and blends it back through
    the boundary coefficients. The head is evaluated exactly ``J`` times.

    Returns
    -------
    InferenceResult
        final state ``z`` (labelled ``t_J``), all states ``z_{t_0}..z_{t_J}``, the
        schedule times and the head-evaluation count.
    """
    if schedule.eps != coeffs.eps or schedule.T != coeffs.T:
        raise ValidationError("schedule and boundary coefficients disagree on [eps, T)")
    times = schedule.times()
    z = np.asarray(z0, dtype=np.float64)
    states = [z]
    h_cur = h_phi(params, z, times[0], x)
    nfe = 1
    z_next = g_phi(coeffs, h_cur, z, times[0])
    states.append(z_next)
    fallbacks = []
    h_prev = h_cur
    for j in range(1, schedule.J):
        z_prev, z_cur = states[j - 1], states[j]
        h_cur = h_phi(params, z_cur, times[j], x)
        nfe += 1
        proj = p_phi_aa(params, z_cur, z_prev, times[j], times[j - 1], x, beta_aa, ridge, h_t=h_cur, h_prev=h_prev)
        if np.any(proj.fallback):
            fallbacks.append(j)
        states.append(g_phi(coeffs, proj.value, z_cur, times[j]))
        h_prev = h_cur
    return InferenceResult(states[-1], states, times, nfe, fallbacks)


# ---------------------------------------------------------------- checkpoints


def save_student(path, params, coeffs, tmap=TimeMap(), extra=None):
    layout, payload = pack_arrays(params.arrays())
    meta = {
        "d_x": params.backbone.d_x, "d_z": params.d_z, "d_t": params.d_t,
        "activation": params.backbone.activation,
        "coeffs": {"gamma": coeffs.gamma, "eps": coeffs.eps, "T": coeffs.T},
        "time_map": {"eps": tmap.eps, "T": tmap.T, "rho": tmap.rho},
        "layout": layout,
        "extra": extra or {},
    }
    write_artifact(path, "student", meta, payload)


def load_student(path):
    """Returns ``(StudentParams, BoundaryCoeffs, TimeMap, meta)``."""
    meta, payload = read_artifact(path, "student")
    try:
        arrs = unpack_arrays(meta["layout"], payload)
        params = StudentParams.from_arrays(arrs, meta["activation"], meta["d_t"])
        coeffs = BoundaryCoeffs(**meta["coeffs"])
        tmap = TimeMap(**meta["time_map"])
    except KeyError as exc:
        raise CacheError(f"{path}: missing field {exc}") from exc
    return params, coeffs, tmap, meta
