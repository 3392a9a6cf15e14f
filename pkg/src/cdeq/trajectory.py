"""Solver iterates as virtual-time trajectories, endpoint augmentation, and the
on-disk trajectory cache."""

from dataclasses import asdict, dataclass

import numpy as np

from .blobio import read_artifact, write_artifact
from .errors import CacheError, NumericalError, ValidationError
from .solver import SolverConfig, solve


@dataclass(frozen=True)
class TimeMap:
    eps: float = 0.0
    T: float = 1.0
    rho: float = 0.25

    def __post_init__(self):
        if not self.eps < self.T:
            raise ValidationError("TimeMap needs eps < T")
        if not self.rho > 0:
            raise ValidationError("TimeMap needs rho > 0")

    def __call__(self, k):
        return time_of(k, self)


def time_of(k, tmap):
    """``eps + (1 - exp(-rho k)) (T - eps)``; strictly increasing, never reaches ``T``."""
    k = np.asarray(k, dtype=np.float64)
    if np.any(k < 0):
        raise ValidationError("iteration index must be >= 0")
    out = tmap.eps + (-np.expm1(-tmap.rho * k)) * (tmap.T - tmap.eps)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class AugmentConfig:
    p_aug: float = 0.1
    k_min: int = 1
    k_tail: int = 2

    def validate(self, K):
        if not 0.0 <= self.p_aug <= 1.0:
            raise ValidationError("p_aug must lie in [0, 1]")
        if self.k_min < 1 or self.k_tail < 1:
            raise ValidationError("k_min and k_tail must be >= 1")
        if self.k_min > K - self.k_tail:
            raise ValidationError(f"need k_min <= K - k_tail (k_min={self.k_min}, K={K}, k_tail={self.k_tail})")


@dataclass
class Trajectory:
    x: np.ndarray  # (d_x,)
    states: np.ndarray  # (K+1, d_z), possibly augmented
    times: np.ndarray  # (K+1,)
    mask: np.ndarray  # (K+1,) bool, True where the state was replaced by the endpoint

    @property
    def K(self):
        return self.states.shape[0] - 1

    @property
    def endpoint(self):
        return self.states[-1]

    def equals(self, other):
        return (
            np.array_equal(self.x, other.x)
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.mask, other.mask)
        )


def augmentation_mask(K, aug, rng, n=None):
    """Bernoulli(p_aug) draws over ``k_min..K-k_tail``; one row per trajectory when ``n`` is given."""
    aug.validate(K)
    rows = 1 if n is None else n
    mask = np.zeros((rows, K + 1), dtype=bool)
    lo, hi = aug.k_min, K - aug.k_tail
    u = rng.random((rows, hi - lo + 1))
    mask[:, lo:hi + 1] = u < aug.p_aug
    return mask[0] if n is None else mask


def initial_state(shape, init, rng):
    if init == "zeros":
        return np.zeros(shape)
    if init == "normal":
        return rng.standard_normal(shape)
    raise ValidationError(f"unknown initialisation {init!r}")


def sample_trajectories(f, X, d_z, K, aug, rng, tmap=TimeMap(), solver_cfg=SolverConfig(), init="zeros"):
    """Run Anderson for exactly ``K`` steps on every row of ``X`` and augment.

    Parameters
    ----------
    f : callable ``f(z, x)`` (batched)
    X : array (N, d_x)
    d_z : int
    K : int
    aug : AugmentConfig
    rng : numpy Generator
        drives the initial state (``init="normal"``) and the augmentation draws
    tmap : TimeMap
    solver_cfg : SolverConfig
    init : {"zeros", "normal"}

    Returns
    -------
    list of Trajectory
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    aug.validate(K)
    z0 = initial_state((X.shape[0], d_z), init, rng)
    trace = solve(f, X, z0, solver_cfg, method="anderson", fixed_iterations=K)
    states = np.stack(trace.states, axis=1)  # (N, K+1, d_z)
    if not np.all(np.isfinite(states)):
        raise NumericalError("trajectory contains non-finite states")
    masks = augmentation_mask(K, aug, rng, n=X.shape[0])
    times = time_of(np.arange(K + 1), tmap)
    out = []
    for i in range(X.shape[0]):
        s = states[i].copy()
        s[masks[i]] = s[K]
        out.append(Trajectory(X[i].copy(), s, times.copy(), masks[i].copy()))
    return out


def sample_trajectory(f, x, d_z, K, aug, rng, tmap=TimeMap(), solver_cfg=SolverConfig(), init="zeros"):
    return sample_trajectories(f, np.asarray(x)[None], d_z, K, aug, rng, tmap, solver_cfg, init)[0]


def stack(trajectories):
    """Batch arrays ``(X, states, times, mask)`` from a list of equal-length trajectories."""
    return (
        np.stack([t.x for t in trajectories]),
        np.stack([t.states for t in trajectories]),
        np.stack([t.times for t in trajectories]),
        np.stack([t.mask for t in trajectories]),
    )


# ---------------------------------------------------------------- cache


def write_cache(trajectories, path, *, tmap=None, aug=None, seed=None, extra=None):
    """Persist trajectories as one little-endian float64 block per trajectory.

    Each block is ``x | times | mask (0/1) | states`` in row-major order.
    """
    trajectories = list(trajectories)
    if trajectories:
        d_x = trajectories[0].x.shape[0]
        K = trajectories[0].K
        d_z = trajectories[0].states.shape[1]
        for t in trajectories:
            if t.x.shape != (d_x,) or t.states.shape != (K + 1, d_z):
                raise ValidationError("all cached trajectories must share dimensions")
    else:
        d_x = K = d_z = 0
    blocks = []
    for t in trajectories:
        rec = np.concatenate([t.x, t.times, t.mask.astype(np.float64), t.states.ravel()])
        blocks.append(rec.astype("<f8").tobytes())
    meta = {
        "n": len(trajectories), "d_x": d_x, "d_z": d_z, "K": K,
        "record_floats": d_x + 2 * (K + 1) + (K + 1) * d_z if trajectories else 0,
        "time_map": asdict(tmap) if tmap is not None else None,
        "augment": asdict(aug) if aug is not None else None,
        "seed": seed,
        "extra": extra or {},
    }
    write_artifact(path, "trajectory-cache", meta, b"".join(blocks))


def read_cache(path, with_meta=False):
    meta, payload = read_artifact(path, "trajectory-cache")
    n, d_x, d_z, K = meta["n"], meta["d_x"], meta["d_z"], meta["K"]
    rec = meta["record_floats"]
    if len(payload) != n * rec * 8:
        raise CacheError(f"{path}: payload size does not match manifest")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    out = []
    for i in range(n):
        r = flat[i * rec:(i + 1) * rec]
        x = r[:d_x]
        times = r[d_x:d_x + K + 1]
        mask = r[d_x + K + 1:d_x + 2 * (K + 1)] != 0.0
        states = r[d_x + 2 * (K + 1):].reshape(K + 1, d_z)
        out.append(Trajectory(x.copy(), states.copy(), times.copy(), mask.copy()))
    if with_meta:
        return out, meta
    return out


def tmap_from_meta(meta):
    tm = meta.get("time_map")
    return TimeMap(**tm) if tm else TimeMap()


def aug_from_meta(meta):
    a = meta.get("augment")
    return AugmentConfig(**a) if a else AugmentConfig()

