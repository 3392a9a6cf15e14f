"""Dense float64 arithmetic, seeded randomness, and the Anderson weight solve.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
"""

import numpy as np

from .errors import DegenerateStateError, IllConditionedError, NumericalError, ShapeError

DEFAULT_RIDGE = 1e-8

# condition-number ceiling on the (normalised) bordered system
_COND_LIMIT = 1e13


def as_tensor(value, *, finite=True, name="tensor"):
    """Return ``value`` as a C-contiguous float64 array.

    With ``finite=True`` NaN/Inf entries are rejected with :class:`NumericalError`.
    """
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if finite and not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite values")
    return arr


def make_rng(seed):
    """Deterministic generator; identical seeds give bit-identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def l2_norm(t):
    return float(np.linalg.norm(np.ravel(t)))


def relative_residual(z, fz):
    """``||fz - z|| / ||z||``; raises :class:`DegenerateStateError` when ``z`` is zero."""
    z = np.asarray(z, dtype=np.float64)
    fz = np.asarray(fz, dtype=np.float64)
    if z.shape != fz.shape:
        raise ShapeError(f"shape mismatch {z.shape} vs {fz.shape}")
    denom = l2_norm(z)
    if denom == 0.0:
        raise DegenerateStateError("relative residual undefined for a zero state")
    return l2_norm(fz - z) / denom


def _bordered_systems(R, ridge):
    # R: (B, n, p).  Gram matrices are rescaled by their mean diagonal so the
    # weights are invariant to residual magnitude; ridge is relative to that scale.
    G = np.einsum("bni,bnj->bij", R, R)
    p = G.shape[-1]
    scale = np.trace(G, axis1=1, axis2=2) / p
    scale = np.where(scale > 0.0, scale, 1.0)
    G = G / scale[:, None, None]
    if ridge:
        G = G + ridge * np.eye(p)
    A = np.zeros((G.shape[0], p + 1, p + 1))
    A[:, :p, :p] = G
    A[:, :p, p] = 1.0
    A[:, p, :p] = 1.0
    rhs = np.zeros((G.shape[0], p + 1))
    rhs[:, p] = 1.0
    return A, rhs


def _solve_one(A, rhs):
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > _COND_LIMIT:
        return None
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        return None
    alpha = sol[:-1]
    total = alpha.sum()
    if not np.all(np.isfinite(alpha)) or total == 0.0:
        return None
    return alpha / total


def batched_weights(R, ridge=DEFAULT_RIDGE):
    """Solve the sum-to-one least-squares problem for every slice of ``R``.

    Parameters
    ----------
    R : array (B, n, p)
        residual columns for each batch element
    ridge : float
        diagonal regulariser, relative to the mean squared column norm

    Returns
    -------
    alpha : array (B, p)
        weights; rows that failed are NaN
    ok : bool array (B,)
    """
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 3 or R.shape[2] < 1:
        raise ShapeError(f"expected (B, n, p) residual stack, got {R.shape}")
    B, _, p = R.shape
    if p == 1:
        return np.ones((B, 1)), np.ones(B, dtype=bool)
    A, rhs = _bordered_systems(R, ridge)
    alpha = np.full((B, p), np.nan)
    ok = np.zeros(B, dtype=bool)
    conds = np.linalg.cond(A) if np.all(np.isfinite(A)) else None
    if conds is not None and np.all(conds < _COND_LIMIT):
        try:
            sol = np.linalg.solve(A, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            sol = None
        if sol is not None and np.all(np.isfinite(sol)):
            alpha = sol[:, :p]
            alpha = alpha / alpha.sum(axis=1, keepdims=True)
            return alpha, np.ones(B, dtype=bool)
    for i in range(B):
        a = _solve_one(A[i], rhs[i])
        if a is not None:
            alpha[i] = a
            ok[i] = True
    return alpha, ok


def constrained_least_squares(R, ridge=DEFAULT_RIDGE):
    """Weights ``alpha`` minimising ``||R alpha||`` subject to ``sum(alpha) == 1``.

    Solved through the Lagrangian (bordered) normal equations
    ``[[G + ridge I, 1], [1^T, 0]] [alpha; nu] = [0; 1]`` with ``G = R^T R``
    normalised by its mean diagonal.

    Raises
    ------
    IllConditionedError
        if the bordered system is singular even after regularisation.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[1] < 1:
        raise ShapeError(f"expected an (n, p) matrix with p >= 1, got {R.shape}")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    alpha, ok = batched_weights(R[None], ridge)
    if not ok[0]:
        raise IllConditionedError("constrained least-squares system is singular")
    return alpha[0]
