"""Picard and Anderson fixed-point solvers.

Every routine accepts a single state of shape ``(d,)`` or a batch ``(B, d)``;
batched Anderson solves an independent weight problem per row.
"""

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import DivergenceError, NumericalError, ValidationError
from .numeric import DEFAULT_RIDGE, batched_weights

FixedPointMap = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SolverConfig:
    m: int = 5
    beta: float = 1.0
    max_iter: int = 100
    tol: float = 1e-6
    ridge: float = DEFAULT_RIDGE

    def __post_init__(self):
        if self.m < 1:
            raise ValidationError("history window m must be >= 1")
        if not 0.0 < self.beta <= 1.0:
            raise ValidationError("relaxation beta must lie in (0, 1]")
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.max_iter < 0:
            raise ValidationError("max_iter must be >= 0")
        if self.ridge < 0:
            raise ValidationError("ridge must be >= 0")


@dataclass
class SolveTrace:
    """Record of one solve.

    ``residual_norms[k]`` and ``rel_residuals[k]`` belong to ``states[k]``; they are
    only present for states whose map value was evaluated, so in fixed-iteration
    mode the final state has none. For batched solves each entry is a per-row array.
    """

    states: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)
    rel_residuals: list = field(default_factory=list)
    converged: bool = False
    iterations_used: int = 0
    nfe: int = 0
    fallback_steps: list = field(default_factory=list)
    alphas: list = field(default_factory=list)

    @property
    def final(self):
        return self.states[-1]


class AndersonStep(NamedTuple):
    z: np.ndarray
    alpha: np.ndarray
    fallback: np.ndarray  # bool per row: weight solve failed, damped Picard used


def _norms(v):
    return np.linalg.norm(v, axis=-1)


def rel_residual_rows(z, fz):
    """Row-wise relative residual; falls back to the absolute value for ``||z|| < 1e-12``."""
    num = _norms(fz - z)
    den = _norms(z)
    tiny = den < 1e-12
    return np.where(tiny, num, num / np.where(tiny, 1.0, den))


def picard_step(fz, z, beta=1.0):
    """Damped Picard update ``beta*f(z) + (1-beta)*z`` given the map value ``fz``."""
    out = beta * fz + (1.0 - beta) * z
    if not np.all(np.isfinite(out)):
        raise NumericalError("Picard step produced non-finite values")
    return out


def anderson_step(zs, fzs, cfg=SolverConfig()):
    """One Anderson update from a history window (oldest first).

    Parameters
    ----------
    zs, fzs : sequence of arrays
        the last ``m_k + 1`` states and their map values, each ``(d,)`` or ``(B, d)``.
    cfg : SolverConfig

    Rows whose weight solve fails fall back to a damped Picard step on the newest
    state; they are flagged in the returned ``fallback`` mask.
    """
    if len(zs) != len(fzs) or not zs:
        raise ValidationError("history states and map values must be non-empty and aligned")
    single = np.ndim(zs[-1]) == 1
    Z = np.stack([np.atleast_2d(z) for z in zs], axis=-1)  # (B, d, p)
    FZ = np.stack([np.atleast_2d(f) for f in fzs], axis=-1)
    alpha, ok = batched_weights(FZ - Z, cfg.ridge)
    p = Z.shape[-1]
    if not np.all(ok):
        alpha[~ok] = 0.0
        alpha[~ok, p - 1] = 1.0
    mix_f = np.einsum("bdp,bp->bd", FZ, alpha)
    mix_z = np.einsum("bdp,bp->bd", Z, alpha)
    z_next = cfg.beta * mix_f + (1.0 - cfg.beta) * mix_z
    if not np.all(np.isfinite(z_next)):
        raise NumericalError("Anderson step produced non-finite values")
    fallback = ~ok
    if single:
        return AndersonStep(z_next[0], alpha[0], fallback)
    return AndersonStep(z_next, alpha, fallback)


def solve(f, x, z0, cfg=SolverConfig(), method="anderson", fixed_iterations=None):
    """Iterate ``z <- f(z, x)`` with Picard or Anderson updates.

    Parameters
    ----------
    f : callable ``f(z, x)``
    x : array
        input injected at every step (``(d_x,)`` or ``(B, d_x)``)
    z0 : array
        initial state (the usual choice is zeros)
    cfg : SolverConfig
    method : {"anderson", "picard"}
    fixed_iterations : int, optional
        run exactly this many updates, ignoring ``tol``; the map is then
        evaluated exactly ``fixed_iterations`` times.

    Returns
    -------
    SolveTrace

    Raises
    ------
    DivergenceError
        carries the trace so far if an iterate becomes non-finite.
    """
    if method not in ("anderson", "picard"):
        raise ValidationError(f"unknown solver method {method!r}")
    z = np.array(z0, dtype=np.float64)
    trace = SolveTrace(states=[z.copy()])
    fixed = fixed_iterations is not None
    n_steps = int(fixed_iterations) if fixed else cfg.max_iter
    hist_z, hist_f = [], []

    for k in range(n_steps + (0 if fixed else 1)):
        fz = np.asarray(f(z, x), dtype=np.float64)
        trace.nfe += 1
        if not np.all(np.isfinite(fz)):
            raise DivergenceError("map produced non-finite values", {"trace": trace, "step": k})
        res = fz - z
        trace.residual_norms.append(_norms(res) if z.ndim > 1 else float(np.linalg.norm(res)))
        rel = rel_residual_rows(z, fz)
        trace.rel_residuals.append(rel if z.ndim > 1 else float(rel))
        if not fixed and np.all(rel < cfg.tol):
            trace.converged = True
            break
        if k == n_steps:
            break
        try:
            if method == "picard":
                z = picard_step(fz, z, cfg.beta)
            else:
                hist_z.append(z)
                hist_f.append(fz)
                if len(hist_z) > cfg.m + 1:
                    hist_z.pop(0)
                    hist_f.pop(0)
                step = anderson_step(hist_z, hist_f, cfg)
                z = step.z
                trace.alphas.append(step.alpha)
                if np.any(step.fallback):
                    trace.fallback_steps.append(k)
        except NumericalError as exc:
            raise DivergenceError(f"iterate became non-finite: {exc}", {"trace": trace, "step": k}) from exc
        trace.states.append(z.copy())
        trace.iterations_used += 1

    if fixed and trace.rel_residuals:
        # judged on the last evaluated state, i.e. the one before the final update
        trace.converged = bool(np.all(trace.rel_residuals[-1] < cfg.tol))
    return trace
