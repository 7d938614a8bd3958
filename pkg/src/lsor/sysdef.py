"""Two-time-scale system definitions, piecewise inputs and numerical Jacobians.

The central object is :class:`SingularSystem`: slow dynamics ``xdot = f(x, z, u, eps)``
and fast dynamics ``eps * zdot = g(x, z, u, eps)`` with one perturbation coefficient
per fast state. ``f`` and ``g`` are plain callables returning 1-d arrays; everything
here is immutable after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, EvaluationError

Evaluator = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]

DEFAULT_FD_STEP = 1e-6  # relative central-difference step


def _as_vector(v, n, name):
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    if arr.shape != (n,):
        raise DimensionError(f"{name}: expected length {n}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class SingularSystem:
    """Bundle (f, g, eps, dims) of a singular perturbed system.

    n, m, p: slow-state, fast-state and input dimensions.
    f: (x, z, u, eps) -> slow derivative, length n.
    g: (x, z, u, eps) -> fast residual, length m (caller forms zdot = g/eps).
    eps: perturbation coefficient per fast state, all > 0.
    labels: optional state names, slow first, then fast (length n+m).
    """

    n: int
    m: int
    p: int
    f: Evaluator
    g: Evaluator
    eps: np.ndarray
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        eps = np.atleast_1d(np.asarray(self.eps, dtype=float))
        if eps.shape != (self.m,):
            raise DimensionError(f"eps: expected length {self.m}, got shape {eps.shape}")
        if np.any(eps <= 0.0):
            raise ValueError("every perturbation coefficient must be > 0")
        object.__setattr__(self, "eps", eps)
        if self.labels is not None and len(self.labels) != self.n + self.m:
            raise DimensionError("labels must have length n + m")

    @property
    def eps_bar(self) -> float:
        """Scalar perturbation size used in all bounds: the largest coefficient."""
        return float(np.max(self.eps))


def evaluate(sys: SingularSystem, x, z, u, eps=None):
    """Evaluate (f, g) at a point, enforcing dimensions and finiteness.

    Returns the pair (f_val, g_val); the caller forms zdot = g_val / eps
    elementwise. ``eps`` defaults to the system's stored coefficients.
    """
    x = _as_vector(x, sys.n, "x")
    z = _as_vector(z, sys.m, "z")
    u = _as_vector(u, sys.p, "u")
    eps = sys.eps if eps is None else _as_vector(eps, sys.m, "eps")
    f_val = np.asarray(sys.f(x, z, u, eps), dtype=float).reshape(-1)
    g_val = np.asarray(sys.g(x, z, u, eps), dtype=float).reshape(-1)
    if f_val.shape != (sys.n,) or g_val.shape != (sys.m,):
        raise DimensionError(
            f"evaluator output shapes {f_val.shape}, {g_val.shape} "
            f"do not match (n, m) = ({sys.n}, {sys.m})"
        )
    if not (np.all(np.isfinite(f_val)) and np.all(np.isfinite(g_val))):
        raise EvaluationError("non-finite evaluator output", point=(x, z, u, eps))
    return f_val, g_val


@dataclass(frozen=True)
class InputSignal:
    """Piecewise-constant input: ordered (start-time, value-vector) segments.

    The first segment starts at t = 0 and lookups are right-continuous: at a
    breakpoint the new value applies. udot is zero except at breakpoints, so
    the correction term proportional to udot vanishes between events.
    """

    segments: tuple[tuple[float, np.ndarray], ...]

    def __init__(self, segments: Sequence[tuple[float, Sequence[float]]]):
        if not segments:
            raise ValueError("at least one segment required")
        norm = []
        prev = None
        for t0, val in segments:
            t0 = float(t0)
            if prev is not None and t0 <= prev:
                raise ValueError("segment start-times must be strictly increasing")
            prev = t0
            norm.append((t0, np.atleast_1d(np.asarray(val, dtype=float))))
        if norm[0][0] != 0.0:
            raise ValueError("first segment must start at t = 0")
        dim = norm[0][1].shape
        if any(v.shape != dim for _, v in norm):
            raise DimensionError("all segment values must share one dimension")
        object.__setattr__(self, "segments", tuple(norm))

    @property
    def dim(self) -> int:
        return self.segments[0][1].size

    @property
    def breakpoints(self) -> list[float]:
        """Interior discontinuity times (excludes t = 0)."""
        return [t0 for t0, _ in self.segments[1:]]

    def value(self, t: float) -> np.ndarray:
        idx = 0
        for i, (t0, _) in enumerate(self.segments):
            if t >= t0:
                idx = i
            else:
                break
        return self.segments[idx][1]

    def udot(self, t: float) -> np.ndarray:
        return np.zeros(self.dim)

    @staticmethod
    def constant(value) -> "InputSignal":
        return InputSignal([(0.0, value)])


@dataclass(frozen=True)
class JacobianRequest:
    """Request one finite-difference Jacobian block of f or g.

    target: 'f' or 'g'; wrt: 'x', 'z', 'u' or 'eps';
    point: (x, z, u, eps) tuple; step: relative central-difference step.
    """

    sys: SingularSystem
    target: str
    wrt: str
    point: tuple
    step: float = DEFAULT_FD_STEP

    def __post_init__(self):
        if self.target not in ("f", "g"):
            raise ValueError("target must be 'f' or 'g'")
        if self.wrt not in ("x", "z", "u", "eps"):
            raise ValueError("wrt must be one of 'x', 'z', 'u', 'eps'")
        if not self.step > 0:
            raise ValueError("step must be > 0")


def jacobian(req: JacobianRequest) -> np.ndarray:
    """Central finite-difference Jacobian of the requested map/argument block.

    Entry (i, j) = (F_i(p_j + h) - F_i(p_j - h)) / (2 h) with
    h = step * (1 + |p_j|). Raises EvaluationError on non-finite entries.
    """
    sys = req.sys
    x, z, u, eps = [np.atleast_1d(np.asarray(v, dtype=float)) for v in req.point]
    fn = sys.f if req.target == "f" else sys.g
    out_dim = sys.n if req.target == "f" else sys.m
    blocks = {"x": x, "z": z, "u": u, "eps": eps}
    base = blocks[req.wrt]
    cols = base.size
    jac = np.empty((out_dim, cols))
    for j in range(cols):
        h = req.step * (1.0 + abs(base[j]))
        hi = base.copy()
        lo = base.copy()
        hi[j] += h
        lo[j] -= h
        args_hi = {**blocks, req.wrt: hi}
        args_lo = {**blocks, req.wrt: lo}
        f_hi = np.asarray(fn(args_hi["x"], args_hi["z"], args_hi["u"], args_hi["eps"]), dtype=float)
        f_lo = np.asarray(fn(args_lo["x"], args_lo["z"], args_lo["u"], args_lo["eps"]), dtype=float)
        jac[:, j] = (f_hi - f_lo) / (2.0 * h)
    if not np.all(np.isfinite(jac)):
        raise EvaluationError("non-finite Jacobian entries", point=req.point)
    return jac


def jac_block(sys, target, wrt, x, z, u, eps=None, step=DEFAULT_FD_STEP):
    """Shorthand for jacobian(JacobianRequest(...)) with eps defaulting to 0.

    Reduction and assessment evaluate most blocks on the degenerate slice
    eps = 0, hence the default.
    """
    if eps is None:
        eps = np.zeros(sys.m)
    return jacobian(JacobianRequest(sys, target, wrt, (x, z, u, eps), step))
