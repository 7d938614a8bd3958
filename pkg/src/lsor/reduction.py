"""Slow/fast partition, quasi-steady-state solve, and ROM/BLM construction.

The QSS map h(x, u) is the root of g(x, z, u, 0) = 0 tracked by damped Newton
with continuation from the previous solution; the reduced model replaces the
fast block by h, and the boundary-layer model describes the deviation
y = z - h(x, u) in the stretched time tau = t / eps_bar.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import (
    NewtonDivergence,
    NoTimeScaleSeparation,
    SingularJacobian,
)
from .sysdef import SingularSystem, jac_block

DEFAULT_GAP_RATIO = 10.0  # one decade of time-scale separation
DEFAULT_RESIDUAL_TOL = 1e-9


@dataclass(frozen=True)
class SlowFastPartition:
    """Index split of the derivative-scaling coefficient vector."""

    slow_indices: tuple[int, ...]
    fast_indices: tuple[int, ...]
    coeffs: np.ndarray
    gap_ratio: float

    @property
    def eps(self) -> np.ndarray:
        """Perturbation coefficients: the fast entries of the coefficient vector."""
        return self.coeffs[list(self.fast_indices)]


def identify_partition(coeffs, gap_ratio: float = DEFAULT_GAP_RATIO) -> SlowFastPartition:
    """Split states at the largest multiplicative gap of the coefficient spectrum.

    Coefficients are sorted descending; the largest adjacent ratio defines the
    boundary, states below it (small coefficients) are fast. Raises
    NoTimeScaleSeparation when no adjacent ratio reaches gap_ratio.
    """
    coeffs = np.atleast_1d(np.asarray(coeffs, dtype=float))
    if np.any(coeffs <= 0):
        raise ValueError("derivative coefficients must be > 0")
    if not gap_ratio > 1.0:
        raise ValueError("gap_ratio must be > 1")
    if coeffs.size < 2:
        raise NoTimeScaleSeparation("need at least two states to split")
    order = np.argsort(-coeffs, kind="stable")
    sorted_c = coeffs[order]
    ratios = sorted_c[:-1] / sorted_c[1:]
    cut = int(np.argmax(ratios))
    if ratios[cut] < gap_ratio:
        raise NoTimeScaleSeparation(
            f"largest adjacent coefficient ratio {ratios[cut]:.3g} < gap_ratio {gap_ratio:.3g}"
        )
    slow = np.sort(order[: cut + 1])
    fast = np.sort(order[cut + 1 :])
    return SlowFastPartition(
        slow_indices=tuple(int(i) for i in slow),
        fast_indices=tuple(int(i) for i in fast),
        coeffs=coeffs,
        gap_ratio=float(gap_ratio),
    )


class QssMap:
    """Root tracker for g(x, z, u, 0) = 0 with continuation seeding.

    One instance per simulation thread: it caches the last solution (the
    continuation seed) and the last fast-block LU factorization (chord
    iterations). All accepted solutions satisfy
    ||g(x, z, u, 0)||_inf / res_scale <= residual_tol.
    """

    def __init__(self, sys: SingularSystem, residual_tol: float = DEFAULT_RESIDUAL_TOL,
                 res_scale=None, max_iter: int = 50):
        self.sys = sys
        self.residual_tol = float(residual_tol)
        self.res_scale = np.ones(sys.m) if res_scale is None else np.asarray(res_scale, float)
        self.max_iter = max_iter
        self.last_solution = None
        self._lu = None
        self._zeros_eps = np.zeros(sys.m)

    def _g(self, x, z, u):
        return np.asarray(self.sys.g(x, z, u, self._zeros_eps), dtype=float)

    def jac_z(self, x, z, u):
        return jac_block(self.sys, "g", "z", x, z, u)

    def _factor(self, x, z, u):
        jac = self.jac_z(x, z, u)
        try:
            lu = sla.lu_factor(jac)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - scipy raises ValueError
            raise SingularJacobian(str(exc)) from exc
        diag = np.abs(np.diag(lu[0]))
        if diag.min() <= 1e-13 * max(diag.max(), 1.0):
            raise SingularJacobian("fast-block Jacobian numerically singular")
        self._lu = lu
        return lu

    def solve(self, x, u, z_guess=None) -> np.ndarray:
        """Return z with scaled residual below residual_tol.

        Seeds from z_guess, else the cached previous solution, else zeros.
        Newton steps are damped: the step is halved up to 8 times while the
        residual norm increases, then the solve fails with NewtonDivergence.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if z_guess is not None:
            z = np.atleast_1d(np.asarray(z_guess, dtype=float)).copy()
        elif self.last_solution is not None:
            z = self.last_solution.copy()
        else:
            z = np.zeros(self.sys.m)
        r = self._g(x, z, u)
        rnorm = np.max(np.abs(r) / self.res_scale)
        fresh = False
        for _ in range(self.max_iter):
            if rnorm <= self.residual_tol:
                self.last_solution = z.copy()
                return z
            if self._lu is None:
                self._factor(x, z, u)
                fresh = True
            dz = sla.lu_solve(self._lu, -r)
            alpha = 1.0
            for _ in range(8):
                z_try = z + alpha * dz
                r_try = self._g(x, z_try, u)
                rnorm_try = np.max(np.abs(r_try) / self.res_scale)
                if rnorm_try < rnorm or rnorm_try <= self.residual_tol:
                    break
                alpha *= 0.5
            else:
                if not fresh:
                    # stale chord Jacobian: refresh and retry this iterate
                    self._factor(x, z, u)
                    fresh = True
                    continue
                raise NewtonDivergence(
                    f"damped Newton stalled at residual {rnorm:.3e}"
                )
            if rnorm_try > 0.5 * rnorm:
                self._lu = None  # slow contraction: refactor at the new iterate
            z, r, rnorm = z_try, r_try, rnorm_try
            fresh = False
        if rnorm <= self.residual_tol:
            self.last_solution = z.copy()
            return z
        raise NewtonDivergence(f"no convergence in {self.max_iter} iterations "
                               f"(residual {rnorm:.3e})")

    def invalidate(self):
        """Drop continuation state (new trajectory or big parameter change)."""
        self.last_solution = None
        self._lu = None


@dataclass
class ReducedModel:
    """Slow subsystem with the fast block replaced by its QSS map."""

    base: SingularSystem
    h: QssMap

    @property
    def dim(self) -> int:
        return self.base.n

    def rhs(self, x, u) -> np.ndarray:
        z = self.h.solve(x, u)
        return np.asarray(self.base.f(x, z, u, np.zeros(self.base.m)), dtype=float)


@dataclass
class BoundaryLayerModel:
    """Deviation dynamics y = z - h(x, u) in stretched time tau = t/eps_bar.

    With per-state coefficients the exact change of variables carries the
    diagonal factor eps_bar/eps_i; for a scalar fast block the factor is 1 and
    the rhs is g(x, y + h, u, 0) verbatim.
    """

    base: SingularSystem
    h: QssMap

    @property
    def dim(self) -> int:
        return self.base.m

    @property
    def tau_scale(self) -> np.ndarray:
        return self.base.eps_bar / self.base.eps

    def rhs(self, y, x, u) -> np.ndarray:
        z_qss = self.h.solve(x, u)
        g_val = np.asarray(
            self.base.g(x, y + z_qss, u, np.zeros(self.base.m)), dtype=float
        )
        return self.tau_scale * g_val


def qss_solve(sys: SingularSystem, x, u, z_guess=None,
              residual_tol: float = DEFAULT_RESIDUAL_TOL) -> np.ndarray:
    """One-shot QSS solve (stateless convenience wrapper around QssMap)."""
    return QssMap(sys, residual_tol=residual_tol).solve(x, u, z_guess)


def build_rom(sys: SingularSystem, qss: QssMap) -> ReducedModel:
    return ReducedModel(base=sys, h=qss)


def build_blm(sys: SingularSystem, qss: QssMap) -> BoundaryLayerModel:
    return BoundaryLayerModel(base=sys, h=qss)


def eval_y_dynamics(sys: SingularSystem, qss: QssMap, x, y, u, u_dot, eps) -> np.ndarray:
    """Exact deviation dynamics in stretched time, including the slow drift.

    dy/dtau = D g(x, y+h, u, eps) - eps_bar [dh/dx f(x, y+h, u, eps) + dh/du udot]
    with D = diag(eps_bar/eps) (identity for scalar fast blocks; at eps = 0 this
    degenerates to the boundary-layer rhs). dh/dx and dh/du come from implicit
    differentiation of g(x, h, u, 0) = 0.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    u_dot = np.atleast_1d(np.asarray(u_dot, dtype=float))
    eps = np.atleast_1d(np.asarray(eps, dtype=float))
    eps_bar = float(np.max(eps))
    scale = eps_bar / eps if eps_bar > 0 else np.ones_like(eps)

    h_val = qss.solve(x, u)
    jz = qss.jac_z(x, h_val, u)
    jx = jac_block(sys, "g", "x", x, h_val, u)
    ju = jac_block(sys, "g", "u", x, h_val, u)
    try:
        lu = sla.lu_factor(jz)
    except Exception as exc:
        raise SingularJacobian(str(exc)) from exc
    diag = np.abs(np.diag(lu[0]))
    if diag.min() <= 1e-13 * max(diag.max(), 1.0):
        raise SingularJacobian("dg/dz singular in implicit differentiation")
    dh_dx = -sla.lu_solve(lu, jx)
    dh_du = -sla.lu_solve(lu, ju)

    z = y + h_val
    g_val = np.asarray(sys.g(x, z, u, eps), dtype=float)
    f_val = np.asarray(sys.f(x, z, u, eps), dtype=float)
    correction = dh_dx @ f_val + dh_du @ u_dot
    return scale * g_val - eps_bar * correction


def descriptor(sys: SingularSystem, partition: SlowFastPartition | None = None) -> dict:
    """JSON-ready summary of a reduced system (dims, partition, labels, eps)."""
    out = {
        "slow_dim": sys.n,
        "fast_dim": sys.m,
        "input_dim": sys.p,
        "order_drop": f"{sys.n + sys.m} -> {sys.n}",
        "eps": [float(e) for e in sys.eps],
        "eps_bar": sys.eps_bar,
        "labels": list(sys.labels) if sys.labels else None,
    }
    if partition is not None:
        out["partition"] = {
            "slow_indices": list(partition.slow_indices),
            "fast_indices": list(partition.fast_indices),
            "gap_ratio": partition.gap_ratio,
            "coefficients": [float(c) for c in partition.coeffs],
        }
    return out
