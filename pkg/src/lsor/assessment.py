"""Numerical stability and accuracy assessment of a reduction.

Three executable assumption checks (growth/boundedness of the vector fields,
exponential stability + ISS gain of the reduced model, uniform global
asymptotic stability of the boundary layer), converse-Lyapunov constant
estimation, the eps*/eps** perturbation-size bounds, and direct verification
of the O(eps) error laws and ISS envelopes against simulated trajectories.

All sampled checks are deterministic given the DomainBox seed. The 2-norm is
used throughout (recorded in the report). Constants that the underlying
theory only asserts to exist are estimated as one admissible instantiation;
each formula is recorded in the workspace notes so reports are auditable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.stats import qmc

from .errors import (
    EvaluationError,
    GridMismatch,
    InfeasibleConstants,
    NoFeasibleEpsilon,
    NotAnEquilibrium,
    NotHurwitz,
    EigenvalueFailure,
    SolveFailure,
)
from .integrators import Trajectory
from .reduction import BoundaryLayerModel, QssMap, ReducedModel
from .sysdef import SingularSystem, jac_block

BOUND_CAP = 1e12  # sampled |value| above this counts as unbounded
STABILITY_MARGIN = 1e-6  # eigenvalue real parts must clear this


# ---------------------------------------------------------------------------
# domain sampling


@dataclass(frozen=True)
class DomainBox:
    """Radius-mu sampling box for max{||x0||, ||y0||, ||u||, ||udot||} <= mu.

    Scale vectors (default ones) make mixed-unit states commensurate: samples
    are mu * scale * (unit-box point) and all norms divide by the scales.
    """

    mu: float
    samples: int = 1024
    scheme: str = "sobol"  # or "grid"
    seed: int = 0
    x_scale: np.ndarray | None = None
    z_scale: np.ndarray | None = None
    u_scale: np.ndarray | None = None
    x_center: np.ndarray | None = None
    z_center: np.ndarray | None = None
    u_center: np.ndarray | None = None

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be > 0")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.scheme not in ("sobol", "grid"):
            raise ValueError("scheme must be 'sobol' or 'grid'")

    def scales(self, n, m, p):
        sx = np.ones(n) if self.x_scale is None else np.asarray(self.x_scale, float)
        sz = np.ones(m) if self.z_scale is None else np.asarray(self.z_scale, float)
        su = np.ones(p) if self.u_scale is None else np.asarray(self.u_scale, float)
        return sx, sz, su

    def centers(self, n, m, p):
        """Operating point the box is centered on (the theorem's shifted origin)."""
        cx = np.zeros(n) if self.x_center is None else np.asarray(self.x_center, float)
        cz = np.zeros(m) if self.z_center is None else np.asarray(self.z_center, float)
        cu = np.zeros(p) if self.u_center is None else np.asarray(self.u_center, float)
        return cx, cz, cu

    def unit_points(self, dim, count=None):
        """Points in [-1, 1]^dim, deterministic for a fixed seed."""
        count = count or self.samples
        if dim == 0:
            return np.zeros((count, 0))
        if self.scheme == "grid":
            per_axis = max(2, int(round(count ** (1.0 / dim))))
            axes = [np.linspace(-1.0, 1.0, per_axis)] * dim
            mesh = np.meshgrid(*axes, indexing="ij")
            return np.column_stack([m.ravel() for m in mesh])
        sampler = qmc.Sobol(d=dim, scramble=True, seed=self.seed)
        draw = 1 << (count - 1).bit_length()  # Sobol balance wants powers of two
        return (2.0 * sampler.random(draw) - 1.0)[:count]


# ---------------------------------------------------------------------------
# comparison functions


@dataclass(frozen=True)
class KLFunctionExp:
    """Exponential class-KL function beta(r, s) = M * r * exp(-lam * s)."""

    M: float
    lam: float

    def __post_init__(self):
        if self.M < 1.0:
            raise ValueError("amplitude factor M must be >= 1")
        if not self.lam > 0:
            raise ValueError("decay rate must be > 0")

    def __call__(self, r, s):
        return self.M * r * np.exp(-self.lam * np.asarray(s, dtype=float))


@dataclass(frozen=True)
class KFunctionLin:
    """Linear class-K function alpha(r) = gain * r."""

    gain: float

    def __post_init__(self):
        if self.gain < 0:
            raise ValueError("gain must be >= 0")

    def __call__(self, r):
        return self.gain * np.asarray(r, dtype=float)


# ---------------------------------------------------------------------------
# reports


@dataclass
class GrowthReport:
    ok: bool
    sup_f: float
    sup_g: float
    sup_partials: dict
    offending: str | None = None
    witness: tuple | None = None

    def __bool__(self):
        return self.ok


@dataclass
class RomStabilityReport:
    exp_stable: bool
    iss_gain: KFunctionLin | None
    eigenvalues: np.ndarray
    A: np.ndarray
    B: np.ndarray
    P: np.ndarray | None
    dynamic_mask: np.ndarray | None = None  # False marks structurally constant states


@dataclass
class GasVerdict:
    ok: bool
    witness: tuple | None = None  # (x, u, y) sample violating decrease/Hurwitz

    def __bool__(self):
        return self.ok


@dataclass
class EnvelopeVerdict:
    ok: bool
    t_violation: float | None = None
    which: str | None = None  # "x" or "y"

    def __bool__(self):
        return self.ok


@dataclass
class EstimationWorkspace:
    """Numerically estimated proof constants (one admissible instantiation)."""

    l1: float  # quadratic remainder coefficient of f about the slow error
    l2: float  # mixed remainder coefficient
    l3: float  # Lipschitz constant of f in the fast argument
    l4: float  # sensitivity of f to the perturbation argument
    c1: float  # lambda_min(P)
    c2: float  # lambda_max(P)
    c3: float  # lambda_min(Q)
    c4: float  # 2 ||P||
    la: float  # envelope decay margin
    lb: float  # transient coefficient on the ROM KL bound
    lc: float  # eps forcing coefficient (at the reference eps)
    ld: float  # boundary-layer forcing coefficient
    le: float  # transient inflation of the envelope transition factor
    lf: float  # asymptotic envelope decay rate
    xi: float  # residual ISS offset
    k: float  # O(eps) slope constant
    notes: dict = field(default_factory=dict)

    def as_dict(self):
        out = {name: getattr(self, name) for name in
               ("l1", "l2", "l3", "l4", "c1", "c2", "c3", "c4",
                "la", "lb", "lc", "ld", "le", "lf", "xi", "k")}
        out["notes"] = self.notes
        return out


@dataclass
class EpsilonBounds:
    eps_star: float
    eps_star2: float | None
    T: float | None
    components: dict
    method_notes: str = ""

    def as_dict(self):
        return {
            "eps_star": self.eps_star,
            "eps_star2": self.eps_star2,
            "T": self.T,
            "components": self.components,
            "method_notes": self.method_notes,
        }


@dataclass
class ErrorSlopes:
    eps_list: np.ndarray
    slow_errors: np.ndarray
    fast_errors: np.ndarray
    fast_tail_errors: np.ndarray
    slow_slope: float
    fast_slope: float
    fast_tail_slope: float
    slow_intercept_k: float
    fast_intercept_k: float

    def as_dict(self):
        return {
            "eps": list(map(float, self.eps_list)),
            "slow_errors": list(map(float, self.slow_errors)),
            "fast_errors": list(map(float, self.fast_errors)),
            "fast_tail_errors": list(map(float, self.fast_tail_errors)),
            "slow_slope": self.slow_slope,
            "fast_slope": self.fast_slope,
            "fast_tail_slope": self.fast_tail_slope,
            "slow_intercept_k": self.slow_intercept_k,
            "fast_intercept_k": self.fast_intercept_k,
        }


@dataclass
class AssessmentReport:
    growth_ok: bool
    rom_stable: bool
    blm_gas: bool
    rom_eigenvalues: np.ndarray
    iss_gain: KFunctionLin | None
    bounds: EpsilonBounds | None
    workspace: EstimationWorkspace | None
    error_slopes: ErrorSlopes | None = None
    accepted: bool = False
    reconstruction: str | None = None  # "h" (after T) or "h+yhat"
    seed: int = 0
    norm: str = "2"
    notes: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "growth_ok": self.growth_ok,
            "rom_stable": self.rom_stable,
            "blm_gas": self.blm_gas,
            "rom_eigenvalues": [[float(ev.real), float(ev.imag)]
                                for ev in np.atleast_1d(self.rom_eigenvalues)],
            "iss_gain": None if self.iss_gain is None else self.iss_gain.gain,
            "bounds": None if self.bounds is None else self.bounds.as_dict(),
            "workspace": None if self.workspace is None else self.workspace.as_dict(),
            "error_slopes": None if self.error_slopes is None else self.error_slopes.as_dict(),
            "accepted": self.accepted,
            "reconstruction": self.reconstruction,
            "seed": self.seed,
            "norm": self.norm,
            "notes": self.notes,
        }

    def to_json(self, path=None, indent=2):
        text = json.dumps(self.as_dict(), indent=indent)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


# ---------------------------------------------------------------------------
# assumption checks


def check_growth(sys: SingularSystem, box: DomainBox, jac_samples: int = 64) -> GrowthReport:
    """Sample f, g and all first partial differences over the box.

    True when every sampled value and partial is finite and below the bound
    cap; a false verdict names the offending map and carries the witness
    sample. Evaluation failures propagate with the sample point attached.
    """
    sx, sz, su = box.scales(sys.n, sys.m, sys.p)
    cx, cz, cu = box.centers(sys.n, sys.m, sys.p)
    pts = box.unit_points(sys.n + sys.m + sys.p)
    sup_f = 0.0
    sup_g = 0.0
    sup_partials = {}
    eps0 = np.zeros(sys.m)

    def split(row):
        x = cx + box.mu * sx * row[: sys.n]
        z = cz + box.mu * sz * row[sys.n: sys.n + sys.m]
        u = cu + box.mu * su * row[sys.n + sys.m:]
        return x, z, u

    for row in pts:
        x, z, u = split(row)
        try:
            f_val = np.asarray(sys.f(x, z, u, eps0), dtype=float)
            g_val = np.asarray(sys.g(x, z, u, eps0), dtype=float)
        except (FloatingPointError, ZeroDivisionError) as exc:
            raise EvaluationError(str(exc), point=(x, z, u)) from exc
        nf = float(np.linalg.norm(f_val))
        ng = float(np.linalg.norm(g_val))
        if not np.isfinite(nf) or nf > BOUND_CAP:
            return GrowthReport(False, sup_f, sup_g, sup_partials, "f", (x, z, u))
        if not np.isfinite(ng) or ng > BOUND_CAP:
            return GrowthReport(False, sup_f, sup_g, sup_partials, "g", (x, z, u))
        sup_f = max(sup_f, nf)
        sup_g = max(sup_g, ng)

    for row in pts[: min(jac_samples, len(pts))]:
        x, z, u = split(row)
        for target in ("f", "g"):
            for wrt in ("x", "z", "u"):
                jac = jac_block(sys, target, wrt, x, z, u)
                nj = float(np.linalg.norm(jac, 2))
                key = f"d{target}/d{wrt}"
                if not np.isfinite(nj) or nj > BOUND_CAP:
                    return GrowthReport(False, sup_f, sup_g, sup_partials, key, (x, z, u))
                sup_partials[key] = max(sup_partials.get(key, 0.0), nj)
    return GrowthReport(True, sup_f, sup_g, sup_partials)


def _fd_matrix(fn, point, dim_out, step=1e-6):
    point = np.atleast_1d(np.asarray(point, dtype=float))
    jac = np.empty((dim_out, point.size))
    for j in range(point.size):
        h = step * (1.0 + abs(point[j]))
        hi = point.copy()
        lo = point.copy()
        hi[j] += h
        lo[j] -= h
        jac[:, j] = (np.atleast_1d(fn(hi)) - np.atleast_1d(fn(lo))) / (2.0 * h)
    return jac


def check_rom_stability(rom: ReducedModel, x_eq, box: DomainBox, u_eq=None,
                        eq_tol: float = 1e-6,
                        stability_margin: float = STABILITY_MARGIN) -> RomStabilityReport:
    """Linearize the reduced model at its equilibrium and certify it.

    exp_stable iff every eigenvalue real part < -stability_margin. The ISS
    gain is the conservative linear-regime bound 2 ||B|| ||P|| / lambda_min(Q)
    from the Lyapunov equation of the linearization (Q = I).
    """
    n = rom.dim
    x_eq = np.atleast_1d(np.asarray(x_eq, dtype=float))
    u_eq = np.zeros(rom.base.p) if u_eq is None else np.atleast_1d(np.asarray(u_eq, float))
    sx, _, su = box.scales(n, rom.base.m, rom.base.p)
    res = rom.rhs(x_eq, u_eq)
    if np.max(np.abs(res / sx)) > eq_tol:
        raise NotAnEquilibrium(
            f"reduced rhs at x_eq has scaled residual {np.max(np.abs(res / sx)):.3e}"
        )
    # linearize in scaled coordinates (similarity: eigenvalues unchanged,
    # Lyapunov constants and the ISS gain become unit-commensurate)
    A_raw = _fd_matrix(lambda xv: rom.rhs(xv, u_eq), x_eq, n)
    B_raw = (_fd_matrix(lambda uv: rom.rhs(x_eq, uv), u_eq, n)
             if rom.base.p else np.zeros((n, 0)))
    A = A_raw / sx[:, None] * sx[None, :]
    B = B_raw / sx[:, None] * (su[None, :] if B_raw.size else 1.0)

    # deflate structurally constant states (identically zero rhs rows, e.g. a
    # phase-reference angle): their exact zero eigenvalues are not dynamics,
    # and the zero row makes the deflation spectrum-exact
    row_mag = np.max(np.abs(A), axis=1)
    row_mag_b = np.max(np.abs(B), axis=1) if B.size else np.zeros(n)
    keep = (row_mag + row_mag_b) > 1e-12 * max(1.0, float(np.max(np.abs(A))))
    A_dyn = A[np.ix_(keep, keep)]
    B_dyn = B[keep]
    try:
        eigs = np.linalg.eigvals(A_dyn)
    except np.linalg.LinAlgError as exc:
        raise EigenvalueFailure(str(exc)) from exc
    exp_stable = bool(eigs.size and np.max(eigs.real) < -stability_margin)
    if not exp_stable:
        return RomStabilityReport(False, None, eigs, A, B, None, dynamic_mask=keep)
    P, c1, c2, c3, c4 = lyapunov_constants(A_dyn, np.eye(int(keep.sum())))
    gain = 2.0 * np.linalg.norm(B_dyn, 2) * np.linalg.norm(P, 2) / c3 if B.size else 0.0
    return RomStabilityReport(True, KFunctionLin(float(gain)), eigs, A, B, P,
                              dynamic_mask=keep)


def check_blm_gas(blm: BoundaryLayerModel, box: DomainBox, frozen_samples: int = 16,
                  shell_fractions=(0.25, 0.5, 0.75, 1.0), directions: int = 8,
                  stability_margin: float = STABILITY_MARGIN,
                  candidate: str = "identity") -> GasVerdict:
    """Sampled uniform-GAS check of the boundary layer.

    For every sampled frozen (x, u): (a) the layer Jacobian at y = 0 must be
    Hurwitz, and (b) a quadratic Lyapunov candidate must strictly decrease
    along the layer rhs on direction samples of each radius shell up to mu.
    candidate "identity" uses V = ||y||^2 (scaled); "auto" solves a Lyapunov
    equation at the box center first - the identity candidate falsely rejects
    rotational layers (LC oscillations) whose norm transiently grows although
    the layer is uniformly contracting. A false verdict carries the first
    witness sample.
    """
    sys = blm.base
    sx, sz, su = box.scales(sys.n, sys.m, sys.p)
    cx, _, cu = box.centers(sys.n, sys.m, sys.p)
    frozen = box.unit_points(sys.n + sys.p, count=frozen_samples)
    dirs = box.unit_points(sys.m, count=directions)
    norms = np.linalg.norm(dirs, axis=1)
    norms[norms == 0] = 1.0
    dirs = dirs / norms[:, None]

    for row in frozen:
        x = cx + box.mu * sx * row[: sys.n]
        u = cu + box.mu * su * row[sys.n:]
        jac = _fd_matrix(lambda yv: blm.rhs(yv, x, u), np.zeros(sys.m), sys.m)
        eigs = np.linalg.eigvals(jac)
        if np.max(eigs.real) >= -stability_margin:
            return GasVerdict(False, witness=(x, u, np.zeros(sys.m)))
        if candidate == "auto":
            # quadratic form certified for this frozen layer's linearization;
            # the decrease sampling then probes only its nonlinearity
            jac_s = jac / sz[:, None] * sz[None, :]
            p_form, *_ = lyapunov_constants(jac_s, np.eye(sys.m))
        else:
            p_form = np.eye(sys.m)
        for frac in shell_fractions:
            for d in dirs:
                y = box.mu * frac * sz * d
                decrease = 2.0 * float(
                    (y / sz) @ p_form @ (blm.rhs(y, x, u) / sz)
                )
                if decrease >= 0.0:
                    return GasVerdict(False, witness=(x, u, y))
    return GasVerdict(True)


def estimate_lipschitz(fn, box: DomainBox, dim: int, scale=None, samples=None,
                       center=None) -> float:
    """Max sampled finite-difference slope (2-norm of the local Jacobian)."""
    scale = np.ones(dim) if scale is None else np.asarray(scale, float)
    center = np.zeros(dim) if center is None else np.asarray(center, float)
    pts = box.unit_points(dim, count=samples or box.samples)
    out0 = np.atleast_1d(fn(center + box.mu * scale * pts[0]))
    best = 0.0
    for row in pts:
        p = center + box.mu * scale * row
        jac = _fd_matrix(fn, p, out0.size)
        best = max(best, float(np.linalg.norm(jac * scale[None, :], 2)))
    return best


def lyapunov_constants(A, Q):
    """Solve A^T P + P A = -Q and return (P, c1, c2, c3, c4).

    c1 = lambda_min(P), c2 = lambda_max(P), c3 = lambda_min(Q), c4 = 2||P||.
    Raises NotHurwitz when A has an eigenvalue with non-negative real part.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    eigs = np.linalg.eigvals(A)
    if np.max(eigs.real) >= 0.0:
        raise NotHurwitz(f"max eigenvalue real part {np.max(eigs.real):.3e} >= 0")
    try:
        P = sla.solve_continuous_lyapunov(A.T, -Q)
    except Exception as exc:
        raise SolveFailure(str(exc)) from exc
    P = 0.5 * (P + P.T)
    resid = A.T @ P + P @ A + Q
    # round-off in the Bartels-Stewart solve scales with ||A|| ||P||
    tol = max(1e-10, 1e-11 * float(np.linalg.norm(A, 2) * np.linalg.norm(P, 2)))
    if np.max(np.abs(resid)) > tol:
        raise SolveFailure("Lyapunov residual too large")
    pe = np.linalg.eigvalsh(P)
    qe = np.linalg.eigvalsh(0.5 * (Q + Q.T))
    c1, c2 = float(pe[0]), float(pe[-1])
    c3 = float(qe[0])
    c4 = 2.0 * float(np.linalg.norm(P, 2))
    return P, c1, c2, c3, c4


# ---------------------------------------------------------------------------
# constant estimation and epsilon bounds


def fit_beta_y(blm: BoundaryLayerModel, box: DomainBox, frozen_samples: int = 8,
               overshoot_runs: int = 4, tau_horizon: float | None = None) -> KLFunctionExp:
    """Fit beta_y(r, s) = M r e^{-lam s} from the boundary layer.

    lam is the slowest layer-Jacobian decay rate over sampled frozen (x, u);
    M is the largest observed overshoot of ||y(tau)|| e^{+lam tau} / ||y(0)||
    over a few simulated layer transients (floored at 1).
    """
    from .integrators import SolverConfig, integrate_explicit

    sys = blm.base
    sx, sz, su = box.scales(sys.n, sys.m, sys.p)
    cx, _, cu = box.centers(sys.n, sys.m, sys.p)
    frozen = box.unit_points(sys.n + sys.p, count=frozen_samples)
    lam = np.inf
    for row in frozen:
        x = cx + box.mu * sx * row[: sys.n]
        u = cu + box.mu * su * row[sys.n:]
        jac = _fd_matrix(lambda yv: blm.rhs(yv, x, u), np.zeros(sys.m), sys.m)
        lam = min(lam, -float(np.max(np.linalg.eigvals(jac).real)))
    if not np.isfinite(lam) or lam <= 0:
        raise InfeasibleConstants("boundary layer is not exponentially contracting")
    horizon = tau_horizon or 6.0 / lam
    M = 1.0
    cfg = SolverConfig(rtol=1e-7, atol=1e-10, h0=min(1e-2, horizon / 100))
    for i, row in enumerate(frozen[:overshoot_runs]):
        x = cx + box.mu * sx * row[: sys.n]
        u = cu + box.mu * su * row[sys.n:]
        y0 = box.mu * sz * (box.unit_points(sys.m, count=overshoot_runs)[i])
        r0 = float(np.linalg.norm(y0 / sz))
        if r0 == 0.0:
            continue
        traj = integrate_explicit(lambda tau, yv: blm.rhs(yv, x, u), y0, (0.0, horizon), cfg)
        rnorm = np.linalg.norm(traj.states / sz[None, :], axis=1)
        ratio = rnorm / (r0 * np.exp(-lam * traj.times))
        # only trust the ratio while the layer is well above roundoff
        valid = rnorm > 1e-9 * r0
        if np.any(valid):
            M = max(M, float(np.max(ratio[valid])))
    return KLFunctionExp(M=M, lam=lam)


def fit_beta_x(rom: ReducedModel, box: DomainBox, rom_report: RomStabilityReport,
               x_eq, u_eq, runs: int = 4, horizon: float | None = None) -> KLFunctionExp:
    """Fit the reduced model's KL transient bound by simulation.

    lam is the slowest linearization decay rate; M the largest overshoot of
    the scaled deviation norm against that exponential over a few runs
    launched from the box boundary.
    """
    from .integrators import SolverConfig, integrate_explicit

    n = rom.dim
    sx, _, _ = box.scales(n, rom.base.m, rom.base.p)
    lam = -float(np.max(rom_report.eigenvalues.real))
    if lam <= 0:
        raise InfeasibleConstants("reduced model not exponentially contracting")
    horizon = horizon or 6.0 / lam
    dirs = box.unit_points(n, count=runs)
    mask = (np.ones(n, dtype=bool) if rom_report.dynamic_mask is None
            else rom_report.dynamic_mask)
    M = 1.0
    cfg = SolverConfig(rtol=1e-6, atol=1e-9, h0=min(1e-2, horizon / 100))
    for d in dirs:
        xi0 = box.mu * d * mask  # leave structurally constant states at rest
        r0 = float(np.linalg.norm(xi0))
        if r0 == 0.0:
            continue
        traj = integrate_explicit(
            lambda t, xv: rom.rhs(x_eq + sx * xv, u_eq) / sx,
            xi0, (0.0, horizon), cfg,
        )
        rnorm = np.linalg.norm(traj.states * mask[None, :], axis=1)
        valid = rnorm > 1e-9 * r0
        if np.any(valid):
            ratio = rnorm[valid] / (r0 * np.exp(-lam * traj.times[valid]))
            M = max(M, float(np.max(ratio)))
    return KLFunctionExp(M=M, lam=lam)


def estimate_workspace(sys: SingularSystem, rom_report: RomStabilityReport,
                       beta_y: KLFunctionExp, box: DomainBox,
                       qss: QssMap, x_eq=None, u_eq=None,
                       xi: float | None = None,
                       beta_x: KLFunctionExp | None = None,
                       curvature_samples: int = 32) -> EstimationWorkspace:
    """Estimate the proof constants on the declared box.

    l1/l2 come from sampled second differences of f in the slow argument,
    l3/l4 from sampled first differences in the fast/perturbation arguments,
    c1..c4 from the converse-Lyapunov solve of the reduced linearization. The
    envelope chain la..lf is one admissible instantiation: the transition
    bound (le, lf) is the fitted reduced-model KL pair when supplied (much
    tighter than the Lyapunov-sandwich cascade), and every formula is
    recorded in the notes. xi defaults to 1e-3 * mu.
    """
    n, m, p = sys.n, sys.m, sys.p
    sx, sz, su = box.scales(n, m, p)
    cx, _, cu = box.centers(n, m, p)
    x_eq = cx if x_eq is None else np.asarray(x_eq, float)
    u_eq = cu if u_eq is None else np.asarray(u_eq, float)
    xi = 1e-3 * box.mu if xi is None else float(xi)

    pts = box.unit_points(n, count=curvature_samples)
    h_eq = qss.solve(x_eq, u_eq)

    def f_scaled(xv, zv, uv, ev):
        return np.asarray(sys.f(xv, zv, uv, ev), dtype=float) / sx

    # l1, l2: curvature of f in x (second-difference bound along axes)
    eps0 = np.zeros(m)
    l1 = 0.0
    for row in pts:
        x = x_eq + box.mu * sx * row
        for j in range(n):
            h = 1e-4 * box.mu * sx[j] + 1e-12
            e = np.zeros(n)
            e[j] = h
            second = (
                f_scaled(x + e, h_eq, u_eq, eps0)
                - 2.0 * f_scaled(x, h_eq, u_eq, eps0)
                + f_scaled(x - e, h_eq, u_eq, eps0)
            ) / (h / sx[j]) ** 2
            l1 = max(l1, 0.5 * float(np.linalg.norm(second, 2)))
    l1 = max(l1, 1e-12)
    l2 = l1  # same curvature bound serves the mixed remainder term

    # l3: Lipschitz constant of f in the fast argument; l4: in eps
    l3 = 0.0
    l4 = 0.0
    zpts = box.unit_points(n + m + p, count=curvature_samples)
    for row in zpts:
        x = x_eq + box.mu * sx * row[:n]
        z = h_eq + box.mu * sz * row[n: n + m]
        u = u_eq + box.mu * su * row[n + m:]
        jz = _fd_matrix(lambda zv: f_scaled(x, zv, u, eps0), z, n)
        l3 = max(l3, float(np.linalg.norm(jz * sz[None, :], 2)))
        je = _fd_matrix(lambda ev: f_scaled(x, z, u, ev), eps0, n)
        l4 = max(l4, float(np.linalg.norm(je, 2)))
    l3 = max(l3, 1e-12)
    l4 = max(l4, 1e-12)

    if rom_report.P is None:
        raise InfeasibleConstants("reduced model not certified exponentially stable")
    pe = np.linalg.eigvalsh(rom_report.P)
    c1, c2 = float(pe[0]), float(pe[-1])
    c3 = 1.0  # Q = I in check_rom_stability
    c4 = 2.0 * float(np.linalg.norm(rom_report.P, 2))

    alpha_hat = rom_report.iss_gain.gain if rom_report.iss_gain else 0.0
    raw_margin = c3 - c4 * l1 * alpha_hat * box.mu
    if raw_margin <= 0.0:
        raise InfeasibleConstants(
            "c3 - c4*l1*alpha_x(mu) <= 0: ISS gain too weak for the input magnitude"
        )
    la = raw_margin / max(1.0, 2.0 * c2)
    lb = c4 * l1 * np.sqrt(c2 / c1) * box.mu / max(1.0, 2.0 * c2)
    lc = l3 * (1.0 + xi / max(sys.eps_bar, 1e-15)) + l4
    ld = l3
    if beta_x is not None:
        # fitted transition bound |phi(t,s)| <= M_x e^{-lam_x (t-s)}
        le, lf = beta_x.M, beta_x.lam
        le_note = "le = fitted M_x"
        lf_note = "lf = fitted lam_x"
    else:
        le = float(np.exp(lb / max(la, 1e-15)))
        lf = la
        le_note = "le = exp(lb/la)"
        lf_note = "lf = la"

    # predicted slow-error envelope E(eps) ~ k * eps + xi_err
    k = le * (l4 / lf + l3 * beta_y.M * box.mu / beta_y.lam)
    xi_err = le * l3 * xi / lf
    notes = {
        "la": "la = (c3 - c4*l1*alpha_x(mu)) / max(1, 2 c2)",
        "lb": "lb = c4*l1*sqrt(c2/c1)*mu / max(1, 2 c2)",
        "lc": "lc = l3*(1 + xi/eps_bar) + l4",
        "ld": "ld = l3",
        "le": le_note,
        "lf": lf_note,
        "k": "k = le*(l4/lf + l3*M_y*mu/lam_y)",
        "xi_err": xi_err,
        "beta_y": {"M": beta_y.M, "lam": beta_y.lam},
    }
    if beta_x is not None:
        notes["beta_x"] = {"M": beta_x.M, "lam": beta_x.lam}
    return EstimationWorkspace(l1=l1, l2=l2, l3=l3, l4=l4, c1=c1, c2=c2, c3=c3,
                               c4=c4, la=la, lb=lb, lc=lc, ld=ld, le=le, lf=lf,
                               xi=xi, k=float(k), notes=notes)


def epsilon_star(ws: EstimationWorkspace, gains: KFunctionLin | None,
                 box: DomainBox) -> tuple[float, dict]:
    """eps* = min(eps1, eps2, eps3); components and formulas are recorded.

    eps1: predicted error amplitude k*eps must stay inside the validity ball
          of radius c3 / (2 c4 l1) (where the quadratic remainder is dominated).
    eps2: the comparison-lemma envelope k*eps + xi_err must stay inside the
          declared mu box.
    eps3: time-scale coherence - the layer's integrated forcing must not
          displace the slow error by more than the box: eps <= lam_y /
          (l3 M_y M_x).
    """
    alpha = gains.gain if gains is not None else 0.0
    if ws.c3 - ws.c4 * ws.l1 * alpha * box.mu <= 0.0:
        raise InfeasibleConstants("envelope decay margin la <= 0")
    if ws.k <= 0:
        raise InfeasibleConstants("nonpositive error slope constant k")
    xi_err = float(ws.notes.get("xi_err", 0.0))
    beta_y = ws.notes.get("beta_y", {"M": 1.0, "lam": 1.0})
    radius = ws.c3 / (2.0 * ws.c4 * ws.l1)
    eps1 = max(radius - xi_err, 0.0) / ws.k
    eps2 = max(box.mu - xi_err, 0.0) / ws.k
    eps3 = beta_y["lam"] / (ws.l3 * beta_y["M"] * ws.le)
    components = {
        "eps1": eps1,
        "eps1_formula": "(c3/(2 c4 l1) - xi_err)/k",
        "eps2": eps2,
        "eps2_formula": "(mu - xi_err)/k",
        "eps3": eps3,
        "eps3_formula": "lam_y/(l3*M_y*M_x)",
    }
    return float(min(eps1, eps2, eps3)), components


def epsilon_double_star(beta_y: KLFunctionExp, k: float, mu: float,
                        mode: str, value: float,
                        eps_max: float = 1.0) -> tuple[float, float]:
    """Solve beta_y(mu, T/eps) = k*eps with equality; returns (eps**, T).

    mode "fix-eps": closed form T = (eps/lam) ln(M mu / (k eps)), clamped at 0
    when the layer bound already sits below k*eps.
    mode "fix-T": largest eps on the monotone (increasing) branch of
    psi(eps) = M mu e^{-lam T / eps} / (k eps); when even the branch peak at
    eps = lam*T stays below 1, no equality solution exists.
    """
    if k <= 0 or mu <= 0:
        raise ValueError("k and mu must be > 0")
    M, lam = beta_y.M, beta_y.lam
    if mode == "fix-eps":
        eps = float(value)
        if eps <= 0:
            raise ValueError("eps must be > 0")
        arg = M * mu / (k * eps)
        T = (eps / lam) * np.log(arg) if arg > 1.0 else 0.0
        return eps, float(T)
    if mode != "fix-T":
        raise ValueError("mode must be 'fix-eps' or 'fix-T'")
    T = float(value)
    if T <= 0:
        raise ValueError("T must be > 0")

    def psi(eps):
        return M * mu * np.exp(-lam * T / eps) / (k * eps)

    eps_peak = min(lam * T, eps_max)
    if psi(eps_peak) < 1.0:
        raise NoFeasibleEpsilon(
            f"beta_y(mu, T/eps) < k*eps strictly for all eps in (0, {eps_peak:.3g}]"
        )
    lo = eps_peak
    for _ in range(200):  # walk down the increasing branch to bracket the root
        lo *= 0.5
        if psi(lo) < 1.0:
            break
    else:
        raise NoFeasibleEpsilon("could not bracket the equality solution")
    hi = min(2.0 * lo, eps_peak)
    while psi(hi) < 1.0:
        hi = min(2.0 * hi, eps_peak)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if psi(mid) >= 1.0:
            hi = mid
        else:
            lo = mid
    eps2 = 0.5 * (lo + hi)
    return float(eps2), T


# ---------------------------------------------------------------------------
# trajectory-based verification


def _loglog_fit(eps, errs):
    eps = np.asarray(eps, float)
    errs = np.asarray(errs, float)
    mask = (eps > 0) & (errs > 0)
    if mask.sum() < 2:
        return float("nan"), float("nan")
    slope, intercept = np.polyfit(np.log(eps[mask]), np.log(errs[mask]), 1)
    return float(slope), float(np.exp(intercept))


def verify_error_bounds(fulls, rom: Trajectory, blm: Trajectory, qss: QssMap,
                        eps_list, T: float, u, n: int) -> ErrorSlopes:
    """Measure the three reduction-error laws and their log-log slopes.

    fulls: one full-model trajectory per entry of eps_list, all on the same
    time grid as ``rom`` (rows split x | z at column n). ``blm`` is the layer
    trajectory in stretched time. For each eps the three errors are the max
    over the grid of ||x - x_hat||, ||z - h(x_hat,u) - y_hat(t/eps)|| and (for
    t >= T) ||z - h(x_hat,u)||.
    """
    eps_list = np.atleast_1d(np.asarray(eps_list, dtype=float))
    if len(fulls) != eps_list.size:
        raise GridMismatch("need one full trajectory per eps")
    times = rom.times
    for tr in fulls:
        if tr.times.shape != times.shape or not np.allclose(tr.times, times):
            raise GridMismatch("trajectories are not on a common time grid")

    x_hat = rom.states
    h_vals = np.empty((times.size, qss.sys.m))
    solver = QssMap(qss.sys, residual_tol=qss.residual_tol, res_scale=qss.res_scale)
    for i, t in enumerate(times):
        h_vals[i] = solver.solve(x_hat[i], u.value(t))

    slow_errors = np.empty(eps_list.size)
    fast_errors = np.empty(eps_list.size)
    tail_errors = np.empty(eps_list.size)
    for j, eps in enumerate(eps_list):
        full = fulls[j]
        x_full = full.states[:, :n]
        z_full = full.states[:, n:]
        slow_errors[j] = np.max(np.linalg.norm(x_full - x_hat, axis=1))
        if eps > 0:
            y_hat = blm.sample(times / eps)
        else:
            y_hat = np.zeros_like(z_full)
        fast_errors[j] = np.max(np.linalg.norm(z_full - h_vals - y_hat, axis=1))
        tail = times >= T
        if np.any(tail):
            tail_errors[j] = np.max(
                np.linalg.norm(z_full[tail] - h_vals[tail], axis=1)
            )
        else:
            tail_errors[j] = np.nan

    slow_slope, slow_k = _loglog_fit(eps_list, slow_errors)
    fast_slope, fast_k = _loglog_fit(eps_list, fast_errors)
    tail_slope, _ = _loglog_fit(eps_list, tail_errors)
    return ErrorSlopes(
        eps_list=eps_list,
        slow_errors=slow_errors,
        fast_errors=fast_errors,
        fast_tail_errors=tail_errors,
        slow_slope=slow_slope,
        fast_slope=fast_slope,
        fast_tail_slope=tail_slope,
        slow_intercept_k=slow_k,
        fast_intercept_k=fast_k,
    )


def verify_iss_envelope(full: Trajectory, n: int, qss: QssMap, u,
                        beta_x: KLFunctionExp, alpha_x: KFunctionLin,
                        beta_y: KLFunctionExp, xi: float, eps: float) -> EnvelopeVerdict:
    """Pointwise check of the ISS envelopes on the trajectory grid.

    ||x(t)|| <= beta_x(||x(0)||, t) + alpha_x(sup||u||) + xi and
    ||y(t)|| <= beta_y(||y(0)||, t/eps) + xi with y = z - h(x, u).
    A false verdict carries the first violating time.
    """
    times = full.times
    x = full.states[:, :n]
    z = full.states[:, n:]
    u_sup = max(float(np.linalg.norm(u.value(t))) for t in
                [times[0], *u.breakpoints, times[-1]])
    x_norm = np.linalg.norm(x, axis=1)
    bound_x = beta_x(x_norm[0], times) + alpha_x(u_sup) + xi

    solver = QssMap(qss.sys, residual_tol=qss.residual_tol, res_scale=qss.res_scale)
    y_norm = np.empty(times.size)
    for i, t in enumerate(times):
        h_val = solver.solve(x[i], u.value(t))
        y_norm[i] = np.linalg.norm(z[i] - h_val)
    bound_y = beta_y(y_norm[0], times / eps) + xi

    bad_x = np.nonzero(x_norm > bound_x)[0]
    bad_y = np.nonzero(y_norm > bound_y)[0]
    first_x = times[bad_x[0]] if bad_x.size else np.inf
    first_y = times[bad_y[0]] if bad_y.size else np.inf
    if not bad_x.size and not bad_y.size:
        return EnvelopeVerdict(True)
    if first_x <= first_y:
        return EnvelopeVerdict(False, t_violation=float(first_x), which="x")
    return EnvelopeVerdict(False, t_violation=float(first_y), which="y")
