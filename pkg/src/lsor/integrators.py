"""Adaptive ODE integration with event restarts and instrumentation.

Two families:

* :func:`integrate_explicit` — Dormand-Prince 5(4) embedded pair (FSAL),
  PI step control, cubic-Hermite dense output. The workhorse for non-stiff
  problems and the "variable-step 4th-order Runge-Kutta" side of benchmarks.
* :func:`integrate_stiff` — TR-BDF2 (one-step ESDIRK 2(3), L-stable) with
  damped Newton stages, Jacobian reuse and a stiffly-filtered error estimate.

Both restart exactly at every event breakpoint, so discontinuous right-hand
sides (input steps, load switching) never straddle a step. Both record
accepted/rejected step counts, rhs and Jacobian evaluation counts, and the
wall-clock time of the stepping loop only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DimensionError,
    MaxStepsExceeded,
    NewtonDivergence,
    StepSizeUnderflow,
)

EXPLICIT = "explicit-rk45"
STIFF = "implicit-stiff"

# step controller (shared): safety 0.9, growth clamp x5, shrink clamp x0.1
SAFETY = 0.9
GROW_MAX = 5.0
SHRINK_MIN = 0.1

# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_DP_E = _DP_B5 - _DP_B4

# TR-BDF2 constants (gamma = 2 - sqrt(2))
_TB_GAMMA = 2.0 - np.sqrt(2.0)
_TB_D = _TB_GAMMA / 2.0
_TB_W = np.sqrt(2.0) / 4.0
# weights of (2nd-order propagated) minus (3rd-order embedded) solution
_TB_E1 = (np.sqrt(2.0) - 1.0) / 3.0
_TB_E2 = -1.0 / 3.0
_TB_E3 = (2.0 - np.sqrt(2.0)) / 3.0


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-6
    atol: float = 1e-9
    h0: float = 1e-4
    hmin: float = 1e-14
    hmax: float = np.inf
    max_steps: int = 10_000_000
    method: str = EXPLICIT

    def __post_init__(self):
        if not (0 < self.hmin <= self.h0 <= self.hmax):
            raise ValueError("need 0 < hmin <= h0 <= hmax")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be > 0")


@dataclass(frozen=True)
class EventSchedule:
    """Sorted times at which the rhs changes discontinuously."""

    breakpoints: tuple[float, ...] = ()

    def __init__(self, breakpoints=()):
        bps = tuple(sorted(float(b) for b in breakpoints))
        object.__setattr__(self, "breakpoints", bps)

    def within(self, t0, t1):
        return [b for b in self.breakpoints if t0 < b < t1]


@dataclass
class SolverStats:
    accepted: int = 0
    rejected: int = 0
    n_rhs: int = 0
    n_jac: int = 0
    wall_s: float = 0.0

    def as_dict(self):
        return {
            "accepted": self.accepted,
            "rejected": self.rejected,
            "n_rhs": self.n_rhs,
            "n_jac": self.n_jac,
            "wall_s": self.wall_s,
        }


@dataclass
class Trajectory:
    """Time grid, state matrix (rows = time points) and solver statistics.

    ``deriv_out[i]`` is the rhs leaving node i, ``deriv_in[i]`` the rhs
    arriving at it; they differ only at event breakpoints. Sampling uses the
    cubic Hermite interpolant (4th-order accurate on the accepted grid).
    """

    times: np.ndarray
    states: np.ndarray
    stats: SolverStats
    deriv_out: np.ndarray | None = None
    deriv_in: np.ndarray | None = None
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.shape[0] != self.times.size:
            raise DimensionError("states row count must equal len(times)")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def dim(self):
        return self.states.shape[1]

    def sample(self, tq) -> np.ndarray:
        """Dense output at query times (clipped to the trajectory span)."""
        tq = np.atleast_1d(np.asarray(tq, dtype=float))
        tq = np.clip(tq, self.times[0], self.times[-1])
        idx = np.searchsorted(self.times, tq, side="right") - 1
        idx = np.clip(idx, 0, self.times.size - 2)
        t0 = self.times[idx]
        t1 = self.times[idx + 1]
        h = (t1 - t0)[:, None]
        s = ((tq - t0) / (t1 - t0))[:, None]
        y0 = self.states[idx]
        y1 = self.states[idx + 1]
        if self.deriv_out is None or self.deriv_in is None:
            return y0 + s * (y1 - y0)
        d0 = self.deriv_out[idx]
        d1 = self.deriv_in[idx + 1]
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1

    def to_csv(self, path, labels=None):
        """Write ``t`` plus one column per labeled state; header mandatory."""
        labels = labels or self.labels or tuple(f"y{i}" for i in range(self.dim))
        if len(labels) != self.dim:
            raise DimensionError("label count must match state dimension")
        header = ",".join(["t", *labels])
        data = np.column_stack([self.times, self.states])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


class _Budget:
    """Shared accepted+rejected budget across event segments."""

    def __init__(self, limit):
        self.limit = limit
        self.used = 0

    def spend(self, k=1):
        self.used += k
        if self.used > self.limit:
            raise MaxStepsExceeded(f"exceeded {self.limit} steps")


def _error_norm(err, y_old, y_new, cfg):
    scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y_old), np.abs(y_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _pi_factor(err, err_prev, order):
    alpha = 0.7 / order
    beta = 0.4 / order
    if err == 0.0:
        return GROW_MAX
    fac = SAFETY * err ** (-alpha) * err_prev**beta
    return min(GROW_MAX, max(SHRINK_MIN, fac))


def _segment_spans(span, events):
    t0, t1 = float(span[0]), float(span[1])
    if not t1 > t0:
        raise ValueError("span end must exceed start")
    cuts = [t0] + (events.within(t0, t1) if events else []) + [t1]
    return list(zip(cuts[:-1], cuts[1:]))


def _dopri_segment(rhs, t0, t1, y0, cfg, stats, budget, rec, err_prev):
    """Integrate one smooth segment; append nodes (skipping the first) to rec."""
    y = np.asarray(y0, dtype=float).copy()
    t = t0
    k1 = np.asarray(rhs(t, y), dtype=float)
    stats.n_rhs += 1
    rec.mark_segment_start(t, y, k1)
    h = min(cfg.h0, cfg.hmax, t1 - t0)
    k = [None] * 7
    while t < t1:
        h = min(h, t1 - t)
        truncated = h == t1 - t
        if h < cfg.hmin and not truncated:
            raise StepSizeUnderflow(f"step {h:.3e} below hmin at t={t:.6g}", t=t, h=h)
        budget.spend()
        k[0] = k1
        for i in range(1, 7):
            yi = y + h * (_DP_A[i] @ np.array(k[:i]))
            k[i] = np.asarray(rhs(t + _DP_C[i] * h, yi), dtype=float)
        stats.n_rhs += 6
        y_new = yi  # stage 7 argument equals the 5th-order solution (FSAL)
        err_vec = h * (_DP_E @ np.array(k))
        err = _error_norm(err_vec, y, y_new, cfg)
        if err <= 1.0:
            stats.accepted += 1
            t_new = t1 if truncated else t + h
            rec.push(t_new, y_new, d_in=k[6], d_out=k[6])
            t, y, k1 = t_new, y_new, k[6]
            h = min(cfg.hmax, h * _pi_factor(err, err_prev[0], 5))
            err_prev[0] = max(err, 1e-10)
        else:
            stats.rejected += 1
            h = h * max(SHRINK_MIN, min(1.0, SAFETY * err ** (-0.2)))
            if h < cfg.hmin:
                raise StepSizeUnderflow(
                    f"step {h:.3e} below hmin after rejection at t={t:.6g}", t=t, h=h
                )
    return y


class _Recorder:
    def __init__(self, t0, y0):
        self.times = [t0]
        self.states = [np.array(y0, dtype=float)]
        self.d_out = [None]
        self.d_in = [None]

    def mark_segment_start(self, t, y, deriv):
        # departure derivative at the segment's first node (new rhs branch)
        self.d_out[-1] = deriv
        if self.d_in[-1] is None:
            self.d_in[-1] = deriv

    def push(self, t, y, d_in, d_out):
        self.times.append(t)
        self.states.append(np.array(y, dtype=float))
        self.d_in.append(d_in)
        self.d_out.append(d_out)

    def build(self, stats, labels=None):
        d_out = [d if d is not None else self.d_in[i] for i, d in enumerate(self.d_out)]
        return Trajectory(
            times=np.array(self.times),
            states=np.vstack(self.states),
            deriv_out=np.vstack(d_out),
            deriv_in=np.vstack(self.d_in),
            stats=stats,
            labels=labels,
        )


def integrate_explicit(rhs, y0, span, cfg: SolverConfig | None = None,
                       events: EventSchedule | None = None, labels=None) -> Trajectory:
    """Adaptive Dormand-Prince 5(4) over span, restarting at each breakpoint."""
    cfg = cfg or SolverConfig()
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    stats = SolverStats()
    budget = _Budget(cfg.max_steps)
    rec = _Recorder(float(span[0]), y0)
    err_prev = [1.0]
    tic = time.perf_counter()
    y = y0
    for a, b in _segment_spans(span, events):
        y = _dopri_segment(rhs, a, b, y, cfg, stats, budget, rec, err_prev)
    stats.wall_s = time.perf_counter() - tic
    return rec.build(stats, labels)


def _fd_jacobian(rhs, t, y, f0, stats):
    n = y.size
    jac = np.empty((n, n))
    for j in range(n):
        h = np.sqrt(np.finfo(float).eps) * (1.0 + abs(y[j]))
        yp = y.copy()
        yp[j] += h
        jac[:, j] = (np.asarray(rhs(t, yp), dtype=float) - f0) / h
    stats.n_rhs += n
    stats.n_jac += 1
    return jac


class _NewtonWorkspace:
    """Factored TR-BDF2 iteration matrix I - d*h*J with lazy refresh."""

    def __init__(self, rhs, jac, stats):
        self.rhs = rhs
        self.jac_fn = jac
        self.stats = stats
        self.jac = None
        self.lu = None
        self.h_fact = None
        self.steps_since = 0

    def refresh_jac(self, t, y, f0):
        if self.jac_fn is not None:
            self.jac = np.asarray(self.jac_fn(t, y), dtype=float)
            self.stats.n_jac += 1
        else:
            self.jac = _fd_jacobian(self.rhs, t, y, f0, self.stats)
        self.steps_since = 0
        self.lu = None

    def factor(self, h):
        import scipy.linalg as sla

        m = np.eye(self.jac.shape[0]) - _TB_D * h * self.jac
        self.lu = sla.lu_factor(m)
        self.h_fact = h

    def solve(self, b, h):
        import scipy.linalg as sla

        if self.lu is None or self.h_fact != h:
            self.factor(h)
        return sla.lu_solve(self.lu, b)


def _newton_stage(ws, t_stage, rhs_const, y_pred, h, scale, stats, kappa=0.03,
                  max_iter=8):
    """Solve Y = rhs_const + d*h*f(t_stage, Y); returns (Y, ok)."""
    y = y_pred.copy()
    dy_norm_prev = None
    for _ in range(max_iter):
        f_val = np.asarray(ws.rhs(t_stage, y), dtype=float)
        stats.n_rhs += 1
        res = y - _TB_D * h * f_val - rhs_const
        dy = ws.solve(res, h)
        y = y - dy
        dy_norm = float(np.sqrt(np.mean((dy / scale) ** 2)))
        if dy_norm <= kappa:
            return y, True
        if dy_norm_prev is not None and dy_norm > 0.9 * dy_norm_prev:
            return y, False  # stalled: caller refreshes J or shrinks h
        dy_norm_prev = dy_norm
    return y, False


def _trbdf2_segment(rhs, t0, t1, y0, cfg, stats, budget, rec, ws, err_prev):
    y = np.asarray(y0, dtype=float).copy()
    t = t0
    f_n = np.asarray(rhs(t, y), dtype=float)
    stats.n_rhs += 1
    rec.mark_segment_start(t, y, f_n)
    ws.refresh_jac(t, y, f_n)
    h = min(cfg.h0, cfg.hmax, t1 - t0)
    while t < t1:
        h = min(h, t1 - t)
        truncated = h == t1 - t
        if h < cfg.hmin and not truncated:
            raise StepSizeUnderflow(f"step {h:.3e} below hmin at t={t:.6g}", t=t, h=h)
        budget.spend()
        if ws.steps_since >= 20:
            ws.refresh_jac(t, y, f_n)
        scale = cfg.atol + cfg.rtol * np.abs(y)
        # trapezoidal stage to t + gamma*h
        const1 = y + _TB_D * h * f_n
        y2, ok = _newton_stage(
            ws, t + _TB_GAMMA * h, const1, y + _TB_GAMMA * h * f_n, h, scale, stats
        )
        if ok:
            k2 = (y2 - y - _TB_D * h * f_n) / (_TB_D * h)
            # BDF2 stage to t + h
            const2 = y + _TB_W * h * (f_n + k2)
            y3, ok = _newton_stage(
                ws, t + h, const2, y2 + (1.0 - _TB_GAMMA) * h * k2, h, scale, stats
            )
        if not ok:
            if ws.steps_since > 0:
                ws.refresh_jac(t, y, f_n)  # retry same h with a fresh Jacobian
                continue
            stats.rejected += 1
            h = max(h * 0.5, cfg.hmin)
            if h <= cfg.hmin and not truncated:
                raise NewtonDivergence(f"Newton stalled at t={t:.6g} with h={h:.3e}")
            continue
        k3 = (y3 - y - _TB_W * h * (f_n + k2)) / (_TB_D * h)
        err_raw = h * (_TB_E1 * f_n + _TB_E2 * k2 + _TB_E3 * k3)
        err_vec = ws.solve(err_raw, h)  # stiffly filtered estimate
        err = _error_norm(err_vec, y, y3, cfg)
        if err <= 1.0:
            stats.accepted += 1
            ws.steps_since += 1
            t_new = t1 if truncated else t + h
            f_new = np.asarray(rhs(t_new, y3), dtype=float)
            stats.n_rhs += 1
            rec.push(t_new, y3, d_in=f_new, d_out=f_new)
            t, y, f_n = t_new, y3, f_new
            h = min(cfg.hmax, h * _pi_factor(err, err_prev[0], 3))
            err_prev[0] = max(err, 1e-10)
        else:
            stats.rejected += 1
            h = h * max(SHRINK_MIN, min(1.0, SAFETY * err ** (-1.0 / 3.0)))
            if h < cfg.hmin:
                raise StepSizeUnderflow(
                    f"step {h:.3e} below hmin after rejection at t={t:.6g}", t=t, h=h
                )
    return y, f_n


def integrate_stiff(rhs, jac, y0, span, cfg: SolverConfig | None = None,
                    events: EventSchedule | None = None, labels=None) -> Trajectory:
    """TR-BDF2 (L-stable, order 2, embedded 3rd-order estimate) over span.

    ``jac`` is a callable (t, y) -> dense Jacobian, or None for internal
    forward differences. The Jacobian is reused across steps and refreshed on
    Newton stalls or every 20 accepted steps.
    """
    cfg = cfg or SolverConfig(method=STIFF)
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    stats = SolverStats()
    budget = _Budget(cfg.max_steps)
    rec = _Recorder(float(span[0]), y0)
    ws = _NewtonWorkspace(rhs, jac, stats)
    err_prev = [1.0]
    tic = time.perf_counter()
    y = y0
    for a, b in _segment_spans(span, events):
        y, _ = _trbdf2_segment(rhs, a, b, y, cfg, stats, budget, rec, ws, err_prev)
    stats.wall_s = time.perf_counter() - tic
    return rec.build(stats, labels)


def integrate(rhs, y0, span, cfg, events=None, jac=None, labels=None):
    """Dispatch on cfg.method."""
    if cfg.method == STIFF:
        return integrate_stiff(rhs, jac, y0, span, cfg, events, labels)
    return integrate_explicit(rhs, y0, span, cfg, events, labels)


def integrate_coupled(sys, x0, z0, u, span, cfg: SolverConfig | None = None,
                      events: EventSchedule | None = None) -> Trajectory:
    """Integrate the full stacked (x; z) system, forming zdot = g/eps.

    ``u`` is an InputSignal; its breakpoints are merged into the event
    schedule so every input step restarts the integrator exactly.
    """
    cfg = cfg or SolverConfig(method=STIFF)
    n, m = sys.n, sys.m
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    if x0.size != n or z0.size != m:
        raise DimensionError("x0/z0 dimensions do not match the system")
    inv_eps = 1.0 / sys.eps

    def rhs(t, y):
        x = y[:n]
        z = y[n:]
        ut = u.value(t)
        f_val = sys.f(x, z, ut, sys.eps)
        g_val = sys.g(x, z, ut, sys.eps)
        return np.concatenate([f_val, g_val * inv_eps])

    bps = set(u.breakpoints)
    if events:
        bps.update(events.breakpoints)
    sched = EventSchedule(sorted(bps))
    y0 = np.concatenate([x0, z0])
    return integrate(rhs, y0, span, cfg, events=sched, labels=sys.labels)
