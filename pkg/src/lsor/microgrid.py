"""Inverter-dominated microgrid model bank.

Per-DER dynamics (power low-pass filter, PLL, phase angle, power or
droop/voltage controllers, current controllers, LC filter with damped
capacitor and coupling inductor - 15 states per DER in either operating
mode), an algebraic nodal network, and assembly of the stacked model into a
SingularSystem with its derivative-coefficient slow/fast partition.

Frame bookkeeping: each DER works in its own dq frame at angle delta to the
global (network) frame, local = e^{+j delta} * global. Grid-tied operation
regulates against a fixed infinite-bus phasor on the negative q axis;
islanded operation droops around a positive q-axis nominal. Both orientations
make every printed controller sign a negative-feedback loop (see README).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DimensionError,
    NotAnEquilibrium,
    SingularFastBlock,
    SingularNetwork,
)
from .reduction import SlowFastPartition, identify_partition
from .sysdef import InputSignal, SingularSystem

SLOW_NAMES = ("P", "Q", "Phi_PLL", "delta", "Phi_P", "Phi_Q", "Gamma_d", "Gamma_q")
FAST_NAMES = ("V_odf", "I_ld", "I_lq", "I_od", "I_oq", "V_od", "V_oq")
STATE_NAMES = SLOW_NAMES + FAST_NAMES
N_STATES = 15

GRID_TIED = "grid_tied"
ISLANDED = "islanded"


@dataclass(frozen=True)
class DerParams:
    """Controller and filter parameters of one voltage-source-inverter DER.

    Units: corner frequencies rad/s; droop m (rad/s)/W, n V/var; filter
    R in ohm, L in henry, C in farad. Defaults are a documented 60 Hz set
    chosen for a one-decade coefficient gap (they are not taken from any
    published parameter table).
    """

    omega_c: float = 31.41          # power LPF corner
    omega_c_pll: float = 6283.0     # PLL voltage filter corner
    k_p_pll: float = 0.25
    k_i_pll: float = 2.0
    k_p_p: float = 0.01             # power controller (grid-tied)
    k_i_p: float = 0.1
    k_p_v: float = 0.2              # voltage controller (islanded)
    k_i_v: float = 2.0
    k_p_c: float = 4.0              # current controller
    k_i_c: float = 40.0
    m_droop: float = 2e-3
    n_droop: float = 1e-2
    omega_n: float = 377.0
    v_oq_n: float = 170.0           # islanded droop nominal (q-axis, V peak)
    r_f: float = 0.1
    l_f: float = 1.35e-3
    c_f: float = 5.0e-5
    r_d: float = 1.0
    r_c: float = 0.03
    l_c: float = 3.5e-4

    def __post_init__(self):
        for name in ("omega_c", "omega_c_pll", "l_f", "c_f", "l_c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("k_p_pll", "k_i_pll", "k_p_p", "k_i_p", "k_p_v", "k_i_v",
                     "k_p_c", "k_i_c", "m_droop", "n_droop", "r_f", "r_d", "r_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def coefficients(self, mode: str) -> np.ndarray:
        """Per-state derivative-scaling coefficients, slow block then fast."""
        pi_ratio = self.k_p_p / self.k_i_p if mode == GRID_TIED else self.k_p_v / self.k_i_v
        return np.array([
            1.0 / self.omega_c, 1.0 / self.omega_c, 1.0, 1.0,
            pi_ratio, pi_ratio,
            self.k_p_c / self.k_i_c, self.k_p_c / self.k_i_c,
            1.0 / self.omega_c_pll,
            self.l_f, self.l_f, self.l_c, self.l_c,
            self.c_f, self.c_f,
        ])


@dataclass
class DerState:
    """Named view of the 15 per-DER states (slow block first)."""

    P: float = 0.0
    Q: float = 0.0
    Phi_PLL: float = 0.0
    delta: float = 0.0
    Phi_P: float = 0.0   # Phi_d in islanded mode (same integrator slot)
    Phi_Q: float = 0.0   # Phi_q in islanded mode
    Gamma_d: float = 0.0
    Gamma_q: float = 0.0
    V_odf: float = 0.0
    I_ld: float = 0.0
    I_lq: float = 0.0
    I_od: float = 0.0
    I_oq: float = 0.0
    V_od: float = 0.0
    V_oq: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in STATE_NAMES], dtype=float)

    @staticmethod
    def from_array(vec) -> "DerState":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (N_STATES,):
            raise DimensionError(f"expected {N_STATES} states, got {vec.shape}")
        return DerState(**{name: float(v) for name, v in zip(STATE_NAMES, vec)})


def _as_state_matrix(states, n_der):
    if isinstance(states, DerState):
        states = states.as_array()
    arr = np.asarray(states, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(n_der, N_STATES)
    if arr.shape != (n_der, N_STATES):
        raise DimensionError(f"expected ({n_der}, {N_STATES}) states, got {arr.shape}")
    return arr


def _der_rhs_common(S, p: DerParams, vbd, vbq, i_ld_star, i_lq_star, d_phi_a, d_phi_b):
    """Current controllers, LC filter and coupling inductor (shared by modes).

    S columns follow STATE_NAMES; i_*_star are the current references produced
    by the mode-specific outer controllers and d_phi_a/d_phi_b their
    integrator derivatives. The phase column is filled by the caller.
    """
    P, Q = S[:, 0], S[:, 1]
    g_d, g_q = S[:, 6], S[:, 7]
    v_odf = S[:, 8]
    i_ld, i_lq = S[:, 9], S[:, 10]
    i_od, i_oq = S[:, 11], S[:, 12]
    v_od, v_oq = S[:, 13], S[:, 14]

    out = np.empty_like(S)
    out[:, 0] = -P * p.omega_c + 1.5 * p.omega_c * (v_od * i_od + v_oq * i_oq)
    out[:, 1] = -Q * p.omega_c + 1.5 * p.omega_c * (v_oq * i_od - v_od * i_oq)
    out[:, 8] = p.omega_c_pll * (v_od - v_odf)
    out[:, 2] = -v_odf
    out[:, 3] = 0.0
    out[:, 4] = d_phi_a
    out[:, 5] = d_phi_b

    dg_d = i_ld_star - i_ld
    v_ld = -p.omega_n * p.l_f * i_lq + p.k_i_c * g_d + p.k_p_c * dg_d
    dg_q = i_lq_star - i_lq
    v_lq = -p.omega_n * p.l_f * i_ld + p.k_i_c * g_q + p.k_p_c * dg_q
    out[:, 6] = dg_d
    out[:, 7] = dg_q

    di_ld = (-p.r_f * i_ld + v_ld - v_od) / p.l_f + p.omega_n * i_lq
    di_lq = (-p.r_f * i_lq + v_lq - v_oq) / p.l_f - p.omega_n * i_ld
    di_od = (-p.r_c * i_od + v_od - vbd) / p.l_c + p.omega_n * i_oq
    di_oq = (-p.r_c * i_oq + v_oq - vbq) / p.l_c - p.omega_n * i_od
    out[:, 9] = di_ld
    out[:, 10] = di_lq
    out[:, 11] = di_od
    out[:, 12] = di_oq
    # capacitor damping terms use the already-computed current derivatives
    out[:, 13] = (i_ld - i_od) / p.c_f + p.omega_n * v_oq + p.r_d * (di_ld - di_od)
    out[:, 14] = (i_lq - i_oq) / p.c_f - p.omega_n * v_od + p.r_d * (di_lq - di_oq)
    return out


def pll_frequency(S, p: DerParams):
    return p.omega_n - p.k_p_pll * S[:, 8] + p.k_i_pll * S[:, 2]


def der_rhs_grid_tied(state, p: DerParams, vb, cmd, convention: str = "paper") -> np.ndarray:
    """All 15 time-derivatives of one grid-tied DER.

    vb = (V_bd, V_bq) bus voltage in the DER frame; cmd = (P*, Q*). The power
    errors feed the cross-mapped current references (active power channel ->
    q-axis current reference, reactive -> d-axis).
    """
    single = isinstance(state, DerState) or np.asarray(state).ndim == 1
    S = _as_state_matrix(state, 1) if single else np.asarray(state, dtype=float)
    vb = np.atleast_2d(np.asarray(vb, dtype=float))
    cmd = np.atleast_2d(np.asarray(cmd, dtype=float))
    sgn = 1.0 if convention == "paper" else -1.0

    d_phi_p = sgn * (S[:, 0] - cmd[:, 0])
    i_lq_star = p.k_i_p * S[:, 4] + p.k_p_p * d_phi_p
    d_phi_q = sgn * (S[:, 1] - cmd[:, 1])
    i_ld_star = p.k_i_p * S[:, 5] + p.k_p_p * d_phi_q

    out = _der_rhs_common(S, p, vb[:, 0], vb[:, 1], i_ld_star, i_lq_star,
                          d_phi_p, d_phi_q)
    out[:, 3] = pll_frequency(S, p)  # phase synchronized through the PLL
    return out[0] if single else out


def der_rhs_islanded(state, p: DerParams, vb, ref_omega_pll,
                     convention: str = "paper") -> np.ndarray:
    """All 15 time-derivatives of one islanded (droop-controlled) DER.

    ref_omega_pll is the PLL frequency of the reference DER (index 1); the
    phase equation integrates the frequency difference, so the reference DER
    has identically zero phase velocity.
    """
    single = isinstance(state, DerState) or np.asarray(state).ndim == 1
    S = _as_state_matrix(state, 1) if single else np.asarray(state, dtype=float)
    vb = np.atleast_2d(np.asarray(vb, dtype=float))

    omega_star = p.omega_n - p.m_droop * S[:, 0]
    v_oq_star = p.v_oq_n - p.n_droop * S[:, 1]
    wpll = pll_frequency(S, p)
    d_phi_d = wpll - omega_star
    i_ld_star = p.k_i_v * S[:, 4] + p.k_p_v * d_phi_d
    d_phi_q = v_oq_star - S[:, 14]
    i_lq_star = p.k_i_v * S[:, 5] + p.k_p_v * d_phi_q

    out = _der_rhs_common(S, p, vb[:, 0], vb[:, 1], i_ld_star, i_lq_star,
                          d_phi_d, d_phi_q)
    if convention == "paper":
        out[:, 3] = ref_omega_pll - wpll
    else:
        out[:, 3] = wpll - ref_omega_pll
    return out[0] if single else out


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class NetworkModel:
    """Algebraic nodal network: lines and loads as admittances, DERs as
    rotated current injections. Grid-tied mode holds the PCC bus at a fixed
    phasor, islanded mode solves the full nodal equation (loads must make the
    admittance matrix nonsingular)."""

    buses: tuple[int, ...]
    lines: tuple[tuple[int, int, float, float], ...]  # (from, to, R, X) ohm
    loads: tuple[tuple[int, float, float], ...]       # (bus, G, B) siemens
    der_buses: tuple[int, ...]
    pcc_bus: int | None = None
    pcc_voltage: complex = 0.0 - 170.0j
    rotation: float = 1.0  # +1: local = e^{+j delta} global; -1 mirrors

    def __post_init__(self):
        if len(set(self.buses)) != len(self.buses):
            raise ValueError("duplicate bus ids")
        known = set(self.buses)
        for f, t, *_ in self.lines:
            if f not in known or t not in known:
                raise ValueError(f"line endpoint {f}-{t} references unknown bus")
        for b, *_ in self.loads:
            if b not in known:
                raise ValueError(f"load bus {b} unknown")
        for b in self.der_buses:
            if b not in known:
                raise ValueError(f"DER bus {b} unknown")
        if self.pcc_bus is not None and self.pcc_bus not in known:
            raise ValueError("PCC bus unknown")

    @property
    def index(self):
        return {b: i for i, b in enumerate(self.buses)}

    def admittance(self, extra_loads=None) -> np.ndarray:
        """Symmetric complex nodal admittance matrix (loads on the diagonal)."""
        nb = len(self.buses)
        idx = self.index
        Y = np.zeros((nb, nb), dtype=complex)
        for f, t, r, x in self.lines:
            y = 1.0 / complex(r, x)
            a, b = idx[f], idx[t]
            Y[a, a] += y
            Y[b, b] += y
            Y[a, b] -= y
            Y[b, a] -= y
        for b, g, s in self.loads:
            Y[idx[b], idx[b]] += complex(g, s)
        if extra_loads:
            for b, y in extra_loads.items():
                Y[idx[b], idx[b]] += y
        return Y


def network_solve(states, net: NetworkModel, mode: str = GRID_TIED,
                  extra_loads=None) -> np.ndarray:
    """Bus voltages seen by each DER in its own frame, shape (n_der, 2).

    DER output currents are rotated into the global frame by each delta,
    injected into the nodal equation, and the resulting bus voltages rotated
    back. Grid-tied mode pins the PCC bus at the configured phasor and solves
    the reduced system for the remaining buses.
    """
    n_der = len(net.der_buses)
    S = _as_state_matrix(states, n_der)
    idx = net.index
    nb = len(net.buses)
    delta = net.rotation * S[:, 3]
    rot = np.exp(1j * delta)
    i_local = S[:, 11] + 1j * S[:, 12]
    inj = np.zeros(nb, dtype=complex)
    for k, b in enumerate(net.der_buses):
        inj[idx[b]] += i_local[k] * np.conj(rot[k])

    Y = net.admittance(extra_loads)
    if mode == GRID_TIED:
        if net.pcc_bus is None:
            raise SingularNetwork("grid-tied mode requires a PCC bus")
        p = idx[net.pcc_bus]
        v = np.empty(nb, dtype=complex)
        v[p] = net.pcc_voltage
        others = [i for i in range(nb) if i != p]
        if others:
            Yrr = Y[np.ix_(others, others)]
            b_vec = inj[others] - Y[others, p] * net.pcc_voltage
            try:
                v[others] = np.linalg.solve(Yrr, b_vec)
            except np.linalg.LinAlgError as exc:
                raise SingularNetwork(str(exc)) from exc
    else:
        try:
            v = np.linalg.solve(Y, inj)
        except np.linalg.LinAlgError as exc:
            raise SingularNetwork(str(exc)) from exc
        if not np.all(np.isfinite(v)):
            raise SingularNetwork("non-finite nodal solution")

    out = np.empty((n_der, 2))
    for k, b in enumerate(net.der_buses):
        vb_local = v[idx[b]] * rot[k]
        out[k, 0] = vb_local.real
        out[k, 1] = vb_local.imag
    return out


# ---------------------------------------------------------------------------
# scenario and assembly


@dataclass(frozen=True)
class Scenario:
    """Operating mode, command schedule, load events and horizon.

    commands: per-DER list of (time, P*, Q*) rows, first row at t = 0
    (grid-tied). load_events: (time, bus, dG, dB) admittance deltas relative
    to the base network (islanded); event buses become input channels so the
    QSS map sees load switching as a plain input step.
    """

    mode: str
    horizon: float
    commands: tuple = ()        # ((der_index, ((t, P, Q), ...)), ...)
    load_events: tuple = ()     # ((t, bus, dG, dB), ...)
    bench_horizon: float | None = None

    def __post_init__(self):
        if self.mode not in (GRID_TIED, ISLANDED):
            raise ValueError("mode must be 'grid_tied' or 'islanded'")
        if self.mode == GRID_TIED and not self.commands:
            raise ValueError("grid-tied scenarios require command schedules")
        for t, *_ in self.load_events:
            if not 0.0 <= t <= self.horizon:
                raise ValueError("load event outside the horizon")

    @property
    def event_buses(self) -> tuple[int, ...]:
        return tuple(sorted({b for _, b, *_ in self.load_events}))

    def input_signal(self, n_der: int) -> InputSignal:
        """Piecewise-constant stacked input vector u(t).

        Grid-tied: u = [P*_1, Q*_1, ..., P*_N, Q*_N].
        Islanded: u = [dG_b, dB_b] per event bus (zero before the event).
        """
        if self.mode == GRID_TIED:
            times = sorted({t for _, sched in self.commands for t, *_ in sched})
            if not times or times[0] != 0.0:
                raise ValueError("command schedules must start at t = 0")
            per_der = {i: sorted(sched) for i, sched in self.commands}
            segs = []
            current = {i: None for i in per_der}
            for t in times:
                for i, sched in per_der.items():
                    for row in sched:
                        if row[0] <= t:
                            current[i] = row[1:]
                vec = []
                for i in range(n_der):
                    if current.get(i) is None:
                        raise ValueError(f"DER {i} has no command at t = 0")
                    vec.extend(current[i])
                segs.append((t, vec))
            return InputSignal(segs)
        buses = self.event_buses
        times = sorted({0.0, *(t for t, *_ in self.load_events)})
        segs = []
        for t in times:
            acc = {b: 0.0 + 0.0j for b in buses}
            for te, b, dg, db in self.load_events:
                if te <= t:
                    acc[b] += complex(dg, db)
            vec = []
            for b in buses:
                vec.extend([acc[b].real, acc[b].imag])
            segs.append((t, vec if vec else [0.0]))
        return InputSignal(segs)

    @property
    def breakpoints(self) -> list[float]:
        times = {t for _, sched in self.commands for t, *_ in sched if t > 0}
        times.update(t for t, *_ in self.load_events if t > 0)
        return sorted(times)


class MicrogridSystem:
    """Callable bundle turning the stacked state into per-DER derivatives.

    Exposes the raw 15N rhs (`full_rhs`), the SingularSystem split produced by
    the partition, and helpers for equilibrium and coefficient bookkeeping.
    """

    def __init__(self, params: list[DerParams], net: NetworkModel, scenario: Scenario,
                 convention: str = "paper"):
        if not params:
            raise ValueError("need at least one DER")
        if len(params) != len(net.der_buses):
            raise DimensionError("one parameter set per DER bus required")
        self.params = list(params)
        self.net = net
        self.scenario = scenario
        self.convention = convention
        self.n_der = len(params)
        self.mode = scenario.mode
        if convention == "conventional":
            self.net = replace(net, rotation=-1.0)
        self._uniform = all(p == params[0] for p in params)
        self._lu_cache = {}

    def _bus_voltages(self, S, u):
        """network_solve with the admittance factorization cached per input.

        Same LAPACK path as network_solve (getrf/getrs), so results agree to
        machine precision; load events only change the matrix at breakpoints,
        hence the tiny cache.
        """
        import scipy.linalg as sla

        net = self.net
        nb = len(net.buses)
        if not hasattr(self, "_der_rows"):
            idx = net.index
            self._der_rows = np.array([idx[b] for b in net.der_buses])
            self._pcc_row = idx[net.pcc_bus] if net.pcc_bus is not None else None
        rows = self._der_rows
        delta = net.rotation * S[:, 3]
        rot = np.exp(1j * delta)
        i_local = S[:, 11] + 1j * S[:, 12]
        inj = np.zeros(nb, dtype=complex)
        np.add.at(inj, rows, i_local * np.conj(rot))

        key = u.tobytes()
        if self.mode == GRID_TIED:
            if net.pcc_bus is None:
                raise SingularNetwork("grid-tied mode requires a PCC bus")
            p = self._pcc_row
            others = [i for i in range(nb) if i != p]
            v = np.empty(nb, dtype=complex)
            v[p] = net.pcc_voltage
            if others:
                if key not in self._lu_cache:
                    Y = net.admittance(None)
                    self._lu_cache[key] = (
                        sla.lu_factor(Y[np.ix_(others, others)]),
                        Y[others, p],
                    )
                lu, y_op = self._lu_cache[key]
                v[others] = sla.lu_solve(lu, inj[others] - y_op * net.pcc_voltage)
        else:
            if key not in self._lu_cache:
                Y = net.admittance(self._extra_loads(u))
                self._lu_cache[key] = (sla.lu_factor(Y), None)
            lu, _ = self._lu_cache[key]
            v = sla.lu_solve(lu, inj)
        vb_local = v[rows] * rot
        out = np.empty((rows.size, 2))
        out[:, 0] = vb_local.real
        out[:, 1] = vb_local.imag
        return out

    # -- raw stacked dynamics ------------------------------------------------
    def full_rhs(self, state, u) -> np.ndarray:
        S = _as_state_matrix(state, self.n_der)
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.mode == GRID_TIED:
            cmd = u.reshape(self.n_der, 2)
            vb = self._bus_voltages(S, u)
            if self._uniform:
                out = der_rhs_grid_tied(S, self.params[0], vb, cmd, self.convention)
            else:
                out = np.vstack([
                    der_rhs_grid_tied(S[i], self.params[i], vb[i], cmd[i], self.convention)
                    for i in range(self.n_der)
                ])
        else:
            vb = self._bus_voltages(S, u)
            ref = float(pll_frequency(S[:1], self.params[0])[0])
            if self._uniform:
                out = der_rhs_islanded(S, self.params[0], vb, ref, self.convention)
            else:
                out = np.vstack([
                    der_rhs_islanded(S[i], self.params[i], vb[i], ref, self.convention)
                    for i in range(self.n_der)
                ])
        return out.ravel()

    def _extra_loads(self, u):
        buses = self.scenario.event_buses
        if not buses:
            return None
        vals = u.reshape(len(buses), 2)
        return {b: complex(vals[k, 0], vals[k, 1]) for k, b in enumerate(buses)}

    # -- coefficients and assembly --------------------------------------------
    def coefficient_vector(self) -> np.ndarray:
        return np.concatenate([p.coefficients(self.mode) for p in self.params])

    def state_scales(self, u_signal) -> np.ndarray:
        """Characteristic excursion scale per state (15 per DER).

        Normalizes mixed units (W, V, A, rad, integrator units) to the
        excursions a command/load step actually produces, so box radii and
        Lipschitz estimates are commensurate. Derived from command spans and
        controller gains, not fitted to any trajectory.
        """
        seg_vals = np.vstack([v for _, v in u_signal.segments])
        out = []
        for i, p in enumerate(self.params):
            v_nom = abs(np.imag(self.net.pcc_voltage)) if self.mode == GRID_TIED \
                else abs(p.v_oq_n)
            if self.mode == GRID_TIED:
                span = seg_vals[:, 2 * i: 2 * i + 2]
                s_pow = max(float(np.max(np.abs(span))), 0.2 * v_nom)
            else:
                s_pow = 1.5 * v_nom**2 * max(
                    sum(g for _, g, _ in self.net.loads) / self.n_der, 1e-3)
            i_scale = s_pow / (1.5 * v_nom)
            ki_outer = p.k_i_p if self.mode == GRID_TIED else p.k_i_v
            out.extend([
                s_pow, s_pow,                   # P, Q
                5.0 / p.k_i_pll,                # Phi_PLL: ~5 rad/s frequency play
                0.25,                           # delta
                i_scale / ki_outer, i_scale / ki_outer,  # outer integrators
                0.3 * v_nom / p.k_i_c, 0.3 * v_nom / p.k_i_c,  # Gamma_d/q
                0.15 * v_nom,                   # V_odf
                i_scale, i_scale,               # I_ld, I_lq
                i_scale, i_scale,               # I_od, I_oq
                0.15 * v_nom, 0.3 * v_nom,      # V_od, V_oq
            ])
        return np.asarray(out)

    def labels(self, partition: SlowFastPartition):
        def name(j):
            der, k = divmod(j, N_STATES)
            base = STATE_NAMES[k]
            return base if self.n_der == 1 else f"der{der + 1}.{base}"

        return tuple(name(j) for j in partition.slow_indices) + tuple(
            name(j) for j in partition.fast_indices
        )

    def split(self, gap_ratio: float = 10.0):
        """Partition + SingularSystem; raises NoTimeScaleSeparation if the
        coefficient spectrum has no adequate gap."""
        partition = identify_partition(self.coefficient_vector(), gap_ratio)
        islow = np.array(partition.slow_indices, dtype=int)
        ifast = np.array(partition.fast_indices, dtype=int)
        eps = partition.eps
        total = self.n_der * N_STATES
        u_dim = self.scenario.input_signal(self.n_der).dim

        def pack(x, z):
            full = np.empty(total)
            full[islow] = x
            full[ifast] = z
            return full

        def f(x, z, u, _eps):
            return self.full_rhs(pack(x, z), u)[islow]

        def g(x, z, u, _eps):
            return eps * self.full_rhs(pack(x, z), u)[ifast]

        sys = SingularSystem(
            n=islow.size, m=ifast.size, p=u_dim, f=f, g=g, eps=eps,
            labels=self.labels(partition),
        )
        return sys, partition

    # -- equilibrium -----------------------------------------------------------
    def equilibrium(self, u0, tol: float = 1e-7) -> np.ndarray:
        """Full steady state for the initial input, as a stacked 15N vector.

        Islanded mode pins the reference DER phase (its rhs row is
        structurally zero) and solves the remaining equations. Seeded from a
        flat electrical start: nominal voltage on the q axis, currents from
        the commanded or shared power.
        """
        from scipy.optimize import fsolve

        u0 = np.atleast_1d(np.asarray(u0, dtype=float))
        S0 = np.zeros((self.n_der, N_STATES))
        p0 = self.params[0]
        if self.mode == GRID_TIED:
            cmd = u0.reshape(self.n_der, 2)
            v_ref = float(np.imag(self.net.pcc_voltage))
            S0[:, 0] = cmd[:, 0]
            S0[:, 1] = cmd[:, 1]
            S0[:, 14] = v_ref
            S0[:, 12] = cmd[:, 0] / (1.5 * v_ref)
            S0[:, 10] = S0[:, 12]
            S0[:, 2] = -p0.omega_n / p0.k_i_pll
        else:
            v_ref = p0.v_oq_n
            base_g = sum(g for _, g, _ in self.net.loads)
            p_guess = 1.5 * v_ref**2 * base_g / self.n_der
            S0[:, 0] = p_guess
            S0[:, 14] = v_ref
            S0[:, 12] = p_guess / (1.5 * v_ref)
            S0[:, 10] = S0[:, 12]
            S0[:, 2] = -p0.omega_n / p0.k_i_pll + 0.1
        x0 = S0.ravel()
        total = x0.size
        if self.mode == ISLANDED:
            free = np.arange(total) != 3  # pin delta of the reference DER

            def resid(v):
                full = np.zeros(total)
                full[free] = v
                return self.full_rhs(full, u0)[free]

            sol = fsolve(resid, x0[free], xtol=1e-13, maxfev=40000)
            full = np.zeros(total)
            full[free] = sol
        else:
            full = fsolve(lambda s: self.full_rhs(s, u0), x0, xtol=1e-13, maxfev=40000)
        res = self.full_rhs(full, u0)
        scale = 1.0 + np.abs(full)
        if np.max(np.abs(res) / scale) > tol:
            raise NotAnEquilibrium(
                f"equilibrium residual {np.max(np.abs(res) / scale):.3e} > {tol:.1e}"
            )
        return full


def assemble_system(params: list[DerParams], net: NetworkModel, scn: Scenario,
                    gap_ratio: float = 10.0, convention: str = "paper"):
    """Stacked SingularSystem + partition for a DER bank on a network.

    The derivative-coefficient vector follows the per-DER pattern
    [1/w_c x2, 1, 1, PI-ratio x2, PI-ratio x2 | 1/w_cPLL, L_f x2, L_c x2,
    C_f x2]; the partition's fast coefficients become the eps vector.
    """
    mg = MicrogridSystem(params, net, scn, convention)
    sys, partition = mg.split(gap_ratio)
    return sys, partition, mg


# ---------------------------------------------------------------------------
# small-signal baseline


@dataclass
class LinearReducedModel:
    """Schur-complement reduction of the linearized full model.

    rhs(x, u) = A (x - x_eq) + B (u - u_eq); the fast reconstruction is the
    linear QSS map z = z_eq - Gz^{-1} (Gx dx + Gu du).
    """

    x_eq: np.ndarray
    z_eq: np.ndarray
    u_eq: np.ndarray
    A: np.ndarray
    B: np.ndarray
    fast_gain_x: np.ndarray
    fast_gain_u: np.ndarray

    @property
    def dim(self):
        return self.x_eq.size

    def rhs(self, x, u):
        return self.A @ (np.asarray(x, float) - self.x_eq) + self.B @ (
            np.asarray(u, float) - self.u_eq
        )

    def fast(self, x, u):
        return (self.z_eq + self.fast_gain_x @ (np.asarray(x, float) - self.x_eq)
                + self.fast_gain_u @ (np.asarray(u, float) - self.u_eq))


def baseline_small_signal(sys: SingularSystem, eq) -> LinearReducedModel:
    """Linearize the full system at an equilibrium and eliminate the fast
    block (the comparison baseline for the large-signal reduction).

    eq = (x_eq, z_eq, u_eq); raises NotAnEquilibrium when the point does not
    zero the stacked vector field, SingularFastBlock when dg/dz is singular.
    """
    from .sysdef import jac_block

    x_eq, z_eq, u_eq = [np.atleast_1d(np.asarray(v, dtype=float)) for v in eq]
    eps0 = np.zeros(sys.m)
    f0 = np.asarray(sys.f(x_eq, z_eq, u_eq, eps0), dtype=float)
    g0 = np.asarray(sys.g(x_eq, z_eq, u_eq, eps0), dtype=float)
    scale = 1.0 + np.abs(np.concatenate([x_eq, z_eq]))
    if np.max(np.abs(np.concatenate([f0, g0])) / np.max(scale)) > 1e-5:
        raise NotAnEquilibrium("supplied point does not zero the vector field")

    a_xx = jac_block(sys, "f", "x", x_eq, z_eq, u_eq)
    a_xz = jac_block(sys, "f", "z", x_eq, z_eq, u_eq)
    b_x = jac_block(sys, "f", "u", x_eq, z_eq, u_eq)
    g_x = jac_block(sys, "g", "x", x_eq, z_eq, u_eq)
    g_z = jac_block(sys, "g", "z", x_eq, z_eq, u_eq)
    g_u = jac_block(sys, "g", "u", x_eq, z_eq, u_eq)

    cond = np.linalg.cond(g_z)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularFastBlock(f"fast block condition number {cond:.3g}")
    gz_inv_gx = np.linalg.solve(g_z, g_x)
    gz_inv_gu = np.linalg.solve(g_z, g_u)
    A = a_xx - a_xz @ gz_inv_gx
    B = b_x - a_xz @ gz_inv_gu
    return LinearReducedModel(
        x_eq=x_eq, z_eq=z_eq, u_eq=u_eq, A=A, B=B,
        fast_gain_x=-gz_inv_gx, fast_gain_u=-gz_inv_gu,
    )


# ---------------------------------------------------------------------------
# configuration files


def radial_feeder(n_bus: int = 37, r: float = 0.05, x: float = 0.08):
    """Chain topology 1-2-...-n with uniform segment impedance."""
    return [(i, i + 1, r, x) for i in range(1, n_bus)]


def default_grid_tied_config() -> dict:
    """Single DER at a stiff PCC; command steps at 2 s and 4 s."""
    return {
        "mode": GRID_TIED,
        "dq_convention": "paper",
        "ders": [{"bus": 1, "params": {}}],
        "network": {
            "buses": [1],
            "lines": [],
            "loads": [],
            "pcc_bus": 1,
            "pcc_voltage": [0.0, -170.0],
        },
        "scenario": {
            "horizon_s": 6.0,
            "bench_horizon_s": 1.5,
            "commands": [
                {"der": 1, "schedule": [[0.0, 500.0, 0.0],
                                        [2.0, 1000.0, 500.0],
                                        [4.0, 500.0, 300.0]]}
            ],
            "load_events": [],
        },
        "assessment": {"mu": 2.0, "samples": 256, "scheme": "sobol", "seed": 0},
        "solver": {"rtol": 1e-6, "atol": 1e-8},
    }


def default_islanded_config() -> dict:
    """Seven droop-controlled DERs on a 37-bus radial feeder; a 20 ohm load
    connects to bus 12 at 2 s and disconnects at 2.5 s."""
    der_buses = [15, 18, 22, 24, 29, 33, 34]
    load_buses = [5, 9, 12, 20, 26, 31, 36]
    return {
        "mode": ISLANDED,
        "dq_convention": "paper",
        "ders": [{"bus": b, "params": {}} for b in der_buses],
        "network": {
            "buses": list(range(1, 38)),
            "lines": [list(l) for l in radial_feeder(37)],
            "loads": [[b, 0.011, 0.0] for b in load_buses],
            "pcc_bus": None,
        },
        "scenario": {
            "horizon_s": 4.0,
            "bench_horizon_s": 1.0,
            "commands": [],
            "load_events": [[2.0, 12, 0.05, 0.0], [2.5, 12, -0.05, 0.0]],
        },
        "assessment": {"mu": 2.0, "samples": 256, "scheme": "sobol", "seed": 0},
        "solver": {"rtol": 1e-6, "atol": 1e-8},
    }


def load_config(source):
    """Parse a microgrid config (dict or JSON path) into model objects.

    Returns (params_list, NetworkModel, Scenario, options) where options
    carries solver/assessment settings and the dq convention.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "read"):
        if hasattr(source, "read"):
            cfg = json.load(source)
        else:
            with open(source) as fh:
                cfg = json.load(fh)
    else:
        cfg = dict(source)

    mode = cfg["mode"]
    convention = cfg.get("dq_convention", "paper")
    ders = cfg["ders"]
    params = [DerParams(**d.get("params", {})) for d in ders]
    der_buses = [d["bus"] for d in ders]

    net_cfg = cfg["network"]
    # islanded droop references live on the positive q axis; grid-tied
    # regulation against the fixed bus is stable on the negative one
    pv = net_cfg.get("pcc_voltage", [0.0, -170.0])
    net = NetworkModel(
        buses=tuple(net_cfg["buses"]),
        lines=tuple(tuple(l) for l in net_cfg.get("lines", [])),
        loads=tuple(tuple(l) for l in net_cfg.get("loads", [])),
        der_buses=tuple(der_buses),
        pcc_bus=net_cfg.get("pcc_bus"),
        pcc_voltage=complex(pv[0], pv[1]),
    )

    scn_cfg = cfg["scenario"]
    commands = tuple(
        (c["der"] - 1, tuple(tuple(row) for row in c["schedule"]))
        for c in scn_cfg.get("commands", [])
    )
    events = tuple(tuple(e) for e in scn_cfg.get("load_events", []))
    scn = Scenario(
        mode=mode,
        horizon=float(scn_cfg["horizon_s"]),
        commands=commands,
        load_events=events,
        bench_horizon=scn_cfg.get("bench_horizon_s"),
    )
    options = {
        "convention": convention,
        "assessment": cfg.get("assessment", {}),
        "solver": cfg.get("solver", {}),
    }
    return params, net, scn, options
