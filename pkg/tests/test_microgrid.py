"""DER dynamics, network solve, assembly, small-signal baseline."""

import numpy as np
import pytest

from lsor.errors import NotAnEquilibrium, SingularFastBlock
from lsor.microgrid import (
    GRID_TIED,
    ISLANDED,
    DerParams,
    DerState,
    MicrogridSystem,
    NetworkModel,
    Scenario,
    assemble_system,
    baseline_small_signal,
    default_grid_tied_config,
    default_islanded_config,
    der_rhs_grid_tied,
    der_rhs_islanded,
    load_config,
    network_solve,
)
from lsor.reduction import QssMap
from lsor.sysdef import jac_block

from conftest import cubic_root_oracle, make_nls1


P = DerParams()


# -- per-DER right-hand sides ---------------------------------------------------


def test_state_count_parity():
    s = DerState(V_od=10.0).as_array()
    gt = der_rhs_grid_tied(s, P, [0.0, -170.0], [500.0, 0.0])
    isl = der_rhs_islanded(s, P, [0.0, 170.0], ref_omega_pll=377.0)
    assert gt.shape == (15,) and isl.shape == (15,)


def test_power_filter_balance():
    # V_od = 100, I_od = 10 feeds the LPF with 1.5*1000; P = 1500 balances
    s = DerState(P=1500.0, V_od=100.0, I_od=10.0)
    out = der_rhs_grid_tied(s, P, [0.0, 0.0], [0.0, 0.0])
    assert out[0] == pytest.approx(0.0, abs=1e-9)


def test_filter_current_balance():
    # choose the integrators so the commanded d-voltage is exactly 100 V with
    # a zero proportional term: then (-0.1*10 + 100 - 99)/L_f = 0
    p = DerParams(r_f=0.1)
    s = DerState(
        I_ld=10.0, V_od=99.0, I_lq=0.0,
        Phi_Q=10.0 / p.k_i_p,    # I_ld* = 10 (grid-tied cross mapping)
        Gamma_d=100.0 / p.k_i_c,
    )
    out = der_rhs_grid_tied(s, p, [0.0, 0.0], [0.0, 0.0])
    assert out[9] == pytest.approx(0.0, abs=1e-9)


def test_pll_rate_at_lock():
    s = DerState()  # V_odf = Phi_PLL = 0
    out = der_rhs_grid_tied(s, P, [0.0, -170.0], [0.0, 0.0])
    assert out[3] == pytest.approx(377.0)


def test_droop_zero_gain():
    p = DerParams(m_droop=0.0)
    s = DerState(P=12345.0)
    out = der_rhs_islanded(s, p, [0.0, 170.0], ref_omega_pll=377.0)
    # Phi_d integrates omega_pll - omega*, omega* = 377 regardless of P
    assert out[4] == pytest.approx(377.0 - 377.0)


def test_droop_frequency_shift():
    p = DerParams(m_droop=1e-5)
    s = DerState(P=1e4)
    out = der_rhs_islanded(s, p, [0.0, 170.0], ref_omega_pll=377.0)
    # omega* = 377 - 0.1 = 376.9, PLL reads 377 at rest
    assert out[4] == pytest.approx(377.0 - 376.9)


def test_reference_der_phase_frozen():
    s = DerState(P=300.0, V_odf=2.0, Phi_PLL=1.0)
    wpll_own = P.omega_n - P.k_p_pll * 2.0 + P.k_i_pll * 1.0
    out = der_rhs_islanded(s, P, [0.0, 170.0], ref_omega_pll=wpll_own)
    assert out[3] == pytest.approx(0.0)


def test_power_balance_identity_at_equilibrium():
    # with dP = dQ = 0 the filter gives exactly the instantaneous powers
    rng = np.random.default_rng(1)
    v_od, v_oq, i_od, i_oq = rng.uniform(-100, 100, 4)
    p_inst = 1.5 * (v_od * i_od + v_oq * i_oq)
    q_inst = 1.5 * (v_oq * i_od - v_od * i_oq)
    s = DerState(P=p_inst, Q=q_inst, V_od=v_od, V_oq=v_oq, I_od=i_od, I_oq=i_oq)
    out = der_rhs_grid_tied(s, P, [0.0, 0.0], [0.0, 0.0])
    assert out[0] == pytest.approx(0.0, abs=1e-8)
    assert out[1] == pytest.approx(0.0, abs=1e-8)


# -- network ---------------------------------------------------------------------


def _single_bus_net(load_g=0.0, pcc=True):
    return NetworkModel(
        buses=(1,), lines=(), loads=((1, load_g, 0.0),) if load_g else (),
        der_buses=(1,), pcc_bus=1 if pcc else None, pcc_voltage=0.0 - 170.0j,
    )


def test_network_stiff_pcc_returns_configured_voltage():
    s = DerState(I_od=3.0, I_oq=-2.0)  # delta = 0
    vb = network_solve(s.as_array(), _single_bus_net(), GRID_TIED)
    assert vb[0, 0] == pytest.approx(0.0)
    assert vb[0, 1] == pytest.approx(-170.0)


def test_network_resistive_load_ohms_law():
    R = 20.0
    net = _single_bus_net(load_g=1.0 / R, pcc=False)
    s = DerState(I_od=3.0, I_oq=-2.0, delta=0.7)
    vb = network_solve(s.as_array(), net, ISLANDED)
    assert vb[0, 0] == pytest.approx(R * 3.0, rel=1e-12)
    assert vb[0, 1] == pytest.approx(R * -2.0, rel=1e-12)


def test_network_seven_der_vs_direct_solve():
    params, net, scn, _ = load_config(default_islanded_config())
    rng = np.random.default_rng(8)
    S = np.zeros((7, 15))
    S[:, 3] = rng.uniform(-0.3, 0.3, 7)
    S[:, 11] = rng.uniform(-5, 5, 7)
    S[:, 12] = rng.uniform(-5, 5, 7)
    vb = network_solve(S, net, ISLANDED)
    # direct linear-system oracle at the frozen state
    Y = net.admittance()
    idx = net.index
    inj = np.zeros(len(net.buses), dtype=complex)
    for k, b in enumerate(net.der_buses):
        inj[idx[b]] += (S[k, 11] + 1j * S[k, 12]) * np.exp(-1j * S[k, 3])
    v = np.linalg.solve(Y, inj)
    for k, b in enumerate(net.der_buses):
        expect = v[idx[b]] * np.exp(1j * S[k, 3])
        assert vb[k, 0] == pytest.approx(expect.real, rel=1e-12, abs=1e-12)
        assert vb[k, 1] == pytest.approx(expect.imag, rel=1e-12, abs=1e-12)


def test_angle_reference_invariance():
    """Adding a constant to every delta leaves bus-voltage magnitudes and
    powers unchanged (islanded)."""
    params, net, scn, _ = load_config(default_islanded_config())
    rng = np.random.default_rng(9)
    S = np.zeros((7, 15))
    S[:, 3] = rng.uniform(-0.2, 0.2, 7)
    S[:, 11] = rng.uniform(-5, 5, 7)
    S[:, 12] = rng.uniform(-5, 5, 7)
    vb0 = network_solve(S, net, ISLANDED)
    S2 = S.copy()
    S2[:, 3] += 0.83
    vb1 = network_solve(S2, net, ISLANDED)
    mag0 = np.hypot(vb0[:, 0], vb0[:, 1])
    mag1 = np.hypot(vb1[:, 0], vb1[:, 1])
    assert np.allclose(mag0, mag1, rtol=1e-12)
    p0 = 1.5 * (vb0[:, 0] * S[:, 11] + vb0[:, 1] * S[:, 12])
    p1 = 1.5 * (vb1[:, 0] * S2[:, 11] + vb1[:, 1] * S2[:, 12])
    assert np.allclose(p0, p1, rtol=1e-12)


# -- assembly ---------------------------------------------------------------------


def test_assemble_grid_tied_order_counts():
    params, net, scn, _ = load_config(default_grid_tied_config())
    sys, part, _ = assemble_system(params, net, scn)
    assert (sys.n, sys.m) == (8, 7)  # 15 -> 8 per DER


def test_assemble_islanded_order_counts():
    params, net, scn, _ = load_config(default_islanded_config())
    sys, part, _ = assemble_system(params, net, scn)
    assert sys.n + sys.m == 105
    assert sys.n == 56


def test_assemble_requires_ders():
    params, net, scn, _ = load_config(default_grid_tied_config())
    with pytest.raises(ValueError):
        MicrogridSystem([], net, scn)


def test_assembled_eps_matches_fast_coefficients():
    params, net, scn, _ = load_config(default_grid_tied_config())
    sys, part, mg = assemble_system(params, net, scn)
    p = params[0]
    expected = [1.0 / p.omega_c_pll, p.l_f, p.l_f, p.l_c, p.l_c, p.c_f, p.c_f]
    assert np.allclose(sys.eps, expected)


def test_assembly_consistency_with_direct_rhs():
    """evaluate() on the assembled system equals the per-DER rhs plus the
    network solve at the same state."""
    params, net, scn, _ = load_config(default_grid_tied_config())
    sys, part, mg = assemble_system(params, net, scn)
    rng = np.random.default_rng(5)
    state = rng.uniform(-1, 1, 15) * np.array(
        [500, 500, 1, 0.1, 10, 10, 1, 1, 20, 5, 5, 5, 5, 20, 170])
    u0 = np.array([700.0, 100.0])
    islow, ifast = list(part.slow_indices), list(part.fast_indices)
    f_val, g_val = sys.f(state[islow], state[ifast], u0, sys.eps), None
    g_val = sys.g(state[islow], state[ifast], u0, sys.eps)
    vb = network_solve(state, net, GRID_TIED)
    direct = der_rhs_grid_tied(state, params[0], vb, u0.reshape(1, 2))  # 1-d out
    assert np.allclose(f_val, direct[islow], rtol=1e-12, atol=1e-12)
    assert np.allclose(g_val, sys.eps * direct[ifast], rtol=1e-12, atol=1e-12)


def test_grid_tied_equilibrium_tracks_commands():
    params, net, scn, _ = load_config(default_grid_tied_config())
    _, part, mg = assemble_system(params, net, scn)
    u = scn.input_signal(1)
    eq = mg.equilibrium(u.value(0.0)).reshape(1, 15)
    assert eq[0, 0] == pytest.approx(500.0, abs=1e-5)   # P = P*
    assert eq[0, 1] == pytest.approx(0.0, abs=1e-5)     # Q = Q*
    assert abs(eq[0, 14]) == pytest.approx(170.0, rel=0.02)


def test_islanded_equilibrium_droop_sharing():
    params, net, scn, _ = load_config(default_islanded_config())
    _, part, mg = assemble_system(params, net, scn)
    u = scn.input_signal(7)
    eq = mg.equilibrium(u.value(0.0)).reshape(7, 15)
    # identical droop gains share active power equally
    assert np.allclose(eq[:, 0], eq[0, 0], rtol=1e-6)
    wpll = 377.0 - P.k_p_pll * eq[:, 8] + P.k_i_pll * eq[:, 2]
    assert np.allclose(wpll, wpll[0], rtol=1e-9)
    assert wpll[0] == pytest.approx(P.omega_n - P.m_droop * eq[0, 0], abs=1e-6)


def test_conventional_variant_assembles_and_balances():
    cfg = default_grid_tied_config()
    cfg["dq_convention"] = "conventional"
    cfg["network"]["pcc_voltage"] = [0.0, 170.0]
    params, net, scn, opts = load_config(cfg)
    sys, part, mg = assemble_system(params, net, scn, convention="conventional")
    u = scn.input_signal(1)
    eq = mg.equilibrium(u.value(0.0)).reshape(1, 15)
    assert eq[0, 0] == pytest.approx(500.0, abs=1e-4)
    assert eq[0, 14] == pytest.approx(170.0, rel=0.02)


# -- small-signal baseline ---------------------------------------------------------


def test_baseline_linear_system_identical_to_rom(lts1):
    base = baseline_small_signal(lts1, ([0.0], [0.0], [0.0]))
    assert base.A[0, 0] == pytest.approx(-1.0, rel=1e-6)
    assert base.rhs([2.0], [0.0])[0] == pytest.approx(-2.0, rel=1e-6)


def test_baseline_nls1_matches_hand_linearization(nls1):
    # h'(0) = 1/(1 + 3*0^2) = 1: A = -1 + 1 = 0, B = 1
    base = baseline_small_signal(nls1, ([0.0], [0.0], [0.0]))
    assert base.A[0, 0] == pytest.approx(0.0, abs=1e-6)
    assert base.B[0, 0] == pytest.approx(1.0, rel=1e-6)
    assert base.fast_gain_x[0, 0] == pytest.approx(1.0, rel=1e-6)


def test_baseline_singular_fast_block():
    from lsor.sysdef import SingularSystem

    sys = SingularSystem(
        n=1, m=1, p=1,
        f=lambda x, z, u, e: np.array([-x[0] + z[0]]),
        g=lambda x, z, u, e: np.array([z[0] ** 2]),  # dg/dz = 0 at z = 0
        eps=[0.1],
    )
    with pytest.raises(SingularFastBlock):
        baseline_small_signal(sys, ([0.0], [0.0], [0.0]))


def test_baseline_rejects_non_equilibrium(nls1):
    with pytest.raises(NotAnEquilibrium):
        baseline_small_signal(nls1, ([5.0], [0.0], [0.0]))
