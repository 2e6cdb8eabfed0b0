import numpy as np
import pytest

from blochwkb.model import linear_potential, quadratic_potential
from blochwkb.perturb import AuxState
from blochwkb.semiclassics import (COLUMNS, CausticError, Dynamics, TrajectoryState, initial_canonical_position,
                                   integrate, physical_center, special_case_solution)


def test_harmonic_oscillator_free_band(free_band):
    """E = p^2/2, U = x^2/2: Q = Q0 cos t + P0 sin t and S = int (P^2 - H)."""
    Q0, P0 = 0.6, -0.4
    dyn = Dynamics(free_band, quadratic_potential(), 0.1, "order0", freeze_aux=True)
    tr = integrate(TrajectoryState(0.0, Q0, P0), dyn, 1e-3, np.pi, record_every=100)
    t = tr.t
    np.testing.assert_allclose(tr.column("Q"), Q0 * np.cos(t) + P0 * np.sin(t), atol=1e-10)
    np.testing.assert_allclose(tr.column("P"), -Q0 * np.sin(t) + P0 * np.cos(t), atol=1e-10)
    H = 0.5 * (Q0**2 + P0**2)
    intP2 = 0.5 * (Q0**2 + P0**2) * t - 0.25 * (Q0**2 - P0**2) * np.sin(2 * t) - Q0 * P0 * np.sin(t) ** 2
    np.testing.assert_allclose(tr.column("S"), intP2 - H * t, atol=1e-10)
    np.testing.assert_allclose(tr.H, H, atol=1e-12)


def test_aux_riccati_free_band(free_band):
    """P2' = -1 - P2^2 from P2(0) = 0 gives -tan t; L0' = -P2/2 gives -log(cos t)/2."""
    dyn = Dynamics(free_band, quadratic_potential(), 0.1, "order0")
    tr = integrate(TrajectoryState(0.0, 0.0, 0.0), dyn, 1e-3, 1.0)
    f = tr.final
    assert f.aux.P2 == pytest.approx(-np.tan(1.0), abs=1e-10)
    assert f.aux.L0 == pytest.approx(-0.5 * np.log(np.cos(1.0)), abs=1e-10)
    assert f.aux.P3 == 0.0 and f.aux.L1 == 0.0


def test_caustic_guard(free_band):
    dyn = Dynamics(free_band, quadratic_potential(), 0.1, "order0")
    with pytest.raises(CausticError) as info:
        integrate(TrajectoryState(0.0, 0.0, 0.0), dyn, 1e-3, 2.0)
    assert 1.5 < info.value.last_time < np.pi / 2 + 1e-3
    ts, ys = info.value.trajectory
    assert ts[-1] == pytest.approx(info.value.last_time)


def test_order1_equals_order0_without_berry(free_band):
    U = quadratic_potential(0.5)
    s0 = TrajectoryState(0.0, 1.0, 0.2, aux=AuxState(P2=0.1, L1=-0.3))
    a = integrate(s0, Dynamics(free_band, U, 0.1, "order0"), 1e-2, 1.0)
    b = integrate(s0, Dynamics(free_band, U, 0.1, "order1"), 1e-2, 1.0)
    np.testing.assert_array_equal(a.y, b.y)


def test_invalid_order(free_band):
    with pytest.raises(ValueError):
        Dynamics(free_band, quadratic_potential(), 0.1, "order3")
    with pytest.raises(ValueError):
        integrate(TrajectoryState(0.0, 0.0, 0.0), Dynamics(free_band, quadratic_potential(), 0.1), -1.0, 1.0)


def test_rk4_fourth_order(asym_band):
    dyn = Dynamics(asym_band, quadratic_potential(0.25), 0.1, "order1")
    s0 = TrajectoryState(0.0, 2.0, 0.0, aux=AuxState(L2=-1.0))
    ref = integrate(s0, dyn, 1e-3, 1.0).final
    e1 = abs(integrate(s0, dyn, 0.04, 1.0).final.Q - ref.Q)
    e2 = abs(integrate(s0, dyn, 0.02, 1.0).final.Q - ref.Q)
    assert 12 < e1 / e2 < 20


@pytest.mark.parametrize("order", ["order1", "order2"])
def test_modified_hamiltonian_conserved(asym_band, asym_pert, order):
    dyn = Dynamics(asym_band, quadratic_potential(0.25), 1 / 16, order, pert=asym_pert)
    s0 = TrajectoryState(0.0, 2.0, 0.0, aux=AuxState(L1=0.0, L2=-1.0))
    tr = integrate(s0, dyn, 5e-3, 1.0, estimate_error=True)
    if order == "order1":
        assert np.ptp(tr.H) <= 1e-10
    else:
        # aux transport makes the order-2 Hamiltonian time dependent; drift is O(eps^2)
        assert np.ptp(tr.H) <= 1e-2
    assert tr.error_estimate < 1e-8
    assert tr.table().shape == (len(tr.t), len(COLUMNS))


def test_center_inversion(asym_band, asym_pert):
    U = quadratic_potential(0.25)
    for order in ("order0", "order1", "order2"):
        dyn = Dynamics(asym_band, U, 1 / 8, order, pert=asym_pert)
        Q = initial_canonical_position(2.0, 0.3, dyn)
        assert physical_center(TrajectoryState(0.0, Q, 0.3), dyn) == pytest.approx(2.0, abs=1e-12)


def test_special_case_free_band(free_band):
    K0, S0, c0, c1, t = 0.3, 0.1, 0.2, 0.5, 0.8
    sol = special_case_solution(K0, S0, 1.0, c0, c1, free_band, t)
    assert sol.b1 == pytest.approx(K0 - c1 * t)
    intE = ((K0) ** 3 - (K0 - c1 * t) ** 3) / (6 * c1)
    assert sol.b0 == pytest.approx(S0 - intE - c0 * t, abs=1e-13)
    assert sol.S1 == 0.0 and sol.S2 == 0.0
    zero = special_case_solution(K0, S0, 1.0, c0, c1, free_band, 0.0)
    assert (zero.b1, zero.b0, zero.S1, zero.S2) == (K0, S0, 0.0, 0.0)


def test_special_case_matches_trajectory(asym_band, asym_pert):
    K0, c0, c1, eps, T = 0.3, 0.2, 0.5, 1 / 16, 1.0
    U = linear_potential(c1, c0)
    sol = special_case_solution(K0, 0.0, 1.0, c0, c1, asym_band, T, pert=asym_pert)
    dyn = Dynamics(asym_band, U, eps, "order2", pert=asym_pert)
    f = integrate(TrajectoryState(0.0, 0.0, K0, S=0.0), dyn, 1e-3, T).final
    assert f.P == pytest.approx(sol.b1, abs=1e-12)
    S_pred = sol.b0 + sol.b1 * f.Q + eps * sol.S1 + eps**2 * sol.S2
    assert f.S == pytest.approx(S_pred, abs=1e-10)
