"""Acceptance criteria 1-10, each at its stated tolerance.

Every test appends one "criterion N: PASS/FAIL ..." line that the terminal
summary prints in order.
"""
import time

import numpy as np

from blochwkb.blochband import PeriodicSeries, apply_gauge, band_table
from blochwkb.harness import (Experiment, center_study, convergence_fit, gauge_study, run_experiment, validate_config,
                              wavefield_study)
from blochwkb.model import ExternalPotential, asymmetric_potential, linear_potential, quadratic_potential
from blochwkb.perturb import (AuxState, band_slice, display_report, dynamic_second_order, forcing_term,
                              perturb_table, perturbation_data, verify_identities)
from blochwkb.refsolver import EvolveConfig, split_step_evolve, wkb_error
from blochwkb.semiclassics import Dynamics, TrajectoryState, integrate, special_case_solution
from blochwkb.wkbfield import GaussianEnvelope, LinearPhase, build_initial_data, make_grid

from conftest import ACCEPTANCE_LINES


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def fmt(d):
    return ", ".join(f"{k}={v:.2e}" for k, v in d.items())


# ---------------------------------------------------------------------------

def test_criterion_01_identity_suite():
    t0 = time.perf_counter()
    V = asymmetric_potential()
    base = verify_identities(band_table(V, 1, 256, 32))
    fine = verify_identities(band_table(V, 1, 512, 64))
    secs = time.perf_counter() - t0
    ratios = {k: base[k] / fine[k] for k in base}
    bad = [k for k, v in base.items() if v > 1e-7]
    ok = not bad and all(r >= 10 for r in ratios.values()) and secs <= 30
    record(1, ok, f"residuals [{fmt(base)}]; min shrink {min(ratios.values()):.0f}x; {secs:.1f}s"
           + (f"; above 1e-7: {', '.join(bad)}" if bad else ""))
    assert all(r >= 10 for r in ratios.values())
    assert secs <= 30
    assert not bad, f"residuals above 1e-7 at N_p=256: {bad}"


def sum_over_states(sl, U1, U2):
    E, vecs = np.linalg.eigh(sl.H)
    Kmn = vecs.conj().T @ (sl.K * sl.chi)
    dE = E[0] - E
    coef = np.zeros_like(Kmn)
    coef[1:] = (-1j * U1 * Kmn[1:] / dE[1:]) / (E[1:] - E[0])
    Es2 = (U1**2 * np.sum(np.abs(Kmn[1:]) ** 2 / dE[1:] ** 3)
           + 0.5 * U2 * (np.sum(np.abs(Kmn[1:]) ** 2 / dE[1:] ** 2) + sl.berry[0] ** 2))
    return vecs @ coef, Es2


def test_criterion_02_sum_over_states():
    t0 = time.perf_counter()
    b = band_table(asymmetric_potential(), 1, 512, 16)
    U = quadratic_potential(1.0, 0.3)
    rng = np.random.default_rng(2)
    ew = es = 0.0
    for _ in range(20):
        p, x = rng.uniform(-np.pi, np.pi), rng.uniform(-2, 2)
        sl = band_slice(b, p)
        pd = perturbation_data(sl, x, U)
        w, Es2 = sum_over_states(sl, U.derivative(x, 1), U.derivative(x, 2))
        ew = max(ew, np.linalg.norm(pd.w_coeffs - w) / np.linalg.norm(w))
        es = max(es, abs(pd.Es2 - Es2) / abs(Es2))
    secs = time.perf_counter() - t0
    ok = ew <= 1e-8 and es <= 1e-8 and secs <= 5
    record(2, ok, f"w rel {ew:.1e}, Es2 rel {es:.1e} (M=16, N_p=512); {secs:.1f}s")
    assert ew <= 1e-8 and es <= 1e-8 and secs <= 5


def test_criterion_03_decomposition(asym_band):
    rng = np.random.default_rng(3)
    U = ExternalPotential("smooth-closed-form", (0.8, 0.7, 0.3))
    worst = 0.0
    for _ in range(100):
        p, x = rng.uniform(-np.pi, np.pi), rng.uniform(-3, 3)
        pd = perturbation_data(band_slice(asym_band, p), x, U)
        worst = max(worst, abs(pd.Es2 - pd.A1 * U.derivative(x, 1) - pd.B * U.derivative(x, 2)))
    ok = worst <= 1e-10
    record(3, ok, f"max |Es2 - A1 U' - B U''| = {worst:.1e} over 100 points")
    assert ok


def fourier_integral(series: PeriodicSeries, K0, c1, t):
    """int_0^t f(K0 - c1 s) ds term by term from the trigonometric coefficients."""
    c = series.coef[0]
    n = series.omega
    p0 = series.p0
    zero = n == 0
    out = np.sum(c[zero]).real * t
    e = (np.exp(1j * n[~zero] * (K0 - p0)) - np.exp(1j * n[~zero] * (K0 - c1 * t - p0))) / (1j * n[~zero] * c1)
    return float((out + np.sum(c[~zero] * e)).real)


def test_criterion_04_special_case(tmp_path, asym_band):
    cfg = {"special.K0": 0.5, "special.c1": 1.0, "special.c0": 0.2, "special.S0": 0.1, "special.T": 10.0}
    summary, report = run_experiment(Experiment("special-case", cfg, tmp_path))
    r = summary["result"]
    # independent closed form for the quadratures: termwise integration of the Fourier series
    bt = apply_gauge(asym_band, lambda p: 0.3 * np.sin(p))
    pt = perturb_table(bt)
    quad_dev = 0.0
    for t in (0.5, 3.0, 10.0):
        sol = special_case_solution(0.5, 0.1, 1.0, 0.2, 1.0, bt, t, pt)
        b0 = 0.1 - fourier_integral(bt.series("E"), 0.5, 1.0, t) - 0.2 * t
        S1 = -fourier_integral(bt.series("berry_conn"), 0.5, 1.0, t)
        S2 = -fourier_integral(pt.series, 0.5, 1.0, t)
        quad_dev = max(quad_dev, abs(sol.b0 - b0), abs(sol.S1 - S1), abs(sol.S2 - S2),
                       abs(sol.b1 - (0.5 - t)))
    ok = report.passed and quad_dev <= 1e-10
    record(4, ok, f"P-b1 {r['P_vs_b1']:.1e}, S-closed {r['S_vs_closed_form']:.1e}, aux {r['aux_max']:.1e}, "
                  f"E_w {r['E_w_max']:.1e}, H drift {r['H_drift']:.1e} (T=10); quadrature vs Fourier {quad_dev:.1e}")
    assert report.passed, report.items
    assert quad_dev <= 1e-10


def fan_estimates(d, x0, phi1, dlogA, h, T, dt):
    """P2, P3, L1 at the central ray from three neighbouring order0 rays a distance h apart."""
    rays = [integrate(TrajectoryState(0.0, x, phi1(x)), d, dt, T).final for x in (x0 - h, x0, x0 + h)]
    Qa = (rays[2].Q - rays[0].Q) / (2 * h)
    Pa = (rays[2].P - rays[0].P) / (2 * h)
    Qaa = (rays[2].Q - 2 * rays[1].Q + rays[0].Q) / h**2
    Paa = (rays[2].P - 2 * rays[1].P + rays[0].P) / h**2
    # density conservation: log A = log a_I(alpha) - log(dQ/dalpha) / 2 along the fan
    return np.array([Pa / Qa, (Paa * Qa - Pa * Qaa) / Qa**3, (dlogA - 0.5 * Qaa / Qa) / Qa])


def test_criterion_05_aux_oracles(free_band, asym_band):
    # Riccati: free band, U = x^2/2, P2(0) = 0
    d = Dynamics(free_band, quadratic_potential(), 0.1, "order0")
    tr = integrate(TrajectoryState(0.0, 0.0, 0.0), d, 1e-3, 1.2, record_every=100)
    ric = float(np.max(np.abs(tr.column("P2") + np.tan(tr.t))))
    # fans: asymmetric band, cubic U, curved initial phase, Gaussian amplitude
    U = ExternalPotential("polynomial", (0.0, 0.0, 0.125, 0.02))
    x0, K0, p2, p3, c, sig = 1.0, 0.2, 0.3, -0.2, 0.5, 1.0
    phi1 = lambda x: K0 + p2 * (x - x0) + 0.5 * p3 * (x - x0) ** 2
    d = Dynamics(asym_band, U, 0.1, "order0")
    T, dt = 1.0, 2e-3
    aux0 = AuxState(P2=p2, P3=p3, L0=-0.5 * (x0 - c) ** 2 / sig**2, L1=-(x0 - c) / sig**2, L2=-1 / sig**2)
    centre = integrate(TrajectoryState(0.0, x0, K0, aux=aux0), d, dt, T).final.aux
    target = np.array([centre.P2, centre.P3, centre.L1])
    hs = [0.04, 0.02, 0.01]
    errs = np.array([np.abs(fan_estimates(d, x0, phi1, aux0.L1, h, T, dt) - target) for h in hs])
    slopes = [convergence_fit(hs, errs[:, k])[0] for k in range(3)]
    ok = ric <= 1e-8 and min(slopes) >= 1.9 and errs[-1].max() <= 1e-6
    record(5, ok, f"Riccati {ric:.1e}; fan slopes P2/P3/L1 = {slopes[0]:.3f}/{slopes[1]:.3f}/{slopes[2]:.3f}, "
                  f"errors at h=0.01 {errs[-1].max():.1e}")
    assert ric <= 1e-8
    assert min(slopes) >= 1.9 and errs[-1].max() <= 1e-6


def test_criterion_06_forcing(asym_pert):
    rng = np.random.default_rng(6)
    worst = 0.0
    h = 1e-3
    for _ in range(50):
        p = rng.uniform(-np.pi, np.pi)
        aux = AuxState(*rng.normal(size=8))
        U1, U2, U3 = rng.normal(size=3)
        basis = asym_pert.basis_at(p)

        def e2(s):
            # U locally cubic through (U1, U2, U3); aux follows its own Taylor polynomials
            return dynamic_second_order(basis, aux.shifted(s), U1 + U2 * s + 0.5 * U3 * s * s, U2 + U3 * s)

        fd = (-e2(2 * h) + 8 * e2(h) - 8 * e2(-h) + e2(-2 * h)) / (12 * h)
        worst = max(worst, abs(forcing_term(basis, aux, U1, U2, U3) - fd))
    rep = display_report(asym_pert.basis_at(0.4), AuxState(0.4, -0.1, 0.1, 0.0, 0.0, 0.7, -1.0, 0.3), 0.8, 1.0, 0.2)
    diffs = {f"{blk}:{k}": v["difference"] for blk, terms in rep.items() for k, v in terms.items()
             if abs(v["difference"]) > 1e-14}
    ok = worst <= 1e-7
    record(6, ok, f"max |Ft - d_x Et2| = {worst:.1e} over 50 states; printed-display terms differing: "
                  + (", ".join(f"{k} ({v:+.3g})" for k, v in diffs.items()) or "none"))
    assert ok


def test_criterion_07_wavefield():
    t0 = time.perf_counter()
    res = wavefield_study(validate_config({}))
    secs = time.perf_counter() - t0
    s1, s0 = res.slopes["first_order"], res.slopes["leading"]
    ok = s1 >= 0.9 and secs <= 600
    record(7, ok, f"first-order L2 slope {s1:.2f} (leading order {s0:.2f}), errors "
                  f"{', '.join(f'{e:.2e}' for e in res.errors['first_order'])}; no eps^2 rate is claimed since the "
                  f"A1 amplitude correction is not modelled; {secs:.0f}s")
    assert ok


def test_criterion_08_headline():
    t0 = time.perf_counter()
    cfg = validate_config({})
    res = center_study(cfg)
    secs = time.perf_counter() - t0
    s0 = res.slopes["order0"]
    shift = res.metadata["shift_relative_error"][0.0625]
    le = res.metadata["order2_le_order1"]
    ok = s0 >= 0.8 and shift <= 0.5 and all(le) and secs <= 1200
    e = res.errors
    record(8, ok, f"(a) order0 slope {s0:.2f}; (b) shift rel err {shift:.3f} at eps=1/16; (c) order2<=order1 {le}, "
                  f"order2 slope {res.slopes['order2']:.2f} (target 2.3, informational), order1 slope "
                  f"{res.slopes['order1']:.2f}; errors o1 {', '.join(f'{v:.1e}' for v in e['order1'])}, "
                  f"o2 {', '.join(f'{v:.1e}' for v in e['order2'])}; {secs:.0f}s")
    assert s0 >= 0.8
    assert shift <= 0.5
    assert all(le)
    assert secs <= 1200


def test_criterion_09_gauge(asym_band):
    cfg = validate_config({})
    res = gauge_study(cfg)
    bt = apply_gauge(asym_band, lambda p: 0.3 * np.sin(p))
    U = linear_potential(0.7)
    es2 = 0.0
    for j in range(0, asym_band.N_p, 8):
        p = asym_band.p_grid[j]
        a = perturbation_data(band_slice(asym_band, p), 0.0, U)
        b = perturbation_data(band_slice(bt, p), 0.0, U)
        es2 = max(es2, abs(a.Es2 - b.Es2))
    shift, dE = res.metadata["berry_shift_error"], res.metadata["energy_change"]
    slope = res.slopes["order1"]
    ok = shift <= 1e-8 and dE <= 1e-8 and es2 <= 1e-8 and slope >= 1.9
    record(9, ok, f"A shift error {shift:.1e}, E change {dE:.1e}, Es2 change {es2:.1e} (linear U); centre "
                  f"difference slope {slope:.2f} (order2 {res.slopes['order2']:.2f})")
    assert ok


def test_criterion_10_solver_hygiene(mathieu_V, mathieu_band):
    eps = 1 / 16
    U = quadratic_potential(0.25)
    g = make_grid(eps, 16.0, 32)
    psi0 = build_initial_data(GaussianEnvelope.normalized(1.0, 1.0), LinearPhase(0.3), mathieu_band, eps, g, U, True)
    ev = split_step_evolve(psi0, mathieu_V, U, EvolveConfig(eps / 200, 1e4 * eps / 200, record_every=1000))
    m = ev.column("mass")
    drift = float(abs(m[-1] - m[0]) / m[0])

    T = 0.5
    fin = lambda f: split_step_evolve(psi0, mathieu_V, U, EvolveConfig(eps / f, T, record_every=10**9)).final
    ref = fin(1600)
    fs = [25, 50, 100]
    l2 = [wkb_error(fin(f), ref) for f in fs]
    dt_slope = convergence_fit([1.0, 0.5, 0.25], l2)[0]

    d = Dynamics(mathieu_band, U, eps, "order0")
    q = lambda dt: integrate(TrajectoryState(0.0, 1.0, 0.3), d, dt, 2.0).y[-1, :2]
    r = q(0.0125)
    factor = float(np.max(np.abs(q(0.2) - r)) / np.max(np.abs(q(0.1) - r)))
    ok = drift <= 1e-11 and abs(dt_slope - 2) <= 0.2 and abs(factor - 16) <= 3.2
    record(10, ok, f"mass drift {drift:.1e} over 10^4 steps; L2 dt-halving slope {dt_slope:.2f}; "
                   f"RK4 halving factor {factor:.2f}")
    assert ok
