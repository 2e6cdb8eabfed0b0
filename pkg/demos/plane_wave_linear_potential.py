"""Plane wave in a linear potential: the order-2 flow against the closed-form phases, then the wavefield."""

from blochwkb.blochband import band_table
from blochwkb.model import cosine_potential, linear_potential
from blochwkb.perturb import AuxState, perturb_table
from blochwkb.refsolver import EvolveConfig, split_step_evolve, wkb_error
from blochwkb.semiclassics import Dynamics, TrajectoryState, integrate, special_case_solution
from blochwkb.wkbfield import GaussianEnvelope, make_grid, reconstruct_wkb

b = band_table(cosine_potential())
pt = perturb_table(b)
K0, c1, eps = 0.3, 0.5, 1 / 16
U = linear_potential(c1)

# %% Bloch oscillation of the canonical variables
tr = integrate(TrajectoryState(0.0, 0.0, K0, 0.0, AuxState()), Dynamics(b, U, eps, "order2", pt), 1e-3, 4.0,
               record_every=500)
for t, Q, P, S in zip(tr.t, tr.column("Q"), tr.column("P"), tr.column("S")):
    sol = special_case_solution(K0, 0.0, 1.0, 0.0, c1, b, t, pt)
    S_pred = sol.b0 + sol.b1 * Q + eps * sol.S1 + eps**2 * sol.S2
    print(f"t={t:4.1f}  Q={Q: .6f}  P-b1={P - sol.b1: .1e}  S-S_pred={S - S_pred: .1e}")

# %% WKB wavefield against the reference solve at t = 1
aI = GaussianEnvelope.normalized(0.0, 1.0)
for eps in (1 / 8, 1 / 16):
    g = make_grid(eps, 16.0, 32)
    psi0 = reconstruct_wkb(special_case_solution(K0, 0.0, 1.0, 0.0, c1, b, 0.0, pt), b, eps, g, aI, True)
    ev = split_step_evolve(psi0, b.V, U, EvolveConfig(eps / 400, 1.0, 10**9))
    solT = special_case_solution(K0, 0.0, 1.0, 0.0, c1, b, 1.0, pt)
    errs = [wkb_error(ev.final, reconstruct_wkb(solT, b, eps, g, aI, fo)) for fo in (False, True)]
    print(f"eps=1/{round(1 / eps)}  L2 error leading {errs[0]:.3e}  first order {errs[1]:.3e}")
