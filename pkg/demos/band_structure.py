"""Lowest band of the asymmetric lattice: energies, Berry connection, Zak phase, and a gauge twist."""
import numpy as np

from blochwkb.blochband import apply_gauge, band_table
from blochwkb.model import asymmetric_potential, cosine_potential

# %% bands and Zak phases
for name, V in (("Mathieu", cosine_potential()), ("asymmetric", asymmetric_potential())):
    b = band_table(V)
    print(f"{name:>10}: E in [{b.energy.min():.6f}, {b.energy.max():.6f}], gap {b.diagnostics['min_gap']:.4f}, "
          f"Zak phase {b.zak_phase:.12f}")

# %% the natural gauge has a constant connection; a twist makes it p-dependent
b = band_table(asymmetric_potential())
t = apply_gauge(b, lambda p: 0.3 * np.sin(p))
print("connection spread, natural gauge:", np.ptp(b.berry_conn))
print("connection spread, twisted gauge:", np.ptp(t.berry_conn))
print("A_twisted - A + 0.3 cos p (max):", np.abs(t.berry_conn - b.berry_conn + 0.3 * np.cos(b.p_grid)).max())
print("loop integral of A, twisted:", t.berry_conn.sum() * t.dp, "(Zak phase mod 2pi)")

# %% group velocity and effective mass at a few momenta
for p in (0.0, 1.0, 2.0, np.pi - 1e-3):
    E = b.series("E").derivs(p, 2)[:, 0]
    print(f"p={p:6.3f}  E={E[0]: .6f}  E'={E[1]: .6f}  E''={E[2]: .6f}")
