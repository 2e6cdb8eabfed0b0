"""Gaussian packet in a harmonic trap: reference centre against order 0, 1, 2 ray-fan predictions at one eps."""
import numpy as np

from blochwkb.harness import _fan, _reference_centre, validate_config
from blochwkb.semiclassics import ORDERS, Dynamics

cfg = validate_config({"eps_list": [0.125], "converge.dt_factor": 400.0})
eps = 0.125
t, centre, band, pt, U = _reference_centre(cfg, eps, "quadratic")
print(f"reference: centre {centre[0]:.4f} -> {centre[-1]:.4f} over t in [0, {t[-1]:.2f}]")
for order in ORDERS:
    d = Dynamics(band, U, eps, order, pt if order == "order2" else None)
    _, xc, _, _ = _fan(d, centre[0], cfg["packet.K0"], cfg["packet.sigma"], cfg["converge.fan_nodes"],
                       t[-1] - t[0], cfg["converge.obs_dt"])
    print(f"{order}: max |centre - prediction| = {np.max(np.abs(xc - centre)):.3e}")
