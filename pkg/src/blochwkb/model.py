"""Lattice, periodic lattice potential and slowly varying external potential.

Everything is one dimensional.  The periodic potential is stored by its
Fourier coefficients over the reciprocal lattice,

    V(z) = sum_m Vhat_m exp(i m G z),   G = 2 pi / a,

and the external potential U(x) is a closed-form function with exact
derivatives up to order 5.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np

MAX_DERIVATIVE = 5
REALNESS_TOL = 1e-13


@dataclass(frozen=True)
class Lattice:
    period: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.period) and self.period > 0):
            raise ValueError(f"lattice period must be positive, got {self.period!r}")

    @property
    def reciprocal_period(self) -> float:
        return 2.0 * math.pi / self.period


@dataclass(frozen=True)
class PeriodicPotential:
    """Real lattice potential given by finitely many Fourier coefficients.

    ``adjustment`` is the largest change applied when Hermitian symmetry
    Vhat_{-m} = conj(Vhat_m) was enforced at construction.
    """

    lattice: Lattice
    coeffs: Mapping[int, complex] = field(default_factory=dict)
    adjustment: float = 0.0

    @property
    def G(self) -> float:
        return self.lattice.reciprocal_period

    @property
    def max_index(self) -> int:
        return max((abs(m) for m in self.coeffs), default=0)

    def coefficient(self, m: int) -> complex:
        return self.coeffs.get(int(m), 0j)

    def l1_norm(self) -> float:
        return float(sum(abs(v) for v in self.coeffs.values()))

    def to_list(self):
        """Config representation: list of [m, re, im] sorted by m."""
        return [[int(m), float(v.real), float(v.imag)] for m, v in sorted(self.coeffs.items())]


def make_periodic_potential(lattice: Lattice, coeffs: Mapping[int, complex]) -> PeriodicPotential:
    """Build a real periodic potential, symmetrizing (Vhat_m + conj(Vhat_-m))/2."""
    raw = {}
    for m, v in dict(coeffs).items():
        v = complex(v)
        if not (np.isfinite(v.real) and np.isfinite(v.imag)):
            raise ValueError(f"non-finite potential coefficient at m={m}: {v!r}")
        if int(m) != m:
            raise ValueError(f"reciprocal index must be an integer, got {m!r}")
        raw[int(m)] = raw.get(int(m), 0j) + v

    sym = {}
    adjustment = 0.0
    for m in set(raw) | {-k for k in raw}:
        v = 0.5 * (raw.get(m, 0j) + raw.get(-m, 0j).conjugate())
        adjustment = max(adjustment, abs(v - raw.get(m, 0j)))
        if v != 0:
            sym[m] = v
    return PeriodicPotential(lattice, dict(sorted(sym.items())), adjustment)


def eval_periodic(V: PeriodicPotential, z):
    """V(z) for scalar or array z; asserts the imaginary residual is roundoff."""
    z = np.asarray(z, dtype=float)
    total = np.zeros(z.shape, dtype=complex)
    for m, v in V.coeffs.items():
        total += v * np.exp(1j * m * V.G * z)
    bound = REALNESS_TOL * max(V.l1_norm(), 1.0)
    resid = float(np.max(np.abs(total.imag))) if total.size else 0.0
    if resid > bound:
        raise ArithmeticError(f"periodic potential has imaginary residual {resid:.3e}")
    out = total.real
    return float(out) if out.ndim == 0 else out


def cosine_potential(lattice: Lattice | None = None, amplitude: float = 1.0) -> PeriodicPotential:
    """Mathieu potential amplitude*cos(G z)."""
    lattice = lattice or Lattice()
    return make_periodic_potential(lattice, {1: 0.5 * amplitude, -1: 0.5 * amplitude})


def asymmetric_potential(lattice: Lattice | None = None) -> PeriodicPotential:
    """cos(G z) + 0.3 sin(2 G z); breaks inversion symmetry."""
    lattice = lattice or Lattice()
    return make_periodic_potential(lattice, {1: 0.5, -1: 0.5, 2: -0.15j, -2: 0.15j})


# ---------------------------------------------------------------------------
# external potential

EXTERNAL_KINDS = ("linear", "quadratic", "polynomial", "smooth-closed-form")


@dataclass(frozen=True)
class ExternalPotential:
    """Slowly varying potential U(x) with exact derivatives to order 5.

    kinds and params:
      linear              [c0, c1]            U = c0 + c1 x
      quadratic           [kappa, x0, c0]     U = c0 + kappa (x - x0)^2 / 2   (x0, c0 optional)
      polynomial          [a0, a1, ..., ak]   U = sum a_j x^j
      smooth-closed-form  [amp, k, phase]     U = amp cos(k x + phase)
    """

    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in EXTERNAL_KINDS:
            raise ValueError(f"unknown external potential kind {self.kind!r}; expected one of {EXTERNAL_KINDS}")
        params = tuple(float(p) for p in self.params)
        if not all(np.isfinite(params)):
            raise ValueError("external potential parameters must be finite")
        need = {"linear": (2, 2), "quadratic": (1, 3), "polynomial": (1, None), "smooth-closed-form": (3, 3)}
        lo, hi = need[self.kind]
        if len(params) < lo or (hi is not None and len(params) > hi):
            raise ValueError(f"{self.kind} potential takes {lo}..{hi or 'any'} parameters, got {len(params)}")
        object.__setattr__(self, "params", params)

    @property
    def _poly(self):
        """Power-series coefficients for the polynomial kinds."""
        p = self.params
        if self.kind == "linear":
            return np.array(p)
        if self.kind == "quadratic":
            kappa = p[0]
            x0 = p[1] if len(p) > 1 else 0.0
            c0 = p[2] if len(p) > 2 else 0.0
            return np.array([c0 + 0.5 * kappa * x0 * x0, -kappa * x0, 0.5 * kappa])
        return np.array(p)

    @property
    def degree(self):
        if self.kind == "smooth-closed-form":
            return None
        return len(self._poly) - 1

    @cached_property
    def _derivative_polys(self):
        out = [np.asarray(self._poly, dtype=float)]
        for _ in range(MAX_DERIVATIVE):
            c = np.polynomial.polynomial.polyder(out[-1]) if len(out[-1]) > 1 else np.zeros(1)
            out.append(c)
        return out

    def derivative(self, x, order: int = 0):
        if not (0 <= int(order) <= MAX_DERIVATIVE) or int(order) != order:
            raise ValueError(f"derivative order must be in 0..{MAX_DERIVATIVE}, got {order!r}")
        order = int(order)
        x = np.asarray(x, dtype=float)
        if self.kind == "smooth-closed-form":
            amp, k, phase = self.params
            # d^n cos(y) = cos(y + n pi/2)
            out = amp * k**order * np.cos(k * x + phase + 0.5 * math.pi * order)
        else:
            c = self._derivative_polys[order]
            out = np.broadcast_to(np.polynomial.polynomial.polyval(x, c), x.shape).astype(float)
        return float(out) if out.ndim == 0 else out

    def derivatives(self, x, upto: int = MAX_DERIVATIVE):
        """Array [U, U', ..., U^(upto)] at scalar x."""
        x = float(x)
        if self.kind == "smooth-closed-form":
            amp, k, phase = self.params
            n = np.arange(upto + 1)
            return amp * k**n * np.cos(k * x + phase + 0.5 * math.pi * n)
        out = np.empty(upto + 1)
        for j in range(upto + 1):
            acc = 0.0
            for a in self._derivative_polys[j][::-1]:
                acc = acc * x + a
            out[j] = acc
        return out

    __call__ = derivative

    def to_dict(self):
        return {"kind": self.kind, "params": list(self.params)}


def eval_external(U: ExternalPotential, x, order: int = 0):
    return U.derivative(x, order)


def linear_potential(c1: float, c0: float = 0.0) -> ExternalPotential:
    return ExternalPotential("linear", (c0, c1))


def quadratic_potential(kappa: float = 1.0, x0: float = 0.0, c0: float = 0.0) -> ExternalPotential:
    return ExternalPotential("quadratic", (kappa, x0, c0))


def potential_from_config(cfg: Mapping) -> tuple[PeriodicPotential, ExternalPotential | None]:
    """Read the flat keys lattice.period, potential.coeffs, external.kind, external.params."""
    lattice = Lattice(float(cfg.get("lattice.period", 1.0)))
    coeffs = {}
    for item in cfg.get("potential.coeffs", []):
        if len(item) != 3:
            raise ValueError(f"potential.coeffs: entries must be [m, re, im], got {item!r}")
        m, re, im = item
        coeffs[int(m)] = coeffs.get(int(m), 0j) + complex(float(re), float(im))
    V = make_periodic_potential(lattice, coeffs)
    U = None
    if "external.kind" in cfg:
        U = ExternalPotential(str(cfg["external.kind"]), tuple(cfg.get("external.params", ())))
    return V, U
