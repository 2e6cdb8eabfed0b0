"""Single-band WKB wavefields on a periodic spatial grid.

A field is psi(x) = a(x) chi(x/eps, p(x)) exp(i phi(x)/eps) with p = phi'(x),
optionally with the first-order Bloch correction eps * a * chi1 where

    chi1 = U'(x) what(p) - i L1 chi'(p) - (i/2) P2 chi''(p),

the Sternheimer part w plus the transport part v.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .blochband import BandTable, plane_wave_indices
from .perturb import PerturbTable, band_slice, w_hat

POINTS_PER_CELL_MIN = 8


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    x_min: float
    x_max: float
    N: int

    def __post_init__(self):
        if self.N < 2 or self.N & (self.N - 1):
            raise GridError(f"N must be a power of two, got {self.N}")
        if not self.x_max > self.x_min:
            raise GridError("x_max must exceed x_min")

    @property
    def length(self) -> float:
        return self.x_max - self.x_min

    @property
    def dx(self) -> float:
        return self.length / self.N

    @property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.N)

    @property
    def k(self) -> np.ndarray:
        return 2 * np.pi * np.fft.fftfreq(self.N, d=self.dx)

    def to_dict(self):
        return {"x_min": self.x_min, "x_max": self.x_max, "N": self.N}


def cells_per_box(grid: Grid, eps: float, period: float = 1.0) -> tuple[int, int]:
    """(number of fast cells in the box, grid points per cell); both must be integers."""
    cells = grid.length / (eps * period)
    nc = int(round(cells))
    if abs(cells - nc) > 1e-9 * max(cells, 1) or nc == 0 or grid.N % nc:
        raise GridError(f"grid incommensurate with eps*a: {cells:.6g} cells for N={grid.N}")
    return nc, grid.N // nc


def check_resolution(grid: Grid, eps: float, period: float = 1.0):
    if grid.dx > eps * period / POINTS_PER_CELL_MIN * (1 + 1e-12):
        raise GridError(f"grid spacing {grid.dx:.3g} too coarse for eps={eps:g}; need <= eps*a/{POINTS_PER_CELL_MIN}")


def make_grid(eps: float, length: float, points_per_cell: int = 32, center: float = 0.0,
              period: float = 1.0) -> Grid:
    """Box of ``length`` (rounded up to a power-of-two number of cells) centred at ``center``."""
    cells = 2 ** math.ceil(math.log2(length / (eps * period) - 1e-9))
    L = cells * eps * period
    ppc = 2 ** math.ceil(math.log2(points_per_cell))
    return Grid(center - 0.5 * L, center + 0.5 * L, cells * ppc)


@dataclass
class Wavefield:
    grid: Grid
    values: np.ndarray
    epsilon: float
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.shape != (self.grid.N,):
            raise GridError(f"values have shape {self.values.shape}, grid has N={self.grid.N}")

    @property
    def mass(self) -> float:
        return float(np.sum(np.abs(self.values) ** 2) * self.grid.dx)

    def metadata(self):
        return {"grid": self.grid.to_dict(), "epsilon": self.epsilon, "t": self.t,
                "dtype": "complex128", "byteorder": "little"}

    def save(self, path) -> tuple[Path, Path]:
        """Write <path>.bin (little-endian complex128) and <path>.json."""
        path = Path(path)
        binp, jsp = path.with_suffix(".bin"), path.with_suffix(".json")
        self.values.astype("<c16").tofile(binp)
        jsp.write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")
        return binp, jsp

    @classmethod
    def load(cls, path) -> "Wavefield":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        grid = Grid(**meta["grid"])
        vals = np.fromfile(path.with_suffix(".bin"), dtype="<c16")
        return cls(grid, vals.astype(np.complex128), float(meta["epsilon"]), float(meta.get("t", 0.0)))


# ---------------------------------------------------------------------------
# envelopes and phases

@dataclass(frozen=True)
class GaussianEnvelope:
    """a(x) = amp * exp(-(x - x0)^2 / (2 sigma^2))."""

    x0: float = 0.0
    sigma: float = 1.0
    amp: float = 1.0

    @classmethod
    def normalized(cls, x0=0.0, sigma=1.0):
        return cls(x0, sigma, (math.pi * sigma * sigma) ** -0.25)

    def __call__(self, x, order: int = 0):
        y = (np.asarray(x, dtype=float) - self.x0) / self.sigma
        g = self.amp * np.exp(-0.5 * y * y)
        # probabilists' Hermite polynomials: d^n exp(-y^2/2) = (-1)^n He_n(y) exp(-y^2/2)
        He = np.polynomial.hermite_e.hermeval(y, [0] * order + [1])
        return (-1) ** order * He * g / self.sigma**order

    def log_derivatives(self, x):
        """(L0, L1, L2, L3) of log a at x."""
        s2 = self.sigma**2
        return (math.log(self.amp) - 0.5 * (x - self.x0) ** 2 / s2, -(x - self.x0) / s2, -1.0 / s2, 0.0)

    def curvature_ratio(self, x):
        """a''/a = L2 + L1^2."""
        s2 = self.sigma**2
        return ((np.asarray(x) - self.x0) ** 2 / s2 - 1.0) / s2

    def to_dict(self):
        return {"x0": self.x0, "sigma": self.sigma, "amp": self.amp}


@dataclass(frozen=True)
class LinearPhase:
    """phi(x) = S0 + K0 x."""

    K0: float
    S0: float = 0.0

    def __call__(self, x, order: int = 0):
        x = np.asarray(x, dtype=float)
        if order == 0:
            return self.S0 + self.K0 * x
        if order == 1:
            return np.full_like(x, self.K0)
        return np.zeros_like(x)


# ---------------------------------------------------------------------------
# synthesis

def bloch_synthesis(coeffs: np.ndarray, G: float, z: np.ndarray) -> np.ndarray:
    """sum_m c_m exp(i m G z); coeffs shape (2M+1,) or (len(z), 2M+1)."""
    M = (coeffs.shape[-1] - 1) // 2
    ph = np.exp(1j * G * np.multiply.outer(z, plane_wave_indices(M)))
    if coeffs.ndim == 1:
        return ph @ coeffs
    return np.sum(ph * coeffs, axis=1)


def _unique_p(p: np.ndarray):
    key = np.round(p, 13)
    uniq, inv = np.unique(key, return_inverse=True)
    return uniq, inv


def bloch_factor(band: BandTable, p: np.ndarray, z: np.ndarray, first_order=None) -> np.ndarray:
    """chi(z, p) per sample, plus eps * chi1 when ``first_order=(eps, U1, L1, P2)`` is given."""
    p = np.broadcast_to(np.asarray(p, dtype=float), z.shape)
    uniq, inv = _unique_p(p)
    out = np.empty(z.shape, dtype=complex)
    for i, pu in enumerate(uniq):
        sel = inv == i
        sl = band_slice(band, float(pu))
        if first_order is None:
            out[sel] = bloch_synthesis(sl.chi, band.G, z[sel])
            continue
        eps, U1, L1, P2 = (np.broadcast_to(np.asarray(a, dtype=float), z.shape)[sel] for a in first_order)
        wh = np.zeros_like(sl.chi) if band.diagnostics.get("free_particle") else w_hat(sl)
        cols = np.column_stack([sl.chi, wh, sl.d1, sl.d2])
        M = (sl.chi.size - 1) // 2
        ph = np.exp(1j * band.G * np.multiply.outer(z[sel], plane_wave_indices(M)))
        chi, w, d1, d2 = (ph @ cols).T
        out[sel] = chi + eps * (U1 * w - 1j * L1 * d1 - 0.5j * P2 * d2)
    return out


def build_initial_data(aI: Callable, phiI: Callable, band: BandTable, eps: float, grid: Grid,
                       U=None, first_order: bool = False) -> Wavefield:
    """psi_I = a_I(x) chi(x/eps, phi_I'(x)) exp(i phi_I(x)/eps).

    With ``first_order`` the eps * a_I * chi1 correction (needs U and a Gaussian-type envelope
    exposing ``log_derivatives``) is added so that the data are well prepared to O(eps^2).
    """
    check_resolution(grid, eps, band.V.lattice.period)
    x = grid.x
    a = np.asarray(aI(x), dtype=float)
    p = np.asarray(phiI(x, 1), dtype=float)
    fo = None
    if first_order:
        if U is None:
            raise ValueError("first-order preparation needs the external potential U")
        L1 = np.array([aI.log_derivatives(xi)[1] for xi in x]) if hasattr(aI, "log_derivatives") else \
            np.gradient(np.log(np.maximum(np.abs(a), 1e-300)), grid.dx)
        P2 = np.asarray(phiI(x, 2), dtype=float)
        fo = (eps, U.derivative(x, 1), L1, P2)
    mask = np.abs(a) > 0
    vals = np.zeros(grid.N, dtype=complex)
    if mask.any():
        chi = bloch_factor(band, p[mask], x[mask] / eps,
                           None if fo is None else tuple(np.broadcast_to(f, x.shape)[mask] for f in fo))
        vals[mask] = a[mask] * chi * np.exp(1j * np.asarray(phiI(x[mask]), dtype=float) / eps)
    return Wavefield(grid, vals, eps, 0.0)


# ---------------------------------------------------------------------------
# reconstruction in the plane-wave / linear-potential family

def envelope_shift(band: BandTable, K0: float, c1: float, t: float) -> float:
    """X(t) = int_0^t E'(K0 - c1 s) ds."""
    if c1 != 0:
        Es = band.series("E")
        return float((Es(K0, 0)[0] - Es(K0 - c1 * t, 0)[0]) / c1)
    return float(band.series("E")(K0, 1)[0] * t)


def _curvature_integral(band: BandTable, K0: float, c1: float, t: float) -> float:
    """int_0^t E''(K0 - c1 s) ds."""
    Es = band.series("E")
    if c1 != 0:
        return float((Es(K0, 1)[0] - Es(K0 - c1 * t, 1)[0]) / c1)
    return float(Es(K0, 2)[0] * t)


def reconstruct_wkb(sol, band: BandTable, eps: float, grid: Grid, aI: GaussianEnvelope,
                    include_first_order: bool = False, pert: PerturbTable | None = None,
                    U=None) -> Wavefield:
    """psi_w = A0 (chi + flag * eps chi1) exp(i(S0/eps + S1 + eps S2)) for U = c0 + c1 x, phi_I = S0 + K0 x.

    A0(t, x) = a_I(x - X(t)); S0 = b0 + b1 x; S1 from the special-case solution; S2 holds the
    static part and the wave-packet-energy part (1/2) (a_I''/a_I)(x - X(t)) int E''(b1) ds.
    The amplitude correction A1 is outside the model and is not included.
    """
    if U is not None and (U.kind != "linear"):
        raise ValueError("reconstruct_wkb supports linear external potentials only")
    check_resolution(grid, eps, band.V.lattice.period)
    t = sol.t
    x = grid.x
    X = envelope_shift(band, sol.K0, sol.c1, t)
    y = x - X
    a = aI(y) * sol.A0_const
    S2 = sol.S2 + 0.5 * aI.curvature_ratio(y) * _curvature_integral(band, sol.K0, sol.c1, t)
    phase = (sol.b0 + sol.b1 * x) / eps + sol.S1 + eps * S2
    if include_first_order:
        L1 = -(y - aI.x0) / aI.sigma**2
        chi = bloch_factor(band, np.full_like(x, sol.b1), x / eps, (eps, sol.c1, L1, 0.0))
    else:
        chi = bloch_factor(band, np.full_like(x, sol.b1), x / eps)
    return Wavefield(grid, a * chi * np.exp(1j * phase), eps, t)


# ---------------------------------------------------------------------------
# Bloch transform

def bloch_transform(psi: Wavefield, band: BandTable, n_bands: int | None = None):
    """Band-resolved L2 mass of psi, shape (n_bands,), plus the total mass.

    The spectrum is regrouped as q = eps k = p + m G; for each p the grid's cell
    Hamiltonian (all m resolved by the grid) is diagonalized and psi projected.
    """
    eps = psi.epsilon
    period = band.V.lattice.period
    nc, ppc = cells_per_box(psi.grid, eps, period)
    G = band.G
    hat = np.fft.fft(psi.values)
    j = np.fft.fftfreq(psi.grid.N, d=1.0 / psi.grid.N).astype(int)   # integer mode numbers
    # q = eps * 2 pi j / L = j * G / nc ; split j = jp + nc * m with jp in [-nc/2, nc/2)
    jp = (j + nc // 2) % nc - nc // 2
    m = (j - jp) // nc
    mvals = np.arange(m.min(), m.max() + 1)
    table = np.zeros((nc, mvals.size), dtype=complex)
    table[jp + nc // 2, m - mvals[0]] = hat
    nb = mvals.size if n_bands is None else min(n_bands, mvals.size)
    occ = np.zeros(nb)
    Vc = {k: v for k, v in band.V.coeffs.items()}
    for r in range(nc):
        p = (r - nc // 2) * G / nc
        H = np.diag(0.5 * (p + mvals * G) ** 2).astype(complex)
        for k, v in Vc.items():
            if abs(k) < mvals.size:
                H += v * np.eye(mvals.size, k=-k)
        E, vec = np.linalg.eigh(H)
        proj = vec.conj().T @ table[r]
        occ += (np.abs(proj[:nb]) ** 2)
    total = float(np.sum(np.abs(hat) ** 2))
    return occ, total


def band_occupation(psi: Wavefield, band: BandTable, eps: float | None = None, return_defect: bool = False):
    """Fraction of the L2 mass of psi in band ``band.n``."""
    if eps is not None and abs(eps - psi.epsilon) > 1e-15:
        raise ValueError("eps differs from the wavefield's epsilon")
    occ, total = bloch_transform(psi, band)
    if total <= 0:
        raise ValueError("zero field has no band occupation")
    frac = float(occ[band.n - 1] / total)
    if return_defect:
        return frac, float(abs(occ.sum() / total - 1.0))
    return frac
