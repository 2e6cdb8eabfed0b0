"""Bloch bands of the 1D cell Hamiltonian in a truncated plane-wave basis.

H0(p)_{mm'} = (p + m G)^2 / 2 delta_{mm'} + Vhat_{m-m'},   m = -M..M.

A band table samples one band on the uniform grid p_j = -G/2 + j G/N_p,
fixes a smooth periodic gauge (parallel transport plus a uniform Zak
twist) and tabulates p-derivatives.

Coefficient sequences are not periodic in p; instead c(p+G)_m = c(p)_{m+1}.
All of them are handled through the "k-line" g(k) = c_m(p), k = p + m G,
which is a single smooth function sampled uniformly with spacing G/N_p.
Differentiation and interpolation act on g.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .model import PeriodicPotential

DEGENERACY_TOL = 1e-8
OVERLAP_MIN = 0.9

QUANTITIES = ("E", "dE1", "dE2", "dE3", "dE4", "dE5", "berry_conn", "chi", "dpchi", "dp2chi", "dp3chi")


class NearDegeneracyError(RuntimeError):
    """The band touches a neighbour; the isolated-band assumption fails."""


class GaugeError(RuntimeError):
    pass


def plane_wave_indices(M: int) -> np.ndarray:
    return np.arange(-M, M + 1)


def kinetic_diagonal(p, M: int, G: float) -> np.ndarray:
    """Diagonal of the operator p - i d/dz in the plane-wave basis."""
    return p + plane_wave_indices(M) * G


def assemble_hamiltonian(V: PeriodicPotential, p: float, M: int) -> np.ndarray:
    if M < 1:
        raise ValueError("plane-wave cutoff M must be >= 1")
    n = 2 * M + 1
    H = np.diag(0.5 * kinetic_diagonal(p, M, V.G) ** 2).astype(complex)
    for k, v in V.coeffs.items():
        if abs(k) < n:
            # H[row, col] = Vhat_{row-col}
            H += v * np.eye(n, k=-k)
    return H


@dataclass(frozen=True)
class BlochState:
    p: float
    n: int
    energy: float
    coeffs: np.ndarray
    M: int
    gap: float = np.inf
    G: float = 2 * np.pi

    @property
    def degenerate(self) -> bool:
        return self.gap < DEGENERACY_TOL

    def __iter__(self):
        yield self.energy
        yield self.coeffs


def _phase_normalize(c: np.ndarray) -> np.ndarray:
    """Fix the arbitrary eigenvector phase: largest component real positive."""
    j = np.argmax(np.abs(c))
    return c * (abs(c[j]) / c[j])


def solve_band(H: np.ndarray, n: int, p: float = np.nan, G: float = 2 * np.pi, strict: bool = False) -> BlochState:
    """n-th smallest eigenpair (n counted from 1).  ``gap`` is the distance to the nearest other eigenvalue."""
    size = H.shape[0]
    if not 1 <= n <= size:
        raise ValueError(f"band index must be in 1..{size}, got {n}")
    E, vecs = np.linalg.eigh(H)
    i = n - 1
    gaps = [E[i + 1] - E[i]] if i + 1 < size else []
    if i > 0:
        gaps.append(E[i] - E[i - 1])
    gap = min(gaps) if gaps else np.inf
    state = BlochState(p, n, float(E[i]), _phase_normalize(vecs[:, i]), (size - 1) // 2, gap, G)
    if strict and state.degenerate:
        raise NearDegeneracyError(f"band {n} at p={p:.6g} is within {gap:.2e} of a neighbour")
    return state


def deflated_solve(H, E, c, r):
    """w perpendicular to c with (H - E) w = (1 - c c*) r.

    The rank-one deflation H - E + s c c* is nonsingular on an isolated band
    and returns the orthogonal solution directly.  ``r`` may hold several
    right-hand sides as columns.
    """
    n = H.shape[0]
    r = np.asarray(r, dtype=complex)
    cc = c.conj()
    rp = r - np.multiply.outer(c, cc @ r) if r.ndim > 1 else r - c * (cc @ r)
    s = max(1.0, abs(E))
    A = H - E * np.eye(n) + s * np.outer(c, cc)
    w = scipy.linalg.solve(A, rp, assume_a="her")
    if w.ndim > 1:
        return w - np.multiply.outer(c, cc @ w)
    return w - c * (cc @ w)


def group_velocity_hf(state: BlochState) -> float:
    """Hellmann-Feynman group velocity <chi, (p - i d_z) chi>."""
    K = kinetic_diagonal(state.p, state.M, state.G)
    return float(np.sum(K * np.abs(state.coeffs) ** 2))


def berry_connection(state: BlochState, dpchi: np.ndarray, return_residual: bool = False):
    """i <chi, d_p chi>; real for a normalized state."""
    val = 1j * np.vdot(state.coeffs, dpchi)
    if return_residual:
        return float(val.real), abs(val.imag)
    return float(val.real)


# ---------------------------------------------------------------------------
# spectral helpers

def bz_grid(G: float, N_p: int) -> np.ndarray:
    return -0.5 * G + G * np.arange(N_p) / N_p


def _wavenumbers(L: int, spacing: float) -> np.ndarray:
    return 2 * np.pi * np.fft.fftfreq(L, d=spacing)


def spectral_derivative(f, spacing: float, order: int = 1, axis: int = -1):
    """order-th derivative of uniformly sampled periodic data by FFT."""
    if order == 0:
        return np.array(f, copy=True)
    f = np.asarray(f)
    L = f.shape[axis]
    k = _wavenumbers(L, spacing)
    mult = (1j * k) ** order
    if L % 2 == 0 and order % 2 == 1:
        mult[L // 2] = 0.0
    shape = [1] * f.ndim
    shape[axis] = L
    out = np.fft.ifft(np.fft.fft(f, axis=axis) * mult.reshape(shape), axis=axis)
    return out.real if np.isrealobj(f) else out


class PeriodicSeries:
    """Trigonometric interpolant of real periodic samples (rows of ``values``).

    Evaluates values and p-derivatives at arbitrary points.
    """

    def __init__(self, values, period: float, p0: float):
        values = np.atleast_2d(np.asarray(values, dtype=float))
        self.nf, self.N = values.shape
        self.period = period
        self.p0 = p0
        F = np.fft.rfft(values, axis=1) / self.N
        weight = np.full(F.shape[1], 2.0)
        weight[0] = 1.0
        if self.N % 2 == 0:
            weight[-1] = 1.0
        self.coef = F * weight
        self.omega = 2 * np.pi * np.arange(F.shape[1]) / period
        self._stacks = {}

    def __call__(self, p, order: int = 0):
        """Array of shape (nf,) + shape(p)."""
        p = np.asarray(p, dtype=float)
        ph = np.exp(1j * np.multiply.outer(self.omega, p - self.p0))
        w = (1j * self.omega) ** order
        out = np.tensordot(self.coef * w, ph, axes=(1, 0)).real
        return out

    def derivs(self, p: float, upto: int):
        """(upto+1, nf) values of orders 0..upto at scalar p."""
        stack = self._stacks.get(upto)
        if stack is None:
            iw = 1j * self.omega
            stack = self._stacks[upto] = np.array([self.coef * iw**k for k in range(upto + 1)])
        ph = np.exp(1j * self.omega * (p - self.p0))
        return (stack @ ph).real


def k_line(C: np.ndarray) -> np.ndarray:
    """Flatten (N_p, 2M+1) coefficients to g(k), k = p_j + m G, increasing k."""
    return C.T.reshape(-1)


def from_k_line(g: np.ndarray, N_p: int) -> np.ndarray:
    return g.reshape(-1, N_p).T


def coefficient_derivative(C: np.ndarray, G: float, order: int = 1) -> np.ndarray:
    """Spectral p-derivative of gauged coefficient sequences on the grid."""
    N_p = C.shape[0]
    return from_k_line(spectral_derivative(k_line(C), G / N_p, order), N_p)


def interpolate_coefficients(C: np.ndarray, G: float, p, order: int = 0) -> np.ndarray:
    """Fourier interpolation of gauged coefficients at an off-grid p (k-line sum)."""
    N_p, n = C.shape
    M = (n - 1) // 2
    g = k_line(C)
    L = g.size
    dk = G / N_p
    k0 = -0.5 * G - M * G
    ghat = np.fft.fft(g) / L
    kap = _wavenumbers(L, dk)
    if L % 2 == 0:
        # split the Nyquist mode symmetrically so the interpolant is real-analytic
        ghat = np.append(ghat, 0.5 * ghat[L // 2])
        ghat[L // 2] *= 0.5
        kap = np.append(kap, -kap[L // 2])
    ks = np.asarray(p, dtype=float) + plane_wave_indices(M) * G
    ph = np.exp(1j * np.outer(ks - k0, kap))
    return ph @ (ghat * (1j * kap) ** order)


# ---------------------------------------------------------------------------
# gauge fixing

def _shift_to_next_zone(c: np.ndarray) -> np.ndarray:
    """Coefficients of the same Bloch function viewed at p + G."""
    out = np.zeros_like(c)
    out[:-1] = c[1:]
    return out


def wilson_loop_phase(C: np.ndarray) -> float:
    """theta = -arg prod <c_j, c_{j+1}> around the zone (closing link shifted)."""
    ov = np.sum(C[:-1].conj() * C[1:], axis=1)
    close = np.vdot(C[-1], _shift_to_next_zone(C[0]))
    return float(-np.angle(np.prod(ov / np.abs(ov)) * close / abs(close)))


def fix_gauge(C: np.ndarray, p_grid: np.ndarray, G: float):
    """Parallel transport along the grid, then a uniform Zak twist.

    Returns the gauged coefficients and the Zak phase in (-pi, pi].
    """
    C = np.array(C, dtype=complex, copy=True)
    N_p = C.shape[0]
    C[0] = _phase_normalize(C[0])
    for j in range(1, N_p):
        ov = np.vdot(C[j - 1], C[j])
        if abs(ov) < OVERLAP_MIN:
            raise GaugeError(f"overlap {abs(ov):.3f} between p={p_grid[j-1]:.4g} and p={p_grid[j]:.4g}; refine p_grid")
        C[j] *= abs(ov) / ov
    close = np.vdot(C[-1], _shift_to_next_zone(C[0]))
    if abs(close) < OVERLAP_MIN:
        raise GaugeError("closing overlap across the zone boundary too small; refine p_grid")
    phi = np.angle(close)
    zak = float(-phi)
    if zak <= -np.pi:
        zak += 2 * np.pi
    # after the twist every link, including the closing one, carries phase phi/N_p
    C *= np.exp(1j * (phi / G) * (p_grid - p_grid[0]))[:, None]
    return C, zak


def gauge_periodicity_defect(C: np.ndarray) -> float:
    """Phase mismatch of the closing link against the mean interior link."""
    ov = np.sum(C[:-1].conj() * C[1:], axis=1)
    close = np.vdot(C[-1], _shift_to_next_zone(C[0]))
    mean_phase = np.angle(np.sum(ov))
    return float(abs(np.angle(close * np.exp(-1j * mean_phase))))


# ---------------------------------------------------------------------------
# band table

@dataclass
class BandTable:
    V: PeriodicPotential
    n: int
    M: int
    p_grid: np.ndarray
    energy: np.ndarray
    coeffs: np.ndarray
    dE: np.ndarray              # (6, N_p): orders 0..5
    dpchi: np.ndarray
    dp2chi: np.ndarray
    dp3chi: np.ndarray
    berry_conn: np.ndarray
    zak_phase: float
    gaps: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    _series: dict = field(default_factory=dict, repr=False)

    @property
    def G(self) -> float:
        return self.V.G

    @property
    def N_p(self) -> int:
        return self.p_grid.size

    @property
    def dp(self) -> float:
        return self.G / self.N_p

    def K(self, j: int) -> np.ndarray:
        return kinetic_diagonal(self.p_grid[j], self.M, self.G)

    def hamiltonian(self, j: int) -> np.ndarray:
        return assemble_hamiltonian(self.V, self.p_grid[j], self.M)

    def state(self, j: int) -> BlochState:
        return BlochState(float(self.p_grid[j]), self.n, float(self.energy[j]), self.coeffs[j], self.M,
                          float(self.gaps[j]), self.G)

    def series(self, name: str, values=None) -> PeriodicSeries:
        """Cached trigonometric interpolant of a real periodic grid function."""
        if name not in self._series:
            if values is None:
                values = {"E": self.energy, "berry_conn": self.berry_conn}[name]
            self._series[name] = PeriodicSeries(values, self.G, self.p_grid[0])
        return self._series[name]

    def reduce(self, p):
        """Map p into the tabulated zone [-G/2, G/2)."""
        G = self.G
        return (np.asarray(p) + 0.5 * G) % G - 0.5 * G

    def interp(self, quantity: str, p, order: int = 0):
        return interpolate_band(self, p, quantity, order)


def _k_derivatives(table_coeffs, G, orders):
    return [coefficient_derivative(table_coeffs, G, k) for k in orders]


def _derived_quantities(V, n, M, p_grid, energy, C, gaps, zak):
    """Everything that follows from gauged coefficients; shared by band_table and apply_gauge."""
    G = V.G
    N_p = p_grid.size
    dp = G / N_p
    dE = np.array([energy] + [spectral_derivative(energy, dp, k) for k in range(1, 6)])

    dchi_spec = coefficient_derivative(C, G, 1)
    inner = 1j * np.sum(C.conj() * dchi_spec, axis=1)
    berry = inner.real.copy()

    dpchi = np.empty_like(C)
    cross = 0.0
    hf = np.empty(N_p)
    for j, p in enumerate(p_grid):
        c = C[j]
        K = kinetic_diagonal(p, M, G)
        H = assemble_hamiltonian(V, p, M)
        perp = deflated_solve(H, energy[j], c, -K * c)
        dpchi[j] = perp - 1j * berry[j] * c
        spec_perp = dchi_spec[j] - c * np.vdot(c, dchi_spec[j])
        cross = max(cross, float(np.linalg.norm(spec_perp - perp)))
        hf[j] = np.sum(K * np.abs(c) ** 2)
    dp2chi = coefficient_derivative(dpchi, G, 1)
    dp3chi = coefficient_derivative(dpchi, G, 2)
    resid = max(float(np.linalg.norm(assemble_hamiltonian(V, p, M) @ C[j] - energy[j] * C[j]) / (abs(energy[j]) + 1))
                for j, p in enumerate(p_grid))
    final_inner = 1j * np.sum(C.conj() * dpchi, axis=1)
    diagnostics = {
        "eigen_residual": resid,
        "berry_imag_residual": float(np.max(np.abs(final_inner.imag))),
        "spectral_norm_drift": float(np.max(np.abs(inner.imag))),
        "sternheimer_vs_spectral": cross,
        "hellmann_feynman": float(np.max(np.abs(hf - dE[1]))),
        "zak_vs_loop_integral": float(abs(np.angle(np.exp(1j * (np.sum(berry) * dp - zak))))),
        "gauge_periodicity": gauge_periodicity_defect(C),
        "min_gap": float(np.min(gaps)),
    }
    return BandTable(V, n, M, p_grid, energy, C, dE, dpchi, dp2chi, dp3chi, berry, zak, gaps, diagnostics)


class _FreeEnergy:
    """Exact free-particle band energy E = (p + m G)^2 / 2 on the reduced zone, m fixed by n."""

    def __init__(self, G: float, n: int):
        self.G, self.n = G, n

    def _shift(self, pr):
        # band n of the free particle at reduced p: n-th smallest |p + mG|
        ms = np.arange(-self.n - 1, self.n + 2)
        order = np.argsort(np.abs(np.add.outer(pr, ms * self.G)), axis=-1, kind="stable")
        return ms[order[..., self.n - 1]] * self.G

    def __call__(self, p, order: int = 0):
        p = np.asarray(p, dtype=float)
        pr = (p + 0.5 * self.G) % self.G - 0.5 * self.G
        k = pr + self._shift(pr)
        vals = [0.5 * k * k, k, np.ones_like(k)]
        out = vals[order] if order < 3 else np.zeros_like(k)
        return np.asarray(out)[None, ...]

    def derivs(self, p: float, upto: int):
        return np.array([self(p, k) for k in range(upto + 1)])


def free_band_table(V: PeriodicPotential, n: int = 1, N_p: int = 256, M: int = 32) -> BandTable:
    """Closed-form table for V = 0: plane-wave states, connection and chi-derivatives vanish.

    The free band touches its neighbour at the zone boundary, so the
    spectral route is replaced by exact formulas.
    """
    G = V.G
    p_grid = bz_grid(G, N_p)
    free = _FreeEnergy(G, n)
    k = free(p_grid, 0)[0]
    m = np.rint((np.sqrt(2 * k) * np.sign(free(p_grid, 1)[0]) - p_grid) / G).astype(int)
    C = np.zeros((N_p, 2 * M + 1), dtype=complex)
    C[np.arange(N_p), m + M] = 1.0
    dE = np.array([free(p_grid, j)[0] for j in range(6)])
    zero = np.zeros_like(C)
    gaps = np.full(N_p, np.inf)
    for j, p in enumerate(p_grid):
        gaps[j] = solve_band(assemble_hamiltonian(V, p, M), n, p, G).gap
    diagnostics = {"eigen_residual": 0.0, "berry_imag_residual": 0.0, "spectral_norm_drift": 0.0,
                   "sternheimer_vs_spectral": 0.0, "hellmann_feynman": 0.0, "zak_vs_loop_integral": 0.0,
                   "gauge_periodicity": 0.0, "min_gap": float(gaps.min()), "free_particle": True}
    table = BandTable(V, n, M, p_grid, dE[0], C, dE, zero, zero.copy(), zero.copy(), np.zeros(N_p), 0.0,
                      gaps, diagnostics)
    table._series["E"] = free
    return table


def band_table(V: PeriodicPotential, n: int = 1, N_p: int = 256, M: int = 32) -> BandTable:
    """Tabulate band n on the uniform zone grid with a smooth periodic gauge."""
    if not V.coeffs:
        return free_band_table(V, n, N_p, M)
    G = V.G
    p_grid = bz_grid(G, N_p)
    size = 2 * M + 1
    energy = np.empty(N_p)
    gaps = np.empty(N_p)
    C = np.empty((N_p, size), dtype=complex)
    for j, p in enumerate(p_grid):
        st = solve_band(assemble_hamiltonian(V, p, M), n, p, G)
        energy[j], C[j], gaps[j] = st.energy, st.coeffs, st.gap
    if gaps.min() < DEGENERACY_TOL:
        j = int(np.argmin(gaps))
        raise NearDegeneracyError(f"band {n} is not isolated: gap {gaps[j]:.2e} at p={p_grid[j]:.6g}")
    C, zak = fix_gauge(C, p_grid, G)
    return _derived_quantities(V, n, M, p_grid, energy, C, gaps, zak)


def apply_gauge(table: BandTable, zeta: Callable) -> BandTable:
    """Rebuild the table after chi -> exp(i zeta(p)) chi; zeta must be G-periodic."""
    phase = np.exp(1j * np.asarray(zeta(table.p_grid), dtype=float))
    C = table.coeffs * phase[:, None]
    out = _derived_quantities(table.V, table.n, table.M, table.p_grid, table.energy, C, table.gaps, table.zak_phase)
    out.dE = table.dE.copy()
    return out


def interpolate_band(table: BandTable, p, quantity: str, order: int = 0):
    """Fourier interpolation in p of a tabulated quantity (scalars may take extra derivative orders)."""
    if quantity not in QUANTITIES:
        raise ValueError(f"unknown quantity {quantity!r}; expected one of {QUANTITIES}")
    if quantity == "E" or quantity.startswith("dE"):
        k = 0 if quantity == "E" else int(quantity[2:])
        return table.series("E")(p, k + order)[0]
    if quantity == "berry_conn":
        return table.series("berry_conn")(p, order)[0]
    source = {"chi": table.coeffs, "dpchi": table.dpchi, "dp2chi": table.dp2chi, "dp3chi": table.dp3chi}[quantity]
    return interpolate_coefficients(source, table.G, float(p), order)


def bands_rows(table: BandTable):
    """Rows p, E, dE1..dE5, berry_conn for the bands.csv export."""
    return np.column_stack([table.p_grid, table.dE.T, table.berry_conn])
