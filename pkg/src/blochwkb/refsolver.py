"""Reference solution of i eps psi_t = (-eps^2/2 d_xx + V(x/eps) + U(x)) psi by Strang splitting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ExternalPotential, PeriodicPotential, eval_periodic
from .wkbfield import Grid, GridError, Wavefield, check_resolution

MASS_MIN = 1e-14


@dataclass
class EvolveConfig:
    dt: float
    T: float
    record_every: int = 1
    snapshot_every: int = 0
    tail_tol: float = 1e-12
    tail_fraction: float = 0.05

    @classmethod
    def default(cls, eps: float, T: float, **kw):
        """dt = eps/200."""
        return cls(dt=eps / 200.0, T=T, **kw)

    @property
    def nsteps(self) -> int:
        return int(round(self.T / self.dt))


def total_potential(grid: Grid, V: PeriodicPotential, U: ExternalPotential | None, eps: float) -> np.ndarray:
    x = grid.x
    pot = np.asarray(eval_periodic(V, x / eps), dtype=float) if V.coeffs else np.zeros(grid.N)
    if U is not None:
        pot = pot + np.asarray(U.derivative(x, 0), dtype=float)
    return pot


@dataclass
class Record:
    t: float
    mass: float
    energy: float
    center: float
    momentum: float

    def row(self):
        return [self.t, self.mass, self.energy, self.center, self.momentum]


@dataclass
class Evolution:
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    final: Wavefield | None = None
    max_step_mass_drift: float = 0.0
    tail_mass: float = 0.0

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def table(self) -> np.ndarray:
        return np.array([r.row() for r in self.records])


def unwrapped_center(psi: Wavefield, reference: float | None = None) -> float:
    """Mean position on the periodic box measured in the window centred at ``reference``."""
    g = psi.grid
    dens = np.abs(psi.values) ** 2
    mass = dens.sum()
    if reference is None:
        # window centred on the density's circular mean
        ang = 2 * np.pi * (g.x - g.x_min) / g.length
        z = np.sum(dens * np.exp(1j * ang))
        reference = g.x_min + g.length * (np.angle(z) % (2 * np.pi)) / (2 * np.pi)
    x = reference + (g.x - reference + 0.5 * g.length) % g.length - 0.5 * g.length
    return float(np.sum(x * dens) / mass)


def observables(psi: Wavefield, V: PeriodicPotential, U: ExternalPotential | None,
                previous_center: float | None = None, pot: np.ndarray | None = None) -> Record:
    """mass, energy per unit mass, unwrapped centre, and momentum Re<psi, -i eps d_x psi>/mass."""
    g, eps, f = psi.grid, psi.epsilon, psi.values
    mass = float(np.sum(np.abs(f) ** 2) * g.dx)
    if mass < MASS_MIN:
        raise ArithmeticError(f"mass {mass:.2e} below {MASS_MIN:g}")
    if pot is None:
        pot = total_potential(g, V, U, eps)
    hat = np.fft.fft(f)
    k = g.k
    kin = 0.5 * eps * eps * np.sum(k * k * np.abs(hat) ** 2) / g.N * g.dx
    potential = np.sum(pot * np.abs(f) ** 2) * g.dx
    mom = eps * np.sum(k * np.abs(hat) ** 2) / g.N * g.dx
    center = unwrapped_center(psi, previous_center)
    return Record(psi.t, mass, float((kin + potential) / mass), center, float(mom / mass))


def tail_mass(psi: Wavefield, fraction: float = 0.05) -> float:
    """Relative mass in the outer ``fraction`` of the box on each side."""
    n = max(1, int(round(fraction * psi.grid.N)))
    dens = np.abs(psi.values) ** 2
    return float((dens[:n].sum() + dens[-n:].sum()) / dens.sum())


def split_step_evolve(psi0: Wavefield, V: PeriodicPotential, U: ExternalPotential | None,
                      cfg: EvolveConfig, eps: float | None = None) -> Evolution:
    """Strang splitting: half potential phase, kinetic Fourier multiplier, half potential phase."""
    eps = psi0.epsilon if eps is None else eps
    g = psi0.grid
    check_resolution(g, eps, V.lattice.period)
    if cfg.dt <= 0 or cfg.T < 0:
        raise ValueError("need dt > 0 and T >= 0")
    pot = total_potential(g, V, U, eps)
    nsteps = cfg.nsteps
    dt = cfg.T / nsteps if nsteps else cfg.dt
    half = np.exp(-0.5j * pot * dt / eps)
    kin = np.exp(-0.5j * eps * g.k**2 * dt)
    f = psi0.values.copy()
    out = Evolution()
    rec = observables(psi0, V, U, pot=pot)
    out.records.append(rec)
    if cfg.snapshot_every:
        out.snapshots.append(Wavefield(g, f.copy(), eps, psi0.t))
    m_prev = np.sum(np.abs(f) ** 2)
    tail = tail_mass(psi0, cfg.tail_fraction)
    for n in range(1, nsteps + 1):
        f = half * np.fft.ifft(kin * np.fft.fft(half * f))
        t = psi0.t + n * dt
        if n % cfg.record_every == 0 or n == nsteps:
            m = np.sum(np.abs(f) ** 2)
            out.max_step_mass_drift = max(out.max_step_mass_drift, abs(m - m_prev) / m_prev)
            m_prev = m
            w = Wavefield(g, f, eps, t)
            rec = observables(w, V, U, rec.center, pot)
            out.records.append(rec)
            tail = max(tail, tail_mass(w, cfg.tail_fraction))
            if cfg.snapshot_every and n % cfg.snapshot_every == 0:
                out.snapshots.append(Wavefield(g, f.copy(), eps, t))
    out.final = Wavefield(g, f, eps, psi0.t + nsteps * dt)
    out.tail_mass = tail
    return out


def wkb_error(psi: Wavefield, psi_w: Wavefield, eps: float | None = None, s: int = 0) -> float:
    """s=0: ||psi - psi_w||; s=1 adds ||eps d_x (psi - psi_w)|| and ||x (psi - psi_w)||."""
    if psi.grid != psi_w.grid:
        raise GridError("wkb_error needs matching grids")
    if s not in (0, 1):
        raise ValueError("s must be 0 or 1")
    eps = psi.epsilon if eps is None else eps
    g = psi.grid
    d = psi.values - psi_w.values
    err = np.sqrt(np.sum(np.abs(d) ** 2) * g.dx)
    if s == 1:
        dd = np.fft.ifft(1j * g.k * np.fft.fft(d))
        err += np.sqrt(np.sum(np.abs(eps * dd) ** 2) * g.dx)
        err += np.sqrt(np.sum(np.abs(g.x * d) ** 2) * g.dx)
    return float(err)
