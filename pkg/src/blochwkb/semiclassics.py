"""Bi-characteristics at correction orders 0, 1, 2 with auxiliary transport.

State vector y = [Q, P, S, P2, P3, P4, P5, L0, L1, L2, L3].

    order0:  Qdot = E'(P),                      Pdot = -U'(Q)
    order1:  Qdot = E' + eps A'(P) U',          Pdot = -U' - eps A(P) U''
    order2:  Qdot = ... + eps^2 d_p Et2,        Pdot = ... - eps^2 Ft
    Sdot = P Qdot - Htilde

The auxiliary quantities follow the leading-order transport along the
trajectory (x-derivatives of the eikonal and transport equations).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.integrate

from .blochband import BandTable, PeriodicSeries
from .perturb import AUX_FIELDS, AuxState, PerturbTable, e2_weights, forcing_weights, perturb_table

ORDERS = ("order0", "order1", "order2")
CAUSTIC_LIMIT = 1e6
COLUMNS = ("t", "Q", "P", "S", "P2", "P3", "P4", "P5", "L0", "L1", "L2", "L3", "x_c", "H")


class CausticError(RuntimeError):
    """|P2| exceeded the guard: characteristics are about to cross."""

    def __init__(self, msg, last_time, trajectory=None):
        super().__init__(msg)
        self.last_time = last_time
        self.trajectory = trajectory


@dataclass
class TrajectoryState:
    t: float
    Q: float
    P: float
    S: float = 0.0
    aux: AuxState = field(default_factory=AuxState)

    def to_array(self) -> np.ndarray:
        return np.concatenate([[self.Q, self.P, self.S], self.aux.to_array()])

    @classmethod
    def from_array(cls, t, y) -> "TrajectoryState":
        return cls(float(t), float(y[0]), float(y[1]), float(y[2]), AuxState.from_array(y[3:]))


def aux_rhs(aux, E, U) -> np.ndarray:
    """Time derivatives of (P2..P5, L0..L3); E[k] = d_p^k E0 at P, U[k] = d_x^k U at Q."""
    P2, P3, P4, P5, L0, L1, L2, L3 = aux
    E2, E3, E4, E5 = E[2], E[3], E[4], E[5]
    U2, U3, U4, U5 = U[2], U[3], U[4], U[5]
    dP2 = -U2 - P2 * P2 * E2
    dP3 = -U3 - 3 * P3 * P2 * E2 - P2**3 * E3
    dP4 = (-U4 - 4 * P4 * P2 * E2 - 3 * P3 * P3 * E2 - 6 * P3 * P2 * P2 * E3 - P2**4 * E4)
    dP5 = (-U5 - 5 * P5 * P2 * E2 - 10 * P4 * P3 * E2 - 10 * P4 * P2 * P2 * E3
           - 15 * P3 * P3 * P2 * E3 - 10 * P3 * P2**3 * E4 - P2**5 * E5)
    dL0 = -0.5 * P2 * E2
    dL1 = -L1 * P2 * E2 - 0.5 * P3 * E2 - 0.5 * P2 * P2 * E3
    dL2 = -(2 * L2 * P2 * E2 + L1 * (P2 * P2 * E3 + P3 * E2) + 0.5 * P4 * E2
            + 1.5 * P2 * P3 * E3 + 0.5 * P2**3 * E4)
    dL3 = -(3 * L3 * P2 * E2 + 3 * L2 * (P2 * P2 * E3 + P3 * E2)
            + L1 * (P2**3 * E4 + 3 * P2 * P3 * E3 + P4 * E2)
            + 0.5 * P5 * E2 + 2 * P2 * P4 * E3 + 1.5 * P3 * P3 * E3
            + 3 * P2 * P2 * P3 * E4 + 0.5 * P2**4 * E5)
    return np.array([dP2, dP3, dP4, dP5, dL0, dL1, dL2, dL3])


class Dynamics:
    """Right-hand side of the bi-characteristic system for one (band, U, eps, order)."""

    def __init__(self, band: BandTable, U, eps: float, order: str = "order2",
                 pert: PerturbTable | None = None, freeze_aux: bool = False):
        if order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}, got {order!r}")
        self.band, self.U, self.eps, self.order = band, U, float(eps), order
        self.freeze_aux = freeze_aux
        if order == "order2" or pert is not None:
            self.pert = pert if pert is not None else perturb_table(band)
            rows = np.vstack([band.berry_conn, self.pert.basis])
        else:
            self.pert = None
            rows = band.berry_conn[None, :]
        self._E = band.series("E")
        self._rest = PeriodicSeries(rows, band.G, band.p_grid[0])

    def band_data(self, P: float, upto: int = 5):
        """(E derivatives 0..upto, A and A', basis values and p-derivatives)."""
        E = self._E.derivs(P, upto)[:, 0]
        rest = self._rest.derivs(P, 1)
        return E, rest[:, 0], rest[:, 1:]

    def hamiltonian_parts(self, y):
        Q, P = y[0], y[1]
        aux = AuxState.from_array(y[3:])
        E, A, B = self.band_data(P)
        U = self.U.derivatives(Q)
        eps = self.eps
        H = E[0] + U[0]
        if self.order != "order0":
            H += eps * A[0] * U[1]
        if self.order == "order2":
            H += eps * eps * float(e2_weights(aux, U[1], U[2]) @ B[0])
        return H, E, A, B, U, aux

    def __call__(self, t, y) -> np.ndarray:
        H, E, A, B, U, aux = self.hamiltonian_parts(y)
        eps = self.eps
        Qdot = E[1]
        Pdot = -U[1]
        if self.order != "order0":
            Qdot = Qdot + eps * A[1] * U[1]
            Pdot = Pdot - eps * A[0] * U[2]
        if self.order == "order2":
            Qdot = Qdot + eps * eps * float(e2_weights(aux, U[1], U[2]) @ B[1])
            Pdot = Pdot - eps * eps * float(forcing_weights(aux, U[1], U[2], U[3]) @ B[0])
        Sdot = y[1] * Qdot - H
        daux = np.zeros(8) if self.freeze_aux else aux_rhs(y[3:], E, U)
        return np.concatenate([[Qdot, Pdot, Sdot], daux])

    rhs = __call__

    # observables -------------------------------------------------------

    def physical_center(self, y) -> float:
        Q, P = y[0], y[1]
        if self.order == "order0":
            return float(Q)
        A = self._rest(P, 0)[0]
        xc = Q + self.eps * A
        if self.order == "order2":
            a1 = self._rest(P, 0)[1]
            xc += self.eps**2 * a1 * self.U.derivative(Q, 1)
        return float(xc)

    def modified_hamiltonian(self, y) -> float:
        return float(self.hamiltonian_parts(y)[0])


def rhs(state: TrajectoryState, order: str, band: BandTable, U, eps: float, pert=None):
    """Derivative record of (Q, P, S, aux) as a TrajectoryState-shaped array."""
    dyn = Dynamics(band, U, eps, order, pert)
    return dyn(state.t, state.to_array())


@dataclass
class Trajectory:
    t: np.ndarray
    y: np.ndarray
    x_c: np.ndarray
    H: np.ndarray
    order: str
    eps: float
    error_estimate: float = np.nan

    def states(self):
        return [TrajectoryState.from_array(t, y) for t, y in zip(self.t, self.y)]

    def column(self, name: str) -> np.ndarray:
        if name == "t":
            return self.t
        if name == "x_c":
            return self.x_c
        if name == "H":
            return self.H
        idx = {"Q": 0, "P": 1, "S": 2, **{f: 3 + i for i, f in enumerate(AUX_FIELDS)}}[name]
        return self.y[:, idx]

    def table(self) -> np.ndarray:
        return np.column_stack([self.column(c) for c in COLUMNS])

    @property
    def final(self) -> TrajectoryState:
        return TrajectoryState.from_array(self.t[-1], self.y[-1])


def _rk4(f, y0, dt, nsteps, record_every=1, t0=0.0):
    ts, ys = [t0], [np.array(y0, dtype=float)]
    y = np.array(y0, dtype=float)
    t = t0
    for n in range(1, nsteps + 1):
        k1 = f(t, y)
        k2 = f(t + 0.5 * dt, y + 0.5 * dt * k1)
        k3 = f(t + 0.5 * dt, y + 0.5 * dt * k2)
        k4 = f(t + dt, y + dt * k3)
        y_new = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t_new = t0 + n * dt
        if not np.all(np.isfinite(y_new)) or abs(y_new[3]) > CAUSTIC_LIMIT:
            raise CausticError(
                f"|P2| exceeded {CAUSTIC_LIMIT:g} near t={t_new:.6g}; the WKB description holds only before caustics form",
                t, (np.array(ts), np.array(ys)))
        y, t = y_new, t_new
        if n % record_every == 0 or n == nsteps:
            ts.append(t)
            ys.append(y.copy())
    return np.array(ts), np.array(ys)


def integrate(state0: TrajectoryState, dyn: Dynamics, dt: float, T: float, record_every: int = 1,
              estimate_error: bool = False) -> Trajectory:
    """Classical fixed-step RK4 from state0 to T (T/dt rounded to whole steps)."""
    if dt <= 0 or T < 0:
        raise ValueError("need dt > 0 and T >= 0")
    nsteps = int(round(T / dt))
    dt_eff = T / nsteps if nsteps else dt
    ts, ys = _rk4(dyn, state0.to_array(), dt_eff, nsteps, record_every, state0.t)
    err = np.nan
    if estimate_error and nsteps:
        _, yh = _rk4(dyn, state0.to_array(), 0.5 * dt_eff, 2 * nsteps, 2 * nsteps, state0.t)
        err = float(np.max(np.abs(yh[-1][:2] - ys[-1][:2])) / 15.0)
    xc = np.array([dyn.physical_center(y) for y in ys])
    H = np.array([dyn.modified_hamiltonian(y) for y in ys])
    return Trajectory(ts, ys, xc, H, dyn.order, dyn.eps, err)


def physical_center(state: TrajectoryState, dyn: Dynamics) -> float:
    return dyn.physical_center(state.to_array())


def modified_hamiltonian(state: TrajectoryState, dyn: Dynamics) -> float:
    return dyn.modified_hamiltonian(state.to_array())


def initial_canonical_position(center0: float, P0: float, dyn: Dynamics) -> float:
    """Q(0) matched to a measured physical center for the dynamics' order."""
    if dyn.order == "order0":
        return float(center0)
    A = dyn._rest(P0, 0)[0]
    Q = center0 - dyn.eps * A
    if dyn.order == "order2":
        a1 = dyn._rest(P0, 0)[1]
        # x_c depends on Q through U'(Q); one fixed-point pass is exact to O(eps^4)
        for _ in range(3):
            Q = center0 - dyn.eps * A - dyn.eps**2 * a1 * dyn.U.derivative(Q, 1)
    return float(Q)


# ---------------------------------------------------------------------------
# plane wave in a linear potential

@dataclass
class SpecialCaseSolution:
    K0: float
    S0_const: float
    A0_const: float
    c0: float
    c1: float
    t: float
    b1: float
    b0: float
    S1: float
    S2: float
    quad_error: float


QUAD_TOL = 1e-11


def _quad(f, t, piece=np.inf):
    """int_0^t f, split into pieces no longer than ``piece`` (one zone crossing of the integrand)."""
    if t == 0:
        return 0.0, 0.0
    n = max(1, int(np.ceil(abs(t) / piece)))
    edges = np.linspace(0.0, t, n + 1)
    val = err = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        v, e = scipy.integrate.quad(f, a, b, epsabs=1e-14, epsrel=1e-13, limit=200)
        val += v
        err += e
    if err > QUAD_TOL:
        raise ArithmeticError(f"quadrature error estimate {err:.2e} exceeds {QUAD_TOL:g}")
    return val, err


def special_case_solution(K0: float, S0_const: float, A0_const: float, c0: float, c1: float,
                          band: BandTable, t: float, pert: PerturbTable | None = None) -> SpecialCaseSolution:
    """Exact plane-wave solution for U = c0 + c1 x:

    b1 = K0 - c1 t,  b0 = S0 - int E0(b1) - c0 t,
    S1 = -int A(b1) c1,  S2 = -int a1(b1) c1^2 (the wave-packet energy vanishes here).
    """
    Es = band.series("E")
    As = band.series("berry_conn")
    b1 = K0 - c1 * t
    piece = band.G / abs(c1) if c1 != 0 else np.inf
    I0, e0 = _quad(lambda s: Es(K0 - c1 * s, 0)[0], t, piece)
    I1, e1 = _quad(lambda s: As(K0 - c1 * s, 0)[0], t, piece)
    if band.diagnostics.get("free_particle"):
        I2, e2 = 0.0, 0.0
    else:
        pert = pert if pert is not None else perturb_table(band)
        I2, e2 = _quad(lambda s: pert.a1(K0 - c1 * s)[()], t, piece)
    return SpecialCaseSolution(K0, S0_const, A0_const, c0, c1, t, b1, S0_const - I0 - c0 * t,
                               -c1 * I1, -c1 * c1 * I2, max(e0, e1, e2))
