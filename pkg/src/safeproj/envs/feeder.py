"""Balanced single-phase radial distribution feeder with AC power flow.

Buses are numbered 0..N with bus 0 the slack (substation) at fixed voltage;
bus i >= 1 hangs off ``parent[i - 1]`` through a series impedance r + jx.
Public interfaces index only the N non-slack buses (0-based), all in p.u.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

V_MIN, V_MAX = 0.95, 1.05


class PowerFlowDivergence(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass
class RadialFeeder:
    parent: np.ndarray  # (N,), parent bus of bus i+1 in 0..N numbering
    r: np.ndarray
    x: np.ndarray
    pv_buses: np.ndarray  # non-slack indices 0..N-1
    v_slack: float = 1.0
    Y: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.pv_buses = np.asarray(self.pv_buses, dtype=np.int64)
        N = self.parent.shape[0]
        if self.r.shape != (N,) or self.x.shape != (N,):
            raise ValueError("one impedance per edge required")
        if np.any(self.r < 0) or np.any(self.x < 0) or np.any(self.r + self.x <= 0):
            raise ValueError("impedances must be nonnegative and nonzero")
        for i, p in enumerate(self.parent):
            if not 0 <= p <= i:
                raise ValueError(f"bus {i + 1} has parent {p}; parents must precede children")
        self.Y = self._build_admittance()

    @property
    def n_bus(self) -> int:
        return self.parent.shape[0]

    @property
    def n_pv(self) -> int:
        return self.pv_buses.shape[0]

    def _build_admittance(self) -> np.ndarray:
        N = self.n_bus
        Y = np.zeros((N + 1, N + 1), dtype=np.complex128)
        y = 1.0 / (self.r + 1j * self.x)
        for i in range(N):
            a, b = int(self.parent[i]), i + 1
            Y[a, a] += y[i]
            Y[b, b] += y[i]
            Y[a, b] -= y[i]
            Y[b, a] -= y[i]
        return Y

    def path_edges(self, bus: int) -> list:
        """Edge indices on the path from the slack to non-slack ``bus``."""
        edges = []
        node = bus + 1
        while node != 0:
            edges.append(node - 1)
            node = int(self.parent[node - 1])
        return edges

    def depth_resistance(self) -> np.ndarray:
        return np.array([self.r[self.path_edges(i)].sum() for i in range(self.n_bus)])

    def common_path(self, i: int, j: int, which: str = "r") -> float:
        """Sum of r (or x) over edges shared by the slack->i and slack->j paths."""
        z = self.r if which == "r" else self.x
        shared = set(self.path_edges(i)) & set(self.path_edges(j))
        return float(sum(z[e] for e in shared))

    def to_dict(self) -> dict:
        return {"parent": self.parent.tolist(), "r": self.r.tolist(), "x": self.x.tolist(),
                "pv_buses": self.pv_buses.tolist(), "v_slack": self.v_slack}

    @classmethod
    def from_dict(cls, d: dict) -> "RadialFeeder":
        return cls(np.array(d["parent"]), np.array(d["r"]), np.array(d["x"]),
                   np.array(d["pv_buses"]), float(d["v_slack"]))


def make_feeder(seed: int = 0, n_bus: int = 36, n_pv: int = 21, r_range=(0.02, 0.05),
                x_range=(0.01, 0.015), chain_prob: float = 0.85) -> RadialFeeder:
    """Synthetic radial tree: each new bus extends the previous one with
    probability ``chain_prob``, else branches off a random earlier bus.  PV
    sits on the ``n_pv`` buses with the largest path resistance."""
    rng = np.random.default_rng([seed, 3])
    parent = np.zeros(n_bus, dtype=np.int64)
    for i in range(1, n_bus):
        parent[i] = i if rng.uniform() < chain_prob else int(rng.integers(0, i + 1))
    r = rng.uniform(*r_range, size=n_bus)
    x = rng.uniform(*x_range, size=n_bus)
    feeder = RadialFeeder(parent, r, x, np.zeros(0, dtype=np.int64))
    order = np.argsort(-feeder.depth_resistance(), kind="stable")
    feeder.pv_buses = np.sort(order[:n_pv])
    return feeder


def two_bus_feeder(r: float, x: float) -> RadialFeeder:
    return RadialFeeder(np.array([0]), np.array([r]), np.array([x]), np.array([0]))


class PowerFlowSolver:
    """Newton-Raphson in polar coordinates for a radial feeder.

    Keeps the last solution as a warm start for the next call.
    """

    def __init__(self, feeder: RadialFeeder, tol: float = 1e-10, max_iter: int = 50):
        self.feeder = feeder
        self.tol = tol
        self.max_iter = max_iter
        self.Y = feeder.Y
        N = feeder.n_bus
        self._Vm = np.ones(N)
        self._Va = np.zeros(N)
        self.last_iterations = 0

    def reset(self):
        self._Vm[:] = 1.0
        self._Va[:] = 0.0

    def mismatch(self, V: np.ndarray, p, q) -> np.ndarray:
        """Complex power balance S_calc - S_spec at non-slack buses."""
        S = V * np.conj(self.Y @ V)
        return S[1:] - (np.asarray(p) + 1j * np.asarray(q))

    def solve(self, p, q, warm: bool = True) -> np.ndarray:
        """Voltage magnitudes at the N non-slack buses for injections p, q."""
        V = self.solve_complex(p, q, warm)
        return np.abs(V[1:])

    def solve_complex(self, p, q, warm: bool = True) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError("injections must be finite")
        N = self.feeder.n_bus
        Vm = self._Vm.copy() if warm else np.ones(N)
        Va = self._Va.copy() if warm else np.zeros(N)
        Y = self.Y
        vs = self.feeder.v_slack
        res = np.inf
        for it in range(self.max_iter + 1):
            V = np.concatenate([[vs + 0j], Vm * np.exp(1j * Va)])
            I = Y @ V
            S = V * np.conj(I)
            F = S[1:] - (p + 1j * q)
            res = float(np.max(np.abs(np.concatenate([F.real, F.imag]))))
            if res <= self.tol:
                self._Vm, self._Va = Vm, Va
                self.last_iterations = it
                return V
            if it == self.max_iter or not np.isfinite(res):
                break
            # dS/dVa and dS/dVm restricted to non-slack buses
            Vn = V / np.abs(V)
            dS_dVa = 1j * V[:, None] * np.conj(np.diag(I) - Y * V[None, :])
            dS_dVm = V[:, None] * np.conj(Y * Vn[None, :]) + np.diag(np.conj(I) * Vn)
            Ja, Jm = dS_dVa[1:, 1:], dS_dVm[1:, 1:]
            J = np.block([[Ja.real, Jm.real], [Ja.imag, Jm.imag]])
            dx = np.linalg.solve(J, -np.concatenate([F.real, F.imag]))
            Va = Va + dx[:N]
            Vm = Vm + dx[N:]
        self.reset()
        raise PowerFlowDivergence(
            f"Newton-Raphson did not converge in {self.max_iter} iterations "
            f"(residual {res:.3e})", res)


def solve_powerflow(feeder: RadialFeeder, p, q, tol: float = 1e-10, max_iter: int = 50) -> np.ndarray:
    """Voltage magnitudes (p.u.) from a flat start; see PowerFlowSolver."""
    return PowerFlowSolver(feeder, tol, max_iter).solve(p, q, warm=False)


@dataclass
class FeederStepResult:
    v: np.ndarray
    curtailment: float
    violations: int


class FeederEnv:
    """Feeder driven by a trace of loads and irradiance at 1 s.

    ``pv_size`` is the PV array size per inverter (p.u. at 1000 W/m^2);
    ``s_rating`` the inverter apparent-power rating.  Loads draw reactive
    power at a fixed power factor.
    """

    def __init__(self, feeder: RadialFeeder, trace, pv_size: np.ndarray, s_rating: np.ndarray,
                 load_pf: float = 0.95, load_scale: float = 1.0):
        self.feeder = feeder
        self.trace = trace
        self.pv_size = np.asarray(pv_size, dtype=np.float64)
        self.s_rating = np.asarray(s_rating, dtype=np.float64)
        self.solver = PowerFlowSolver(feeder)
        N = feeder.n_bus
        self.load_p = load_scale * trace.matrix([f"load_{i}" for i in range(N)])
        self.load_q = self.load_p * np.tan(np.arccos(load_pf))
        self.irr = trace.matrix([f"irr_{j}" for j in feeder.pv_buses])
        self.k = 0
        self.v = np.ones(N)

    @property
    def n_steps(self) -> int:
        return len(self.trace)

    def p_available(self, k: int) -> np.ndarray:
        return self.pv_size * self.irr[k] / 1000.0

    def loads(self, k: int):
        return self.load_p[k], self.load_q[k]

    def injections(self, k: int, p_inv, q_inv):
        p = -self.load_p[k].copy()
        q = -self.load_q[k].copy()
        p[self.feeder.pv_buses] += p_inv
        q[self.feeder.pv_buses] += q_inv
        return p, q

    def observation(self, k: int) -> dict:
        """Previous-step voltages and present loads / available PV."""
        full_pav = np.zeros(self.feeder.n_bus)
        full_pav[self.feeder.pv_buses] = self.p_available(k)
        return {"v": self.v.copy(), "load": self.load_p[k].copy(), "p_av": full_pav}

    def step(self, p_inv, q_inv) -> FeederStepResult:
        res = feeder_step(self, p_inv, q_inv)
        self.k += 1
        return res


def feeder_step(env: FeederEnv, p_inv, q_inv) -> FeederStepResult:
    """Apply inverter setpoints at the env's current step and solve the AC flow."""
    k = env.k
    p_inv = np.asarray(p_inv, dtype=np.float64)
    q_inv = np.asarray(q_inv, dtype=np.float64)
    p_av = env.p_available(k)
    if np.any(p_inv > p_av + 1e-6):
        raise AssertionError("active-power setpoint exceeds available PV")
    p, q = env.injections(k, p_inv, q_inv)
    try:
        v = env.solver.solve(p, q)
    except PowerFlowDivergence:
        logger.error("power flow diverged at step %d", k)
        raise
    env.v = v
    curtail = float(np.sum(p_av - p_inv))
    viol = int(np.sum((v < V_MIN) | (v > V_MAX)))
    return FeederStepResult(v, curtail, viol)
