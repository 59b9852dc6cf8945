"""Single-zone building thermal simulator.

The zone temperature x (C) evolves at a 5-minute simulation step as

    x' = x + a_out (T_out - x) + a_u (u - x) + c_sol * solar + c_occ * occ + g(x)

where u is the supply-water temperature, solar is horizontal irradiance
(W/m^2) and occ the occupancy indicator.  The bounded perturbation
g(x) = -g_max tanh((x - x_ref) / x_scale) makes the ground truth nonlinear so a
linear surrogate is only approximate; g_max = 0 gives an exactly linear plant.

One control step repeats the action for ``repeat`` simulation steps.  The
disturbances are held at their value at the start of the control step, which
makes the control-step map exactly affine when g_max = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import ContractError
from ..sysid import LinearDynamics
from .traces import TraceSet

DISTURBANCES = ("t_out", "solar", "occ")


class SimulationError(RuntimeError):
    pass


@dataclass
class ZoneParams:
    a_out: float = 1.0 / 48.0
    a_u: float = 1.0 / 48.0
    c_sol: float = 1.6e-4
    c_occ: float = 0.04
    g_max: float = 0.05
    x_ref: float = 20.0
    x_scale: float = 5.0
    u_min: float = 20.0
    u_max: float = 65.0
    repeat: int = 3
    sim_dt_min: float = 5.0

    @property
    def control_dt_min(self) -> float:
        return self.sim_dt_min * self.repeat


def comfort_bounds(occ, occupied=(21.9, 25.5), unoccupied=(18.0, 28.0)) -> np.ndarray:
    """Per-step [x_min, x_max] from an occupancy indicator, shape (len(occ), 2)."""
    occ = np.asarray(occ, dtype=np.float64) > 0.5
    lo = np.where(occ, occupied[0], unoccupied[0])
    hi = np.where(occ, occupied[1], unoccupied[1])
    return np.stack([lo, hi], axis=1)


class ThermalZone:
    """Stateful zone driven by a trace at the simulation cadence.

    ``k`` counts control steps; the disturbance for control step k is trace
    row ``k * repeat``.
    """

    def __init__(self, trace: TraceSet, params: ZoneParams = None, x0: float = 20.0):
        self.params = params or ZoneParams()
        self.trace = trace
        self.W = trace.matrix(DISTURBANCES)
        self.x = float(x0)
        self.k = 0

    @property
    def n_steps(self) -> int:
        return len(self.trace) // self.params.repeat

    def disturbance(self, k: int) -> np.ndarray:
        """Control-step disturbance w_k = (t_out, solar, occ)."""
        return self.W[min(k * self.params.repeat, len(self.W) - 1)]

    def disturbances(self) -> np.ndarray:
        """All control-step disturbances, shape (n_steps, 3)."""
        return self.W[::self.params.repeat][:self.n_steps]

    def timestamp(self, k: int) -> np.datetime64:
        return self.trace.timestamp(k * self.params.repeat)

    def _substep(self, x, u, w) -> float:
        p = self.params
        t_out, solar, occ = w
        g = -p.g_max * np.tanh((x - p.x_ref) / p.x_scale)
        return x + p.a_out * (t_out - x) + p.a_u * (u - x) + p.c_sol * solar + p.c_occ * occ + g

    def step(self, u: float):
        """Advance one control step holding ``u``; returns (x_next, cost)."""
        p = self.params
        u = float(u)
        if not (p.u_min - 1e-6 <= u <= p.u_max + 1e-6) or not np.isfinite(u):
            raise ContractError(f"supply temperature {u} outside [{p.u_min}, {p.u_max}]")
        w = self.disturbance(self.k)
        x = self.x
        for _ in range(p.repeat):
            x = self._substep(x, u, w)
        if not 0.0 <= x <= 45.0 or not np.isfinite(x):
            raise SimulationError(
                f"zone temperature {x:.3f} C left [0, 45] at control step {self.k} "
                f"(u={u:.2f}, w={w.tolist()})")
        self.x = x
        self.k += 1
        return x, u

    def exact_surrogate(self) -> LinearDynamics:
        """The control-step map with g removed, as LinearDynamics."""
        p = self.params
        alpha = 1.0 - p.a_out - p.a_u
        gain = sum(alpha ** j for j in range(p.repeat))
        return LinearDynamics(np.array([[alpha ** p.repeat]]), np.array([[gain * p.a_u]]),
                              np.array([[gain * p.a_out, gain * p.c_sol, gain * p.c_occ]]),
                              p.control_dt_min)


def thermal_step(zone: ThermalZone, u: float):
    return zone.step(u)
