"""Reference controllers: proportional heating, Volt/Var droop, and the
per-step optimum of the linearized inverter problem."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qp import LinearConstraintSet, solve_qp


def p_controller(x: float, setpoint: float, gain: float, u_bounds=(20.0, 65.0)) -> float:
    """u = clamp(u_min + gain * max(setpoint - x, 0), u_min, u_max)."""
    if gain <= 0:
        raise ValueError("gain must be positive")
    u_min, u_max = u_bounds
    return float(np.clip(u_min + gain * max(setpoint - x, 0.0), u_min, u_max))


@dataclass
class PController:
    """Setpoint schedule around the P-law: occupied and setback setpoints."""

    gain: float = 60.0
    occupied_setpoint: float = 23.7
    setback_setpoint: float = 19.0
    u_bounds: tuple = (20.0, 65.0)

    def setpoint(self, occ: float) -> float:
        return self.occupied_setpoint if occ > 0.5 else self.setback_setpoint

    def __call__(self, x: float, occ: float) -> float:
        return p_controller(x, self.setpoint(occ), self.gain, self.u_bounds)


@dataclass
class DroopCurve:
    """Piecewise-linear Volt/Var curve.

    q = +q_max below v1, ramps to 0 at v2, zero on [v2, v3], ramps to -q_max
    at v4 and stays there.  ``q_max_frac`` is relative to the rating s.
    """

    v1: float = 0.92
    v2: float = 0.98
    v3: float = 1.02
    v4: float = 1.08
    q_max_frac: float = 0.44

    def __post_init__(self):
        if not (self.v1 < self.v2 <= self.v3 < self.v4):
            raise ValueError("droop breakpoints must satisfy v1 < v2 <= v3 < v4")
        if not 0 < self.q_max_frac <= 1:
            raise ValueError("q_max_frac must be in (0, 1]")

    def q_fraction(self, v):
        v = np.asarray(v, dtype=np.float64)
        return np.interp(v, [self.v1, self.v2, self.v3, self.v4],
                         [self.q_max_frac, 0.0, 0.0, -self.q_max_frac])


def volt_var(v_local, curve: DroopCurve, p_av, s):
    """p = p_av; q from the droop curve, limited so p^2 + q^2 <= s^2."""
    p_av = np.asarray(p_av, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    p = np.minimum(p_av, s)
    q = curve.q_fraction(v_local) * s
    q_cap = np.sqrt(np.maximum(s ** 2 - p ** 2, 0.0))
    return p, np.clip(q, -q_cap, q_cap)


def linearized_optimal(C: LinearConstraintSet, p_av=None, tol: float = 1e-8) -> np.ndarray:
    """Maximize total active power (minimize curtailment) over C.

    Variables follow the (p_1, q_1, p_2, q_2, ...) layout.  Solved as a
    linear program by the same interior-point machinery as the projection.
    """
    c = np.zeros(C.n)
    c[0::2] = -1.0
    u = solve_qp(None, c, C, tol=tol).x
    return u


def curtailment(u, p_av) -> float:
    return float(np.sum(np.asarray(p_av) - np.asarray(u)[0::2]))
