"""Per-step approximate feasible sets for the two control problems.

Building: the variable is the action plan u_{k..k+T-1}; state bounds on
x_{k+1..k+T} become linear rows in u after substituting the linear dynamics
forward.  Inverters: the variable stacks (p_i, q_i) per inverter; rows encode
0 <= p_i <= p_av,i, an inscribed M-gon of the apparent-power disc, and
linearized voltage limits tightened by a safety margin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .qp import InfeasibleSetError, LinearConstraintSet
from .sysid import LinearDynamics, SensitivityModel

logger = logging.getLogger(__name__)


class MarginEstimationError(RuntimeError):
    pass


# ------------------------------------------------------------------ thermal

@dataclass
class HorizonSpec:
    """Bounds over a planning horizon of T control steps.

    ``state_bounds[l]`` = (x_min, x_max) applies to x_{k+l+1};
    ``action_bounds[l]`` to u_{k+l}.  ``occupied[l]`` marks state rows that the
    relaxation schedule may loosen.  ``state_margin`` tightens every state
    bound to absorb one-step model error.
    """

    T: int
    state_bounds: np.ndarray
    action_bounds: np.ndarray
    occupied: Optional[np.ndarray] = None
    state_margin: float = 0.0

    def __post_init__(self):
        self.state_bounds = np.asarray(self.state_bounds, dtype=np.float64).reshape(self.T, 2)
        self.action_bounds = np.asarray(self.action_bounds, dtype=np.float64).reshape(self.T, 2)
        if self.T < 1:
            raise ValueError("horizon T must be >= 1")
        if np.any(self.state_bounds[:, 0] >= self.state_bounds[:, 1]):
            raise ValueError("state bounds need x_min < x_max at every step")
        if np.any(self.action_bounds[:, 0] >= self.action_bounds[:, 1]):
            raise ValueError("action bounds need u_min < u_max at every step")
        if self.occupied is None:
            self.occupied = np.zeros(self.T, dtype=bool)
        self.occupied = np.asarray(self.occupied, dtype=bool).reshape(self.T)
        if self.state_margin < 0:
            raise ValueError("state margin must be nonnegative")


def thermal_prediction_matrices(model: LinearDynamics, x_k, w_hat, T: int):
    """x_{k+1..k+T} = Phi u + offset for a single-input model.

    Returns Phi (T*nx, T) and offset (T*nx,) with rows ordered step-major.
    """
    if model.nu != 1:
        raise ValueError("the thermal planner expects a single control input")
    nx = model.nx
    w_hat = np.asarray(w_hat, dtype=np.float64).reshape(-1, model.nw)
    if w_hat.shape[0] != T:
        raise ValueError(f"forecast has {w_hat.shape[0]} steps, horizon is {T}")
    A, Bu = model.A, model.B_u[:, 0]
    Phi = np.zeros((T * nx, T))
    offset = np.empty(T * nx)
    x = np.asarray(x_k, dtype=np.float64).reshape(nx)
    powers = [np.eye(nx)]
    for _ in range(T):
        powers.append(A @ powers[-1])
    for l in range(T):
        x = A @ x + model.B_d @ w_hat[l]
        offset[l * nx:(l + 1) * nx] = x
        for j in range(l + 1):
            Phi[l * nx:(l + 1) * nx, j] = powers[l - j] @ Bu
    return Phi, offset


def build_thermal_polytope(model: LinearDynamics, x_k, w_hat, spec: HorizonSpec, *,
                           witnesses: Sequence = (), relax: float = 0.0,
                           keep_state_steps: Optional[int] = None) -> LinearConstraintSet:
    """Set of action plans keeping the surrogate's states within bounds.

    ``relax`` widens occupied-step state bounds by that many degrees;
    ``keep_state_steps`` keeps only the first that many steps' state rows
    (the rest of the horizon tail is dropped).  Raises InfeasibleSetError on
    an empty set.
    """
    T = spec.T
    Phi, offset = thermal_prediction_matrices(model, x_k, w_hat, T)
    nx = model.nx
    lo = np.repeat(spec.state_bounds[:, 0], nx) + spec.state_margin
    hi = np.repeat(spec.state_bounds[:, 1], nx) - spec.state_margin
    if relax:
        occ = np.repeat(spec.occupied, nx)
        lo = lo - relax * occ
        hi = hi + relax * occ
    keep = T if keep_state_steps is None else int(keep_state_steps)
    rows = slice(0, keep * nx)
    I = np.eye(T)
    G = np.vstack([Phi[rows], -Phi[rows], I, -I])
    h = np.concatenate([hi[rows] - offset[rows], offset[rows] - lo[rows],
                        spec.action_bounds[:, 1], -spec.action_bounds[:, 0]])
    return LinearConstraintSet(T, G=G, h=h, witnesses=witnesses)


@dataclass
class Relaxation:
    level: int = 0  # number of 0.5 C widening increments applied
    dropped_tail: int = 0  # state-row steps removed from the horizon end

    @property
    def relaxed(self) -> bool:
        return self.level > 0 or self.dropped_tail > 0


def build_thermal_with_relaxation(model: LinearDynamics, x_k, w_hat, spec: HorizonSpec, *,
                                  witnesses: Sequence = (), increment: float = 0.5,
                                  max_increments: int = 4):
    """Build the thermal set, relaxing it along the fallback schedule if empty.

    Schedule: widen occupied-step bounds by ``increment`` up to
    ``max_increments`` times; then drop state rows from the horizon tail one
    step at a time (keeping the widest bounds).  Returns (set, Relaxation).
    """
    for level in range(max_increments + 1):
        try:
            C = build_thermal_polytope(model, x_k, w_hat, spec, witnesses=witnesses,
                                       relax=level * increment)
            return C, Relaxation(level, 0)
        except InfeasibleSetError:
            continue
    relax = max_increments * increment
    for drop in range(1, spec.T + 1):
        try:
            C = build_thermal_polytope(model, x_k, w_hat, spec, witnesses=witnesses,
                                       relax=relax, keep_state_steps=spec.T - drop)
            return C, Relaxation(max_increments, drop)
        except InfeasibleSetError:
            continue
    raise InfeasibleSetError("action bounds alone are infeasible")


# ---------------------------------------------------------------- inverters

@dataclass
class InverterSpec:
    s: float
    p_av: float
    M: int = 8
    v_limits: tuple = (0.95, 1.05)
    margin: float = 0.0

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError("inverter rating s must be positive")
        if self.p_av < 0:
            raise ValueError("available power must be nonnegative")
        if self.M < 4:
            raise ValueError("polygon needs at least 4 facets")
        if self.margin < 0:
            raise ValueError("voltage margin must be nonnegative")


def disc_polygon(s: float, M: int):
    """Inscribed regular M-gon of the disc of radius s as rows (G, h).

    Facet normals point at angles 2 pi k / M; vertices sit between them at
    odd multiples of pi / M on the circle.
    """
    ang = 2 * np.pi * np.arange(M) / M
    G = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return G, np.full(M, s * np.cos(np.pi / M))


class InverterSetBuilder:
    """Static row structure of the inverter set; only right-hand sides change.

    Variables are ordered (p_1, q_1, p_2, q_2, ...).
    """

    def __init__(self, model: SensitivityModel, pv_buses: Sequence[int], s: Sequence[float],
                 M: int = 8, v_limits=(0.95, 1.05), margin: Optional[float] = None,
                 voltage_rows: bool = True):
        self.model = model
        self.pv_buses = np.asarray(pv_buses, dtype=np.int64)
        self.s = np.asarray(s, dtype=np.float64)
        self.M = int(M)
        self.v_limits = tuple(v_limits)
        self.margin = model.eps_v if margin is None else float(margin)
        self.voltage_rows = voltage_rows
        n = self.pv_buses.shape[0]
        self.n_inv = n
        self.n = 2 * n
        blocks, h_poly = [], []
        Gp, hp = disc_polygon(1.0, self.M)
        for i in range(n):
            rows = np.zeros((2 + self.M, self.n))
            rows[0, 2 * i] = 1.0  # p <= p_av
            rows[1, 2 * i] = -1.0  # -p <= 0
            rows[2:, 2 * i:2 * i + 2] = Gp
            blocks.append(rows)
            h_poly.append(hp * self.s[i])
        self._G_dev = np.vstack(blocks)
        self._h_poly = np.stack(h_poly)
        Hu = np.zeros((model.n_bus, self.n))
        Hu[:, 0::2] = model.R[:, self.pv_buses]
        Hu[:, 1::2] = model.B[:, self.pv_buses]
        self.H_u = Hu
        self.G = np.vstack([self._G_dev, Hu, -Hu]) if voltage_rows else self._G_dev
        self.G.setflags(write=False)

    def voltage_offset(self, load_p, load_q) -> np.ndarray:
        """Linear voltage with all inverters at zero output."""
        m = self.model
        return m.v_bar + m.R @ (-np.asarray(load_p) - m.p_bar) + m.B @ (-np.asarray(load_q) - m.q_bar)

    def rhs(self, p_av, load_p, load_q) -> np.ndarray:
        p_av = np.asarray(p_av, dtype=np.float64)
        n = self.n_inv
        h_dev = np.empty((n, 2 + self.M))
        h_dev[:, 0] = p_av
        h_dev[:, 1] = 0.0
        h_dev[:, 2:] = self._h_poly
        parts = [h_dev.reshape(-1)]
        if self.voltage_rows:
            c = self.voltage_offset(load_p, load_q)
            lo, hi = self.v_limits
            parts += [hi - self.margin - c, c - (lo + self.margin)]
        return np.concatenate(parts)

    def build(self, p_av, load_p, load_q, witnesses: Sequence = (), check: bool = True):
        h = self.rhs(p_av, load_p, load_q)
        try:
            return LinearConstraintSet(self.n, G=self.G, h=h, check=check,
                                       witnesses=list(witnesses) + [np.zeros(self.n)])
        except InfeasibleSetError as exc:
            raise InfeasibleSetError(
                f"inverter set is empty with voltage margin {self.margin:.4g} p.u.; "
                f"use a smaller margin ({exc})", exc.certificate) from exc

    def from_rhs(self, h) -> LinearConstraintSet:
        """Rebuild a previously checked set from its stored right-hand side."""
        return LinearConstraintSet(self.n, G=self.G, h=h, check=False)


def build_inverter_set(model: SensitivityModel, specs: Sequence[InverterSpec], load_p, load_q,
                       pv_buses: Sequence[int]) -> LinearConstraintSet:
    if len(specs) != len(pv_buses):
        raise ValueError(f"{len(specs)} inverter specs for {len(pv_buses)} PV buses")
    if len(load_p) != model.n_bus or len(load_q) != model.n_bus:
        raise ValueError(f"loads must have one entry per bus ({model.n_bus})")
    Ms = {sp.M for sp in specs}
    margins = {sp.margin for sp in specs}
    limits = {tuple(sp.v_limits) for sp in specs}
    if len(Ms) != 1 or len(margins) != 1 or len(limits) != 1:
        raise ValueError("polygon size, margin and voltage limits must agree across inverters")
    builder = InverterSetBuilder(model, pv_buses, [sp.s for sp in specs], Ms.pop(),
                                 limits.pop(), margins.pop())
    return builder.build([sp.p_av for sp in specs], load_p, load_q)


# ------------------------------------------------------------ voltage margin

def voltage_margin(model: SensitivityModel, pf_oracle: Callable, samples, *,
                   sampler: Optional[Callable] = None, safety_factor: float = 1.5,
                   rng: Optional[np.random.Generator] = None, min_valid: int = 10) -> float:
    """Safety margin from the worst linearization error over sampled injections.

    ``samples`` is either an iterable of (p, q) bus-injection pairs or a count,
    in which case ``sampler(rng)`` draws each pair.  Samples whose power flow
    raises are skipped and logged.
    """
    if isinstance(samples, (int, np.integer)):
        if sampler is None:
            raise ValueError("a sampler is needed when samples is a count")
        rng = rng if rng is not None else np.random.default_rng(0)
        pairs: Iterable = (sampler(rng) for _ in range(int(samples)))
    else:
        pairs = samples
    worst, valid = 0.0, 0
    for p, q in pairs:
        try:
            v_ac = np.asarray(pf_oracle(p, q), dtype=np.float64)
        except Exception as exc:  # noqa: BLE001 - divergence of any kind skips the sample
            logger.warning("voltage margin sample skipped: %s", exc)
            continue
        worst = max(worst, float(np.max(np.abs(v_ac - model.predict(p, q)))))
        valid += 1
    if valid < min_valid:
        raise MarginEstimationError(f"only {valid} valid samples (need {min_valid})")
    return safety_factor * worst


def feasible_injection_sampler(model: SensitivityModel, pv_buses, s, load_p, load_q, p_av,
                               v_limits=(0.95, 1.05), max_tries: int = 200):
    """Sampler of bus injections drawn from operating conditions in a trace.

    Each draw picks a random row of ``load_p``/``load_q``/``p_av``, draws each
    inverter's (p, q) from arcsine-distributed fractions of 0 <= p <= p_av and
    |q| <= sqrt(s^2 - p^2), and
    keeps the draw if the linear model puts every voltage within limits.
    """
    pv_buses = np.asarray(pv_buses)
    s = np.asarray(s, dtype=np.float64)
    load_p, load_q, p_av = (np.asarray(a, dtype=np.float64) for a in (load_p, load_q, p_av))
    lo, hi = v_limits

    def draw(rng):
        for _ in range(max_tries):
            k = int(rng.integers(0, load_p.shape[0]))
            # arcsine draws put mass near the extremes of each interval,
            # where the linearization error is largest
            p_inv = rng.beta(0.5, 0.5, size=s.shape) * p_av[k]
            q_cap = np.sqrt(np.maximum(s ** 2 - p_inv ** 2, 0.0))
            q_inv = (2 * rng.beta(0.5, 0.5, size=s.shape) - 1) * q_cap
            p = -load_p[k].copy()
            q = -load_q[k].copy()
            p[pv_buses] += p_inv
            q[pv_buses] += q_inv
            v = model.predict(p, q)
            if np.all(v >= lo) and np.all(v <= hi):
                return p, q
        raise MarginEstimationError("could not draw a feasible injection")

    return draw
