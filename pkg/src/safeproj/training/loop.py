"""The receding-horizon control loop and the two task adapters.

Each step: observe, forecast, build the constraint set (relaxing it if
empty), act through the projection, execute the first action block, store
the transition, and every ``update_every`` steps hand the recent experience
to the trainer.  Baseline controllers run through the same loop so every
controller produces identical metrics.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from ..baselines import DroopCurve, PController, linearized_optimal, volt_var
from ..constraints import HorizonSpec, InverterSetBuilder, build_thermal_with_relaxation
from ..envs.feeder import FeederEnv, feeder_step
from ..envs.thermal import ThermalZone, comfort_bounds
from ..qp import InfeasibleSetError, LinearConstraintSet
from ..sysid import LinearDynamics
from .direct import DirectGradientTrainer
from .memory import ReplayMemory, RolloutRecord
from .policies import BuildingNormalizer, SigmaSchedule, building_sequence
from .ppo import PPOTrainer, act

logger = logging.getLogger(__name__)


@dataclass
class StepOutcome:
    cost: float
    curtailment_or_energy: float
    violations: int
    state: np.ndarray
    action: np.ndarray


# ------------------------------------------------------------------ building

class BuildingTask:
    """Thermal zone + linear surrogate planner over a T-step horizon."""

    def __init__(self, zone: ThermalZone, model: LinearDynamics, T: int = 12, H: int = 4,
                 occupied=(21.9, 25.5), unoccupied=(18.0, 28.0), state_margin: float = 0.0,
                 forecast: str = "perfect", normalizer: BuildingNormalizer = None,
                 expert: Optional[PController] = None):
        self.zone = zone
        self.model = model
        self.T, self.H = T, H
        self.occupied, self.unoccupied = occupied, unoccupied
        self.state_margin = state_margin
        self.forecast_mode = forecast
        self.normalizer = normalizer or BuildingNormalizer()
        self.expert = expert or PController()
        self.W = zone.disturbances()
        self.stamps = np.array([zone.timestamp(k) for k in range(zone.n_steps + T + 1)])
        self.x_hist: List[float] = [zone.x]
        p = zone.params
        self.u_bounds = (p.u_min, p.u_max)

    @property
    def n_steps(self) -> int:
        return self.zone.n_steps

    state_names = ("x",)

    @property
    def action_names(self):
        return ("u",)

    def _rows(self, lo, n):
        idx = np.clip(np.arange(lo, lo + n), 0, len(self.W) - 1)
        return self.W[idx]

    def forecast(self, k: int, T: int) -> np.ndarray:
        """w_hat_{k..k+T-1}; row 0 is always the truth."""
        if self.forecast_mode == "perfect":
            return self._rows(k, T)
        if self.forecast_mode == "persistence":
            return np.repeat(self.W[k][None], T, axis=0)
        raise ValueError(f"unknown forecast mode {self.forecast_mode!r}")

    def x_history(self, k: int) -> np.ndarray:
        xs = self.x_hist[max(0, k - self.H + 1):k + 1]
        return np.array([xs[0]] * (self.H - len(xs)) + xs)

    def observe(self, k: int) -> np.ndarray:
        w_hist = self._rows(k - self.H + 1, self.H)
        hist_idx = np.clip(np.arange(k - self.H + 1, k + 1), 0, None)
        return building_sequence(self.x_history(k), w_hist, self.forecast(k, self.T),
                                 self.stamps[hist_idx], self.stamps[k:k + self.T], self.normalizer)

    def horizon_spec(self, k: int) -> HorizonSpec:
        # bounds on x_{k+l+1} follow occupancy at step k+l+1
        occ = self._rows(k + 1, self.T)[:, 2]
        bounds = comfort_bounds(occ, self.occupied, self.unoccupied)
        act = np.tile(self.u_bounds, (self.T, 1))
        return HorizonSpec(self.T, bounds, act, occupied=occ > 0.5, state_margin=self.state_margin)

    def constraint_set(self, k: int):
        x = self.x_hist[k]
        C, relax = build_thermal_with_relaxation(self.model, x, self.forecast(k, self.T),
                                                 self.horizon_spec(k))
        if relax.relaxed:
            logger.info("thermal set relaxed at step %d (level %d, dropped %d)", k,
                        relax.level, relax.dropped_tail)
        return C, relax.relaxed

    def execute(self, k: int, u_plan) -> StepOutcome:
        lo, hi = self.u_bounds
        u = float(np.clip(np.asarray(u_plan).reshape(-1)[0], lo, hi))
        x_next, cost = self.zone.step(u)
        self.x_hist.append(x_next)
        occ_next = self._rows(k + 1, 1)[0, 2] > 0.5
        viol = 0
        if occ_next and not (self.occupied[0] <= x_next <= self.occupied[1]):
            viol = 1
        return StepOutcome(cost, cost, viol, np.array([x_next]), np.array([u]))

    def baseline_action(self, k: int) -> np.ndarray:
        occ = self.W[k, 2]
        return np.array([self.expert(self.x_hist[k], occ)])

    def record_extra(self, k: int) -> dict:
        return {}


# -------------------------------------------------------------------- feeder

class FeederTask:
    """Inverter set-point control on the AC feeder simulator."""

    def __init__(self, env: FeederEnv, builder: InverterSetBuilder, droop: DroopCurve = None,
                 lp_reference: bool = False):
        self.env = env
        self.builder = builder
        self.fallback = InverterSetBuilder(builder.model, builder.pv_buses, builder.s, builder.M,
                                           builder.v_limits, builder.margin, voltage_rows=False)
        self.droop = droop or DroopCurve()
        self.lp_reference = lp_reference
        self.lp_curtailment: Dict[int, float] = {}
        self.pv = env.feeder.pv_buses
        self._v_prev = np.ones(env.feeder.n_bus)
        self.v_log: Dict[int, np.ndarray] = {}

    @property
    def n_steps(self) -> int:
        return self.env.n_steps

    @property
    def state_names(self):
        return tuple(f"v{i}" for i in range(self.env.feeder.n_bus))

    @property
    def action_names(self):
        out = []
        for j in self.pv:
            out += [f"p{j}", f"q{j}"]
        return tuple(out)

    def observe(self, k: int) -> np.ndarray:
        full = np.zeros(self.env.feeder.n_bus)
        full[self.pv] = self.env.p_available(k)
        return np.concatenate([self._v_prev, self.env.load_p[k], full])

    def set_for(self, k: int, relaxed: bool = False) -> LinearConstraintSet:
        """The step-k set rebuilt without a feasibility check (already done when acting)."""
        b = self.fallback if relaxed else self.builder
        return b.from_rhs(b.rhs(self.env.p_available(k), *self.env.loads(k)))

    def constraint_set(self, k: int):
        p_av = self.env.p_available(k)
        lp, lq = self.env.loads(k)
        try:
            C = self.builder.build(p_av, lp, lq)
            relaxed = False
        except InfeasibleSetError:
            logger.warning("inverter set empty at step %d; voltage rows dropped", k)
            C = self.fallback.build(p_av, lp, lq)
            relaxed = True
        if self.lp_reference:
            u0 = np.zeros(C.n)
            u0[0::2] = p_av
            if C.contains(u0, 1e-9):
                self.lp_curtailment[k] = 0.0
            else:
                u = linearized_optimal(C, p_av)
                self.lp_curtailment[k] = float(np.sum(p_av - u[0::2]))
        return C, relaxed

    def execute(self, k: int, u) -> StepOutcome:
        u = np.asarray(u, dtype=np.float64)
        p_av = self.env.p_available(k)
        p = np.clip(u[0::2], 0.0, p_av)
        q = u[1::2]
        self.env.k = k
        res = feeder_step(self.env, p, q)
        self._v_prev = res.v
        pq = np.empty(2 * len(p))
        pq[0::2], pq[1::2] = p, q
        return StepOutcome(res.curtailment, res.curtailment, res.violations, res.v, pq)

    def baseline_action(self, k: int) -> np.ndarray:
        p_av = self.env.p_available(k)
        p, q = volt_var(self._v_prev[self.pv], self.droop, p_av, self.builder.s)
        out = np.empty(2 * len(p))
        out[0::2], out[1::2] = p, q
        return out

    def record_extra(self, k: int) -> dict:
        return {"k": k}

    def direct_batch_fn(self):
        def batch(records):
            obs = np.stack([r.obs for r in records])
            sets = [self.set_for(r.extra["k"], r.extra.get("relaxed", False)) for r in records]
            p_av = np.stack([self.env.p_available(r.extra["k"]) for r in records])
            return obs, sets, p_av
        return batch


# ---------------------------------------------------------------------- loop

@dataclass
class LoopConfig:
    controller: str = "policy"  # policy | baseline
    variant: str = "prof"  # prof | clip
    deterministic: bool = False
    update_every: int = 384
    trainer_kind: str = "none"  # none | ppo | direct
    memory_capacity: int = 86400
    start: int = 0
    stop: Optional[int] = None
    keep_records: bool = False
    warm_start: bool = True
    explore_dims: Optional[int] = None


@dataclass
class StepRow:
    step: int
    timestamp: np.datetime64
    cost: float
    curtailment_or_energy: float
    violation_count: int
    infeasible_relaxations: int
    action: np.ndarray
    state: np.ndarray


@dataclass
class RunResult:
    rows: List[StepRow] = field(default_factory=list)
    records: List[RolloutRecord] = field(default_factory=list)
    updates: List[dict] = field(default_factory=list)
    wall_time: float = 0.0
    policy_time: float = 0.0

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def summary(self) -> dict:
        n = len(self.rows)
        viol = self.column("violation_count") if n else np.zeros(0)
        relax = self.column("infeasible_relaxations") if n else np.zeros(0)
        return {
            "steps": n,
            "total_cost": float(np.sum(self.column("cost"))) if n else 0.0,
            "total_curtailment_or_energy": float(np.sum(self.column("curtailment_or_energy"))) if n else 0.0,
            "violation_steps": int(np.sum(viol > 0)),
            "violation_fraction": float(np.mean(viol > 0)) if n else 0.0,
            "violations_on_unrelaxed_steps": int(np.sum((viol > 0) & (relax == 0))),
            "relaxation_steps": int(np.sum(relax)),
            "updates": len(self.updates),
            "wall_time_s": self.wall_time,
            "policy_time_per_step_ms": 1e3 * self.policy_time / max(n, 1),
        }


def run_main_loop(task, policy=None, trainer=None, cfg: LoopConfig = None,
                  sigma: Optional[SigmaSchedule] = None, rng=None,
                  on_row: Optional[Callable[[StepRow], None]] = None) -> RunResult:
    cfg = cfg or LoopConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    sigma = sigma or SigmaSchedule()
    stop = task.n_steps if cfg.stop is None else min(cfg.stop, task.n_steps)
    result = RunResult()
    memory = ReplayMemory(cfg.memory_capacity, rng=np.random.default_rng(rng.integers(2 ** 63)))
    segment: List[RolloutRecord] = []
    guess = None
    t0 = time.perf_counter()
    for k in range(cfg.start, stop):
        if cfg.controller == "baseline":
            obs = None
            relaxed = False
            u_exec = task.baseline_action(k)
            tp = 0.0
            rec = None
        else:
            obs = task.observe(k)
            C, relaxed = task.constraint_set(k)
            t1 = time.perf_counter()
            a = act(policy, obs, C, sigma(k - cfg.start), rng, cfg.variant,
                    deterministic=cfg.deterministic,
                    active_guess=guess if cfg.warm_start else None,
                    explore_dims=cfg.explore_dims)
            tp = time.perf_counter() - t1
            guess = a.active
            u_exec = a.u
            extra = task.record_extra(k)
            extra["sigma"] = a.sigma
            extra["relaxed"] = relaxed
            rec = RolloutRecord(obs, a.sample, a.u, 0.0,
                                C=None if isinstance(task, FeederTask) else C,
                                logprob=a.logprob, extra=extra)
        result.policy_time += tp
        out = task.execute(k, u_exec)
        row = StepRow(k, _stamp(task, k), out.cost, out.curtailment_or_energy, out.violations,
                      int(relaxed), out.action, out.state)
        result.rows.append(row)
        if on_row is not None:
            on_row(row)
        if rec is not None:
            rec.cost = out.cost
            rec.timestamp = row.timestamp
            memory.append(rec)
            segment.append(rec)
            if cfg.keep_records:
                result.records.append(rec)
        done = (k + 1 - cfg.start) % cfg.update_every == 0
        if trainer is not None and done and rec is not None:
            if isinstance(trainer, PPOTrainer):
                nxt = task.observe(k + 1) if k + 1 < task.n_steps else None
                info = trainer.update(segment, bootstrap_obs=nxt)
            elif isinstance(trainer, DirectGradientTrainer):
                info = trainer.update(memory)
            else:
                info = trainer(memory, segment)
            info["step"] = k
            result.updates.append(info)
            segment = []
            guess = None
    result.wall_time = time.perf_counter() - t0
    return result


def _stamp(task, k):
    if isinstance(task, BuildingTask):
        return task.zone.timestamp(k)
    return task.env.trace.timestamp(k)


def verify_records(records, set_fn=None, tol: float = 1e-6) -> int:
    """Count records whose executed plan lies outside its constraint set."""
    bad = 0
    for r in records:
        C = r.C if r.C is not None else set_fn(r)
        if not C.contains(r.u_post, tol):
            bad += 1
    return bad
