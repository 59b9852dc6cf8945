"""Scenario factories wiring traces, simulators, identified models, policies
and trainers into the two case studies.

Randomness flows from one integer seed through named sub-streams so that
controllers compared on the same seed see identical environments.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np

from .baselines import DroopCurve, PController
from .constraints import InverterSetBuilder, feasible_injection_sampler, voltage_margin
from .envs.feeder import FeederEnv, PowerFlowSolver, RadialFeeder, make_feeder
from .envs.thermal import ThermalZone, ZoneParams
from .envs.traces import TraceSet, synth_building_traces, synth_feeder_traces
from .sysid import LinearDynamics, SensitivityModel, fit_thermal, linearize_grid
from .training.direct import DirectConfig, DirectGradientTrainer
from .training.loop import BuildingTask, FeederTask, LoopConfig, RunResult, run_main_loop
from .training.policies import Critic, FeederPolicy, LSTMPolicy, SigmaSchedule
from .training.ppo import PPOConfig, PPOTrainer, imitate

logger = logging.getLogger(__name__)

# sub-stream tags
STREAM_POLICY, STREAM_PPO, STREAM_LOOP, STREAM_MARGIN = 10, 11, 12, 13
PRETRAIN_SEED_OFFSET = 10_000
STEPS_PER_DAY_BUILDING = 96

BUILDING_CONTROLLERS = ("prof", "clip", "noupdate", "pcontroller")
FEEDER_CONTROLLERS = ("prof", "voltvar")


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


# ------------------------------------------------------------------ building

@dataclass
class BuildingSetup:
    model: LinearDynamics
    state_margin: float
    policy_state: dict
    imitation_loss: list
    expert_u: np.ndarray
    expert_x: np.ndarray


def expert_transitions(zone: ThermalZone, expert: PController, T: int, H: int,
                       occupied=(21.9, 25.5), unoccupied=(18.0, 28.0)):
    """Closed-loop expert run; returns the task (with full history) and actions."""
    task = BuildingTask(zone, None, T=T, H=H, occupied=occupied, unoccupied=unoccupied, expert=expert)
    us = []
    for k in range(zone.n_steps):
        u = task.baseline_action(k)
        task.execute(k, u)
        us.append(float(u[0]))
    return task, np.array(us)


def pretrain_building(seed: int, days: int = 90, T: int = 12, H: int = 4, hidden: int = 32,
                      epochs: int = 20, lr: float = 1e-3, batch: int = 64,
                      zone_params: ZoneParams = None, expert: PController = None,
                      margin_factor: float = 1.5, occupied=(21.9, 25.5),
                      unoccupied=(18.0, 28.0)) -> BuildingSetup:
    """Expert demonstrations on a separate weather sequence, the surrogate
    fit on the same data, and imitation pretraining of the LSTM planner."""
    expert = expert or PController()
    trace = synth_building_traces(seed + PRETRAIN_SEED_OFFSET, days)
    zone = ThermalZone(trace, zone_params or ZoneParams(), x0=20.0)
    task, us = expert_transitions(zone, expert, T, H, occupied, unoccupied)
    xs = np.array(task.x_hist)
    W = zone.disturbances()
    n = len(us)
    model = fit_thermal(xs[:-1], us, W[:n], xs[1:], dt=zone.params.control_dt_min, holdout=0.2)
    margin = margin_factor * model.max_abs_residual
    inputs = np.stack([task.observe(k) for k in range(n - T)])
    targets = np.stack([us[k:k + T] for k in range(n - T)])
    policy = LSTMPolicy(T, H, hidden, rng=_rng(seed, STREAM_POLICY))
    losses = imitate(policy, inputs, targets, epochs=epochs, lr=lr, batch=batch,
                     rng=_rng(seed, STREAM_POLICY + 100))
    return BuildingSetup(model, margin, policy.state_dict(), losses, us, xs)


@dataclass
class BuildingRunConfig:
    seed: int = 0
    days: int = 30
    controller: str = "prof"
    T: int = 12
    H: int = 4
    hidden: int = 32
    occupied: Tuple[float, float] = (21.9, 25.5)
    unoccupied: Tuple[float, float] = (18.0, 28.0)
    update_days: int = 4
    sigma_start: float = 0.1
    sigma_end: float = 0.01
    forecast: str = "perfect"
    g_max: float = 0.05
    deterministic: bool = False  # execute P(mu_hat) without exploration noise
    steps: Optional[int] = None  # stop after this many control steps
    ppo: PPOConfig = field(default_factory=lambda: PPOConfig(cost_offset=20.0, cost_scale=45.0,
                                                             explore_dims=1))


def run_building(cfg: BuildingRunConfig, setup: Optional[BuildingSetup] = None,
                 on_row=None, keep_records: bool = False,
                 trace: Optional[TraceSet] = None) -> RunResult:
    """``trace`` replaces the synthetic weather for ``cfg.seed`` when given."""
    if cfg.controller not in BUILDING_CONTROLLERS:
        raise ValueError(f"unknown building controller {cfg.controller!r}")
    params = ZoneParams(g_max=cfg.g_max)
    trace = trace if trace is not None else synth_building_traces(cfg.seed, cfg.days)
    zone = ThermalZone(trace, params, x0=20.0)
    if cfg.controller == "pcontroller":
        task = BuildingTask(zone, None, cfg.T, cfg.H, cfg.occupied, cfg.unoccupied)
        return run_main_loop(task, cfg=LoopConfig(controller="baseline", stop=cfg.steps),
                             on_row=on_row)
    if setup is None:
        setup = pretrain_building(cfg.seed, T=cfg.T, H=cfg.H, hidden=cfg.hidden,
                                  zone_params=params, occupied=cfg.occupied,
                                  unoccupied=cfg.unoccupied)
    task = BuildingTask(zone, setup.model, cfg.T, cfg.H, cfg.occupied, cfg.unoccupied,
                        state_margin=setup.state_margin, forecast=cfg.forecast)
    policy = LSTMPolicy(cfg.T, cfg.H, cfg.hidden, rng=_rng(cfg.seed, STREAM_POLICY))
    policy.load_state_dict(setup.policy_state)
    n_steps = zone.n_steps
    sigma = SigmaSchedule(cfg.sigma_start, cfg.sigma_end, n_steps)
    trainer = None
    # the no-update ablation is the clip loop with the trainer switched off
    variant = "prof" if cfg.controller == "prof" else "clip"
    if cfg.controller in ("prof", "clip"):
        ppo_cfg = PPOConfig(**{**asdict(cfg.ppo), "variant": variant})
        critic = Critic((cfg.H + cfg.T) * 7, rng=_rng(cfg.seed, STREAM_POLICY + 1))
        trainer = PPOTrainer(policy, critic, ppo_cfg, rng=_rng(cfg.seed, STREAM_PPO),
                             sigma_schedule=sigma)
    loop = LoopConfig(variant=variant, deterministic=cfg.deterministic,
                      explore_dims=cfg.ppo.explore_dims,
                      update_every=cfg.update_days * STEPS_PER_DAY_BUILDING,
                      trainer_kind="ppo" if trainer else "none", keep_records=keep_records,
                      stop=cfg.steps)
    return run_main_loop(task, policy, trainer, loop, sigma, rng=_rng(cfg.seed, STREAM_LOOP),
                         on_row=on_row)


def occupancy_start_steps(trace: TraceSet, repeat: int = 3) -> np.ndarray:
    """Control steps at which occupancy switches on."""
    occ = trace["occ"][::repeat] > 0.5
    return np.flatnonzero(occ[1:] & ~occ[:-1]) + 1


def morning_comfort_rate(result: RunResult, trace: TraceSet, occupied=(21.9, 25.5),
                         repeat: int = 3) -> float:
    """Fraction of occupancy starts at which the zone is already in the deadband.

    The state after step k-1 is the temperature when occupancy begins at k.
    """
    starts = occupancy_start_steps(trace, repeat)
    states = result.column("state")[:, 0]
    ok = [occupied[0] <= states[k - 1] <= occupied[1] for k in starts if 1 <= k <= len(states)]
    return float(np.mean(ok)) if ok else float("nan")


# -------------------------------------------------------------------- feeder

@dataclass
class FeederScenario:
    seed: int = 0
    days: int = 2
    cadence_s: int = 1
    n_bus: int = 36
    n_pv: int = 21
    r_range: Tuple[float, float] = (0.02, 0.05)
    x_range: Tuple[float, float] = (0.01, 0.015)
    chain_prob: float = 0.85
    pv_size: float = 0.02
    s_factor: float = 1.05
    M: int = 8
    margin_samples: int = 2000
    safety_factor: float = 1.5
    margin: Optional[float] = None  # fixed margin instead of estimating one


@dataclass
class FeederSetup:
    feeder: RadialFeeder
    trace: TraceSet
    env: FeederEnv
    model: SensitivityModel
    eps_v: float
    builder: InverterSetBuilder


def prepare_feeder(sc: FeederScenario, trace: Optional[TraceSet] = None) -> FeederSetup:
    """``trace`` replaces the synthetic load and irradiance for ``sc.seed`` when given."""
    feeder = make_feeder(sc.seed, sc.n_bus, sc.n_pv, sc.r_range, sc.x_range, sc.chain_prob)
    if trace is None:
        trace = synth_feeder_traces(sc.seed, sc.days, sc.n_bus, feeder.pv_buses,
                                    cadence_s=sc.cadence_s)
    pv = np.full(sc.n_pv, sc.pv_size)
    s = sc.s_factor * pv
    env = FeederEnv(feeder, trace, pv, s)
    solver = PowerFlowSolver(feeder)
    model = linearize_grid(lambda p, q: solver.solve(p, q, warm=False), sc.n_bus)
    if sc.margin is None:
        # operating conditions for the margin come from a separate history trace
        hist = synth_feeder_traces(sc.seed + PRETRAIN_SEED_OFFSET, 1, sc.n_bus, feeder.pv_buses,
                                   cadence_s=60)
        henv = FeederEnv(feeder, hist, pv, s)
        p_av = np.array([henv.p_available(k) for k in range(len(hist))])
        sampler = feasible_injection_sampler(model, feeder.pv_buses, s, henv.load_p, henv.load_q, p_av)
        eps = voltage_margin(model, lambda p, q: solver.solve(p, q), sc.margin_samples,
                             sampler=sampler, safety_factor=sc.safety_factor,
                             rng=_rng(sc.seed, STREAM_MARGIN))
    else:
        eps = float(sc.margin)
    model = model.with_margin(eps)
    builder = InverterSetBuilder(model, feeder.pv_buses, s, sc.M)
    return FeederSetup(feeder, trace, env, model, eps, builder)


@dataclass
class FeederRunConfig:
    scenario: FeederScenario = field(default_factory=FeederScenario)
    controller: str = "prof"
    update_every: int = 900
    direct: DirectConfig = field(default_factory=DirectConfig)
    replay: int = 86400
    share_inverter_weights: bool = False
    lp_reference: bool = False
    steps: Optional[int] = None
    start: int = 0  # first simulated step
    droop: DroopCurve = field(default_factory=DroopCurve)


def run_feeder(cfg: FeederRunConfig, setup: Optional[FeederSetup] = None, on_row=None,
               keep_records: bool = False):
    """Returns (RunResult, FeederTask, policy or None)."""
    if cfg.controller not in FEEDER_CONTROLLERS:
        raise ValueError(f"unknown feeder controller {cfg.controller!r}")
    setup = setup or prepare_feeder(cfg.scenario)
    task = FeederTask(setup.env, setup.builder, cfg.droop, lp_reference=cfg.lp_reference)
    seed = cfg.scenario.seed
    stop = None if cfg.steps is None else cfg.start + cfg.steps
    if cfg.controller == "voltvar":
        loop = LoopConfig(controller="baseline", start=cfg.start, stop=stop)
        return run_main_loop(task, cfg=loop, on_row=on_row), task, None
    policy = FeederPolicy(setup.feeder.n_bus, setup.feeder.pv_buses, setup.builder.s,
                          rng=_rng(seed, STREAM_POLICY),
                          share_inverter_weights=cfg.share_inverter_weights)
    trainer = DirectGradientTrainer(policy, task.direct_batch_fn(), cfg.direct)
    loop = LoopConfig(controller="policy", deterministic=True, update_every=cfg.update_every,
                      trainer_kind="direct", memory_capacity=cfg.replay, start=cfg.start,
                      stop=stop,
                      keep_records=keep_records)
    res = run_main_loop(task, policy, trainer, loop, rng=_rng(seed, STREAM_LOOP), on_row=on_row)
    return res, task, policy
