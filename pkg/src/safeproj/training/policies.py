"""Neural policies and the Gaussian exploration head.

Two architectures:

* :class:`LSTMPolicy` reads a normalized sequence of H history positions
  followed by T forecast positions and emits a T-step supply-temperature
  plan from the hidden states at the forecast positions.
* :class:`FeederPolicy` stacks a utility-level MLP over the global
  observation with one small MLP per inverter that sees the broadcast
  embedding plus its local (v, load, p_av).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..envs.traces import hour_of_day
from .nn import LSTM, MLP, Dense, Module, uniform_init

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))


# ------------------------------------------------------------ normalization

@dataclass
class MinMax:
    lo: float
    hi: float

    def norm(self, x):
        return (np.asarray(x, dtype=np.float64) - self.lo) / (self.hi - self.lo)

    def denorm(self, z):
        return self.lo + (self.hi - self.lo) * np.asarray(z, dtype=np.float64)

    @property
    def scale(self) -> float:
        return self.hi - self.lo


def _guard(z: np.ndarray, what: str) -> np.ndarray:
    if np.any(z < -0.1) or np.any(z > 1.1):
        logger.warning("normalized %s outside [-0.1, 1.1] (range %.3f..%.3f); clamped",
                       what, float(np.min(z)), float(np.max(z)))
        z = np.clip(z, -0.1, 1.1)
    return z


@dataclass
class BuildingNormalizer:
    x: MinMax = None
    t_out: MinMax = None
    solar: MinMax = None
    u: MinMax = None

    def __post_init__(self):
        self.x = self.x or MinMax(10.0, 30.0)
        self.t_out = self.t_out or MinMax(-25.0, 20.0)
        self.solar = self.solar or MinMax(0.0, 800.0)
        self.u = self.u or MinMax(20.0, 65.0)


N_BUILDING_FEATURES = 7


def building_sequence(x_hist, w_hist, w_hat, stamps_hist, stamps_fut,
                      normalizer: BuildingNormalizer) -> np.ndarray:
    """One policy input of shape (H + T, 7).

    Per position: (x, t_out, solar, occ, sin hour, cos hour, forecast flag).
    Forecast positions carry x = 0 and flag 1.
    """
    nz = normalizer
    x_hist = np.asarray(x_hist, dtype=np.float64).reshape(-1)
    w_hist = np.asarray(w_hist, dtype=np.float64).reshape(-1, 3)
    w_hat = np.asarray(w_hat, dtype=np.float64).reshape(-1, 3)

    def block(x, w, stamps, flag):
        hrs = hour_of_day(np.asarray(stamps, dtype="datetime64[s]"))
        ang = 2 * np.pi * hrs / 24.0
        return np.column_stack([
            x, nz.t_out.norm(w[:, 0]), nz.solar.norm(w[:, 1]), w[:, 2],
            0.5 + 0.5 * np.sin(ang), 0.5 + 0.5 * np.cos(ang), np.full(len(x), flag)])

    hist = block(_guard(nz.x.norm(x_hist), "zone temperature"), w_hist, stamps_hist, 0.0)
    fut = block(np.zeros(len(w_hat)), w_hat, stamps_fut, 1.0)
    seq = np.vstack([hist, fut])
    seq[:, 1:3] = _guard(seq[:, 1:3], "disturbance")
    return seq


class LSTMPolicy(Module):
    """Recurrent planner: normalized sequence -> T-step plan.

    ``mean(obs)`` returns the plan in physical units (deg C), which is what
    the projection layer consumes.
    """

    def __init__(self, T: int, H: int = 4, hidden: int = 32, rng=None,
                 normalizer: BuildingNormalizer = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.T, self.H, self.hidden = T, H, hidden
        self.normalizer = normalizer or BuildingNormalizer()
        self.lstm = LSTM(N_BUILDING_FEATURES, hidden, rng, "lstm")
        self.head = Dense(hidden, 1, rng, "head")

    def named_parameters(self):
        out = dict(self.lstm.named_parameters())
        out.update(self.head.named_parameters())
        return out

    @property
    def action_scale(self) -> float:
        return self.normalizer.u.scale

    def forward_normalized(self, obs) -> ad.Node:
        """Plan in normalized action units, shape (B, T)."""
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim == 2:
            obs = obs[None]
        if obs.shape[1] != self.H + self.T:
            raise ad.ContractError(f"sequence length {obs.shape[1]} != H + T = {self.H + self.T}")
        B = obs.shape[0]
        hs = self.lstm(obs)[self.H:]
        Hs = ad.reshape(ad.stack(hs, axis=0), (self.T * B, self.hidden))
        z = ad.reshape(self.head(Hs), (self.T, B))
        return ad.transpose(z)

    def mean(self, obs) -> ad.Node:
        u = self.normalizer.u
        return ad.add(ad.mul(self.forward_normalized(obs), u.scale), u.lo)


class Critic(Module):
    """State-value MLP on the flattened policy input."""

    def __init__(self, n_in: int, hidden: Sequence[int] = (64, 64), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in = n_in
        self.net = MLP([n_in, *hidden, 1], rng, "critic")

    def named_parameters(self):
        return self.net.named_parameters()

    def __call__(self, obs) -> ad.Node:
        X = np.asarray(obs, dtype=np.float64).reshape(-1, self.n_in)
        return ad.reshape(self.net(X), (X.shape[0],))


# -------------------------------------------------------------------- feeder

@dataclass
class FeederNormalizer:
    v_center: float = 1.0
    v_halfwidth: float = 0.05
    load_scale: float = 0.006
    p_scale: float = 0.021


class FeederPolicy(Module):
    """Utility-level MLP plus one inverter-level MLP per inverter.

    Observation (dict or array rows): previous-step voltages, active loads and
    available PV at all N buses.  Output (B, 2 * n_inv) interleaved
    (p_1, q_1, p_2, q_2, ...) in p.u., each inverter's outputs scaled by its
    rating s_i.  With ``p_residual`` the active output is relative to the
    inverter's own available power, p_i = p_av,i + s_i * out_p.
    ``output_bias`` initializes the last layer's (p, q) bias in units of s.
    """

    def __init__(self, n_bus: int, pv_buses: Sequence[int], s_rating, rng=None,
                 utility_hidden: Sequence[int] = (256, 128, 64), inverter_hidden: Sequence[int] = (16, 4),
                 share_inverter_weights: bool = False, normalizer: FeederNormalizer = None,
                 p_residual: bool = True, output_bias=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_bus = n_bus
        self.pv_buses = np.asarray(pv_buses, dtype=np.int64)
        self.n_inv = len(self.pv_buses)
        self.s = np.asarray(s_rating, dtype=np.float64).reshape(self.n_inv)
        self.normalizer = normalizer or FeederNormalizer(p_scale=float(np.max(self.s)))
        self.share = share_inverter_weights
        self.p_residual = p_residual
        self.utility = MLP([3 * n_bus, *utility_hidden], rng, "utility")
        self.embed_dim = utility_hidden[-1]
        sizes = [self.embed_dim + 3, *inverter_hidden, 2]
        G = 1 if self.share else self.n_inv
        self.inv_W, self.inv_b = [], []
        for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
            self.inv_W.append(ad.parameter(uniform_init(rng, a, (G, a, b))))
            self.inv_b.append(ad.parameter(uniform_init(rng, a, (G, b))))
        if output_bias is None:
            # start from full available (or rated) active power and no
            # reactive power; the projection then curtails only where the
            # voltage rows bind
            output_bias = (0.05, 0.0) if p_residual else (1.0, 0.0)
        self.inv_b[-1].value[:] = np.asarray(output_bias, dtype=np.float64)
        if p_residual:
            # small last layer so the untrained heads stay near the bias
            self.inv_W[-1].value *= 0.1

    def named_parameters(self):
        out = dict(self.utility.named_parameters())
        for i, (W, b) in enumerate(zip(self.inv_W, self.inv_b)):
            out[f"inverter.{i}.W"] = W
            out[f"inverter.{i}.b"] = b
        return out

    @property
    def action_scale(self) -> np.ndarray:
        return np.repeat(self.s, 2)

    def features(self, obs) -> np.ndarray:
        """Normalized global observation rows, shape (B, 3N)."""
        nz = self.normalizer
        if isinstance(obs, dict):
            obs = np.concatenate([obs["v"], obs["load"], obs["p_av"]])[None]
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim == 1:
            obs = obs[None]
        if obs.shape[1] != 3 * self.n_bus:
            raise ad.ContractError(f"observation width {obs.shape[1]} != 3 * n_bus = {3 * self.n_bus}")
        N = self.n_bus
        return np.hstack([(obs[:, :N] - nz.v_center) / nz.v_halfwidth,
                          obs[:, N:2 * N] / nz.load_scale,
                          obs[:, 2 * N:] / nz.p_scale])

    def inverter_stage(self, emb: ad.Node, local: np.ndarray) -> ad.Node:
        """Per-inverter heads: emb (B, E), local (n_inv, B, 3) -> (n_inv, B, 2) in units of s."""
        G = self.n_inv
        local = np.asarray(local, dtype=np.float64)
        if local.shape[0] != G or local.shape[2] != 3:
            raise ad.ContractError(f"local observations {local.shape} do not match {G} inverters")
        x = ad.concat([ad.stack([emb] * G, axis=0), ad.constant(local)], axis=2)
        n_layers = len(self.inv_W)
        for i, (W, b) in enumerate(zip(self.inv_W, self.inv_b)):
            if self.share:
                W = ad.stack([ad.reshape(W, W.shape[1:])] * G, axis=0)
                b = ad.stack([ad.reshape(b, b.shape[1:])] * G, axis=0)
            x = ad.grouped_linear(x, W, b)
            if i < n_layers - 1:
                x = ad.relu(x)
        return x

    def mean(self, obs) -> ad.Node:
        X = self.features(obs)
        B = X.shape[0]
        emb = ad.relu(self.utility(X))
        N, idx = self.n_bus, self.pv_buses
        local = np.stack([X[:, idx], X[:, N + idx], X[:, 2 * N + idx]], axis=2)  # (B, G, 3)
        out = self.inverter_stage(emb, local.transpose(1, 0, 2))  # (G, B, 2)
        flat = ad.reshape(ad.transpose(out, (1, 0, 2)), (B, 2 * self.n_inv))
        u = ad.mul(flat, np.broadcast_to(self.action_scale, (B, 2 * self.n_inv)).copy())
        if not self.p_residual:
            return u
        offset = np.zeros((B, 2 * self.n_inv))
        offset[:, 0::2] = X[:, 2 * N + idx] * self.normalizer.p_scale
        return ad.add(u, offset)


# ---------------------------------------------------------------- Gaussian

@dataclass
class GaussianPolicyOutput:
    mu: np.ndarray
    sigma: float
    sample: np.ndarray


def gaussian_logprob(sample, mean, sigma: float, scale) -> np.ndarray:
    """Log density of rows of ``sample`` under N(mean, (sigma * scale)^2 I).

    ``scale`` maps normalized to physical units; densities are taken in the
    normalized coordinates.
    """
    z = (np.asarray(sample) - np.asarray(mean)) / (np.asarray(scale) * sigma)
    d = z.shape[-1]
    return -0.5 * np.sum(z * z, axis=-1) - d * np.log(sigma) - 0.5 * d * LOG_2PI


def gaussian_logprob_node(sample: np.ndarray, mean: ad.Node, sigma: float, scale) -> ad.Node:
    B, d = mean.shape
    inv = np.broadcast_to(1.0 / (np.asarray(scale, dtype=np.float64) * sigma), (B, d)).copy()
    z = ad.mul(ad.sub(ad.constant(sample), mean), inv)
    return ad.sub(ad.mul(ad.sum(ad.square(z), axis=1), -0.5),
                  d * np.log(sigma) + 0.5 * d * LOG_2PI)


@dataclass
class SigmaSchedule:
    """Linear anneal from ``start`` to ``end`` over ``span`` steps, then flat."""

    start: float = 0.1
    end: float = 0.01
    span: int = 2880
    floor: float = 0.0

    def __call__(self, step: int) -> float:
        frac = min(max(step / max(self.span, 1), 0.0), 1.0)
        return max(self.start + (self.end - self.start) * frac, self.floor)

    def raise_floor(self, value: float):
        self.floor = max(self.floor, value)
