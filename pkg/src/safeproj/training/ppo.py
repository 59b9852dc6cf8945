"""Acting with the composed policy, PPO with a projection-aware surrogate,
and imitation pretraining.

Variants (how the projection enters learning):

``prof``
    The Gaussian is centred on P(mu_hat); log-probabilities and the
    auxiliary term ||P(mu_hat) - mu_hat||^2 are differentiated through the
    projection.
``clip``
    The Gaussian is centred on mu_hat and the projection is applied to the
    sample only when acting; in the update the projection is a constant, so
    the auxiliary term pulls mu_hat toward a fixed target.

Both variants execute (the first block of) P(sample).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .. import autodiff as ad
from ..qp import LinearConstraintSet, project, project_node
from .memory import RolloutRecord
from .nn import RMSprop
from .policies import SigmaSchedule, gaussian_logprob

logger = logging.getLogger(__name__)

VARIANTS = ("prof", "clip")


@dataclass
class ActResult:
    mu_hat: np.ndarray  # network output
    mu: np.ndarray  # P(mu_hat)
    sample: np.ndarray  # pre-projection action
    u: np.ndarray  # P(sample), the executed plan
    logprob: float
    sigma: float
    active: Optional[np.ndarray] = None


def _active_mask(sol, C: LinearConstraintSet) -> np.ndarray:
    if C.n_ineq == 0:
        return np.zeros(0, dtype=bool)
    return (sol.lambda_star > 1e-9) | (C.h - C.G @ sol.u_star < 1e-9)


def act(policy, obs, C: LinearConstraintSet, sigma: float, rng: np.random.Generator,
        variant: str = "prof", deterministic: bool = False, active_guess=None,
        explore_dims: Optional[int] = None) -> ActResult:
    """Run the composed policy once.

    With ``deterministic`` the executed plan is P(mu_hat) and no noise is
    drawn.  ``explore_dims`` limits the noise (and the log-density) to the
    leading action entries; the rest of the sample equals its centre.
    ``active_guess`` warm-starts the projection.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    with ad.no_grad():
        mu_hat = policy.mean(np.asarray(obs)[None]).value[0]
    sol = project(mu_hat, C, active_guess=active_guess)
    mu = sol.u_star
    if deterministic:
        return ActResult(mu_hat, mu, mu_hat.copy(), mu, 0.0, 0.0, _active_mask(sol, C))
    scale = np.broadcast_to(policy.action_scale, mu.shape)
    center = mu if variant == "prof" else mu_hat
    d = mu.shape[0] if explore_dims is None else min(int(explore_dims), mu.shape[0])
    sample = center.copy()
    sample[:d] += sigma * scale[:d] * rng.standard_normal(d)
    sol_s = project(sample, C, active_guess=_active_mask(sol, C))
    lp = float(gaussian_logprob(sample[:d], center[:d], sigma, scale[:d]))
    return ActResult(mu_hat, mu, sample, sol_s.u_star, lp, sigma, _active_mask(sol_s, C))


# ------------------------------------------------------------------- PPO

@dataclass
class PPOConfig:
    gamma: float = 0.9
    gae_lambda: float = 0.95
    eps: float = 0.2
    lr: float = 5e-4
    critic_lr: float = 5e-4
    epochs: int = 8
    batch: int = 32
    lambda_aux: float = 10.0
    variant: str = "prof"
    explore_dims: Optional[int] = None
    cost_offset: float = 0.0
    cost_scale: float = 1.0
    normalize_advantages: bool = True
    max_grad_norm: Optional[float] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 0 < self.gamma <= 1 or not 0 <= self.gae_lambda <= 1:
            raise ValueError("gamma must be in (0, 1] and gae_lambda in [0, 1]")
        if self.eps <= 0 or self.lr <= 0 or self.epochs < 1 or self.batch < 1:
            raise ValueError("eps, lr, epochs and batch must be positive")
        if self.lambda_aux < 0:
            raise ValueError("lambda_aux must be nonnegative")


def gae(rewards, values, bootstrap: float, gamma: float, lam: float):
    """Generalized advantage estimates and value targets for one continuing segment."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n = rewards.shape[0]
    adv = np.zeros(n)
    nxt_v, run = float(bootstrap), 0.0
    for t in range(n - 1, -1, -1):
        delta = rewards[t] + gamma * nxt_v - values[t]
        run = delta + gamma * lam * run
        adv[t] = run
        nxt_v = values[t]
    return adv, adv + values


def _pmin(a: ad.Node, b: ad.Node) -> ad.Node:
    return ad.sub(a, ad.relu(ad.sub(a, b)))


def ppo_loss(policy, obs, sets, samples, logp_old, sigmas, adv, cfg: PPOConfig):
    """Clipped surrogate plus auxiliary term on one minibatch; returns (loss, info)."""
    B = len(sets)
    mu_hat = policy.mean(obs)
    n = mu_hat.shape[1]
    scale = np.broadcast_to(np.asarray(policy.action_scale, dtype=np.float64), (B, n))
    proj = project_node(mu_hat, list(sets))
    if cfg.variant == "prof":
        center, target = proj, proj
    else:
        center, target = mu_hat, ad.constant(proj.value)
    d = n if cfg.explore_dims is None else min(int(cfg.explore_dims), n)
    if d < n:
        center = ad.slice(center, (slice(None), slice(0, d)))
    sig = np.asarray(sigmas, dtype=np.float64).reshape(B, 1)
    inv = 1.0 / (scale[:, :d] * sig)
    z = ad.mul(ad.sub(ad.constant(np.asarray(samples)[:, :d]), center), inv)
    logp = ad.sub(ad.mul(ad.sum(ad.square(z), axis=1), -0.5),
                  (d * np.log(sig[:, 0]) + 0.5 * d * np.log(2 * np.pi)))
    log_ratio = ad.clip(ad.sub(logp, np.asarray(logp_old, dtype=np.float64)), -20.0, 20.0)
    ratio = ad.exp(log_ratio)
    A = np.asarray(adv, dtype=np.float64)
    s1 = ad.mul(ratio, A)
    s2 = ad.mul(ad.clip(ratio, 1.0 - cfg.eps, 1.0 + cfg.eps), A)
    surrogate = ad.neg(ad.mean(_pmin(s1, s2)))
    aux = ad.mean(ad.sum(ad.square(ad.div(ad.sub(target, mu_hat), scale)), axis=1))
    loss = ad.add(surrogate, ad.mul(aux, cfg.lambda_aux))
    info = {"surrogate": float(surrogate.value), "aux": float(aux.value),
            "ratio_mean": float(np.mean(ratio.value))}
    return loss, info


class PPOTrainer:
    """PPO over a segment of consecutive records.

    Records need ``obs``, ``C``, ``u_pre`` (the sample), ``logprob``, ``cost``
    and ``extra['sigma']``.
    """

    def __init__(self, policy, critic, cfg: PPOConfig = None, rng=None,
                 sigma_schedule: Optional[SigmaSchedule] = None):
        self.policy = policy
        self.critic = critic
        self.cfg = cfg or PPOConfig()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.opt = RMSprop(policy.params, lr=self.cfg.lr, max_grad_norm=self.cfg.max_grad_norm)
        self.critic_opt = RMSprop(critic.params, lr=self.cfg.critic_lr) if critic is not None else None
        self.sigma_schedule = sigma_schedule
        self.history: List[dict] = []
        self.skipped = 0

    def _rewards(self, records):
        c = np.array([r.cost for r in records], dtype=np.float64)
        return -(c - self.cfg.cost_offset) / self.cfg.cost_scale

    def update(self, records: Sequence[RolloutRecord], bootstrap_obs=None) -> dict:
        cfg = self.cfg
        records = list(records)
        n = len(records)
        if n == 0:
            raise ValueError("no records to learn from")
        obs = np.stack([r.obs for r in records])
        rewards = self._rewards(records)
        if self.critic is not None:
            with ad.no_grad():
                values = self.critic(obs).value.copy()
                boot = (float(self.critic(np.asarray(bootstrap_obs)[None]).value[0])
                        if bootstrap_obs is not None else float(values[-1]))
        else:
            values, boot = np.zeros(n), 0.0
        adv, returns = gae(rewards, values, boot, cfg.gamma, cfg.gae_lambda)
        if cfg.normalize_advantages and n > 1 and np.std(adv) > 0:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        samples = np.stack([r.u_pre for r in records])
        logp_old = np.array([r.logprob for r in records])
        sigmas = np.array([r.extra.get("sigma", 0.1) for r in records])
        sets = [r.C for r in records]
        stats = {"surrogate": [], "aux": [], "critic": []}
        for _ in range(cfg.epochs):
            perm = self.rng.permutation(n)
            for lo in range(0, n, cfg.batch):
                idx = perm[lo:lo + cfg.batch]
                self.opt.zero_grad()
                loss, info = ppo_loss(self.policy, obs[idx], [sets[i] for i in idx], samples[idx],
                                      logp_old[idx], sigmas[idx], adv[idx], cfg)
                if not np.isfinite(loss.value).all():
                    self._skip("non-finite PPO loss")
                    continue
                ad.backward(loss)
                if not self.opt.step():
                    self._skip("non-finite PPO gradient")
                    continue
                stats["surrogate"].append(info["surrogate"])
                stats["aux"].append(info["aux"])
                if self.critic is not None:
                    self.critic_opt.zero_grad()
                    v = self.critic(obs[idx])
                    closs = ad.mean(ad.square(ad.sub(v, returns[idx])))
                    ad.backward(closs)
                    self.critic_opt.step()
                    stats["critic"].append(float(closs.value))
        summary = {k: float(np.mean(v)) if v else float("nan") for k, v in stats.items()}
        summary["n"] = n
        self.history.append(summary)
        return summary

    def _skip(self, why: str):
        self.skipped += 1
        logger.warning("%s; update skipped", why)
        if self.sigma_schedule is not None:
            self.sigma_schedule.raise_floor(self.sigma_schedule.end * 2)


# --------------------------------------------------------------- imitation

def imitate(policy, inputs, targets, epochs: int = 20, lr: float = 1e-3, batch: int = 64,
            rng=None) -> List[float]:
    """Behaviour cloning: MSE between the policy mean and expert plans.

    ``inputs`` (N, ...) are policy observations, ``targets`` (N, d) expert
    actions in physical units; the loss is measured in normalized units.
    Returns the mean loss of each epoch.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = inputs.shape[0]
    if targets.shape[0] != n:
        raise ValueError("inputs and targets disagree on the number of samples")
    opt = RMSprop(policy.params, lr=lr)
    scale = np.asarray(policy.action_scale, dtype=np.float64)
    history = []
    for ep in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch):
            idx = perm[lo:lo + batch]
            opt.zero_grad()
            mu = policy.mean(inputs[idx])
            sc = np.broadcast_to(scale, mu.shape)
            loss = ad.mean(ad.square(ad.div(ad.sub(mu, targets[idx]), sc)))
            ad.backward(loss)
            if not opt.step():
                logger.warning("imitation diverged at epoch %d", ep)
            total += float(loss.value) * len(idx)
        history.append(total / n)
        logger.info("imitation epoch %d: loss %.6f", ep, history[-1])
    return history
