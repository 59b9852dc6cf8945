"""Direct policy gradient through the projection for the inverter problem.

The objective is evaluated on projected actions, so the gradient reaching
the network is J_P' dJ/du plus the auxiliary term's.  The default objective
is curtailment in units of each inverter's rating: sum_i (p_av,i - p_i) / s_i.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .. import autodiff as ad
from ..qp import project_node
from .nn import RMSprop

logger = logging.getLogger(__name__)


@dataclass
class DirectConfig:
    lr: float = 1e-3
    batches: int = 16
    batch: int = 64
    lambda_aux: float = 10.0

    def __post_init__(self):
        if self.lr <= 0 or self.batches < 1 or self.batch < 1 or self.lambda_aux < 0:
            raise ValueError("lr, batches and batch must be positive and lambda_aux >= 0")


def curtailment_objective(u: ad.Node, p_av: np.ndarray, s: np.ndarray) -> ad.Node:
    """Mean over the batch of sum_i (p_av,i - p_i) / s_i."""
    p = ad.slice(u, (slice(None), slice(0, None, 2)))
    inv_s = np.broadcast_to(1.0 / s, p.shape).copy()
    return ad.mean(ad.sum(ad.mul(ad.sub(p_av, p), inv_s), axis=1))


class DirectGradientTrainer:
    """Samples minibatches from a replay memory and descends the projected objective.

    ``batch_fn(records)`` returns (obs (B, ...), sets, p_av (B, n_inv)).
    ``objective(u, p_av, records)`` may replace the curtailment objective.
    """

    def __init__(self, policy, batch_fn: Callable, cfg: DirectConfig = None,
                 objective: Optional[Callable] = None):
        self.policy = policy
        self.batch_fn = batch_fn
        self.cfg = cfg or DirectConfig()
        self.objective = objective
        self.opt = RMSprop(policy.params, lr=self.cfg.lr)
        self.history: List[dict] = []
        self.skipped = 0

    def loss(self, records):
        obs, sets, p_av = self.batch_fn(records)
        u_hat = self.policy.mean(obs)
        u = project_node(u_hat, list(sets))
        scale = np.broadcast_to(np.asarray(self.policy.action_scale, dtype=np.float64), u.shape).copy()
        if self.objective is not None:
            main = self.objective(u, p_av, records)
        else:
            main = curtailment_objective(u, np.asarray(p_av), np.asarray(self.policy.s))
        aux = ad.mean(ad.sum(ad.square(ad.div(ad.sub(u, u_hat), scale)), axis=1))
        return ad.add(main, ad.mul(aux, self.cfg.lambda_aux)), float(main.value), float(aux.value)

    def step(self, records) -> Optional[float]:
        self.opt.zero_grad()
        loss, main, aux = self.loss(records)
        if not np.isfinite(loss.value).all():
            self.skipped += 1
            logger.warning("non-finite direct-gradient loss; update skipped")
            return None
        ad.backward(loss)
        if not self.opt.step():
            self.skipped += 1
            return None
        return main

    def update(self, memory) -> dict:
        mains = []
        for _ in range(self.cfg.batches):
            m = self.step(memory.sample(self.cfg.batch))
            if m is not None:
                mains.append(m)
        summary = {"objective": float(np.mean(mains)) if mains else float("nan"), "n": len(memory)}
        self.history.append(summary)
        return summary
