"""Network building blocks on top of :mod:`safeproj.autodiff`.

Parameters live in ordered dicts of named leaf nodes so that checkpoints
have a stable layout.  All layers take row-major batches (B, features).
"""

from __future__ import annotations

import json
import logging
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .. import autodiff as ad

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "safeproj-checkpoint"
CHECKPOINT_VERSION = 1


class Module:
    """Anything owning named parameters."""

    def named_parameters(self) -> Dict[str, ad.Node]:
        raise NotImplementedError

    @property
    def params(self) -> List[ad.Node]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        named = self.named_parameters()
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, node in named.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != node.value.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match {node.value.shape}")
            node.value = arr.copy()

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))


def uniform_init(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng, name: str = "dense"):
        self.name = name
        self.W = ad.parameter(uniform_init(rng, n_in, (n_in, n_out)))
        self.b = ad.parameter(uniform_init(rng, n_in, (n_out,)))

    def named_parameters(self):
        return {f"{self.name}.W": self.W, f"{self.name}.b": self.b}

    def __call__(self, x):
        return ad.linear(x, self.W, self.b)


class MLP(Module):
    """Dense layers with ReLU between them; the last layer is affine."""

    def __init__(self, sizes: Sequence[int], rng, name: str = "mlp", final_activation=None):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = list(sizes)
        self.layers = [Dense(a, b, rng, f"{name}.{i}") for i, (a, b) in enumerate(zip(sizes, sizes[1:]))]
        self.final_activation = final_activation

    def named_parameters(self):
        out = {}
        for layer in self.layers:
            out.update(layer.named_parameters())
        return out

    def __call__(self, x):
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ad.relu(h)
        if self.final_activation is not None:
            h = self.final_activation(h)
        return h


class LSTM(Module):
    """Single-layer LSTM assembled from sigmoid/tanh primitives.

    Gate order in the fused weight is (input, forget, cell, output).  The
    forget-gate bias starts at 1.
    """

    def __init__(self, n_in: int, n_hidden: int, rng, name: str = "lstm"):
        self.name = name
        self.n_in, self.n_hidden = n_in, n_hidden
        H = n_hidden
        self.W = ad.parameter(uniform_init(rng, H, (n_in + H, 4 * H)))
        b = uniform_init(rng, H, (4 * H,))
        b[H:2 * H] += 1.0
        self.b = ad.parameter(b)

    def named_parameters(self):
        return {f"{self.name}.W": self.W, f"{self.name}.b": self.b}

    def __call__(self, seq) -> List[ad.Node]:
        """Hidden states for every position of ``seq`` (B, L, n_in); state starts at zero."""
        seq = np.asarray(seq.value if isinstance(seq, ad.Node) else seq, dtype=np.float64)
        if seq.ndim != 3 or seq.shape[2] != self.n_in:
            raise ad.ShapeError("lstm", seq.shape, (None, None, self.n_in))
        B, L, _ = seq.shape
        H = self.n_hidden
        h = ad.constant(np.zeros((B, H)))
        c = ad.constant(np.zeros((B, H)))
        outs = []
        for t in range(L):
            z = ad.linear(ad.concat([ad.constant(seq[:, t, :]), h], axis=1), self.W, self.b)
            i = ad.sigmoid(ad.slice(z, (slice(None), slice(0, H))))
            f = ad.sigmoid(ad.slice(z, (slice(None), slice(H, 2 * H))))
            g = ad.tanh(ad.slice(z, (slice(None), slice(2 * H, 3 * H))))
            o = ad.sigmoid(ad.slice(z, (slice(None), slice(3 * H, 4 * H))))
            c = f * c + i * g
            h = o * ad.tanh(c)
            outs.append(h)
        return outs


class RMSprop:
    """Root-mean-square gradient scaling, no momentum."""

    def __init__(self, params: Iterable[ad.Node], lr: float = 1e-3, alpha: float = 0.99,
                 eps: float = 1e-8, max_grad_norm: float = None):
        self.params = list(params)
        self.lr, self.alpha, self.eps = lr, alpha, eps
        self.max_grad_norm = max_grad_norm
        self.sq = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in self.params)))

    def step(self) -> bool:
        """Apply one update; returns False (and skips) on non-finite gradients."""
        if not all(np.all(np.isfinite(p.grad)) for p in self.params):
            logger.warning("non-finite gradient; update skipped")
            return False
        scale = 1.0
        if self.max_grad_norm is not None:
            norm = self.grad_norm()
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / norm
        for p, sq in zip(self.params, self.sq):
            g = p.grad * scale
            sq *= self.alpha
            sq += (1.0 - self.alpha) * g * g
            p.value = p.value - self.lr * g / (np.sqrt(sq) + self.eps)
        return True


# ------------------------------------------------------------- checkpoints

def checkpoint_text(state: Dict[str, np.ndarray], meta: dict = None) -> str:
    """Deterministic JSON text: shape manifest plus flat row-major values.

    Floats are written with Python's shortest round-trip repr, so
    load -> save reproduces the same bytes.
    """
    names = sorted(state)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "manifest": [{"name": n, "shape": list(np.shape(state[n]))} for n in names],
        "values": {n: [float(v) for v in np.asarray(state[n], dtype=np.float64).reshape(-1)]
                   for n in names},
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def save_checkpoint(path, state: Dict[str, np.ndarray], meta: dict = None) -> None:
    with open(path, "w") as fh:
        fh.write(checkpoint_text(state, meta))


def parse_checkpoint(text: str):
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a safeproj checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    state = {}
    for entry in doc["manifest"]:
        vals = np.array(doc["values"][entry["name"]], dtype=np.float64)
        shape = tuple(entry["shape"])
        if vals.size != int(np.prod(shape)):
            raise ValueError(f"{entry['name']}: {vals.size} values for shape {shape}")
        state[entry["name"]] = vals.reshape(shape)
    return state, doc.get("meta", {})


def load_checkpoint(path):
    with open(path) as fh:
        return parse_checkpoint(fh.read())
