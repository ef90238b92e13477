"""Tanh multilayer perceptrons and Adam with exponential learning-rate decay."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad

ParameterSet = dict  # name -> array (or Var while on a tape)

CHECKPOINT_FORMAT = "deepfbsde-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    in_width: int
    out_width: int
    hidden: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.hidden:
            object.__setattr__(self, "hidden", (30 + self.in_width, 30 + self.in_width))
        if len(self.hidden) != 2:
            raise ValueError("exactly two hidden layers are supported")
        if min(self.in_width, self.out_width, *self.hidden) < 1:
            raise ValueError("layer widths must be >= 1")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.in_width, *self.hidden, self.out_width)


def mlp_init(spec: MlpSpec, seed: int | np.random.Generator, dtype=np.float64) -> ParameterSet:
    """Uniform Glorot weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    widths = spec.widths
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"W{k}"] = rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype)
        params[f"b{k}"] = np.zeros(fan_out, dtype=dtype)
    return params


def mlp_apply(params: Mapping, x):
    """Batched forward pass ``x`` (batch x in) -> (batch x out)."""
    w1 = ad.value_of(params["W1"])
    if ad.value_of(x).shape[-1] != w1.shape[0]:
        raise ValueError(f"input width {ad.value_of(x).shape[-1]} does not match {w1.shape[0]}")
    h = ad.tanh(x @ params["W1"] + params["b1"])
    h = ad.tanh(h @ params["W2"] + params["b2"])
    return h @ params["W3"] + params["b3"]


def hidden_activations(params: Mapping, x) -> list[np.ndarray]:
    h1 = np.tanh(x @ params["W1"] + params["b1"])
    h2 = np.tanh(h1 @ params["W2"] + params["b2"])
    return [h1, h2]


@dataclass
class AdamState:
    """Moment accumulators plus the exponential-decay schedule.

    The learning rate at step ``k`` is ``lr0 * decay ** (k / horizon)``.
    """

    horizon: int
    lr0: float = 1e-2
    decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    k: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    diverged: bool = False

    def learning_rate(self, k: int | None = None) -> float:
        k = self.k if k is None else k
        return self.lr0 * self.decay ** (k / self.horizon)


def adam_step(state: AdamState, params: dict, grads: Mapping) -> bool:
    """One bias-corrected Adam update, in place.

    Returns False (and leaves everything untouched except the ``diverged``
    flag) if any gradient entry is not finite.
    """
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.diverged = True
        return False
    state.diverged = False
    lr = state.learning_rate()
    t = state.k + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.k += 1
    return True


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], seed: int | None, meta: Mapping | None = None) -> None:
    """Write parameters to a JSON container.

    Layout::

        {"format": "deepfbsde-checkpoint", "version": 1, "seed": ..., "dtype": ...,
         "meta": {...}, "tensors": {name: {"shape": [...], "data": [flat row-major]}}}
    """
    tensors = {}
    dtype = None
    for name, arr in params.items():
        arr = np.asarray(arr)
        dtype = dtype or str(arr.dtype)
        tensors[name] = {"shape": list(arr.shape), "data": arr.astype(np.float64).ravel().tolist()}
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": seed,
        "dtype": dtype or "float64",
        "meta": dict(meta or {}),
        "tensors": tensors,
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    dtype = np.dtype(doc["dtype"])
    params = {
        name: np.asarray(t["data"], dtype=np.float64).astype(dtype).reshape(t["shape"])
        for name, t in doc["tensors"].items()
    }
    info = {k: doc[k] for k in ("seed", "dtype", "meta", "version")}
    return params, info
