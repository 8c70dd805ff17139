"""Linear layers and two-layer perceptrons over :mod:`estag.autodiff` values."""

from __future__ import annotations

import math
from collections.abc import Mapping

import numpy as np

from . import autodiff as ad


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True):
    bound = math.sqrt(1.0 / fan_in) if fan_in > 0 else 0.0
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=(fan_out,)) if bias else None
    return w, b


def add_linear(store: dict, rng: np.random.Generator, prefix: str, fan_in: int, fan_out: int,
               bias: bool = True) -> None:
    w, b = init_linear(rng, fan_in, fan_out, bias)
    store[f"{prefix}.w"] = w
    if bias:
        store[f"{prefix}.b"] = b


def add_mlp(store: dict, rng: np.random.Generator, prefix: str, fan_in: int, hidden: int,
            fan_out: int) -> None:
    add_linear(store, rng, f"{prefix}.l1", fan_in, hidden)
    add_linear(store, rng, f"{prefix}.l2", hidden, fan_out)


def linear(x, P: Mapping, prefix: str) -> ad.Value:
    """``x @ W (+ b)`` on the last axis; leading axes are flattened for one matmul."""
    x = ad.lift(x)
    w = P[f"{prefix}.w"]
    fan_in, fan_out = np.shape(w.data if isinstance(w, ad.Value) else w)
    if x.shape[-1] != fan_in:
        raise ad.ShapeError(f"linear[{prefix}]", x.shape, (fan_in, fan_out))
    lead = x.shape[:-1]
    y = ad.matmul(ad.reshape(x, (-1, fan_in)), w)
    b = P.get(f"{prefix}.b")
    if b is not None:
        y = y + b
    return ad.reshape(y, lead + (fan_out,))


def mlp(x, P: Mapping, prefix: str) -> ad.Value:
    """Linear -> SiLU -> Linear."""
    return linear(ad.silu(linear(x, P, f"{prefix}.l1")), P, f"{prefix}.l2")
