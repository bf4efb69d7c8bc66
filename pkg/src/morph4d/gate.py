"""Turning transition probabilities into point visibility.

Training multiplies opacity by ``p``; inference draws a boolean mask. Random
numbers come from a stateless hash of ``(seed, object, point_id, frame)`` so
masks do not depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

TRAIN_OPACITY = "train_opacity"
BERNOULLI = "bernoulli"
THRESHOLD = "threshold"
MODES = (TRAIN_OPACITY, BERNOULLI, THRESHOLD)

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
# Sentinel frame index for threshold mode: its draws are frame-independent.
_NO_FRAME = 0xFFFFFFFF


@dataclass(frozen=True)
class GateMode:
    mode: str = THRESHOLD
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown gate mode {self.mode!r}; expected one of {MODES}")


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
        return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, point_ids, frame: int = _NO_FRAME, stream: int = 0) -> np.ndarray:
    """Uniform [0, 1) draws keyed by (seed, stream, point_id, frame)."""
    ids = np.asarray(point_ids, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        key = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
        key = _splitmix64(key ^ np.uint64(stream & 0xFFFFFFFF))
        key = _splitmix64(key ^ np.uint64(frame & 0xFFFFFFFF))
        z = _splitmix64(key ^ _splitmix64(ids))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def gate_train(opacity, p):
    """Effective opacity ``alpha * p``; differentiable in both when tensors."""
    if torch.is_tensor(opacity) or torch.is_tensor(p):
        opacity = torch.as_tensor(opacity)
        p = torch.as_tensor(p, dtype=opacity.dtype)
        if opacity.shape != p.shape:
            raise ValueError(f"arity mismatch: {tuple(opacity.shape)} opacities vs {tuple(p.shape)} probabilities")
        return opacity * p
    opacity = np.asarray(opacity, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if opacity.shape != p.shape:
        raise ValueError(f"arity mismatch: {opacity.shape} opacities vs {p.shape} probabilities")
    return opacity * p


def gate_infer(point_ids, p, mode: GateMode, frame: int, stream: int = 0) -> np.ndarray:
    """Boolean visibility mask; ``stream`` separates objects sharing ids.

    bernoulli: fresh draw per frame. threshold: one fixed draw per point, so
    a nondecreasing ``p`` never makes a point flicker.
    """
    p = np.asarray(p, dtype=np.float64)
    if mode.mode == BERNOULLI:
        u = counter_uniform(mode.seed, point_ids, frame, stream)
    elif mode.mode == THRESHOLD:
        u = counter_uniform(mode.seed, point_ids, _NO_FRAME, stream)
    else:
        raise ValueError("gate_infer needs bernoulli or threshold mode")
    return u < p
