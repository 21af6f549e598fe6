"""Communication cost surrogate and the fixed-precision STE baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import _check_delta

LN2 = math.log(2.0)


@dataclass(frozen=True)
class CommsCost:
    total: float
    per_dim: np.ndarray


def comms_cost_array(z, delta: float) -> np.ndarray:
    """Elementwise ``log2(2|z|/delta + 1)``."""
    # log1p keeps tiny nonzero signals strictly positive
    return np.log1p(2.0 * np.abs(np.asarray(z, dtype=np.float64)) / delta) / LN2


def comms_cost_grad_array(z, delta: float) -> np.ndarray:
    """Elementwise derivative; 0 at z = 0."""
    z = np.asarray(z, dtype=np.float64)
    return np.sign(z) * 2.0 / (LN2 * (2.0 * np.abs(z) + delta))


def comms_cost(z, delta: float) -> CommsCost:
    """Differentiable upper bound on expected ideal bits for one message."""
    delta = _check_delta(delta)
    per_dim = comms_cost_array(np.atleast_1d(z), delta)
    return CommsCost(math.fsum(per_dim), per_dim)


def comms_cost_grad(z, delta: float) -> np.ndarray:
    delta = _check_delta(delta)
    return comms_cost_grad_array(np.atleast_1d(z), delta)


SUPPORTED_BITS = (4, 8, 16)


def fake_quantize(tensor, bits: int) -> np.ndarray:
    """Quantize-dequantize with a per-tensor affine grid of ``2**bits`` levels.

    Mirrors the usual asymmetric min/max scheme: when min == max the range is
    widened by 0.01 on each side. Rounding is half-to-even.
    """
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"bit width must be one of {SUPPORTED_BITS}, got {bits}")
    x = np.asarray(tensor, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot fake-quantize an empty tensor")
    q_min = 0.0
    q_max = float(2**bits - 1)
    min_val = float(x.min())
    max_val = float(x.max())
    if min_val == max_val:
        min_val -= 0.01
        max_val += 0.01
    scale = (max_val - min_val) / (q_max - q_min)
    zero_point = np.rint(q_min - min_val / scale)
    clamped = np.clip(np.rint(x / scale + zero_point), q_min, q_max)
    return (clamped - zero_point) * scale


def fake_quantize_backward(upstream_grad):
    """Straight-through: gradient passes unchanged."""
    return upstream_grad
