"""Stochastic quantization channel with shared-noise reconstruction.

Sender: ``z' = z + eps``, ``m = floor(z' / delta)``.
Receiver: ``z_hat = (m + 1/2) * delta - eps`` with ``eps`` re-derived from the
same :class:`~ddcl.rng.NoiseKey`. The end-to-end effect is ``z_hat = z + e``
with ``e ~ U[-delta/2, delta/2)`` independent of ``z``, so the backward rule
is the identity.

The rounding convention ``m = floor(z'/delta + 1/2)``, ``z_hat = m*delta - eps``
is available as ``convention="round"``; it is the same quantizer shifted by
half a bin and sends ``m = 0`` deterministically for ``z = 0``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .rng import NoiseKey, _check_delta, noise_vector

FLOOR = "floor"
ROUND = "round"
CONVENTIONS = (FLOOR, ROUND)

# Test hook: forcing eps per dim is only honoured in debug mode.
DEBUG = os.environ.get("DDCL_DEBUG", "") not in ("", "0")


class SignalRangeError(OverflowError):
    """|m| would exceed 2**31 - 1."""


@dataclass(frozen=True)
class DiscreteMessage:
    ints: tuple[int, ...]
    ideal_bits: float
    encoded_bits: int

    @classmethod
    def from_ints(cls, ints) -> "DiscreteMessage":
        ints = tuple(int(m) for m in ints)
        ideal = math.fsum(codec.ideal_bit_length(m) for m in ints)
        encoded = sum(codec.encoded_length(m) for m in ints)
        return cls(ints, ideal, encoded)

    @property
    def d(self) -> int:
        return len(self.ints)


@dataclass(frozen=True)
class Reconstruction:
    values: np.ndarray
    error: np.ndarray | None = field(default=None)


def _as_signal(z) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    if z.ndim != 1:
        raise ValueError(f"signal must be a vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("signal contains non-finite values")
    return z


def _noise(key_base: NoiseKey, d: int, delta: float, forced_noise) -> np.ndarray:
    if forced_noise is None:
        return noise_vector(key_base, d, delta)
    if not DEBUG:
        raise RuntimeError("forced_noise requires debug mode (DDCL_DEBUG=1)")
    eps = np.broadcast_to(np.asarray(forced_noise, dtype=np.float64), (d,)).copy()
    if np.any(eps < -delta / 2) or np.any(eps >= delta / 2):
        raise ValueError("forced noise must lie in [-delta/2, delta/2)")
    return eps


def _check_convention(convention: str) -> None:
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown bin convention {convention!r}")


def quantize_array(z: np.ndarray, eps: np.ndarray, delta: float, convention: str = FLOOR) -> np.ndarray:
    """Integer messages for arrays of signals and matching noise (any shape)."""
    scaled = (z + eps) / delta
    if convention == ROUND:
        scaled = scaled + 0.5
    m = np.floor(scaled)
    if np.any(np.abs(m) > codec.MAX_MAGNITUDE):
        raise SignalRangeError("signal magnitude out of supported range (|m| > 2**31 - 1)")
    return m.astype(np.int64)


def reconstruct_array(m: np.ndarray, eps: np.ndarray, delta: float, convention: str = FLOOR) -> np.ndarray:
    offset = 0.5 if convention == FLOOR else 0.0
    return (m + offset) * delta - eps


def quantize(z, key_base: NoiseKey, delta: float, *, convention: str = FLOOR,
             forced_noise=None) -> DiscreteMessage:
    delta = _check_delta(delta)
    _check_convention(convention)
    z = _as_signal(z)
    eps = _noise(key_base, z.size, delta, forced_noise)
    return DiscreteMessage.from_ints(quantize_array(z, eps, delta, convention))


def reconstruct(message: DiscreteMessage, key_base: NoiseKey, delta: float, *, z=None,
                convention: str = FLOOR, forced_noise=None) -> Reconstruction:
    """Receiver side. Passing the original ``z`` fills in ``error`` (debug use)."""
    delta = _check_delta(delta)
    _check_convention(convention)
    m = np.asarray(message.ints, dtype=np.float64)
    eps = _noise(key_base, m.size, delta, forced_noise)
    values = reconstruct_array(m, eps, delta, convention)
    error = None if z is None else values - _as_signal(z)
    return Reconstruction(values, error)


def channel_forward(z, key_base: NoiseKey, delta: float, *, convention: str = FLOOR,
                    forced_noise=None, debug: bool = False) -> tuple[DiscreteMessage, Reconstruction]:
    z = _as_signal(z)
    message = quantize(z, key_base, delta, convention=convention, forced_noise=forced_noise)
    recon = reconstruct(message, key_base, delta, z=z if debug else None,
                        convention=convention, forced_noise=forced_noise)
    return message, recon


def grad_passthrough(upstream_grad):
    """Backward rule of the channel: d z_hat / d z is the identity."""
    return upstream_grad
