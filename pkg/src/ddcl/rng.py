"""Counter-based shared noise.

Sender and receiver evaluate the dither at arbitrary (seed, edge, timestep,
dim) coordinates without exchanging state. The construction is documented
bit-for-bit in ``docs/noise.md``:

    h = mix64(seed ^ SEED_SALT)
    h = mix64(h ^ ((edge_id << 32) | timestep))
    h = mix64(h ^ dim)
    u = (h >> 11) * 2**-53            # in [0, 1)
    eps = delta * (u - 0.5)           # in [-delta/2, delta/2)

``mix64`` is the SplitMix64 finalizer (increment by the golden gamma, then
two xor-shift-multiply rounds and a final xor-shift).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_MUL1 = 0xBF58476D1CE4E5B9
MIX_MUL2 = 0x94D049BB133111EB
SEED_SALT = 0x243F6A8885A308D3

_U32_MAX = (1 << 32) - 1


@dataclass(frozen=True)
class NoiseKey:
    """Coordinates of one noise value."""

    seed: int
    edge_id: int = 0
    timestep: int = 0
    dim: int = 0

    def __post_init__(self):
        if not 0 <= self.seed <= MASK64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {self.seed}")
        for name in ("edge_id", "timestep", "dim"):
            value = getattr(self, name)
            if not 0 <= value <= _U32_MAX:
                raise ValueError(f"{name} must fit in 32 unsigned bits, got {value}")

    def with_dim(self, dim: int) -> "NoiseKey":
        return NoiseKey(self.seed, self.edge_id, self.timestep, dim)


def mix64(x: int) -> int:
    x = (x + GOLDEN_GAMMA) & MASK64
    x = ((x ^ (x >> 30)) * MIX_MUL1) & MASK64
    x = ((x ^ (x >> 27)) * MIX_MUL2) & MASK64
    return x ^ (x >> 31)


def hash_key(key: NoiseKey) -> int:
    """The 64-bit word behind a key."""
    h = mix64(key.seed ^ SEED_SALT)
    h = mix64(h ^ ((key.edge_id << 32) | key.timestep))
    return mix64(h ^ key.dim)


def _check_delta(delta) -> float:
    delta = float(delta)
    if not math.isfinite(delta) or delta <= 0.0:
        raise ValueError(f"delta must be positive and finite, got {delta}")
    return delta


def _to_interval(u: float, delta: float) -> float:
    eps = delta * (u - 0.5)
    half = 0.5 * delta
    # (0.5 - 2**-53) * delta can round up to delta/2 for some delta.
    if eps >= half:
        eps = math.nextafter(half, 0.0)
    return eps


def unit_at(key: NoiseKey) -> float:
    """Uniform value in [0, 1) for ``key``."""
    return (hash_key(key) >> 11) * 2.0**-53


def noise_at(key: NoiseKey, delta: float) -> float:
    """Shared dither value in [-delta/2, delta/2) for ``key``."""
    delta = _check_delta(delta)
    return _to_interval(unit_at(key), delta)


# -- vectorised path ---------------------------------------------------------
# Same arithmetic on uint64 arrays; numpy wraps on overflow, matching the
# masked Python-int version bit for bit.


def _mix64_array(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(GOLDEN_GAMMA)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(MIX_MUL1)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(MIX_MUL2)
    return x ^ (x >> np.uint64(31))


def hash_array(seed, edge_id, timestep, dim) -> np.ndarray:
    """Broadcasting version of :func:`hash_key`."""
    with np.errstate(over="ignore"):
        seed = np.asarray(seed, dtype=np.uint64)
        edge_id = np.asarray(edge_id, dtype=np.uint64)
        timestep = np.asarray(timestep, dtype=np.uint64)
        dim = np.asarray(dim, dtype=np.uint64)
        h = _mix64_array(np.atleast_1d(seed ^ np.uint64(SEED_SALT)))
        h = _mix64_array(h ^ ((edge_id << np.uint64(32)) | timestep))
        return _mix64_array(h ^ dim)


def noise_array(seed, edge_id, timestep, dim, delta: float) -> np.ndarray:
    """Dither values for broadcast coordinate arrays; float64 result."""
    delta = _check_delta(delta)
    u = (hash_array(seed, edge_id, timestep, dim) >> np.uint64(11)).astype(np.float64)
    u *= 2.0**-53
    eps = delta * (u - 0.5)
    half = 0.5 * delta
    np.copyto(eps, np.nextafter(half, 0.0), where=eps >= half)
    return eps


def noise_vector(key_base: NoiseKey, d: int, delta: float) -> np.ndarray:
    """Noise for dims ``key_base.dim .. key_base.dim + d - 1``."""
    dims = key_base.dim + np.arange(d, dtype=np.uint64)
    if d and key_base.dim + d - 1 > _U32_MAX:
        raise ValueError("dim index overflows 32 bits")
    return noise_array(key_base.seed, key_base.edge_id, key_base.timestep, dims, delta)


def derive_seed(base_seed: int, *labels: int) -> int:
    """Deterministic child seed, e.g. one per training episode."""
    h = mix64(base_seed & MASK64)
    for label in labels:
        h = mix64(h ^ (label & MASK64))
    return h
