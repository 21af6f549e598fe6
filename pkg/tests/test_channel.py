import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from ddcl import channel
from ddcl.channel import (FLOOR, ROUND, DiscreteMessage, SignalRangeError, channel_forward, grad_passthrough,
                          quantize, quantize_array, reconstruct, reconstruct_array)
from ddcl.codec import ideal_bit_length
from ddcl.rng import NoiseKey, noise_array

KEY = NoiseKey(seed=9, edge_id=0, timestep=0, dim=0)
signals = st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=6)
widths = st.sampled_from([0.1, 0.5, 1.0, 2.0, 15.0])
conventions = st.sampled_from([FLOOR, ROUND])


def mc(z, delta, n, convention=FLOOR, seed=0):
    """(m, z_hat) over n independent keys for a vector signal."""
    z = np.asarray(z, dtype=np.float64)
    t = np.arange(n, dtype=np.uint64)[:, None]
    eps = noise_array(seed, 0, t, np.arange(len(z), dtype=np.uint64)[None, :], delta)
    m = quantize_array(np.broadcast_to(z, eps.shape), eps, delta, convention)
    return m, reconstruct_array(m, eps, delta, convention)


# -- hand-computed examples (forced noise) ---------------------------------------


def test_forced_noise_positive(debug_channel):
    msg = quantize([0.0], KEY, 1.0, forced_noise=0.3)
    assert msg.ints == (0,)
    rec = reconstruct(msg, KEY, 1.0, z=[0.0], forced_noise=0.3)
    assert rec.values[0] == pytest.approx(0.2, abs=1e-15)
    assert rec.error[0] == pytest.approx(0.2, abs=1e-15)


def test_forced_noise_negative(debug_channel):
    msg = quantize([0.0], KEY, 1.0, forced_noise=-0.3)
    assert msg.ints == (-1,)
    rec = reconstruct(msg, KEY, 1.0, z=[0.0], forced_noise=-0.3)
    assert rec.values[0] == pytest.approx(-0.2, abs=1e-15)
    assert rec.error[0] == pytest.approx(-0.2, abs=1e-15)


def test_forced_noise_needs_debug(monkeypatch):
    monkeypatch.setattr(channel, "DEBUG", False)
    with pytest.raises(RuntimeError):
        quantize([0.0], KEY, 1.0, forced_noise=0.3)


def test_forced_noise_range(debug_channel):
    with pytest.raises(ValueError):
        quantize([0.0], KEY, 1.0, forced_noise=0.5)


@pytest.mark.parametrize("eps", np.linspace(-0.5, 0.49999, 41))
def test_five_lands_in_four_or_five(debug_channel, eps):
    assert quantize([5.0], KEY, 1.0, forced_noise=eps).ints[0] in (4, 5)


def test_five_over_keys():
    m, _ = mc([5.0], 1.0, 10**4)
    assert set(np.unique(m)) <= {4, 5}


# -- properties ------------------------------------------------------------------


@given(signals, widths, conventions, st.integers(0, 2**64 - 1), st.integers(0, 1000))
def test_roundtrip_error_bounded(z, delta, convention, seed, t):
    key = NoiseKey(seed, 0, t, 0)
    msg, rec = channel_forward(z, key, delta, convention=convention, debug=True)
    assert np.all(rec.error >= -delta / 2 - 1e-9 * max(1.0, np.max(np.abs(z))))
    assert np.all(rec.error <= delta / 2 + 1e-9 * max(1.0, np.max(np.abs(z))))
    assert msg.ideal_bits == pytest.approx(math.fsum(ideal_bit_length(m) for m in msg.ints), abs=0)
    again, rec2 = channel_forward(z, key, delta, convention=convention)
    assert again == msg and np.array_equal(rec2.values, rec.values)
    assert rec2.error is None


@given(st.floats(-100, 100, allow_nan=False), widths, st.integers(0, 10**6))
def test_floor_matches_reference(z, delta, t):
    key = NoiseKey(3, 1, t, 0)
    eps = float(noise_array(3, 1, t, 0, delta)[0])
    m_ref, zhat_ref = oracles.floor_channel(z, eps, delta)
    msg, rec = channel_forward([z], key, delta)
    assert msg.ints == (m_ref,)
    assert rec.values[0] == zhat_ref


def test_unique_bin_for_each_noise():
    # exactly one integer m places z' in its bin [m delta, (m + 1) delta)
    z = np.linspace(-7, 7, 1001)
    eps = noise_array(1, 0, np.arange(z.size, dtype=np.uint64), 0, 0.7)
    m = quantize_array(z, eps, 0.7, FLOOR)
    zp = z + eps
    assert np.all((m * 0.7 <= zp + 1e-12) & (zp < (m + 1) * 0.7 + 1e-12))


def test_zero_vector_half_delta():
    _, rec = channel_forward([0.0, 0.0, 0.0], NoiseKey(4), 0.5)
    assert np.all(np.abs(rec.values) <= 0.25)


def test_null_message_costs_nothing():
    assert DiscreteMessage.from_ints([0, 0]).ideal_bits == 0.0
    assert DiscreteMessage.from_ints([0, 0]).encoded_bits == 2


@pytest.mark.parametrize("bad", [[math.nan], [math.inf], [-math.inf]])
def test_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        quantize(bad, KEY, 1.0)


@pytest.mark.parametrize("delta", [0.0, -1.0, math.nan])
def test_rejects_bad_delta(delta):
    with pytest.raises(ValueError):
        quantize([1.0], KEY, delta)
    with pytest.raises(ValueError):
        reconstruct(DiscreteMessage.from_ints([1]), KEY, delta)


def test_overflow():
    with pytest.raises(SignalRangeError):
        quantize([2.0**31 + 10], KEY, 1.0)
    with pytest.raises(OverflowError):
        quantize([-1e12], KEY, 1.0)
    quantize([2.0**31 - 2], KEY, 1.0)


def test_unknown_convention():
    with pytest.raises(ValueError):
        quantize([1.0], KEY, 1.0, convention="ceil")


# -- Monte-Carlo examples -----------------------------------------------------------


@pytest.mark.parametrize("convention", [FLOOR, ROUND])
def test_unbiased_vector(convention):
    n = 10**5
    z = np.array([1.7, -3.2])
    _, z_hat = mc(z, 0.1, n, convention)
    bound = 3 * 0.1 / math.sqrt(12 * n)
    assert np.all(np.abs(z_hat.mean(axis=0) - z) <= bound)


def test_expected_magnitude_round_bins():
    # |m| averages |z|/delta when bins are centred on the integers
    n = 10**5
    for z, delta in ((10.0, 1.0), (150.0, 15.0)):
        m, _ = mc([z], delta, n, ROUND)
        assert abs(np.abs(m).mean() - 10.0) <= 0.01 * 10.0
        assert np.abs(m).mean() == pytest.approx(oracles.expected_abs_m_round(z, delta), abs=0.01)


def test_expected_magnitude_floor_bins():
    # floor bins shift every cell by half a width: E|m| = |z/delta - 1/2| away from zero
    n = 10**5
    m, _ = mc([10.0], 1.0, n, FLOOR)
    mean = np.abs(m).mean()
    assert oracles.expected_abs_m_floor(10.0, 1.0) == 9.5
    assert abs(mean - 9.5) <= 3 * np.abs(m).std() / math.sqrt(n) + 1e-12
    assert abs(mean - 10.0) > 0.01 * 10.0


def test_round_zero_signal_is_silent():
    m, z_hat = mc([0.0], 1.0, 10**4, ROUND)
    assert np.all(m == 0)
    assert np.all(np.abs(z_hat) <= 0.5)


# -- gradient passthrough ---------------------------------------------------------------


def test_passthrough_identity():
    assert grad_passthrough([1.0, 2.0]) == [1.0, 2.0]
    g = np.array([0.0])
    assert grad_passthrough(g) is g


@pytest.mark.parametrize("convention", [FLOOR, ROUND])
def test_finite_difference_within_bin(convention):
    """The differentiable node is z_hat = z + e with the realised error e held fixed.

    At a fixed key the receiver's value C(m) - eps is flat inside a bin; the
    identity Jacobian belongs to the reparameterised node, which is what the
    trainer differentiates.
    """
    rng = np.random.default_rng(5)
    h = 1e-5
    checked = 0
    for i in range(200):
        z = rng.normal(0, 3, size=2)
        key = NoiseKey(11, 0, i, 0)
        m0, r0 = channel_forward(z, key, 1.0, convention=convention, debug=True)
        m1, r1 = channel_forward(z + h, key, 1.0, convention=convention)
        if m0.ints != m1.ints:
            continue
        checked += 1
        e0 = r0.error
        node = lambda x: x + e0
        slope = (node(z + h) - node(z)) / h
        assert np.all(np.abs(slope - grad_passthrough(np.ones(2))) < 1e-6)
        # the literal receiver output does not move inside the bin
        assert np.array_equal(r1.values, r0.values)
    assert checked > 150


@pytest.mark.parametrize("convention", [FLOOR, ROUND])
def test_expected_reconstruction_slope_is_one(convention):
    # common random numbers: slope of mean(z_hat) between two signals
    n, h = 10**6, 0.37
    t = np.arange(n, dtype=np.uint64)
    eps = noise_array(21, 0, t, 0, 1.0)
    means = []
    for z in (0.81, 0.81 + h):
        m = quantize_array(np.full(n, z), eps, 1.0, convention)
        means.append(reconstruct_array(m, eps, 1.0, convention).mean())
    slope = (means[1] - means[0]) / h
    assert abs(slope - 1.0) < 3 * (1.0 / math.sqrt(12 * n)) * math.sqrt(2) / h
