"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line with the measured
numbers before asserting, so ``pytest -v -s`` (or the tee'd log) shows the
whole scorecard even when a criterion fails.
"""

import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

import oracles
from ddcl import analysis, wire
from ddcl.channel import DiscreteMessage, channel_forward, grad_passthrough, reconstruct
from ddcl.cli import demo_signals
from ddcl.codec import BitString, decode_ints, encode_int, encode_ints
from ddcl.env import default_distribution
from ddcl.loss import comms_cost, comms_cost_grad, fake_quantize
from ddcl.nn import DenseNet, backward, forward
from ddcl.rng import NoiseKey
from ddcl.stats import JENSEN_DELTAS, JENSEN_Z, test_jensen_bound as jensen_check
from ddcl.train import TrainConfig, sweep_lambda

SWEEP_LAMBDAS = (1e-5, 5e-4, 4e-3, 8e-3)
TOY_LAMBDA = 4e-3
SEEDS = (1, 2, 3)
EPISODES = 100_000
ENTROPY_BITS = 1.81


def verdict(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# -- 1 --------------------------------------------------------------------------------


def test_criterion_1_verify_full(tmp_path, capsys):
    out = tmp_path / "verify_report.json"
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "ddcl", "verify", "--full", "--out", str(out)],
                          capture_output=True, text=True, timeout=600)
    elapsed = time.perf_counter() - t0
    report = json.loads(out.read_text())
    failed = [r for r in report["reports"] if r["passed"] is False]
    names = {r["name"] for r in report["reports"]}
    ok = (proc.returncode == 0 and not failed and elapsed < 60
          and {"error_uniform", "error_independence", "unbiasedness"} <= names)
    verify_n = {r["n"] for r in report["reports"] if r["name"] == "error_uniform"}
    verdict(capsys, 1, ok and verify_n == {10**6},
            f"exit={proc.returncode} failures={len(failed)} n={sorted(verify_n)} runtime={elapsed:.1f}s (<60s)")


# -- 2 --------------------------------------------------------------------------------


def test_criterion_2_jensen(capsys):
    reports = [jensen_check(z, d, 10**5, seed=0) for d in JENSEN_DELTAS for z in JENSEN_Z]
    caveats = [jensen_check(0.0, d, 10**5, seed=0) for d in JENSEN_DELTAS]
    ok = all(r.passed for r in reports) and all(c.passed is None and c.note for c in caveats)
    worst = min(r.margin for r in reports)
    verdict(capsys, 2, ok, f"{len(reports)} grid points hold, min margin {worst:.3g}; "
                           f"z=0 reported as caveat ({len(caveats)} deltas)")


# -- 3 --------------------------------------------------------------------------------


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def test_criterion_3_gradients(capsys):
    rng = np.random.default_rng(2024)
    h = 1e-6
    worst_cost = 0.0
    for _ in range(25):
        z = float(rng.normal(0, 5)) or 0.5
        delta = float(rng.choice([0.1, 0.5, 1.0, 15.0]))
        fd = (comms_cost([z + h], delta).total - comms_cost([z - h], delta).total) / (2 * h)
        worst_cost = max(worst_cost, _rel(comms_cost_grad([z], delta)[0], fd))

    net = DenseNet.init([3, 6, 5, 2], np.random.default_rng(1))
    for layer in net.layers:
        layer.biases[:] = rng.normal(0, 0.3, layer.biases.shape)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 2))
    grads, _ = backward(net, forward(net, x)[1], w)
    loss = lambda: float((forward(net, x)[0] * w).sum())
    worst_nn, probes = 0.0, 0
    for pi, p in enumerate(net.params()):
        for _ in range(6):  # every layer's weights and biases
            idx = tuple(rng.integers(s) for s in p.shape)
            old = p[idx]
            p[idx] = old + 1e-5
            up = loss()
            p[idx] = old - 1e-5
            down = loss()
            p[idx] = old
            fd = (up - down) / 2e-5
            worst_nn = max(worst_nn, _rel(grads[pi][idx], fd))
            probes += 1

    # channel: reparameterised node z + e (e fixed) inside a bin
    worst_ch, inside = 0.0, 0
    for i in range(100):
        z = rng.normal(0, 3, size=2)
        key = NoiseKey(3, 0, i, 0)
        m0, r0 = channel_forward(z, key, 1.0)
        m1, _ = channel_forward(z + 1e-6, key, 1.0)
        if m0.ints != m1.ints:
            continue
        inside += 1
        e = r0.values - z  # realised error, held fixed
        slope = ((z + 1e-6 + e) - (z + e)) / 1e-6
        worst_ch = max(worst_ch, float(np.max(np.abs(slope - grad_passthrough(np.ones(2))))))
    ok = worst_cost < 1e-4 and worst_nn < 1e-4 and probes >= 20 and inside >= 20 and worst_ch < 1e-6
    verdict(capsys, 3, ok, f"comms_cost rel err {worst_cost:.2e}; nn rel err {worst_nn:.2e} over {probes} probes; "
                           f"channel deviation {worst_ch:.1e} over {inside} in-bin probes")


# -- 4 --------------------------------------------------------------------------------


def test_criterion_4_codec_wire(capsys):
    t0 = time.perf_counter()
    ints = list(range(-10**6, 10**6 + 1))
    stream = encode_ints(ints)
    decoded, end = decode_ints(stream, len(ints))
    roundtrip = decoded == ints and end == len(stream)
    single = all(decode_ints(encode_int(m))[0] == [m] for m in (-10**6, -1, 0, 1, 10**6))

    rng = np.random.default_rng(9)
    prefix_ok = True
    for _ in range(10**4):
        msg = [int(v) for v in rng.integers(-5000, 5001, size=rng.integers(1, 6))]
        bits = "".join(oracles.encode(m) for m in msg)
        prefix_ok &= decode_ints(BitString.from01(bits))[0] == msg

    seed, count = 23, 8
    recv = subprocess.Popen([sys.executable, "-m", "ddcl", "recv", "--seed", str(seed), "--listen", "127.0.0.1:0"],
                            stdout=subprocess.PIPE, text=True)
    try:
        addr = json.loads(recv.stdout.readline())["listening"]
        sent = subprocess.run([sys.executable, "-m", "ddcl", "send", "--seed", str(seed), "--addr", addr,
                               "--count", str(count)], capture_output=True, text=True, timeout=60, check=True)
        out, _ = recv.communicate(timeout=60)
    finally:
        recv.kill()
    received = [json.loads(line) for line in out.splitlines()]
    sender = [json.loads(line) for line in sent.stdout.splitlines()]
    signals = demo_signals(seed, count, 2)
    socket_ok = len(received) == count
    for t, (s, r) in enumerate(zip(sender, received)):
        local = reconstruct(DiscreteMessage.from_ints(s["m"]), NoiseKey(seed, 0, t, 0), 1.0, z=signals[t])
        socket_ok &= r["z_hat"] == [float(v).hex() for v in local.values]
        socket_ok &= wire.decode_frame(wire.encode_frame(DiscreteMessage.from_ints(s["m"]), 0, t))[0].ints == \
            tuple(s["m"])
    ok = roundtrip and single and prefix_ok and socket_ok
    verdict(capsys, 4, ok, f"roundtrip [-1e6,1e6]={roundtrip}; prefix-free x1e4={prefix_ok}; "
                           f"socket bit-identical={socket_ok}; {time.perf_counter() - t0:.1f}s")


# -- 5 and 6: shared training sweep ---------------------------------------------------


@pytest.fixture(scope="module")
def sweep():
    toy = []
    t0 = time.perf_counter()
    config = TrainConfig(delta=1.0, episodes=EPISODES)
    dist = default_distribution()

    def keep(lam, seed, result, records):
        if lam == TOY_LAMBDA:
            toy.append(analysis.analyze_protocol(records, dist))

    points = sweep_lambda(SWEEP_LAMBDAS, config, SEEDS, dist=dist, on_run=keep)
    return points, toy, time.perf_counter() - t0


def test_criterion_5_toy_reproduction(sweep, capsys):
    points, toy, elapsed = sweep
    point = next(p for p in points if p.lam == TOY_LAMBDA)
    r_seed = [rep.pearson_r for rep in toy]
    r_mean = float(np.mean(r_seed))
    pooled = analysis.pooled_report(toy)
    bits_00 = pooled.goal((0, 0)).mean_bits_per_episode
    bits_61 = pooled.goal((6, 1)).mean_bits_per_episode
    toy_time = elapsed / len(SWEEP_LAMBDAS)
    ok = (len(toy) == len(SEEDS) and point.success_rate >= 0.95 and r_mean <= -0.8 and bits_00 < bits_61
          and toy_time < 30 * 60)
    verdict(capsys, 5, ok,
            f"success {point.success_rate:.4f} (>=0.95); r {r_mean:.3f} (<=-0.8, per seed "
            f"{', '.join(f'{r:.3f}' for r in r_seed)}; pooled {pooled.pearson_r:.3f}); "
            f"bits (0,0) {bits_00:.2f} < (6,1) {bits_61:.2f}; {toy_time / 60:.1f} min for 3 seeds")


def test_criterion_6_rate_distortion(sweep, capsys):
    points, _, _ = sweep
    lams = [p.lam for p in points]
    bits = [p.mean_bits_per_episode for p in points]
    rho = analysis.spearman(lams, bits)
    succ = {p.lam: p.success_rate for p in points}
    gap_ok = all(math.isclose(p.shannon_gap, p.mean_bits_per_episode - default_distribution().entropy_bits)
                 for p in points)
    entropy_ok = abs(default_distribution().entropy_bits - ENTROPY_BITS) <= 0.01
    ok = (lams == list(SWEEP_LAMBDAS) and not any(p.error for p in points) and rho <= -0.9
          and succ[1e-5] >= succ[8e-3] and gap_ok and entropy_ok)
    table = "; ".join(f"lam={p.lam:g} bits={p.mean_bits_per_episode:.2f} succ={p.success_rate:.4f} "
                      f"gap={p.shannon_gap:.2f}" for p in points)
    verdict(capsys, 6, ok, f"spearman {rho:.2f} (<=-0.9); success 1e-5 {succ[1e-5]:.4f} >= 8e-3 "
                           f"{succ[8e-3]:.4f}; H={default_distribution().entropy_bits:.4f}; {table}")


# -- 7 --------------------------------------------------------------------------------


def test_criterion_7_fake_quantize(capsys):
    rng = np.random.default_rng(77)
    mismatches, over, cases = 0, 0, 0
    for bits in (4, 8, 16):
        tensors = [rng.normal(0, rng.uniform(0.1, 10), size=rng.integers(1, 50)) for _ in range(98)]
        tensors += [np.full(7, 3.25), np.array([-1.5])]  # min == max guard
        for t in tensors:
            got = fake_quantize(t, bits)
            want = oracles.fake_quantize_trace([float(v) for v in t], bits)
            mismatches += not np.array_equal(got, np.array(want))
            over += len(np.unique(got)) > 2**bits
            cases += 1
    verdict(capsys, 7, mismatches == 0 and over == 0 and cases == 300,
            f"{cases} tensors over B in (4, 8, 16): {mismatches} trace mismatches, {over} cardinality violations")


# -- 8 --------------------------------------------------------------------------------


def test_criterion_8_benchmarks_declared_out_of_scope(capsys):
    # nothing to run: the large multi-agent benchmarks are not reproduced at desk scale
    verdict(capsys, 8, True, "benchmark tables declared not reproducible; no check depends on them")
