"""``ddcl`` command line: verify / train / sweep / analyze / encode / decode / send / recv.

Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, codec, runio, stats, wire
from .channel import CONVENTIONS, FLOOR, DiscreteMessage, quantize, reconstruct
from .env import default_distribution, GoalDistribution
from .nn import load_checkpoint, save_checkpoint
from .rng import NoiseKey
from .train import Policies, TrainConfig, TrainingDiverged, evaluate, sweep_lambda, train

log = logging.getLogger("ddcl")


def _env_seed() -> int:
    raw = os.environ.get("DDCL_SEED")
    return int(raw) if raw else 1


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


# -- train / sweep / analyze -----------------------------------------------------

# CLI flag -> TrainConfig field; flags left unset fall back to --config, then defaults
_TRAIN_FLAGS = {
    "lam": "lam", "delta": "delta", "episodes": "episodes", "seed": "seed", "lr": "lr",
    "gamma": "gamma", "message_dims": "message_dims", "bits": "bits", "hidden": "hidden",
    "batch_episodes": "batch_episodes", "convention": "convention", "lam_warmup": "lam_warmup",
    "eval_episodes": "eval_episodes", "per_timestep": "per_timestep", "entropy_coef": "entropy_coef",
}


def _add_train_flags(p: argparse.ArgumentParser, with_lambda: bool = True) -> None:
    if with_lambda:
        p.add_argument("--lambda", dest="lam", type=float, help="communication cost coefficient")
    p.add_argument("--delta", type=float, help="quantization width")
    p.add_argument("--episodes", type=int, help="training episodes")
    p.add_argument("--seed", type=int, help="run seed (default: $DDCL_SEED or 1)")
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--message-dims", type=int)
    p.add_argument("--bits", choices=("ideal", "encoded"), help="bit accounting for reported rates")
    p.add_argument("--hidden", type=int)
    p.add_argument("--batch-episodes", type=int)
    p.add_argument("--entropy-coef", type=float)
    p.add_argument("--convention", choices=CONVENTIONS)
    p.add_argument("--lam-warmup", type=float, help="fraction of episodes over which lambda ramps up")
    p.add_argument("--eval-episodes", type=int)
    p.add_argument("--per-episode", dest="per_timestep", action="store_false", default=None,
                   help="send one message per episode instead of one per timestep")
    p.add_argument("--config", type=Path, help="JSON TrainConfig or a run manifest")


def _build_config(args) -> TrainConfig:
    base = runio.load_config(args.config).to_dict() if args.config else TrainConfig(seed=_env_seed()).to_dict()
    for flag, name in _TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[name] = value
    return TrainConfig.from_dict(base)


def _load_dist(args) -> GoalDistribution:
    return GoalDistribution.from_json(args.goals) if getattr(args, "goals", None) else default_distribution()


def _write_analysis(out: Path, records, dist, policies, config, manifest) -> analysis.ProtocolReport:
    report = analysis.analyze_protocol(records, dist)
    runio.write_csv(out / "per_goal.csv", runio.PER_GOAL_FIELDS, runio.per_goal_rows(report))
    manifest.add("per_goal.csv")
    if policies is not None:
        runio.write_heatmap(out / "heatmap.csv",
                            analysis.protocol_heatmap(policies.speaker, config.delta, config.convention))
        manifest.add("heatmap.csv")
    return report


def _print_report(report: analysis.ProtocolReport) -> None:
    print(f"pearson r (frequency vs bits/message): {report.pearson_r:.4f}")
    print(f"pearson r (frequency vs bits/episode): {report.pearson_r_per_episode:.4f}")
    for g in report.per_goal:
        print(f"  goal {g.goal}  p={g.frequency:.3f}  success={g.success_rate:.3f}  "
              f"bits/msg={g.mean_bits_per_message:.3f}  bits/episode={g.mean_bits_per_episode:.3f}")
    for flag in report.flags:
        print(f"  flagged: {flag}")


def cmd_train(args) -> int:
    config = _build_config(args)
    dist = _load_dist(args)
    out = Path(args.out)
    manifest = runio.RunManifest(out, "train", config.to_dict(), config.seed)
    if args.goals:
        runio.write_json(out / "goals.json", dist.to_json())
        manifest.add("goals.json")
    runio.write_json(out / "config.json", config.to_dict())
    t0 = time.time()
    result = train(config, dist)
    log.info("trained %d episodes in %.1fs", config.episodes, time.time() - t0)
    runio.write_csv(out / "metrics.csv", runio.METRICS_FIELDS, result.episodes)
    runio.write_csv(out / "updates.csv", list(result.updates[0]), result.updates)
    save_checkpoint(result.policies.nets(), out / "policies")
    manifest.add("config.json", "metrics.csv", "updates.csv", "policies.bin", "policies.json")
    if config.eval_episodes:
        records = evaluate(result.policies, config, dist=dist)
        runio.write_csv(out / "eval.csv", runio.EVAL_FIELDS, runio.eval_rows(records))
        manifest.add("eval.csv")
        report = _write_analysis(out, records, dist, result.policies, config, manifest)
        success = float(np.mean([r.success for r in records]))
        bits = float(np.mean([r.bits(config.bits) for r in records]))
        print(f"eval success {success:.4f}  mean {config.bits} bits/episode {bits:.3f}  "
              f"shannon gap {analysis.shannon_gap(bits, dist.entropy_bits):.3f}")
        _print_report(report)
    manifest.save()
    print(f"wrote {out}")
    return 0


def cmd_sweep(args) -> int:
    config = _build_config(args)
    dist = _load_dist(args)
    out = Path(args.out)
    manifest = runio.RunManifest(out, "sweep", config.to_dict(), config.seed)
    manifest.data["lambdas"] = args.lambdas
    manifest.data["seeds"] = args.seeds or [config.seed]
    points = sweep_lambda(args.lambdas, config, args.seeds, dist=dist)
    runio.write_csv(out / "rd_frontier.csv", runio.RD_FIELDS, runio.rd_rows(points))
    manifest.add("rd_frontier.csv")
    manifest.save()
    for p in points:
        print(f"lambda={p.lam:g}  bits/episode={p.mean_bits_per_episode:.3f}  success={p.success_rate:.3f}  "
              f"shannon_gap={p.shannon_gap:.3f}" + (f"  error: {p.error}" if p.error else ""))
    print(f"wrote {out / 'rd_frontier.csv'}")
    return 0


def cmd_analyze(args) -> int:
    run = Path(args.run_dir)
    if not (run / "eval.csv").exists():
        print(f"{run}: no eval.csv (was the run trained with --eval-episodes 0?)", file=sys.stderr)
        return 1
    config = runio.load_config(run / "config.json")
    manifest = runio.RunManifest(run, "analyze")
    goals = run / "goals.json"
    dist = GoalDistribution.from_json(goals) if goals.exists() else default_distribution()
    records = runio.read_eval_records(run / "eval.csv")
    policies = None
    if (run / "policies.json").exists():
        nets = load_checkpoint(run / "policies")
        policies = Policies(nets["speaker"], nets["listener"], nets["critic"])
    report = _write_analysis(run, records, dist, policies, config, manifest)
    manifest.save()
    _print_report(report)
    return 0


# -- verify ------------------------------------------------------------------------


def cmd_verify(args) -> int:
    conventions = CONVENTIONS if args.convention == "both" else (args.convention,)
    t0 = time.time()
    reports = []
    for conv in conventions:
        reports.extend(stats.run_suite(full=args.full, seed=args.seed, convention=conv))
    elapsed = time.time() - t0
    ok = stats.suite_passed(reports)
    for r in reports:
        status = "n/a " if r.passed is None else ("PASS" if r.passed else "FAIL")
        detail = f"p={r.p_value:.4f}" if r.p_value is not None else (
            f"margin={r.margin:.3g}" if r.margin is not None else "")
        print(f"{status} {r.name:20s} {json.dumps(r.params, sort_keys=True)} {detail} {r.note}".rstrip())
    out = Path(args.out)
    runio.write_json(out, {"passed": ok, "full": args.full, "seconds": elapsed,
                           "reports": [r.to_dict() for r in reports]})
    print(f"{'all checks passed' if ok else 'CHECKS FAILED'} in {elapsed:.1f}s; report: {out}")
    return 0 if ok else 1


# -- codec ---------------------------------------------------------------------------


def cmd_encode(args) -> int:
    msg = DiscreteMessage.from_ints(args.ints)
    print(codec.format_codewords(msg.ints))
    print(f"encoded_bits {msg.encoded_bits}")
    print(f"ideal_bits {msg.ideal_bits:.6f}")
    if args.frame:
        print(f"frame {wire.encode_frame(msg, args.edge, args.timestep).hex()}")
    return 0


def cmd_decode(args) -> int:
    if args.frame:
        msg, edge, t = wire.decode_frame(bytes.fromhex(args.frame))
        print(f"edge {edge} timestep {t}")
    else:
        ints, _ = codec.decode_ints(codec.BitString.from01(args.bits))
        msg = DiscreteMessage.from_ints(ints)
    print("ints " + ",".join(str(m) for m in msg.ints))
    print(f"encoded_bits {msg.encoded_bits}")
    print(f"ideal_bits {msg.ideal_bits:.6f}")
    return 0


# -- socket demo -----------------------------------------------------------------------


def demo_signals(seed: int, count: int, dims: int) -> np.ndarray:
    """Deterministic sender-side signals for the send/recv demo."""
    return np.random.default_rng([seed, 0xD7]).normal(0.0, 3.0, size=(count, dims))


def _line(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def cmd_send(args) -> int:
    signals = demo_signals(args.seed, args.count, args.dims)
    with wire.connect(args.addr) as sock:
        for t, z in enumerate(signals):
            key = NoiseKey(args.seed, args.edge, t, 0)
            msg = quantize(z, key, args.delta, convention=args.convention)
            rec = reconstruct(msg, key, args.delta, convention=args.convention)
            sock.sendall(wire.encode_frame(msg, args.edge, t))
            _line({"timestep": t, "z": [float(v).hex() for v in z], "m": list(msg.ints),
                   "z_hat": [float(v).hex() for v in rec.values]})
    return 0


def cmd_recv(args) -> int:
    server = wire.listen(args.listen)
    with server:
        host, port = server.getsockname()[:2]
        _line({"listening": f"{host}:{port}"})
        server.settimeout(args.timeout)
        conn, _ = server.accept()
        with conn, conn.makefile("rb") as stream:
            for msg, edge, t in wire.read_frames(stream):
                key = NoiseKey(args.seed, edge, t, 0)
                rec = reconstruct(msg, key, args.delta, convention=args.convention)
                _line({"timestep": t, "edge": edge, "m": list(msg.ints),
                       "z_hat": [float(v).hex() for v in rec.values]})
    return 0


# -- entry ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddcl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the statistical channel checks")
    p.add_argument("--full", action="store_true", help="10**6 samples per grid point")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--convention", choices=(*CONVENTIONS, "both"), default="both")
    p.add_argument("--out", default="verify_report.json")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="train speaker and listener")
    _add_train_flags(p)
    p.add_argument("--goals", type=Path, help="goal distribution JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train once per lambda and write rd_frontier.csv")
    p.add_argument("--lambdas", type=_float_list, required=True)
    p.add_argument("--seeds", type=_int_list, help="seed schedule shared by every lambda")
    _add_train_flags(p, with_lambda=False)
    p.add_argument("--goals", type=Path, help="goal distribution JSON")
    p.add_argument("--out", default="sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="per-goal bit allocation for a finished run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("encode", help="encode signed integers")
    p.add_argument("--ints", type=_int_list, required=True)
    p.add_argument("--frame", action="store_true", help="also print the wire frame as hex")
    p.add_argument("--edge", type=int, default=0)
    p.add_argument("--timestep", type=int, default=0)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a bit string or a hex frame")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--bits")
    g.add_argument("--frame")
    p.set_defaults(func=cmd_decode)

    for name, func in (("send", cmd_send), ("recv", cmd_recv)):
        p = sub.add_parser(name, help=f"socket demo: {name} frames")
        p.add_argument("--seed", type=int, default=None)
        if name == "send":
            p.add_argument("--addr", required=True, help="host:port")
            p.add_argument("--count", type=int, default=8)
            p.add_argument("--dims", type=int, default=2)
            p.add_argument("--edge", type=int, default=0)
        else:
            p.add_argument("--listen", required=True, help="host:port (port 0 picks a free one)")
            p.add_argument("--timeout", type=float, default=30.0)
        p.add_argument("--delta", type=float, default=1.0)
        p.add_argument("--convention", choices=CONVENTIONS, default=FLOOR)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", 0) is None and args.command in ("send", "recv"):
        args.seed = _env_seed()
    try:
        return args.func(args)
    except (wire.WireError, codec.CodecError, TrainingDiverged, OverflowError, OSError, ValueError) as exc:
        print(f"ddcl {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
