"""Run directories: CSV/JSON outputs and the per-directory manifest."""

from __future__ import annotations

import csv
import json
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import ProtocolReport, RateDistortionPoint
from .train import EpisodeRecord, TrainConfig

MANIFEST = "manifest.json"
METRICS_FIELDS = ("episode", "return", "success", "ideal_bits", "encoded_bits")
EVAL_FIELDS = ("episode", "goal_x", "goal_y", "steps", "success", "return", "messages",
               "ideal_bits", "encoded_bits", "surrogate_bits")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def source_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return f"ddcl-{__version__}"
    rev = out.stdout.strip()
    return rev if out.returncode == 0 and rev else f"ddcl-{__version__}"


def write_csv(path: Path, fieldnames, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fieldnames})


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path: Path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


class RunManifest:
    """One ``manifest.json`` per output directory."""

    def __init__(self, out_dir, command: str, config: dict | None = None, seed: int | None = None):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / MANIFEST
        if path.exists():
            self.data = json.loads(path.read_text())
            self.data.setdefault("history", []).append({"command": command, "started": _now()})
        else:
            self.data = {
                "command": command,
                "argv": sys.argv[1:],
                "config": config or {},
                "seed": seed,
                "source_revision": source_revision(),
                "version": __version__,
                "started": _now(),
                "finished": None,
                "outputs": [],
            }

    def add(self, *names: str) -> None:
        for name in names:
            if name not in self.data["outputs"]:
                self.data["outputs"].append(name)

    def save(self) -> Path:
        self.data["finished"] = _now()
        self.data["outputs"].sort()
        path = self.dir / MANIFEST
        write_json(path, self.data)
        return path


def load_config(path) -> TrainConfig:
    """Accepts a bare TrainConfig JSON or a run manifest (uses its ``config``)."""
    data = json.loads(Path(path).read_text())
    if "config" in data and isinstance(data["config"], dict) and "command" in data:
        data = data["config"]
    return TrainConfig.from_dict(data)


def eval_rows(records) -> list[dict]:
    return [{
        "episode": r.episode, "goal_x": r.goal[0], "goal_y": r.goal[1], "steps": r.steps,
        "success": int(r.success), "return": r.ret, "messages": r.messages,
        "ideal_bits": r.ideal_bits_total, "encoded_bits": r.encoded_bits_total,
        "surrogate_bits": r.surrogate_bits_total,
    } for r in records]


def read_eval_records(path) -> list[EpisodeRecord]:
    out = []
    for row in read_csv(Path(path)):
        out.append(EpisodeRecord(
            episode=int(row["episode"]), goal=(int(row["goal_x"]), int(row["goal_y"])),
            steps=int(row["steps"]), success=bool(int(row["success"])), ret=float(row["return"]),
            messages=int(row["messages"]), ideal_bits_total=float(row["ideal_bits"]),
            encoded_bits_total=int(row["encoded_bits"]), surrogate_bits_total=float(row["surrogate_bits"]),
        ))
    return out


def per_goal_rows(report: ProtocolReport) -> list[dict]:
    return [{
        "goal_x": g.goal[0], "goal_y": g.goal[1], "frequency": g.frequency, "episodes": g.episodes,
        "success_rate": g.success_rate, "mean_bits_per_episode": g.mean_bits_per_episode,
        "mean_bits_per_message": g.mean_bits_per_message,
        "mean_encoded_bits_per_episode": g.mean_encoded_bits_per_episode,
        "mean_surrogate_bits_per_episode": g.mean_surrogate_bits_per_episode, "mean_steps": g.mean_steps,
    } for g in report.per_goal]


PER_GOAL_FIELDS = ("goal_x", "goal_y", "frequency", "episodes", "success_rate", "mean_bits_per_episode",
                   "mean_bits_per_message", "mean_encoded_bits_per_episode",
                   "mean_surrogate_bits_per_episode", "mean_steps")

RD_FIELDS = ("lambda", "mean_bits_per_episode", "mean_encoded_bits_per_episode", "success_rate",
             "distortion", "shannon_gap", "seeds", "error")


def rd_rows(points: list[RateDistortionPoint]) -> list[dict]:
    return [{
        "lambda": p.lam, "mean_bits_per_episode": p.mean_bits_per_episode,
        "mean_encoded_bits_per_episode": p.mean_encoded_bits_per_episode, "success_rate": p.success_rate,
        "distortion": p.distortion, "shannon_gap": p.shannon_gap,
        "seeds": " ".join(str(s) for s in p.seeds), "error": p.error,
    } for p in points]


def write_heatmap(path: Path, grid: np.ndarray) -> None:
    """Rows are y = 0..7, columns x = 0..7."""
    rows = [{"y": y, **{f"x{x}": float(grid[y, x]) for x in range(grid.shape[1])}} for y in range(grid.shape[0])]
    write_csv(path, ["y", *[f"x{x}" for x in range(grid.shape[1])]], rows)
