"""Per-tick trajectory records (JSONL) and plot-ready CSV export.

Trajectory file: first line is a header object with ``"format"``; each
following line is one control tick holding the post-step state of both
agents (attitude as a ``w, x, y, z`` quaternion), the actions applied during
the tick and the event flags raised by it.  Lines parse independently.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

TRAJECTORY_FORMAT = "quadpursuit.trajectory/1"
AGENTS = ("pursuer", "evader")


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quaternion_to_rotation(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def make_record(step: int, dt: float, world, actions, events, done: bool, outcome: str | None) -> dict:
    """Record for world index 0 of a post-step ``world``."""
    rec = {"step": step, "t": round((step + 1) * dt, 10)}
    for k, name in enumerate(AGENTS):
        rec[name] = {
            "p": world.body.p[0, k].tolist(),
            "v": world.body.v[0, k].tolist(),
            "q": rotation_to_quaternion(world.body.R[0, k]).tolist(),
            "action": np.asarray(actions[k])[0].tolist(),
        }
    rec["events"] = {
        "catch": bool(events.catch[0]), "contact": bool(events.contact[0]),
        "fail_p": bool(events.fail_p[0]), "fail_e": bool(events.fail_e[0]),
    }
    rec["done"] = bool(done)
    if outcome is not None:
        rec["outcome"] = outcome
    return rec


class TrajectoryWriter:
    def __init__(self, path, header: dict):
        self.fh = open(path, "w")
        self.fh.write(json.dumps({"format": TRAJECTORY_FORMAT, **header}) + "\n")

    def write(self, record: dict) -> None:
        self.fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trajectory(path) -> tuple[dict, list[dict]]:
    """Header and records; an unparseable (truncated) final line is dropped."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty trajectory file")
    header = json.loads(lines[0])
    if header.get("format") != TRAJECTORY_FORMAT:
        raise ValueError(f"{path}: not a trajectory file (format {header.get('format')!r})")
    records = []
    for i, line in enumerate(lines[1:], start=1):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                break
            raise
    return header, records


def _csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def export_metrics_series(metrics_rows: list[dict], out_dir) -> list[Path]:
    """Long-format learning-curve files: returns per agent, and episode length."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ret_rows = []
    for r in metrics_rows:
        ret_rows.append((r["iteration"], r["env_steps"], "pursuer", r["mean_return_P"]))
        ret_rows.append((r["iteration"], r["env_steps"], "evader", r["mean_return_E"]))
    len_rows = [(r["iteration"], r["env_steps"], "episode_length", r["mean_ep_len"]) for r in metrics_rows]
    paths = [out / "learning_return.csv", out / "learning_episode_length.csv"]
    cols = ["iteration", "env_steps", "series", "value"]
    paths[0].write_text(_csv_text(cols, ret_rows))
    paths[1].write_text(_csv_text(cols, len_rows))
    return paths


def export_trajectory_series(records: list[dict], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in records:
        for name in AGENTS:
            x, y, z = rec[name]["p"]
            rows.append((rec["t"], name, float(x), float(y), float(z)))
    path = out / "trajectory_xyz.csv"
    path.write_text(_csv_text(["t", "agent", "x", "y", "z"], rows))
    return path
