"""On-disk formats: trajectory logs, metrics tables, run manifest and the run lock."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

from ..conv_mdp import ABSTAIN, ConversationState, Respond, Trajectory, Transition
from ..q_eval import EvalDataset

TRAJECTORY_VERSION = 1
MANIFEST_VERSION = 1


class HarnessIOError(RuntimeError):
    pass


def atomic_write(path: str | Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


# --- trajectories ---------------------------------------------------------------------------


def _action_record(action) -> Any:
    return "ABSTAIN" if action is ABSTAIN else list(action.message)


def _action_from(rec) -> Any:
    return ABSTAIN if rec == "ABSTAIN" else Respond(tuple(rec))


def trajectory_record(traj: Trajectory, returns: Sequence[float] | None = None, weights: Sequence[float] | None = None) -> dict[str, Any]:
    rec: dict[str, Any] = {
        "format_version": TRAJECTORY_VERSION,
        "episode_id": traj.episode_id,
        "behavior_tag": traj.behavior_tag,
        "transitions": [
            {
                "state": t.state.to_record(),
                "action": _action_record(t.action),
                "reward": t.reward,
                "next_state": t.next_state.to_record(),
                "token_logprobs": list(t.token_logprobs),
            }
            for t in traj
        ],
    }
    if returns is not None:
        rec["returns"] = [float(x) for x in returns]
        rec["weights"] = [float(x) for x in weights]
    return rec


def trajectory_from_record(rec: dict[str, Any]) -> Trajectory:
    if rec.get("format_version") != TRAJECTORY_VERSION:
        raise HarnessIOError(f"unsupported trajectory format_version {rec.get('format_version')}")
    steps = tuple(
        Transition(
            ConversationState.from_record(t["state"]),
            _action_from(t["action"]),
            int(t["reward"]),
            ConversationState.from_record(t["next_state"]),
            tuple(float(x) for x in t["token_logprobs"]),
        )
        for t in rec["transitions"]
    )
    return Trajectory(steps, rec["episode_id"], rec.get("behavior_tag", ""))


def write_trajectories(path: str | Path, trajectories: Iterable[Trajectory], dataset: EvalDataset | None = None) -> None:
    """One episode per line; with ``dataset`` each line also carries its returns and weights."""
    trajectories = list(trajectories)
    lines = []
    offsets = np.concatenate([[0], np.cumsum([len(t) for t in trajectories])]) if dataset is not None else None
    for n, traj in enumerate(trajectories):
        if dataset is None:
            rec = trajectory_record(traj)
        else:
            lo, hi = offsets[n], offsets[n + 1]
            rec = trajectory_record(traj, dataset.returns[lo:hi], dataset.weights[lo:hi])
        lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    atomic_write(path, "\n".join(lines) + "\n")


def read_trajectories(path: str | Path) -> list[Trajectory]:
    out = []
    with open(path) as fh:
        for k, line in enumerate(fh):
            if line.strip():
                try:
                    out.append(trajectory_from_record(json.loads(line)))
                except (KeyError, ValueError) as exc:
                    raise HarnessIOError(f"{path}:{k + 1}: {exc}") from exc
    return out


# --- metrics tables -------------------------------------------------------------------------


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def format_table(rows: Sequence[dict[str, Any]], columns: Sequence[str] | None = None) -> str:
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def write_table(path: str | Path, rows: Sequence[dict[str, Any]], columns: Sequence[str] | None = None) -> None:
    atomic_write(path, format_table(rows, columns))


def read_table(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


# --- manifest and lock ----------------------------------------------------------------------


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    seeds: dict[str, int]
    module_versions: dict[str, str]
    records: list[str] = field(default_factory=list)
    format_version: int = MANIFEST_VERSION

    def save(self, run_dir: str | Path) -> None:
        atomic_write(Path(run_dir) / "manifest.json", json.dumps(asdict(self), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, run_dir: str | Path) -> RunManifest:
        d = json.loads((Path(run_dir) / "manifest.json").read_text())
        if d.get("format_version") != MANIFEST_VERSION:
            raise HarnessIOError("unsupported manifest version")
        return cls(**d)


class RunLocked(HarnessIOError):
    pass


@contextmanager
def run_lock(run_dir: str | Path) -> Iterator[Path]:
    """Exclusive lock file; a second invocation on the same run_id fails fast."""
    path = Path(run_dir) / ".lock"
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"run directory {run_dir} is locked by another invocation ({path})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        path.unlink(missing_ok=True)
