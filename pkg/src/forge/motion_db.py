"""On-disk motion database.

Layout of a database directory::

    manifest.json        {"entries": [{"label", "motion_file", "frames", "fps", "joints"}]}
    <motion_file>        little-endian float32: T*J*3 axis-angle values, then 10 shape values
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_SHAPE = 10


class MotionDataError(ValueError):
    pass


@dataclass(frozen=True)
class MotionClip:
    poses: np.ndarray  # (T, J, 3) axis-angle
    shape: np.ndarray  # (10,)
    fps: float = 30.0

    @property
    def frames(self) -> int:
        return self.poses.shape[0]


@dataclass(frozen=True)
class ActionLabelEntry:
    label: str
    motion_ref: str

    def __post_init__(self):
        if not self.label.strip():
            raise MotionDataError("action label must be non-empty")


def write_motion(path: str | Path, clip: MotionClip) -> None:
    poses = np.asarray(clip.poses, dtype="<f4")
    shape = np.asarray(clip.shape, dtype="<f4").reshape(N_SHAPE)
    if poses.ndim != 3 or poses.shape[2] != 3:
        raise MotionDataError(f"poses must be (T, J, 3), got {poses.shape}")
    np.concatenate([poses.reshape(-1), shape]).tofile(path)


def read_motion(path: str | Path, frames: int, joints: int | None = None, fps: float = 30.0) -> MotionClip:
    raw = np.fromfile(path, dtype="<f4").astype(np.float64)
    n_pose = raw.size - N_SHAPE
    if frames <= 0 or n_pose <= 0 or n_pose % (3 * frames):
        raise MotionDataError(f"{path}: {raw.size} floats is not T*J*3 + 10 for T={frames}")
    inferred = n_pose // (3 * frames)
    if joints is not None and joints != inferred:
        raise MotionDataError(f"{path}: manifest says {joints} joints, file holds {inferred}")
    poses = raw[:n_pose].reshape(frames, inferred, 3)
    return MotionClip(poses=poses, shape=raw[n_pose:], fps=fps)


class MotionStore:
    """Read access to a motion database directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest = self.root / "manifest.json"
        if not manifest.is_file():
            raise MotionDataError(f"no manifest.json in {self.root}")
        data = json.loads(manifest.read_text())
        self._records = {}
        self.entries: list[ActionLabelEntry] = []
        for i, rec in enumerate(data.get("entries", [])):
            for key in ("label", "motion_file", "frames"):
                if key not in rec:
                    raise MotionDataError(f"manifest entry {i} is missing {key!r}")
            ref = rec["motion_file"]
            self._records[ref] = rec
            self.entries.append(ActionLabelEntry(rec["label"], ref))

    def load(self, motion_ref: str) -> MotionClip:
        rec = self._records.get(motion_ref)
        if rec is None or not (self.root / motion_ref).is_file():
            raise MotionDataError(f"unresolved motion reference {motion_ref!r}")
        return read_motion(
            self.root / motion_ref, int(rec["frames"]), rec.get("joints"), float(rec.get("fps", 30.0))
        )

    def __contains__(self, motion_ref: str) -> bool:
        return motion_ref in self._records


def write_motion_db(root: str | Path, items: list[tuple[str, MotionClip]]) -> MotionStore:
    """Write ``(label, clip)`` pairs as a motion database and open it."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (label, clip) in enumerate(items):
        name = f"motion_{i:05d}.bin"
        write_motion(root / name, clip)
        entries.append(
            {
                "label": label,
                "motion_file": name,
                "frames": int(clip.frames),
                "joints": int(clip.poses.shape[1]),
                "fps": float(clip.fps),
            }
        )
    (root / "manifest.json").write_text(json.dumps({"entries": entries}, indent=1))
    return MotionStore(root)
