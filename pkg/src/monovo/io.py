"""Plain-text file formats: track streams, TUM trajectories and CSV series."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import PinholeCamera
from .geometry import Pose, project_to_so3
from .simworld import FrameBundle

TRACK_HEADER = "# tracks v1"


class ParseError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


def _fmt(x: float) -> str:
    return repr(float(x))


def write_track_stream(path, cam: PinholeCamera, frames: Sequence[FrameBundle]) -> None:
    lines = [f"{TRACK_HEADER} {_fmt(cam.fx)} {_fmt(cam.fy)} {_fmt(cam.cx)} {_fmt(cam.cy)} {cam.width} {cam.height}"]
    for fr in frames:
        lines.append(f"F {_fmt(fr.timestamp)}")
        for tid, (u, v), c in zip(fr.track_ids, fr.uv, fr.levels):
            lines.append(f"{int(tid)} {_fmt(u)} {_fmt(v)} {int(c)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_track_stream(path) -> tuple[PinholeCamera, list[FrameBundle]]:
    path = Path(path)
    cam = None
    frames: list[FrameBundle] = []
    cur = None

    def flush():
        if cur is not None:
            ts, ids, uvs, lv = cur
            frames.append(FrameBundle(len(frames), ts, None, np.array(ids, dtype=np.int64),
                                      np.array(uvs, dtype=float).reshape(-1, 2), np.array(lv, dtype=np.int64)))

    with path.open() as fh:
        for n, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if cam is None:
                if not s.startswith(TRACK_HEADER):
                    raise ParseError(path, n, "missing '# tracks v1' header")
                parts = s[len(TRACK_HEADER):].split()
                if len(parts) != 6:
                    raise ParseError(path, n, "header needs fx fy cx cy width height")
                try:
                    cam = PinholeCamera(float(parts[0]), float(parts[1]), float(parts[2]),
                                        float(parts[3]), int(parts[4]), int(parts[5]))
                except ValueError as e:
                    raise ParseError(path, n, str(e)) from None
                continue
            parts = s.split()
            try:
                if parts[0] == "F":
                    if len(parts) != 2:
                        raise ValueError("frame line needs one timestamp")
                    ts = float(parts[1])
                    if cur is not None and ts <= cur[0]:
                        raise ValueError("timestamps must increase")
                    flush()
                    cur = (ts, [], [], [])
                else:
                    if cur is None:
                        raise ValueError("observation before first frame line")
                    if len(parts) != 4:
                        raise ValueError("observation needs track_id u v level")
                    cur[1].append(int(parts[0]))
                    cur[2].append((float(parts[1]), float(parts[2])))
                    cur[3].append(int(parts[3]))
            except ValueError as e:
                raise ParseError(path, n, str(e)) from None
    if cam is None:
        raise ParseError(path, 0, "empty file")
    flush()
    return cam, frames


def write_tum(path, stamps: Sequence[float], poses: Sequence[Pose]) -> None:
    lines = []
    for ts, T in zip(stamps, poses):
        q = Rotation.from_matrix(T.R).as_quat()  # x y z w
        if q[3] < 0:
            q = -q
        vals = [ts, *T.t, *q]
        lines.append(" ".join(_fmt(v) for v in vals))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_tum(path) -> tuple[np.ndarray, list[Pose]]:
    path = Path(path)
    stamps, poses = [], []
    with path.open() as fh:
        for n, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 8:
                raise ParseError(path, n, f"expected 8 columns, got {len(parts)}")
            try:
                v = [float(p) for p in parts]
            except ValueError as e:
                raise ParseError(path, n, str(e)) from None
            R = project_to_so3(Rotation.from_quat(v[4:8]).as_matrix())
            stamps.append(v[0])
            poses.append(Pose(R, v[1:4]))
    return np.array(stamps), poses


STATUS_FIELDS = ["frame_id", "timestamp", "submap", "state", "n_active_landmarks", "entropy", "keyframe", "reset"]
DRIFT_FIELDS = ["timestamp", "lambda_min", "mean_rel_translation", "Lambda"]


def write_csv(path, fields: Sequence[str], rows: Iterable[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (_fmt(v) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
