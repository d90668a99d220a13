"""Binary container for temporal motion matrices and feature caches.

Layout: 4-byte magic ``ANM1``, a little-endian uint32 header length, a UTF-8
JSON header, then the row-major float32 payload. The header always carries
``kind, n, d, fps, subject, sentence``; extra keys (e.g. ``topology`` for
template meshes, ``feature_rate`` for cached audio features) are preserved.

Rig-control data additionally round-trips through plain CSV so animators can
edit curves by hand; ``%.9g`` formatting is lossless for float32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ANM1"

# kinds a container may declare on disk
KIND_VERTEX_DISPLACEMENT = "vertex-displacement"
KIND_VERTEX_POSITION = "vertex-position"
KIND_RIG_CONTROL = "rig-control"
KIND_FEATURES = "features"
KIND_TEMPLATE = "template-mesh"

_KNOWN_KINDS = {
    KIND_VERTEX_DISPLACEMENT,
    KIND_VERTEX_POSITION,
    KIND_RIG_CONTROL,
    KIND_FEATURES,
    KIND_TEMPLATE,
}


def write_container(
    path: str | Path,
    frames: np.ndarray,
    *,
    kind: str,
    fps: float,
    subject: str = "",
    sentence: str = "",
    extra: dict | None = None,
) -> None:
    if kind not in _KNOWN_KINDS:
        raise FormatError(f"unknown container kind {kind!r}")
    frames = np.ascontiguousarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise FormatError(f"container payload must be 2-D, got shape {frames.shape}")
    header = {
        "kind": kind,
        "n": int(frames.shape[0]),
        "d": int(frames.shape[1]),
        "fps": float(fps),
        "subject": subject,
        "sentence": sentence,
    }
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(frames.tobytes())


def read_container(path: str | Path) -> tuple[np.ndarray, dict]:
    """Read a container, returning (frames float32 N x D, header dict)."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"{path}: not a motion container (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt container header: {exc}") from exc
        n, d = int(header["n"]), int(header["d"])
        payload = fh.read(n * d * 4)
    if len(payload) != n * d * 4:
        raise FormatError(f"{path}: truncated payload, expected {n}x{d} float32")
    frames = np.frombuffer(payload, dtype="<f4").reshape(n, d)
    return frames.copy(), header


def write_rig_csv(path: str | Path, frames: np.ndarray, control_names: list[str] | None = None) -> None:
    """Write rig-control rows as CSV, one frame per row, C columns."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise FormatError(f"rig CSV payload must be 2-D, got shape {frames.shape}")
    header = ",".join(control_names) if control_names else ""
    np.savetxt(path, frames, fmt="%.9g", delimiter=",", header=header, comments="")


def read_rig_csv(path: str | Path) -> np.ndarray:
    """Read per-frame control rows from CSV.

    A non-numeric first row is treated as control names and skipped. Ragged
    rows raise FormatError; non-finite values raise FormatError as well.
    """
    path = Path(path)
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty rig CSV")
    start = 0
    try:
        [float(tok) for tok in lines[0].split(",")]
    except ValueError:
        start = 1  # header row of control names
    width = None
    for i, line in enumerate(lines[start:], start=start + 1):
        toks = line.split(",")
        try:
            row = [float(tok) for tok in toks]
        except ValueError as exc:
            raise FormatError(f"{path}:{i}: non-numeric value") from exc
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise FormatError(f"{path}:{i}: ragged row, expected {width} columns, got {len(row)}")
        rows.append(row)
    if not rows:
        raise FormatError(f"{path}: rig CSV has a header but no data rows")
    frames = np.asarray(rows, dtype=np.float32)
    if not np.isfinite(frames).all():
        raise FormatError(f"{path}: non-finite control values")
    return frames
