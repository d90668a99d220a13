"""Objective evaluation of generated animation sequences.

Error metrics treat a vertex as a 3-vector and a rig control as a scalar:
the "magnitude" of a per-unit value or error is the Euclidean norm of the
3-vector for vertex data and the absolute value for rig data. All statistics
use the population convention (divide by N), which stays stable for short
sequences. Computation happens in float64 regardless of input dtype.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .data import AnimationSequence, RegionMask, VERTEX_KIND
from .errors import ConfigurationError, ContractError


def _check_pair(pred: AnimationSequence, gt: AnimationSequence) -> None:
    if pred.kind != gt.kind:
        raise ContractError(f"kind mismatch: {pred.kind} vs {gt.kind}")
    if pred.frames.shape != gt.frames.shape:
        raise ContractError(f"shape mismatch: {pred.frames.shape} vs {gt.frames.shape}")


def _unit_values(seq: AnimationSequence) -> np.ndarray:
    """Frames as (N, U, ...) float64: U 3-vectors or U scalars per frame."""
    frames = seq.frames.astype(np.float64)
    if seq.kind == VERTEX_KIND:
        return frames.reshape(frames.shape[0], -1, 3)
    return frames

def _magnitudes(values: np.ndarray) -> np.ndarray:
    """Per-frame per-unit magnitude, (N, U)."""
    if values.ndim == 3:
        return np.linalg.norm(values, axis=2)
    return np.abs(values)


def mve(pred: AnimationSequence, gt: AnimationSequence) -> float:
    """Mean (over frames) of the maximal per-unit error magnitude.

    Known as MVE on vertex data and MBE on rig data.
    """
    _check_pair(pred, gt)
    err = _magnitudes(_unit_values(pred) - _unit_values(gt))
    return float(err.max(axis=1).mean())


def lve(pred: AnimationSequence, gt: AnimationSequence, mask: RegionMask) -> float:
    """mve restricted to the lip indices (LVE / LBE)."""
    _check_pair(pred, gt)
    n_units = _unit_values(gt).shape[1]
    mask.validate_against(n_units)
    err = _magnitudes(_unit_values(pred) - _unit_values(gt))[:, mask.lip_indices]
    return float(err.max(axis=1).mean())


def fdd(pred: AnimationSequence, gt: AnimationSequence, mask: RegionMask) -> float:
    """Upper-face dynamics deviation.

    For each masked unit, take the temporal standard deviation of its
    per-frame motion magnitude; report the mean over units of
    (std_gt - std_pred). Positive values mean the prediction moves less than
    the ground truth; reports usually quote |FDD| alongside.
    """
    _check_pair(pred, gt)
    if pred.n_frames < 2:
        raise ContractError("fdd needs at least 2 frames to measure dynamics")
    values_pred = _unit_values(pred)
    values_gt = _unit_values(gt)
    mask.validate_against(values_gt.shape[1])
    idx = mask.upper_face_indices
    std_pred = _magnitudes(values_pred)[:, idx].std(axis=0)
    std_gt = _magnitudes(values_gt)[:, idx].std(axis=0)
    return float((std_gt - std_pred).mean())


def diversity(samples: list[AnimationSequence]) -> float:
    """Mean pairwise difference across samples of the same audio.

    For every unordered pair of sequences, the per-frame per-unit difference
    magnitudes are averaged; the metric is the mean over all pairs. Zero iff
    all samples are identical.
    """
    if len(samples) < 2:
        raise ConfigurationError("diversity needs at least 2 samples")
    first = samples[0]
    for s in samples[1:]:
        _check_pair(s, first)
    values = [_unit_values(s) for s in samples]
    total = 0.0
    n_pairs = 0
    for i in range(len(values)):
        for j in range(i + 1, len(values)):
            total += float(_magnitudes(values[i] - values[j]).mean())
            n_pairs += 1
    return total / n_pairs


def mean_motion_stats(samples) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit mean and std of frame-to-frame displacement magnitude.

    Accepts one sequence or a list (deltas are pooled across sequences).
    Returns (means, stds), each of length U; feed them to
    write_motion_stats_csv for the heatmap table.
    """
    if isinstance(samples, AnimationSequence):
        samples = [samples]
    if not samples:
        raise ContractError("mean_motion_stats needs at least one sequence")
    deltas = []
    for seq in samples:
        if seq.n_frames < 2:
            raise ContractError("mean_motion_stats needs at least 2 frames")
        values = _unit_values(seq)
        deltas.append(_magnitudes(values[1:] - values[:-1]))
    pooled = np.concatenate(deltas, axis=0)
    return pooled.mean(axis=0), pooled.std(axis=0)


def animation_graphs(
    samples: list[AnimationSequence],
    controls: list[int],
    labels: list[str] | None = None,
) -> list[tuple[str, int, int, float]]:
    """Long-format curve table for rig sequences: (sample, control, frame, value).

    Pass the ground truth with label "gt" to overlay it on the generated
    curves.
    """
    if labels is None:
        labels = [f"sample{i}" for i in range(len(samples))]
    if len(labels) != len(samples):
        raise ContractError("labels must match samples one to one")
    rows = []
    for label, seq in zip(labels, samples):
        if seq.kind == VERTEX_KIND:
            raise ContractError("animation graphs are defined for rig-control sequences only")
        for c in controls:
            if not 0 <= c < seq.dim:
                raise ContractError(f"control index {c} outside [0, {seq.dim})")
            for n in range(seq.n_frames):
                rows.append((label, int(c), int(n), float(seq.frames[n, c])))
    return rows


# Table-style scale factors used for human-readable vertex (mm) reports
VERTEX_SCALES = {"mve": 1e-3, "lve": 1e-4, "fdd": 1e-5, "diversity": 1e-3}


@dataclass
class MetricReport:
    mve: float
    lve: float
    fdd: float
    abs_fdd: float
    diversity: float | None = None
    kind: str = "rig-control"
    mask: str = "mask"
    dataset: str = ""
    n_sequences: int = 1

    def to_json(self, path: str | Path | None = None) -> str:
        blob = json.dumps(asdict(self), indent=1, sort_keys=True)
        if path is not None:
            Path(path).write_text(blob)
        return blob

    @classmethod
    def from_json(cls, path: str | Path) -> "MetricReport":
        return cls(**json.loads(Path(path).read_text()))

    def summary(self) -> str:
        """Human-readable lines; vertex values are quoted against the
        conventional 10^-3 / 10^-4 / 10^-5 mm scales, rig values raw."""
        lines = [f"dataset={self.dataset or '-'} mask={self.mask} sequences={self.n_sequences}"]
        for name in ("mve", "lve", "fdd", "abs_fdd", "diversity"):
            value = getattr(self, name)
            if value is None:
                continue
            scale = VERTEX_SCALES.get(name.replace("abs_", ""), 1.0)
            if self.kind == VERTEX_KIND:
                lines.append(f"{name.upper():>9}: {value / scale:10.4f} x{scale:g} mm")
            else:
                lines.append(f"{name.upper():>9}: {value:12.6f}")
        return "\n".join(lines)


def evaluate_pair(
    pred: AnimationSequence,
    gt: AnimationSequence,
    mask: RegionMask,
    *,
    dataset: str = "",
) -> MetricReport:
    value = fdd(pred, gt, mask)
    return MetricReport(
        mve=mve(pred, gt),
        lve=lve(pred, gt, mask),
        fdd=value,
        abs_fdd=abs(value),
        kind=pred.kind,
        mask=mask.name,
        dataset=dataset,
    )


def aggregate_reports(reports: list[MetricReport], diversity_value: float | None = None) -> MetricReport:
    if not reports:
        raise ConfigurationError("no reports to aggregate")
    return MetricReport(
        mve=float(np.mean([r.mve for r in reports])),
        lve=float(np.mean([r.lve for r in reports])),
        fdd=float(np.mean([r.fdd for r in reports])),
        abs_fdd=float(np.mean([r.abs_fdd for r in reports])),
        diversity=diversity_value,
        kind=reports[0].kind,
        mask=reports[0].mask,
        dataset=reports[0].dataset,
        n_sequences=len(reports),
    )


def write_motion_stats_csv(path: str | Path, means: np.ndarray, stds: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["vertex", "mean_motion", "std_motion"])
        for i, (m, s) in enumerate(zip(means, stds)):
            writer.writerow([i, f"{m:.9g}", f"{s:.9g}"])


def write_animation_graphs_csv(path: str | Path, rows: list[tuple[str, int, int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "control", "frame", "value"])
        for row in rows:
            writer.writerow([row[0], row[1], row[2], f"{row[3]:.9g}"])
