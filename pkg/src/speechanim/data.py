"""Domain types and dataset ingestion.

Motion comes in two kinds: per-frame vertex displacements relative to a
neutral template mesh (``vertex-displacement``, D = 3*V) and per-frame rig
control / blendshape weight rows (``rig-control``, D = C). Audio is resampled
to 16 kHz mono at load time because the speech encoders operate at 16 kHz.

A dataset is described by a manifest CSV with columns
``audio_path, motion_path, template_path, subject, sentence, fps`` (plus an
optional ``representation`` column, ``absolute`` or ``displacement``, for
vertex data stored as raw positions). Paths are resolved relative to a root
directory.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from . import container
from .errors import AlignmentError, ConfigurationError, ContractError, DataError, FormatError

VERTEX_KIND = "vertex-displacement"
RIG_KIND = "rig-control"

TARGET_SAMPLE_RATE = 16000

# mismatch between audio duration * fps and the motion frame count beyond
# this many visual frames is a hard error, never silent truncation
FRAME_ALIGN_TOLERANCE = 1.0


@dataclass
class AnimationSequence:
    """N x D temporal motion matrix with identifying metadata."""

    frames: np.ndarray
    kind: str
    fps: float
    subject: str = ""
    sentence: str = ""

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ContractError(f"frames must be N x D with N >= 1, got shape {self.frames.shape}")
        if self.kind not in (VERTEX_KIND, RIG_KIND):
            raise ContractError(f"unknown sequence kind {self.kind!r}")
        if self.kind == VERTEX_KIND and self.frames.shape[1] % 3 != 0:
            raise ContractError(f"vertex sequences need D divisible by 3, got D={self.frames.shape[1]}")
        if not self.fps > 0:
            raise ContractError(f"fps must be positive, got {self.fps}")
        if not np.isfinite(self.frames).all():
            raise DataError(f"non-finite motion values in {self.subject}/{self.sentence}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def n_vertices(self) -> int:
        if self.kind != VERTEX_KIND:
            raise ContractError("n_vertices is only defined for vertex-displacement sequences")
        return self.frames.shape[1] // 3

    def as_vertices(self) -> np.ndarray:
        """View the frames as N x V x 3 (vertex kind only)."""
        return self.frames.reshape(self.n_frames, self.n_vertices, 3)


@dataclass
class TemplateMesh:
    """Neutral-pose vertex positions, V x 3."""

    vertices: np.ndarray
    topology: str = "unknown"

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float32)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ContractError(f"template must be V x 3, got shape {self.vertices.shape}")
        if not np.isfinite(self.vertices).all():
            raise DataError("non-finite template vertices")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]


@dataclass
class AudioClip:
    """Mono waveform with its sample rate and duration in seconds."""

    samples: np.ndarray
    sample_rate: int
    duration: float

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")

    @classmethod
    def from_samples(cls, samples: np.ndarray, sample_rate: int) -> "AudioClip":
        samples = np.asarray(samples, dtype=np.float32).reshape(-1)
        return cls(samples=samples, sample_rate=sample_rate, duration=len(samples) / sample_rate)


@dataclass
class RegionMask:
    """Lip and upper-face index sets.

    Indices are vertex indices for vertex data, control/blendshape column
    indices for rig data. The two sets may overlap (each metric reads only
    its own set). The published index lists live in external files; this type
    only validates and carries whatever the user supplies.
    """

    lip_indices: np.ndarray
    upper_face_indices: np.ndarray
    name: str = "mask"

    def __post_init__(self):
        self.lip_indices = np.asarray(sorted(set(int(i) for i in self.lip_indices)), dtype=np.int64)
        self.upper_face_indices = np.asarray(
            sorted(set(int(i) for i in self.upper_face_indices)), dtype=np.int64
        )
        if len(self.lip_indices) == 0 or len(self.upper_face_indices) == 0:
            raise ConfigurationError("region mask index sets must be non-empty")
        if (self.lip_indices < 0).any() or (self.upper_face_indices < 0).any():
            raise ConfigurationError("region mask indices must be non-negative")

    def validate_against(self, n_units: int) -> None:
        top = max(self.lip_indices.max(), self.upper_face_indices.max())
        if top >= n_units:
            raise ConfigurationError(f"mask index {top} out of range for {n_units} vertices/controls")

    @classmethod
    def load(cls, path: str | Path) -> "RegionMask":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read region mask {path}: {exc}") from exc
        if "lip" not in doc or "upper_face" not in doc:
            raise FormatError(f"{path}: region mask needs 'lip' and 'upper_face' arrays")
        return cls(lip_indices=doc["lip"], upper_face_indices=doc["upper_face"], name=path.stem)

    def save(self, path: str | Path) -> None:
        doc = {
            "lip": [int(i) for i in self.lip_indices],
            "upper_face": [int(i) for i in self.upper_face_indices],
        }
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def full(cls, n_units: int, name: str = "full") -> "RegionMask":
        idx = list(range(n_units))
        return cls(lip_indices=idx, upper_face_indices=idx, name=name)

    @classmethod
    def halves(cls, n_units: int, name: str = "halves") -> "RegionMask":
        """First half of the indices as lips, second half as upper face."""
        mid = max(1, n_units // 2)
        return cls(lip_indices=list(range(mid)), upper_face_indices=list(range(mid, n_units)), name=name)


@dataclass(frozen=True)
class SplitEntry:
    """One sequence reference; ``condition`` names the training subject used
    as the style condition when a test set is expanded per condition."""

    subject: str
    sentence: str
    condition: str | None = None

    @property
    def pair(self) -> tuple[str, str]:
        return (self.subject, self.sentence)


@dataclass
class DatasetSplit:
    train: list[SplitEntry] = field(default_factory=list)
    val: list[SplitEntry] = field(default_factory=list)
    test_a: list[SplitEntry] = field(default_factory=list)
    test_b: list[SplitEntry] = field(default_factory=list)

    def validate(self) -> None:
        """Check pairwise disjointness and that test_b subjects are unseen."""
        parts = {
            "train": {e.pair for e in self.train},
            "val": {e.pair for e in self.val},
            "test_a": {e.pair for e in self.test_a},
            "test_b": {e.pair for e in self.test_b},
        }
        names = list(parts)
        for i in range(len(names)):
            for j in range(i + 1, len(names)):
                overlap = parts[names[i]] & parts[names[j]]
                if overlap:
                    raise ConfigurationError(
                        f"splits {names[i]} and {names[j]} overlap on {sorted(overlap)[:3]}"
                    )
        train_subjects = {e.subject for e in self.train}
        leaked = {e.subject for e in self.test_b} & train_subjects
        if leaked:
            raise ConfigurationError(f"test_b subjects seen in training: {sorted(leaked)}")


@dataclass
class DatasetEntry:
    """One loaded sequence with its audio (and template for vertex data)."""

    audio: AudioClip
    motion: AnimationSequence
    template: TemplateMesh | None = None

    @property
    def subject(self) -> str:
        return self.motion.subject

    @property
    def sentence(self) -> str:
        return self.motion.sentence


def load_audio(path: str | Path) -> AudioClip:
    """Load a WAV file, downmix to mono and resample to 16 kHz."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing audio file {path}")
    try:
        rate, samples = wavfile.read(path)
    except ValueError as exc:
        raise FormatError(f"{path}: unreadable WAV: {exc}") from exc
    samples = np.asarray(samples)
    if samples.dtype.kind == "i":
        samples = samples.astype(np.float64) / float(np.iinfo(samples.dtype).max)
    elif samples.dtype.kind == "u":
        info = np.iinfo(samples.dtype)
        samples = (samples.astype(np.float64) - (info.max + 1) / 2) / ((info.max + 1) / 2)
    else:
        samples = samples.astype(np.float64)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    duration = len(samples) / rate
    if rate != TARGET_SAMPLE_RATE:
        g = math.gcd(int(rate), TARGET_SAMPLE_RATE)
        samples = resample_poly(samples, TARGET_SAMPLE_RATE // g, int(rate) // g)
    return AudioClip(samples=samples.astype(np.float32), sample_rate=TARGET_SAMPLE_RATE, duration=duration)


def save_audio(path: str | Path, clip: AudioClip) -> None:
    wavfile.write(path, clip.sample_rate, clip.samples.astype(np.float32))


def save_sequence(path: str | Path, seq: AnimationSequence) -> None:
    container.write_container(
        path, seq.frames, kind=seq.kind, fps=seq.fps, subject=seq.subject, sentence=seq.sentence
    )


def load_sequence(path: str | Path) -> AnimationSequence:
    frames, header = container.read_container(path)
    kind = header["kind"]
    if kind == container.KIND_VERTEX_POSITION:
        raise FormatError(
            f"{path}: holds absolute vertex positions; load it through load_vertex_dataset "
            "with a template so positions become displacements"
        )
    return AnimationSequence(
        frames=frames,
        kind=kind,
        fps=float(header["fps"]),
        subject=header.get("subject", ""),
        sentence=header.get("sentence", ""),
    )


def save_template(path: str | Path, mesh: TemplateMesh) -> None:
    container.write_container(
        path, mesh.vertices, kind=container.KIND_TEMPLATE, fps=0.0, extra={"topology": mesh.topology}
    )


def load_template(path: str | Path) -> TemplateMesh:
    vertices, header = container.read_container(path)
    if header["kind"] != container.KIND_TEMPLATE:
        raise FormatError(f"{path}: expected a template-mesh container, got {header['kind']!r}")
    return TemplateMesh(vertices=vertices, topology=header.get("topology", "unknown"))


def _read_manifest(manifest: str | Path) -> list[dict]:
    manifest = Path(manifest)
    if not manifest.exists():
        raise DataError(f"missing manifest {manifest}")
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FormatError(f"{manifest}: empty manifest")
    required = {"audio_path", "motion_path", "subject", "sentence", "fps"}
    missing = required - set(rows[0])
    if missing:
        raise FormatError(f"{manifest}: missing manifest columns {sorted(missing)}")
    return rows


def _check_alignment(clip: AudioClip, n_frames: int, fps: float, entry: str) -> None:
    mismatch = abs(clip.duration * fps - n_frames)
    if mismatch > FRAME_ALIGN_TOLERANCE + 1e-6:
        raise AlignmentError(
            f"{entry}: audio covers {clip.duration * fps:.2f} frames at {fps} fps "
            f"but motion has {n_frames}; mismatch {mismatch:.2f} > {FRAME_ALIGN_TOLERANCE} frame"
        )


def load_vertex_dataset(root: str | Path, manifest: str | Path) -> list[DatasetEntry]:
    """Load (audio, vertex motion, template) triples listed in a manifest.

    Motion stored as absolute positions (``representation=absolute`` in the
    manifest, or a vertex-position container) is converted to displacements by
    subtracting the subject's template.
    """
    root = Path(root)
    entries: list[DatasetEntry] = []
    for row in _read_manifest(manifest):
        tag = f"{row['subject']}/{row['sentence']}"
        template_path = (row.get("template_path") or "").strip()
        if not template_path:
            raise DataError(f"{tag}: vertex manifest entry lacks template_path")
        tpath = root / template_path
        if not tpath.exists():
            raise DataError(f"{tag}: missing template file {tpath}")
        template = load_template(tpath)

        mpath = root / row["motion_path"]
        if not mpath.exists():
            raise DataError(f"{tag}: missing motion file {mpath}")
        frames, header = container.read_container(mpath)
        declared = (row.get("representation") or "").strip()
        is_absolute = (
            declared == "absolute"
            or (not declared and header["kind"] == container.KIND_VERTEX_POSITION)
        )
        if declared and declared not in ("absolute", "displacement"):
            raise FormatError(f"{tag}: representation must be absolute|displacement, got {declared!r}")
        if frames.shape[1] != 3 * template.n_vertices:
            raise FormatError(
                f"{tag}: motion width {frames.shape[1]} does not match template "
                f"({template.n_vertices} vertices)"
            )
        if is_absolute:
            frames = frames - template.vertices.reshape(1, -1)

        fps = float(row["fps"])
        motion = AnimationSequence(
            frames=frames, kind=VERTEX_KIND, fps=fps, subject=row["subject"], sentence=row["sentence"]
        )
        apath = root / row["audio_path"]
        if not apath.exists():
            raise DataError(f"{tag}: missing audio file {apath}")
        clip = load_audio(apath)
        _check_alignment(clip, motion.n_frames, fps, tag)
        entries.append(DatasetEntry(audio=clip, motion=motion, template=template))
    return entries


def load_rig_dataset(root: str | Path, manifest: str | Path) -> list[DatasetEntry]:
    """Load (audio, rig-control motion) pairs listed in a manifest.

    Motion may be a container or a plain CSV of per-frame control rows. No
    template subtraction happens for rig data.
    """
    root = Path(root)
    entries: list[DatasetEntry] = []
    for row in _read_manifest(manifest):
        tag = f"{row['subject']}/{row['sentence']}"
        mpath = root / row["motion_path"]
        if not mpath.exists():
            raise DataError(f"{tag}: missing motion file {mpath}")
        if mpath.suffix.lower() == ".csv":
            frames = container.read_rig_csv(mpath)
        else:
            frames, header = container.read_container(mpath)
            if header["kind"] != container.KIND_RIG_CONTROL:
                raise FormatError(f"{tag}: expected rig-control data, got {header['kind']!r}")
        if not np.isfinite(frames).all():
            raise DataError(f"{tag}: non-finite control values")
        fps = float(row["fps"])
        motion = AnimationSequence(
            frames=frames, kind=RIG_KIND, fps=fps, subject=row["subject"], sentence=row["sentence"]
        )
        apath = root / row["audio_path"]
        if not apath.exists():
            raise DataError(f"{tag}: missing audio file {apath}")
        clip = load_audio(apath)
        _check_alignment(clip, motion.n_frames, fps, tag)
        entries.append(DatasetEntry(audio=clip, motion=motion))
    return entries


def _by_subject(dataset) -> dict[str, list[str]]:
    """Sorted sentence list per subject from loaded entries or bare pairs."""
    table: dict[str, set[str]] = {}
    for item in dataset:
        if isinstance(item, DatasetEntry):
            subject, sentence = item.subject, item.sentence
        elif isinstance(item, SplitEntry):
            subject, sentence = item.subject, item.sentence
        else:
            subject, sentence = item[0], item[1]
        table.setdefault(subject, set()).add(sentence)
    return {s: sorted(v) for s, v in sorted(table.items())}


def _take(
    subjects: list[str], table: dict[str, list[str]], lo: int, hi: int, condition_subjects=None
) -> list[SplitEntry]:
    out = []
    for s in subjects:
        for sent in table[s][lo:hi]:
            if condition_subjects:
                out.extend(SplitEntry(s, sent, condition=c) for c in condition_subjects)
            else:
                out.append(SplitEntry(s, sent))
    return out


def make_split(dataset, policy: str) -> DatasetSplit:
    """Partition a dataset into train/val/test_a/test_b.

    Named policies reproduce the published benchmark splits structurally:
    sorted subjects are assigned to seen/unseen groups by count, and unseen
    test sets are expanded once per training subject (the style condition a
    sequence will be generated with), which is how those test sets are
    counted. ``ratio-80-10-10`` splits by sequence count in deterministic
    order with test_b left empty.
    """
    table = _by_subject(dataset)
    subjects = list(table)

    def need(n_subjects: int, n_sentences: int) -> None:
        if len(subjects) < n_subjects:
            raise ConfigurationError(
                f"policy {policy!r} needs {n_subjects} subjects, dataset has {len(subjects)}"
            )
        short = [s for s in subjects if len(table[s]) < n_sentences]
        if short:
            raise ConfigurationError(
                f"policy {policy!r} needs {n_sentences} sentences per subject; too few for {short[:3]}"
            )

    if policy == "biwi":
        # 6 seen subjects: 32 train + 4 val + 4 test sentences; the other 8
        # subjects' last 4 sentences form test_b, one entry per style condition
        need(14, 40)
        seen, unseen = subjects[:6], subjects[6:14]
        split = DatasetSplit(
            train=_take(seen, table, 0, 32),
            val=_take(seen, table, 32, 36),
            test_a=_take(seen, table, 36, 40),
            test_b=_take(unseen, table, 36, 40, condition_subjects=seen),
        )
    elif policy == "vocaset":
        need(12, 40)
        seen, val_s, test_s = subjects[:8], subjects[8:10], subjects[10:12]
        split = DatasetSplit(
            train=_take(seen, table, 0, 40),
            val=_take(val_s, table, 0, 20),
            test_a=[],
            test_b=_take(test_s, table, 20, 40, condition_subjects=seen),
        )
    elif policy == "multiface":
        need(13, 50)
        seen, unseen = subjects[:9], subjects[9:13]
        split = DatasetSplit(
            train=_take(seen, table, 0, 40),
            val=_take(seen, table, 40, 45),
            test_a=_take(seen, table, 45, 50),
            test_b=_take(unseen, table, 45, 50, condition_subjects=seen),
        )
    elif policy == "ratio-80-10-10":
        pairs = sorted((s, sent) for s, sents in table.items() for sent in sents)
        n = len(pairs)
        n_train = int(n * 0.8)
        n_val = int(n * 0.1)
        split = DatasetSplit(
            train=[SplitEntry(*p) for p in pairs[:n_train]],
            val=[SplitEntry(*p) for p in pairs[n_train : n_train + n_val]],
            test_a=[SplitEntry(*p) for p in pairs[n_train + n_val :]],
            test_b=[],
        )
    else:
        raise ConfigurationError(f"unknown split policy {policy!r}")
    split.validate()
    return split


def synthetic_envelope(n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random envelope in [0, 1] driving both audio and motion."""
    t = np.linspace(0.0, 1.0, n_frames)
    freqs = rng.uniform(0.5, 3.0, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    amps = rng.uniform(0.3, 1.0, size=3)
    wave = sum(a * np.sin(2.0 * np.pi * f * t + p) for a, f, p in zip(amps, freqs, phases))
    wave = wave / (np.abs(wave).max() + 1e-12)
    return 0.5 * (wave + 1.0)


def generate_synthetic_dataset(
    n_sequences: int,
    n_frames: int,
    dims: int,
    seed: int,
    *,
    fps: float = 25.0,
    n_subjects: int = 2,
    kind: str = "rig",
) -> list[DatasetEntry]:
    """Deterministic desk-scale dataset with a learnable audio-motion link.

    The audio of each sequence is a fixed carrier tone amplitude-modulated by
    a smooth random envelope; every motion dimension is an affine function of
    that same envelope, so per-frame audio energy predicts the motion. Values
    stay inside [-1, 1]. Subjects cycle through ``n_subjects`` synthetic ids.
    ``kind="vertex"`` labels the same data as vertex displacements (dims must
    then be divisible by 3), which exercises the noise-encoder path.
    """
    if n_sequences < 1 or n_frames < 1 or dims < 1:
        raise ConfigurationError("n_sequences, n_frames and dims must all be >= 1")
    if kind not in ("rig", "vertex"):
        raise ConfigurationError(f"synthetic kind must be rig|vertex, got {kind!r}")
    seq_kind = RIG_KIND if kind == "rig" else VERTEX_KIND
    if seq_kind == VERTEX_KIND and dims % 3 != 0:
        raise ConfigurationError("vertex synthetic data needs dims divisible by 3")
    rng = np.random.default_rng(seed)
    entries: list[DatasetEntry] = []
    duration = n_frames / fps
    n_samples = int(round(duration * TARGET_SAMPLE_RATE))
    t_audio = np.arange(n_samples) / TARGET_SAMPLE_RATE
    carrier = np.sin(2.0 * np.pi * 220.0 * t_audio)
    # one dataset-wide envelope->motion map, so audio determines motion;
    # a per-subject gain factor gives the style condition real signal
    offsets = rng.uniform(-0.2, 0.2, size=dims)
    gains = rng.uniform(0.2, 0.6, size=dims) * rng.choice([-1.0, 1.0], size=dims)
    subject_scale = np.linspace(0.85, 1.15, n_subjects) if n_subjects > 1 else np.ones(1)
    for i in range(n_sequences):
        env = synthetic_envelope(n_frames, rng)
        # hold each frame's envelope value across its audio samples
        frame_of_sample = np.minimum((t_audio * fps).astype(int), n_frames - 1)
        audio = (carrier * env[frame_of_sample]).astype(np.float32)
        frames = offsets[None, :] + subject_scale[i % n_subjects] * gains[None, :] * env[:, None]
        frames = np.clip(frames, -1.0, 1.0).astype(np.float32)
        subject = f"s{i % n_subjects:02d}"
        motion = AnimationSequence(
            frames=frames, kind=seq_kind, fps=fps, subject=subject, sentence=f"u{i:03d}"
        )
        clip = AudioClip(samples=audio, sample_rate=TARGET_SAMPLE_RATE, duration=duration)
        entries.append(DatasetEntry(audio=clip, motion=motion))
    return entries


def write_dataset(entries: list[DatasetEntry], out_dir: str | Path, *, rig_as_csv: bool = False) -> Path:
    """Write a loaded/generated dataset plus its manifest under out_dir."""
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    (out_dir / "motion").mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.csv"
    rows = []
    for e in entries:
        stem = f"{e.subject}_{e.sentence}"
        audio_rel = f"audio/{stem}.wav"
        save_audio(out_dir / audio_rel, e.audio)
        if e.motion.kind == RIG_KIND and rig_as_csv:
            motion_rel = f"motion/{stem}.csv"
            container.write_rig_csv(out_dir / motion_rel, e.motion.frames)
        else:
            motion_rel = f"motion/{stem}.anim"
            save_sequence(out_dir / motion_rel, e.motion)
        row = {
            "audio_path": audio_rel,
            "motion_path": motion_rel,
            "template_path": "",
            "subject": e.subject,
            "sentence": e.sentence,
            "fps": f"{e.motion.fps:g}",
        }
        if e.template is not None:
            template_rel = f"motion/template_{e.subject}.anim"
            if not (out_dir / template_rel).exists():
                save_template(out_dir / template_rel, e.template)
            row["template_path"] = template_rel
        rows.append(row)
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["audio_path", "motion_path", "template_path", "subject", "sentence", "fps"]
        )
        writer.writeheader()
        writer.writerows(rows)
    return manifest_path
