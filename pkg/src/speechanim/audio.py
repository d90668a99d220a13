"""Speech feature extraction and temporal alignment.

Backends wrap pretrained self-supervised speech models behind one interface;
the ``stub`` backend computes deterministic windowed signal statistics so the
whole toolkit can run without multi-gigabyte weights. Features at a backend's
native rate are linearly interpolated to the visual frame count.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .data import AudioClip, TARGET_SAMPLE_RATE
from .errors import ConfigurationError, ContractError

STUB_FEATURE_DIM = 32
STUB_FEATURE_RATE = 50.0


@dataclass
class SpeechFeatureSequence:
    """T_a x F feature matrix at the encoder's native frame rate."""

    features: np.ndarray
    feature_rate: float

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ContractError(f"features must be T x F with T >= 1, got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ContractError("non-finite audio features")

    @property
    def length(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


class StubBackend:
    """Deterministic test backend: per-window energy and spectral band means.

    Windows are non-overlapping 20 ms (50 Hz) chunks of the 16 kHz signal.
    Feature 0 is the window RMS; features 1..31 are mean magnitudes of 31
    equal slices of the window's spectrum. Silence maps to all-zero features.
    """

    name = "stub"
    feature_dim = STUB_FEATURE_DIM
    feature_rate = STUB_FEATURE_RATE

    def encode(self, clip: AudioClip) -> SpeechFeatureSequence:
        window = int(round(TARGET_SAMPLE_RATE / self.feature_rate))
        samples = np.asarray(clip.samples, dtype=np.float64)
        n_windows = max(1, int(np.ceil(len(samples) / window)))
        padded = np.zeros(n_windows * window, dtype=np.float64)
        padded[: len(samples)] = samples
        chunks = padded.reshape(n_windows, window)
        rms = np.sqrt((chunks**2).mean(axis=1))
        spectrum = np.abs(np.fft.rfft(chunks, axis=1))
        n_bins = spectrum.shape[1]
        bands = np.array_split(np.arange(n_bins), self.feature_dim - 1)
        band_means = np.stack([spectrum[:, b].mean(axis=1) for b in bands], axis=1)
        # scale FFT magnitudes to the waveform's order of magnitude
        band_means = band_means / window
        feats = np.concatenate([rms[:, None], band_means], axis=1)
        return SpeechFeatureSequence(features=feats.astype(np.float32), feature_rate=self.feature_rate)


class _PretrainedBackend:
    """Shared wrapper for transformer speech models (frozen weights)."""

    model_id: str = ""
    name = "pretrained"
    feature_dim = 768
    feature_rate = 49.95  # 16 kHz / 320-sample stride, minus edge frames

    def __init__(self, weights_path: str | None = None):
        try:
            import torch  # noqa: F401
            import transformers
        except ImportError as exc:
            raise ConfigurationError(
                f"backend {self.name!r} needs the transformers package; "
                "install it or use encoder.name=stub"
            ) from exc
        source = weights_path or self.model_id
        try:
            self._processor = transformers.AutoFeatureExtractor.from_pretrained(source)
            self._model = transformers.AutoModel.from_pretrained(source)
        except Exception as exc:
            raise ConfigurationError(
                f"cannot load weights for backend {self.name!r} from {source!r}: {exc}; "
                "pass encoder.weights_path or use encoder.name=stub"
            ) from exc
        self._model.eval()
        for p in self._model.parameters():
            p.requires_grad_(False)

    def encode(self, clip: AudioClip) -> SpeechFeatureSequence:
        import torch

        inputs = self._processor(
            clip.samples, sampling_rate=TARGET_SAMPLE_RATE, return_tensors="pt"
        )
        with torch.no_grad():
            out = self._model(**inputs).last_hidden_state[0]
        feats = out.cpu().numpy()
        rate = feats.shape[0] / max(clip.duration, 1e-9)
        return SpeechFeatureSequence(features=feats, feature_rate=rate)


class HubertBackend(_PretrainedBackend):
    name = "hubert"
    model_id = "facebook/hubert-base-ls960"


class Wav2Vec2Backend(_PretrainedBackend):
    name = "wav2vec2"
    model_id = "facebook/wav2vec2-base-960h"


_BACKENDS = {
    "stub": StubBackend,
    "hubert": HubertBackend,
    "wav2vec2": Wav2Vec2Backend,
}


def make_backend(name: str, weights_path: str | None = None):
    if name not in _BACKENDS:
        raise ConfigurationError(f"unknown encoder backend {name!r}, expected one of {sorted(_BACKENDS)}")
    if name == "stub":
        return StubBackend()
    return _BACKENDS[name](weights_path=weights_path)


def stub_encode(clip: AudioClip) -> SpeechFeatureSequence:
    return StubBackend().encode(clip)


def encode_audio(clip: AudioClip, backend) -> SpeechFeatureSequence:
    if clip.sample_rate != TARGET_SAMPLE_RATE:
        raise ContractError(f"encode_audio expects {TARGET_SAMPLE_RATE} Hz audio, got {clip.sample_rate}")
    return backend.encode(clip)


def align_to_frames(seq: SpeechFeatureSequence, n_frames: int) -> np.ndarray:
    """Resample a feature sequence to exactly n_frames rows.

    Linear interpolation along time; with n_frames equal to the native length
    this is the identity. Each output row is a convex combination of input
    rows, so per-column bounds are preserved.
    """
    if n_frames < 1:
        raise ContractError(f"n_frames must be >= 1, got {n_frames}")
    feats = seq.features
    t_in = feats.shape[0]
    if t_in == 0:
        raise ContractError("cannot align an empty feature sequence")
    if t_in == n_frames:
        return feats.copy()
    if t_in == 1:
        return np.repeat(feats, n_frames, axis=0)
    src = np.linspace(0.0, t_in - 1.0, n_frames)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, t_in - 1)
    w = (src - lo).astype(np.float32)[:, None]
    return (1.0 - w) * feats[lo] + w * feats[hi]


def save_feature_cache(path: str | Path, seq: SpeechFeatureSequence) -> None:
    container.write_container(
        path,
        seq.features,
        kind=container.KIND_FEATURES,
        fps=seq.feature_rate,
    )


def load_feature_cache(path: str | Path) -> SpeechFeatureSequence:
    feats, header = container.read_container(path)
    if header["kind"] != container.KIND_FEATURES:
        raise ContractError(f"{path}: expected a features container, got {header['kind']!r}")
    return SpeechFeatureSequence(features=feats, feature_rate=float(header["fps"]))
