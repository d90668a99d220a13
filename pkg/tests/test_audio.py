import numpy as np
import pytest
from hypothesis import given, strategies as st

from speechanim.audio import (
    SpeechFeatureSequence,
    StubBackend,
    align_to_frames,
    encode_audio,
    load_feature_cache,
    make_backend,
    save_feature_cache,
    stub_encode,
)
from speechanim.data import AudioClip
from speechanim.errors import ConfigurationError, ContractError


def _clip(samples):
    return AudioClip.from_samples(np.asarray(samples, dtype=np.float32), 16000)


def _tone(seconds, freq=440.0, amplitude=0.2):
    t = np.arange(int(seconds * 16000)) / 16000
    return _clip(amplitude * np.sin(2 * np.pi * freq * t))


class TestStubBackend:
    def test_silence_gives_zero_features(self):
        feats = stub_encode(_clip(np.zeros(16000)))
        assert np.all(feats.features == 0.0)

    def test_deterministic(self):
        clip = _tone(0.5)
        a = stub_encode(clip)
        b = stub_encode(clip)
        assert np.array_equal(a.features, b.features)

    def test_amplitude_sensitivity(self):
        # energy feature doubles with amplitude: verify against direct RMS
        clip = _tone(0.2, amplitude=0.1)
        doubled = _clip(clip.samples * 2.0)
        fa, fb = stub_encode(clip), stub_encode(doubled)
        assert not np.array_equal(fa.features, fb.features)
        window = 320
        direct_rms = np.sqrt((clip.samples[:window].astype(np.float64) ** 2).mean())
        assert fa.features[0, 0] == pytest.approx(direct_rms, rel=1e-5)
        assert fb.features[0, 0] == pytest.approx(2 * direct_rms, rel=1e-5)

    def test_one_second_length(self):
        # oracle: the backend's own output-length rule on a silent input
        backend = StubBackend()
        silent = _clip(np.zeros(16000))
        expected = backend.encode(silent).length
        assert expected in (49, 50, 51)
        assert backend.encode(_tone(1.0)).length == expected

    def test_shape_contract(self):
        feats = stub_encode(_tone(0.3))
        assert feats.dim == 32
        assert feats.feature_rate == 50.0

    def test_length_monotonic_in_duration(self):
        lengths = [stub_encode(_tone(s)).length for s in (0.1, 0.5, 1.0, 2.0)]
        assert lengths == sorted(lengths)
        assert lengths[0] < lengths[-1]


class TestEncodeAudio:
    def test_wrong_sample_rate_rejected(self):
        clip = AudioClip.from_samples(np.zeros(100, dtype=np.float32), 8000)
        with pytest.raises(ContractError):
            encode_audio(clip, StubBackend())

    def test_unknown_backend_name(self):
        with pytest.raises(ConfigurationError, match="unknown encoder backend"):
            make_backend("whisper")

    def test_pretrained_backend_unavailable_advises_stub(self):
        # no weights in the sandbox: the error must point at the stub
        with pytest.raises(ConfigurationError, match="stub"):
            make_backend("hubert", weights_path="/nonexistent/weights")


class TestAlignment:
    def test_identity_when_lengths_match(self):
        feats = SpeechFeatureSequence(
            features=np.random.default_rng(0).normal(size=(10, 3)).astype(np.float32),
            feature_rate=50.0,
        )
        out = align_to_frames(feats, 10)
        assert np.array_equal(out, feats.features)

    def test_constant_rows_stay_constant(self):
        feats = SpeechFeatureSequence(features=np.full((4, 2), 3.5, dtype=np.float32), feature_rate=50.0)
        for n in (1, 3, 4, 9):
            assert np.allclose(align_to_frames(feats, n), 3.5)

    def test_hand_linear_interpolation(self):
        feats = SpeechFeatureSequence(features=np.array([[0.0], [2.0]], dtype=np.float32), feature_rate=50.0)
        out = align_to_frames(feats, 3)
        assert np.allclose(out, [[0.0], [1.0], [2.0]])

    def test_single_input_row_repeats(self):
        feats = SpeechFeatureSequence(features=np.array([[1.0, 2.0]], dtype=np.float32), feature_rate=50.0)
        assert np.allclose(align_to_frames(feats, 5), [[1.0, 2.0]] * 5)

    def test_bad_frame_count(self):
        feats = SpeechFeatureSequence(features=np.zeros((2, 2), dtype=np.float32), feature_rate=50.0)
        with pytest.raises(ContractError):
            align_to_frames(feats, 0)

    @given(
        seed=st.integers(min_value=0, max_value=2**31 - 1),
        t_in=st.integers(min_value=2, max_value=12),
        n_out=st.integers(min_value=1, max_value=25),
    )
    def test_convex_combination_preserves_column_bounds(self, seed, t_in, n_out):
        rng = np.random.default_rng(seed)
        feats = SpeechFeatureSequence(
            features=rng.normal(size=(t_in, 3)).astype(np.float32), feature_rate=50.0
        )
        out = align_to_frames(feats, n_out)
        assert out.shape == (n_out, 3)
        eps = 1e-5
        assert np.all(out.min(axis=0) >= feats.features.min(axis=0) - eps)
        assert np.all(out.max(axis=0) <= feats.features.max(axis=0) + eps)


class TestFeatureCache:
    def test_round_trip(self, tmp_path):
        feats = stub_encode(_tone(0.4))
        save_feature_cache(tmp_path / "f.anim", feats)
        loaded = load_feature_cache(tmp_path / "f.anim")
        assert np.array_equal(loaded.features, feats.features)
        assert loaded.feature_rate == feats.feature_rate


def test_backend_swap_keeps_downstream_shape_contract():
    """Aligned output is always (n_frames, backend.feature_dim)."""
    clip = _tone(0.5)
    backend = StubBackend()
    aligned = align_to_frames(encode_audio(clip, backend), 12)
    assert aligned.shape == (12, backend.feature_dim)
