import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from speechanim import container
from speechanim.data import (
    AnimationSequence,
    AudioClip,
    DatasetEntry,
    RegionMask,
    RIG_KIND,
    TemplateMesh,
    VERTEX_KIND,
    generate_synthetic_dataset,
    load_audio,
    load_rig_dataset,
    load_sequence,
    load_vertex_dataset,
    make_split,
    save_audio,
    save_sequence,
    save_template,
    write_dataset,
)
from speechanim.errors import (
    AlignmentError,
    ConfigurationError,
    ContractError,
    DataError,
    FormatError,
)


def _write_manifest(path, rows, fields=("audio_path", "motion_path", "template_path", "subject", "sentence", "fps")):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields))
        writer.writeheader()
        writer.writerows(rows)


def _tone(n_frames, fps, amplitude=0.1):
    n = int(round(n_frames / fps * 16000))
    t = np.arange(n) / 16000
    return AudioClip.from_samples(amplitude * np.sin(2 * np.pi * 440 * t), 16000)


class TestTypes:
    def test_sequence_validation(self):
        with pytest.raises(ContractError):
            AnimationSequence(frames=np.zeros((0, 3)), kind=RIG_KIND, fps=25)
        with pytest.raises(ContractError):
            AnimationSequence(frames=np.zeros((2, 4)), kind=VERTEX_KIND, fps=25)
        with pytest.raises(ContractError):
            AnimationSequence(frames=np.zeros((2, 3)), kind=RIG_KIND, fps=0)
        with pytest.raises(DataError):
            AnimationSequence(frames=np.full((1, 2), np.nan), kind=RIG_KIND, fps=25)

    def test_vertex_view(self):
        seq = AnimationSequence(frames=np.arange(12, dtype=np.float32).reshape(2, 6), kind=VERTEX_KIND, fps=25)
        assert seq.n_vertices == 2
        assert seq.as_vertices().shape == (2, 2, 3)

    def test_region_mask_validation(self):
        with pytest.raises(ConfigurationError):
            RegionMask(lip_indices=[], upper_face_indices=[1])
        mask = RegionMask(lip_indices=[2, 0, 2], upper_face_indices=[1])
        assert mask.lip_indices.tolist() == [0, 2]  # deduplicated, sorted

    def test_region_mask_json_round_trip(self, tmp_path):
        mask = RegionMask(lip_indices=[0, 1], upper_face_indices=[2, 3], name="m")
        mask.save(tmp_path / "mask.json")
        loaded = RegionMask.load(tmp_path / "mask.json")
        assert loaded.lip_indices.tolist() == [0, 1]
        assert loaded.upper_face_indices.tolist() == [2, 3]


class TestContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        seq = AnimationSequence(
            frames=rng.normal(size=(7, 9)).astype(np.float32),
            kind=RIG_KIND, fps=30.0, subject="s1", sentence="u1",
        )
        save_sequence(tmp_path / "a.anim", seq)
        loaded = load_sequence(tmp_path / "a.anim")
        assert np.array_equal(loaded.frames, seq.frames)
        assert (loaded.kind, loaded.fps, loaded.subject, loaded.sentence) == (RIG_KIND, 30.0, "s1", "u1")

    @given(seed=st.integers(min_value=0, max_value=2**31 - 1))
    def test_round_trip_property(self, seed, tmp_path_factory):
        rng = np.random.default_rng(seed)
        frames = (rng.normal(size=(3, 5)) * 100).astype(np.float32)
        path = tmp_path_factory.mktemp("rt") / "x.anim"
        container.write_container(path, frames, kind=RIG_KIND, fps=25.0)
        loaded, _ = container.read_container(path)
        assert np.array_equal(loaded, frames)

    def test_rig_csv_round_trip_lossless(self, tmp_path):
        frames = np.random.default_rng(1).normal(size=(4, 52)).astype(np.float32)
        container.write_rig_csv(tmp_path / "c.csv", frames)
        assert np.array_equal(container.read_rig_csv(tmp_path / "c.csv").astype(np.float32), frames)

    def test_rig_csv_header_row_skipped(self, tmp_path):
        (tmp_path / "c.csv").write_text("jawOpen,mouthClose\n0.5,0.25\n1,0\n")
        frames = container.read_rig_csv(tmp_path / "c.csv")
        assert frames.shape == (2, 2)

    def test_rig_csv_ragged_rows(self, tmp_path):
        (tmp_path / "c.csv").write_text("1,2,3\n1,2\n")
        with pytest.raises(FormatError, match="ragged"):
            container.read_rig_csv(tmp_path / "c.csv")

    def test_rig_csv_non_finite(self, tmp_path):
        (tmp_path / "c.csv").write_text("1,nan\n")
        with pytest.raises(FormatError, match="non-finite"):
            container.read_rig_csv(tmp_path / "c.csv")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.anim").write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(FormatError, match="magic"):
            container.read_container(tmp_path / "bad.anim")


def _vertex_fixture(tmp_path, *, absolute, n_frames=2, fps=25.0, offset=None):
    """One-entry vertex dataset; returns (root, manifest path, template)."""
    template = TemplateMesh(vertices=np.array([[0.0, 0, 0], [1.0, 1, 1]], dtype=np.float32))
    save_template(tmp_path / "template.anim", template)
    positions = np.tile(template.vertices.reshape(-1), (n_frames, 1)).astype(np.float32)
    if offset is not None:
        positions[1, 0:3] += offset
    frames = positions if absolute else positions - template.vertices.reshape(1, -1)
    container.write_container(
        tmp_path / "motion.anim",
        frames,
        kind=container.KIND_VERTEX_POSITION if absolute else container.KIND_VERTEX_DISPLACEMENT,
        fps=fps, subject="s1", sentence="u1",
    )
    save_audio(tmp_path / "audio.wav", _tone(n_frames, fps))
    _write_manifest(
        tmp_path / "manifest.csv",
        [{
            "audio_path": "audio.wav", "motion_path": "motion.anim",
            "template_path": "template.anim", "subject": "s1", "sentence": "u1", "fps": fps,
        }],
    )
    return tmp_path, tmp_path / "manifest.csv", template


class TestVertexLoading:
    def test_positions_equal_template_give_zero_displacements(self, tmp_path):
        root, manifest, _ = _vertex_fixture(tmp_path, absolute=True)
        entries = load_vertex_dataset(root, manifest)
        assert len(entries) == 1
        assert entries[0].motion.kind == VERTEX_KIND
        assert np.allclose(entries[0].motion.frames, 0.0)

    def test_unit_offset_becomes_unit_displacement(self, tmp_path):
        root, manifest, _ = _vertex_fixture(tmp_path, absolute=True, offset=np.array([1.0, 0, 0]))
        entries = load_vertex_dataset(root, manifest)
        assert np.allclose(entries[0].motion.frames[1, 0:3], [1.0, 0.0, 0.0])
        assert np.allclose(entries[0].motion.frames[0], 0.0)

    def test_displacement_plus_template_recovers_positions(self, tmp_path):
        root, manifest, template = _vertex_fixture(tmp_path, absolute=True, offset=np.array([0.5, -0.25, 2.0]))
        original, _ = container.read_container(tmp_path / "motion.anim")
        entries = load_vertex_dataset(root, manifest)
        recovered = entries[0].motion.frames + template.vertices.reshape(1, -1)
        assert np.allclose(recovered, original, atol=1e-9)

    def test_missing_file_names_entry(self, tmp_path):
        root, manifest, _ = _vertex_fixture(tmp_path, absolute=False)
        (tmp_path / "motion.anim").unlink()
        with pytest.raises(DataError, match="s1/u1"):
            load_vertex_dataset(root, manifest)

    def test_duration_mismatch_is_hard_error(self, tmp_path):
        root, manifest, _ = _vertex_fixture(tmp_path, absolute=False, n_frames=2)
        save_audio(tmp_path / "audio.wav", _tone(8, 25.0))  # 6 frames too long
        with pytest.raises(AlignmentError):
            load_vertex_dataset(root, manifest)

    def test_biwi_layout_enumerates_1120_entries(self, tmp_path):
        # 14 subjects x 40 sentences x 2 capture conditions
        template = TemplateMesh(vertices=np.zeros((2, 3), dtype=np.float32))
        save_template(tmp_path / "template.anim", template)
        frames = np.zeros((2, 6), dtype=np.float32)
        container.write_container(
            tmp_path / "motion.anim", frames, kind=container.KIND_VERTEX_DISPLACEMENT, fps=25.0
        )
        save_audio(tmp_path / "audio.wav", _tone(2, 25.0))
        rows = [
            {
                "audio_path": "audio.wav", "motion_path": "motion.anim",
                "template_path": "template.anim",
                "subject": f"subj{s:02d}", "sentence": f"{sent:02d}_{cond}", "fps": 25.0,
            }
            for s in range(14)
            for sent in range(1, 41)
            for cond in ("neutral", "emotional")
        ]
        _write_manifest(tmp_path / "manifest.csv", rows)
        entries = load_vertex_dataset(tmp_path, tmp_path / "manifest.csv")
        assert len(entries) == 1120


class TestRigLoading:
    def _fixture(self, tmp_path, frames, fps=60.0, as_csv=True):
        if as_csv:
            container.write_rig_csv(tmp_path / "motion.csv", frames)
            motion = "motion.csv"
        else:
            container.write_container(tmp_path / "motion.anim", frames, kind=RIG_KIND, fps=fps)
            motion = "motion.anim"
        save_audio(tmp_path / "audio.wav", _tone(frames.shape[0], fps))
        _write_manifest(
            tmp_path / "manifest.csv",
            [{
                "audio_path": "audio.wav", "motion_path": motion, "template_path": "",
                "subject": "a1", "sentence": "u1", "fps": fps,
            }],
        )
        return tmp_path / "manifest.csv"

    def test_arkit_style_52_columns(self, tmp_path):
        frames = np.random.default_rng(0).uniform(0, 1, size=(6, 52)).astype(np.float32)
        manifest = self._fixture(tmp_path, frames, fps=60.0)
        entries = load_rig_dataset(tmp_path, manifest)
        assert entries[0].motion.dim == 52
        assert entries[0].motion.kind == RIG_KIND
        assert np.allclose(entries[0].motion.frames, frames, atol=1e-6)

    def test_single_zero_frame_is_valid_neutral(self, tmp_path):
        manifest = self._fixture(tmp_path, np.zeros((1, 5), dtype=np.float32), fps=60.0)
        entries = load_rig_dataset(tmp_path, manifest)
        assert entries[0].motion.n_frames == 1

    def test_ten_seconds_at_60fps_is_600_frames(self, tmp_path):
        frames = np.zeros((600, 4), dtype=np.float32)
        manifest = self._fixture(tmp_path, frames, fps=60.0, as_csv=False)
        entries = load_rig_dataset(tmp_path, manifest)
        assert entries[0].motion.n_frames == 600
        assert entries[0].audio.duration == pytest.approx(10.0, abs=0.02)


def _pair_dataset(subjects, sentences_per_subject):
    return [
        (f"s{si:02d}", f"u{ui:02d}")
        for si in range(subjects)
        for ui in range(sentences_per_subject)
    ]


class TestSplits:
    def test_biwi_counts(self):
        split = make_split(_pair_dataset(14, 40), "biwi")
        assert (len(split.train), len(split.val), len(split.test_a), len(split.test_b)) == (192, 24, 24, 192)

    def test_multiface_counts(self):
        split = make_split(_pair_dataset(13, 50), "multiface")
        assert (len(split.train), len(split.val), len(split.test_a), len(split.test_b)) == (360, 45, 45, 180)

    def test_vocaset_counts(self):
        split = make_split(_pair_dataset(12, 40), "vocaset")
        assert (len(split.train), len(split.val), len(split.test_a), len(split.test_b)) == (320, 40, 0, 320)

    def test_ratio_split_on_ten(self):
        split = make_split(_pair_dataset(2, 5), "ratio-80-10-10")
        assert (len(split.train), len(split.val), len(split.test_a)) == (8, 1, 1)
        assert split.test_b == []

    @pytest.mark.parametrize(
        "policy,shape",
        [("biwi", (14, 40)), ("vocaset", (12, 40)), ("multiface", (13, 50)), ("ratio-80-10-10", (3, 7))],
    )
    def test_disjointness_and_unseen_subjects(self, policy, shape):
        split = make_split(_pair_dataset(*shape), policy)
        split.validate()  # raises on any overlap or subject leak

    def test_test_b_conditions_are_training_subjects(self):
        split = make_split(_pair_dataset(14, 40), "biwi")
        train_subjects = {e.subject for e in split.train}
        assert all(e.condition in train_subjects for e in split.test_b)

    def test_insufficient_dataset_rejected(self):
        with pytest.raises(ConfigurationError):
            make_split(_pair_dataset(3, 40), "biwi")
        with pytest.raises(ConfigurationError):
            make_split(_pair_dataset(14, 10), "biwi")

    def test_unknown_policy(self):
        with pytest.raises(ConfigurationError):
            make_split(_pair_dataset(2, 2), "nope")


class TestSynthetic:
    def test_deterministic_given_seed(self):
        a = generate_synthetic_dataset(4, 10, 6, seed=7)
        b = generate_synthetic_dataset(4, 10, 6, seed=7)
        for ea, eb in zip(a, b):
            assert np.array_equal(ea.motion.frames, eb.motion.frames)
            assert np.array_equal(ea.audio.samples, eb.audio.samples)

    def test_different_seed_differs(self):
        a = generate_synthetic_dataset(2, 10, 6, seed=7)
        b = generate_synthetic_dataset(2, 10, 6, seed=8)
        assert not np.array_equal(a[0].motion.frames, b[0].motion.frames)

    def test_single_frame_sequences(self):
        entries = generate_synthetic_dataset(2, 1, 4, seed=0)
        assert all(e.motion.n_frames == 1 for e in entries)

    def test_shape_contract(self):
        entries = generate_synthetic_dataset(8, 20, 30, seed=1)
        assert len(entries) == 8
        assert all(e.motion.frames.shape == (20, 30) for e in entries)

    def test_values_bounded(self):
        entries = generate_synthetic_dataset(4, 30, 10, seed=2)
        for e in entries:
            assert np.abs(e.motion.frames).max() <= 1.0
            assert np.abs(e.audio.samples).max() <= 1.0 + 1e-6

    def test_audio_duration_matches_frames(self):
        entries = generate_synthetic_dataset(1, 20, 4, seed=3, fps=25.0)
        clip, motion = entries[0].audio, entries[0].motion
        assert abs(clip.duration * motion.fps - motion.n_frames) <= 1.0

    def test_vertex_kind_supported(self):
        entries = generate_synthetic_dataset(2, 5, 9, seed=4, kind="vertex")
        assert entries[0].motion.kind == VERTEX_KIND
        with pytest.raises(ConfigurationError):
            generate_synthetic_dataset(2, 5, 10, seed=4, kind="vertex")

    def test_bad_counts_rejected(self):
        with pytest.raises(ConfigurationError):
            generate_synthetic_dataset(0, 5, 5, seed=0)


class TestWriteDataset:
    def test_round_trip_through_manifest(self, tmp_path):
        entries = generate_synthetic_dataset(3, 10, 5, seed=11)
        manifest = write_dataset(entries, tmp_path)
        loaded = load_rig_dataset(tmp_path, manifest)
        assert len(loaded) == 3
        for orig, back in zip(entries, loaded):
            assert np.array_equal(orig.motion.frames, back.motion.frames)
            assert back.subject == orig.subject

    def test_rig_csv_variant(self, tmp_path):
        entries = generate_synthetic_dataset(2, 8, 4, seed=12)
        manifest = write_dataset(entries, tmp_path, rig_as_csv=True)
        loaded = load_rig_dataset(tmp_path, manifest)
        assert np.array_equal(loaded[0].motion.frames, entries[0].motion.frames)


class TestAudioLoading:
    def test_resamples_to_16k_mono(self, tmp_path):
        rate = 44100
        t = np.arange(rate) / rate
        stereo = np.stack([np.sin(2 * np.pi * 440 * t), np.sin(2 * np.pi * 440 * t)], axis=1)
        from scipy.io import wavfile

        wavfile.write(tmp_path / "x.wav", rate, (stereo * 32767).astype(np.int16))
        clip = load_audio(tmp_path / "x.wav")
        assert clip.sample_rate == 16000
        assert clip.duration == pytest.approx(1.0, abs=1e-3)
        assert abs(len(clip.samples) - 16000) <= 1
