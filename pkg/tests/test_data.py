import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meanflow_dance.data import (BEAT, ENVELOPE, MUSIC_DIM, PEAK, AlignmentError, DatasetRecord,
                                 DimensionMismatch, MagicMismatch, MotionSequence, MusicSequence,
                                 TruncatedRecord, VersionMismatch, beat_frames, dataset_files,
                                 load_dataset, load_record, save_dataset, save_record, synth_dataset,
                                 synth_music, synth_record, window)
from meanflow_dance.kinematics import forward_kinematics, joint_velocities
from meanflow_dance.metrics import beat_align_score, foot_slide_ratio


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.floats(40, 240))
def test_beat_frames_follow_the_tempo(T, bpm):
    b = beat_frames(T, bpm)
    assert b[0] == 0 and np.all(b < T) and np.all(np.diff(b) > 0)
    period = 1800.0 / bpm
    np.testing.assert_array_equal(b, np.round(np.arange(len(b)) * period).astype(int))
    assert np.round(len(b) * period) >= T


def test_synth_music_channels():
    m = synth_music(300, 120.0, 3, seed=0)
    assert m.features.shape == (300, MUSIC_DIM)
    np.testing.assert_array_equal(m.beat_frames, beat_frames(300, 120.0))
    env = m.features[:, ENVELOPE]
    assert np.all(env[m.beat_frames] == env.max())
    assert np.all(m.features[:, PEAK] >= 0)
    assert set(np.unique(m.features[:, BEAT])) <= {0.0, 1.0}


def test_genres_differ_in_their_spectra():
    a = synth_music(200, 120.0, 0, seed=0).features[:, :20].mean(0)
    b = synth_music(200, 120.0, 5, seed=0).features[:, :20].mean(0)
    assert np.abs(a - b).max() > 0.1


@pytest.mark.parametrize("name", ["toy13", "smpl24"])
def test_synthetic_motion_is_beat_locked_and_slide_free(name):
    from meanflow_dance.kinematics import get_skeleton

    skel = get_skeleton(name)
    for seed in range(4):
        rec = synth_record(240, 90.0 + 15 * seed, seed, seed, skel)
        assert beat_align_score(rec.motion.frames, rec.music.features, skel) > 0.9
        assert foot_slide_ratio(rec.motion.frames, skel) == 0.0
        pos = forward_kinematics(rec.motion.frames, skel)
        assert pos[..., 1].min() > skel.ground_height - 0.02


def test_synth_dataset_is_deterministic(skel):
    a = synth_dataset(3, 50, skel, seed=7)
    b = synth_dataset(3, 50, skel, seed=7)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.motion.frames, y.motion.frames)
        np.testing.assert_array_equal(x.music.features, y.music.features)
    assert [r.id for r in a] == ["seq00000", "seq00001", "seq00002"]


def test_records_enforce_alignment_and_dims():
    music = MusicSequence(np.zeros((10, MUSIC_DIM)), 0)
    with pytest.raises(AlignmentError):
        DatasetRecord(music, MotionSequence(np.zeros((9, 81))))
    with pytest.raises(DimensionMismatch):
        MusicSequence(np.zeros((10, 34)), 0)
    with pytest.raises(DimensionMismatch):
        MotionSequence(np.zeros((10, 80)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(1, 25), st.integers(1, 25))
def test_windows_are_aligned_crops(T, length, stride):
    rec = DatasetRecord(MusicSequence(np.arange(T * 35.0).reshape(T, 35), 2),
                        MotionSequence(np.arange(T * 9.0).reshape(T, 9)), "r")
    wins = window(rec, length, stride)
    assert len(wins) == (0 if T < length else (T - length) // stride + 1)
    for k, w in enumerate(wins):
        s = k * stride
        np.testing.assert_array_equal(w.music.features, rec.music.features[s:s + length])
        np.testing.assert_array_equal(w.motion.frames, rec.motion.frames[s:s + length])
        assert w.music.genre == 2 and w.id == f"r@{s}"


def test_record_round_trip(tmp_path, skel):
    rec = synth_record(30, 100.0, 4, 1, skel, "abc")
    save_record(rec, tmp_path / "abc.fdr")
    back = load_record(tmp_path / "abc.fdr", skel.motion_dim)
    np.testing.assert_array_equal(back.music.features, rec.music.features)
    np.testing.assert_array_equal(back.motion.frames, rec.motion.frames)
    assert back.music.genre == 4 and back.id == "abc"
    raw = (tmp_path / "abc.fdr").read_bytes()
    assert raw[:4] == b"FDR1" and struct.unpack("<5I", raw[4:24]) == (1, 30, 35, 81, 4)
    assert len(raw) == 24 + 30 * (35 + 81) * 4


@pytest.mark.parametrize("corrupt, err", [
    (lambda b: b"XXXX" + b[4:], MagicMismatch),
    (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], VersionMismatch),
    (lambda b: b[:12] + struct.pack("<I", 34) + b[16:], DimensionMismatch),
    (lambda b: b[:16] + struct.pack("<I", 80) + b[20:], DimensionMismatch),
    (lambda b: b[:10], TruncatedRecord),
    (lambda b: b[:-7], TruncatedRecord),
    (lambda b: b[:-81 * 4], AlignmentError),
    (lambda b: b + bytes(81 * 4), AlignmentError),
])
def test_corrupt_records_raise_typed_errors(tmp_path, skel, corrupt, err):
    path = tmp_path / "r.fdr"
    save_record(synth_record(8, 100.0, 0, 0, skel), path)
    path.write_bytes(corrupt(path.read_bytes()))
    with pytest.raises(err):
        load_record(path)


def test_expected_motion_dim_is_checked(tmp_path, skel):
    save_record(synth_record(8, 100.0, 0, 0, skel), tmp_path / "r.fdr")
    with pytest.raises(DimensionMismatch):
        load_record(tmp_path / "r.fdr", motion_dim=147)


def test_dataset_manifest_controls_order(tmp_path, skel):
    recs = synth_dataset(3, 12, skel, seed=0)
    save_dataset(recs, tmp_path)
    assert [p.name for p in dataset_files(tmp_path)] == [f"seq0000{i}.fdr" for i in range(3)]
    (tmp_path / "manifest.txt").write_text("# reordered\nseq00002.fdr\n\nseq00000.fdr\n")
    assert [r.id for r in load_dataset(tmp_path)] == ["seq00002", "seq00000"]
    (tmp_path / "manifest.txt").unlink()
    assert len(load_dataset(tmp_path)) == 3
    with pytest.raises(FileNotFoundError):
        dataset_files(tmp_path / "missing")


def test_synthetic_feet_are_still_during_contact(skel):
    rec = synth_record(120, 120.0, 0, 3, skel)
    feet = forward_kinematics(rec.motion.frames, skel)[:, list(skel.foot_joints)]
    low = feet[..., 1] < skel.ground_height + 0.05
    speed = np.linalg.norm(joint_velocities(feet)[..., [0, 2]], axis=-1)
    assert low.any() and speed[low].max() < 0.1
