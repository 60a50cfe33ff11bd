"""Music/motion records, the FDR1 file format, windowing and a synthetic generator.

Music features use a fixed 35-channel layout::

    0-19  MFCC     20-31  chroma     32  peak     33  beat     34  envelope

The generator is a stand-in for audio feature extraction. Its MFCC, chroma,
peak and envelope channels are synthetic: noise shaped per genre plus a
beat-locked pulse. Motion is built so that joint speed bottoms out on every
beat frame and feet never slide.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kinematics import DEFAULT_FPS, Skeleton, axis_angle_matrix, matrix_to_rot6d

MUSIC_DIM = 35
MFCC = slice(0, 20)
CHROMA = slice(20, 32)
PEAK = 32
BEAT = 33
ENVELOPE = 34
DEFAULT_GENRES = 16

MAGIC = b"FDR1"
VERSION = 1
_HEADER = struct.Struct("<4s5I")
MANIFEST = "manifest.txt"


class RecordFormatError(ValueError):
    code = "format"


class MagicMismatch(RecordFormatError):
    code = "magic"


class VersionMismatch(RecordFormatError):
    code = "version"


class DimensionMismatch(RecordFormatError):
    code = "dimension"


class AlignmentError(RecordFormatError):
    code = "alignment"


class TruncatedRecord(RecordFormatError):
    code = "truncated"


@dataclass
class MusicSequence:
    features: np.ndarray
    genre: int
    fps: int = DEFAULT_FPS

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[1] != MUSIC_DIM:
            raise DimensionMismatch(f"music features must be (T, {MUSIC_DIM}), got {self.features.shape}")
        if self.genre < 0:
            raise ValueError("genre id must be non-negative")

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def beat_frames(self) -> np.ndarray:
        return np.flatnonzero(self.features[:, BEAT] > 0.5)


@dataclass
class MotionSequence:
    frames: np.ndarray
    fps: int = DEFAULT_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or (self.frames.shape[1] - 3) % 6:
            raise DimensionMismatch(f"motion frames must be (T, 3 + 6J), got {self.frames.shape}")

    @property
    def T(self) -> int:
        return self.frames.shape[0]


@dataclass
class DatasetRecord:
    music: MusicSequence
    motion: MotionSequence
    id: str = ""

    def __post_init__(self):
        if self.music.T != self.motion.T:
            raise AlignmentError(f"music has {self.music.T} frames but motion has {self.motion.T}")
        if self.music.fps != self.motion.fps:
            raise AlignmentError("music and motion frame rates differ")

    @property
    def T(self) -> int:
        return self.music.T


# ------------------------------------------------------------------ synthesis

def beat_frames(T: int, bpm: float, fps: int = DEFAULT_FPS) -> np.ndarray:
    """round(k * fps * 60 / bpm) for every k that lands inside [0, T)."""
    if bpm <= 0:
        raise ValueError("bpm must be positive")
    period = fps * 60.0 / bpm
    k = np.arange(int(np.ceil(T / period)) + 2)
    f = np.round(k * period).astype(np.int64)
    return np.unique(f[f < T])


def _lowpass(x: np.ndarray, width: int) -> np.ndarray:
    # moving average along time, same length
    if width <= 1:
        return x
    kernel = np.ones(width) / width
    pad = np.pad(x, ((width // 2, width - 1 - width // 2), (0, 0)), mode="edge")
    return np.stack([np.convolve(pad[:, c], kernel, mode="valid") for c in range(x.shape[1])], axis=1)


def _genre_profile(genre: int):
    g = np.random.default_rng(10_007 + genre)
    return {
        "mfcc_mean": g.normal(0, 1.0, 20),
        "chroma_mean": g.dirichlet(np.ones(12)),
        "smooth": int(g.integers(2, 9)),
        "decay": float(g.uniform(0.15, 0.4)),
        # motion style: per-joint swing amplitudes (radians) and rest offsets
        "spine_amp": float(g.uniform(0.12, 0.3)),
        "spine_axis": g.normal(0, 1, 3) * np.array([1, 0.2, 1]),
        "head_amp": float(g.uniform(0.05, 0.2)),
        "arm_rest": g.uniform(0.2, 1.6, 2),
        "arm_amp": g.uniform(0.4, 1.2, 2),
        "arm_pitch": g.uniform(-0.6, 0.6, 2),
        "leg_amp": float(g.uniform(0.25, 0.55)),
        "sign": g.choice([-1.0, 1.0], 4),
    }


def synth_music(T: int, bpm: float, genre: int, seed: int, fps: int = DEFAULT_FPS) -> MusicSequence:
    """Synthetic 35-channel features with an exact beat grid."""
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng([seed, genre])
    prof = _genre_profile(genre)
    beats = beat_frames(T, bpm, fps)
    feats = np.zeros((T, MUSIC_DIM))
    feats[beats, BEAT] = 1.0

    frames = np.arange(T)
    last = np.maximum.accumulate(np.where(feats[:, BEAT] > 0, frames, -1))
    since = np.where(last >= 0, frames - last, np.inf)
    period = fps * 60.0 / bpm
    feats[:, ENVELOPE] = np.exp(-since / (prof["decay"] * period))
    feats[:, PEAK] = np.maximum(np.diff(feats[:, ENVELOPE], prepend=0.0), 0.0)

    noise = _lowpass(rng.standard_normal((T, 32)), prof["smooth"])
    feats[:, MFCC] = prof["mfcc_mean"] + 0.5 * noise[:, :20] + 0.5 * feats[:, ENVELOPE:ENVELOPE + 1]
    chroma = prof["chroma_mean"] * np.exp(0.3 * noise[:, 20:])
    feats[:, CHROMA] = chroma / chroma.sum(axis=1, keepdims=True)
    return MusicSequence(feats.astype(np.float32), genre, fps)


def beat_phase(T: int, beats: np.ndarray, default_period: float) -> np.ndarray:
    """Piecewise-linear phase that is an integer half a frame after each beat.

    Centering the speed minimum at b + 0.5 makes the forward-difference speed
    smallest exactly at frame b.
    """
    frames = np.arange(T, dtype=np.float64)
    if len(beats) == 0:
        return (frames - 0.5) / default_period
    knots = beats.astype(np.float64) + 0.5
    k = np.arange(len(knots), dtype=np.float64)
    if len(knots) == 1:
        return (frames - knots[0]) / default_period
    # linear extrapolation with the first and last beat periods
    first = knots[1] - knots[0]
    lastp = knots[-1] - knots[-2]
    phase = np.interp(frames, knots, k)
    phase = np.where(frames < knots[0], (frames - knots[0]) / first, phase)
    return np.where(frames > knots[-1], k[-1] + (frames - knots[-1]) / lastp, phase)


def synth_motion(music: MusicSequence, skel: Skeleton, seed: int) -> MotionSequence:
    """Beat-locked toy dance for a preset skeleton.

    Each joint angle is ``a + b * cos(pi * phase)``, whose time derivative
    vanishes only on beats. Legs march in place: hip pitch alpha with knee
    -2 alpha moves the foot straight up and down, so grounded feet never slide.
    """
    rng = np.random.default_rng([seed, music.genre, 7])
    prof = _genre_profile(music.genre)
    T = music.T
    phase = beat_phase(T, music.beat_frames, music.fps * 0.5)
    wave = np.cos(np.pi * phase)  # +1 on even beats, -1 on odd beats
    J = skel.joint_count
    R = np.broadcast_to(np.eye(3), (T, J, 3, 3)).copy()
    jitter = 1.0 + 0.1 * rng.standard_normal(8)
    sign = prof["sign"]

    def set_rot(name, axis, angle):
        if name in skel.joint_names:
            j = skel.joint_index(name)
            R[:, j] = axis_angle_matrix(axis, angle) @ R[:, j]

    yaw = rng.uniform(-np.pi, np.pi)
    set_rot(skel.joint_names[0], (0, 1, 0), np.full(T, yaw))
    spine = next(n for n in ("spine", "spine1") if n in skel.joint_names)
    set_rot(spine, prof["spine_axis"] + 1e-3, prof["spine_amp"] * jitter[0] * sign[0] * wave)
    set_rot("head" if "head" in skel.joint_names else "neck", (1, 0, 0),
            prof["head_amp"] * jitter[1] * sign[1] * wave)
    for i, side in enumerate(("l", "r")):
        mirror = 1.0 if side == "l" else -1.0
        shoulder = f"{side}_shoulder"
        # abduction about z raises the arm sideways; pitch about x swings it forward
        abd = prof["arm_rest"][i] + prof["arm_amp"][i] * jitter[2 + i] * sign[2] * wave * mirror
        set_rot(shoulder, (0, 0, 1), mirror * abd)
        set_rot(shoulder, (1, 0, 0), prof["arm_pitch"][i] * wave * sign[3])

    # marching: left lifts on odd beats, right on even beats, never both
    s = np.mod(phase, 2.0)
    lift_l = np.where(s < 1.0, np.sin(np.pi * s) ** 2, 0.0)
    lift_r = np.where(s >= 1.0, np.sin(np.pi * (s - 1.0)) ** 2, 0.0)
    amp = prof["leg_amp"] * jitter[6]
    legs = (("l_hip", "l_knee", ("l_foot", "l_ankle")), ("r_hip", "r_knee", ("r_foot", "r_ankle")))
    for (hip, knee, feet), lift_side in zip(legs, (lift_l, lift_r)):
        alpha = -amp * lift_side  # negative pitch about x brings the thigh forward
        set_rot(hip, (1, 0, 0), alpha)
        set_rot(knee, (1, 0, 0), -2.0 * alpha)
        for foot in feet:
            set_rot(foot, (1, 0, 0), alpha)

    frames = np.empty((T, skel.motion_dim))
    frames[:, :3] = (rng.uniform(-1.0, 1.0), skel.rest_height, rng.uniform(-1.0, 1.0))
    frames[:, 3:] = matrix_to_rot6d(R).reshape(T, 6 * J)
    return MotionSequence(frames.astype(np.float32), music.fps)


def synth_record(T: int, bpm: float, genre: int, seed: int, skel: Skeleton, rid: str = "") -> DatasetRecord:
    music = synth_music(T, bpm, genre, seed)
    return DatasetRecord(music, synth_motion(music, skel, seed), rid)


def synth_dataset(n: int, T: int, skel: Skeleton, seed: int, bpm_range=(90.0, 150.0),
                  genres: int = DEFAULT_GENRES) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        bpm = float(rng.uniform(*bpm_range))
        genre = int(rng.integers(genres))
        out.append(synth_record(T, bpm, genre, int(rng.integers(2**31)), skel, f"seq{i:05d}"))
    return out


# ------------------------------------------------------------------ windows

def window(record: DatasetRecord, length: int, stride: int) -> list:
    """Aligned fixed-length crops; a trailing partial window is dropped."""
    if length < 1 or stride < 1:
        raise ValueError("length and stride must be positive")
    out = []
    for i, s in enumerate(range(0, record.T - length + 1, stride)):
        music = MusicSequence(record.music.features[s:s + length], record.music.genre, record.music.fps)
        motion = MotionSequence(record.motion.frames[s:s + length], record.motion.fps)
        out.append(DatasetRecord(music, motion, f"{record.id}@{s}"))
    return out


# ------------------------------------------------------------------ FDR1 files

def save_record(record: DatasetRecord, path) -> None:
    if record.music.T != record.motion.T:
        raise AlignmentError("music and motion lengths differ")
    music = np.ascontiguousarray(record.music.features, dtype="<f4")
    motion = np.ascontiguousarray(record.motion.frames, dtype="<f4")
    header = _HEADER.pack(MAGIC, VERSION, record.T, music.shape[1], motion.shape[1], record.music.genre)
    with open(path, "wb") as f:
        f.write(header)
        f.write(music.tobytes())
        f.write(motion.tobytes())


def load_record(path, motion_dim: int | None = None) -> DatasetRecord:
    """Read an FDR1 file; each kind of corruption raises its own error class."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if raw[:4] != MAGIC[:len(raw[:4])]:
            raise MagicMismatch(f"{path}: not an FDR1 file")
        raise TruncatedRecord(f"{path}: header is {len(raw)} bytes, need {_HEADER.size}")
    magic, version, T, mdim, ddim, genre = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MagicMismatch(f"{path}: magic {magic!r} != {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatch(f"{path}: unsupported version {version}")
    if mdim != MUSIC_DIM:
        raise DimensionMismatch(f"{path}: music_dim {mdim} != {MUSIC_DIM}")
    if ddim < 9 or (ddim - 3) % 6 or (motion_dim is not None and ddim != motion_dim):
        raise DimensionMismatch(f"{path}: motion_dim {ddim} is not a valid skeleton layout"
                                + (f" (expected {motion_dim})" if motion_dim else ""))
    body = len(raw) - _HEADER.size
    music_bytes = T * mdim * 4
    row = ddim * 4
    if body < music_bytes or (body - music_bytes) % row:
        raise TruncatedRecord(f"{path}: payload of {body} bytes does not hold {T} frames")
    motion_T = (body - music_bytes) // row
    if motion_T != T:
        raise AlignmentError(f"{path}: music has {T} frames but motion block has {motion_T}")
    music = np.frombuffer(raw, "<f4", T * mdim, _HEADER.size).reshape(T, mdim)
    motion = np.frombuffer(raw, "<f4", T * ddim, _HEADER.size + music_bytes).reshape(T, ddim)
    return DatasetRecord(MusicSequence(music.astype(np.float32), genre),
                         MotionSequence(motion.astype(np.float32)), Path(path).stem)


def save_dataset(records, directory) -> list:
    """Write records as ``<id>.fdr`` plus a manifest; returns the file paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, rec in enumerate(records):
        name = f"{rec.id or f'seq{i:05d}'}.fdr"
        save_record(rec, directory / name)
        names.append(name)
    (directory / MANIFEST).write_text("".join(n + "\n" for n in names))
    return [directory / n for n in names]


def dataset_files(directory) -> list:
    """Record paths from the manifest, or every .fdr in sorted order without one."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    manifest = directory / MANIFEST
    if manifest.exists():
        lines = [ln.strip() for ln in manifest.read_text().splitlines()]
        return [directory / ln for ln in lines if ln and not ln.startswith("#")]
    return sorted(directory.glob("*.fdr"), key=lambda p: os.fsencode(p.name))


def load_dataset(directory, motion_dim: int | None = None) -> list:
    return [load_record(p, motion_dim) for p in dataset_files(directory)]
