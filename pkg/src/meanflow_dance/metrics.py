"""Motion quality metrics: Frechet distances on kinetic/geometric features,
diversity, beat alignment and foot sliding.

Feature definitions are fixed here (there is no learned extractor), so values
are only comparable between runs of this package.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from .data import BEAT, load_dataset
from .kinematics import (CONTACT_HEIGHT, DEFAULT_FPS, Skeleton, forward_kinematics,
                         joint_velocities, rot6d_to_matrix)

BAS_SIGMA = 3.0
SLIDE_HEIGHT = 0.05
SLIDE_SPEED = 0.10
HANDS_CLOSE = 0.3
LEAN_DEGREES = 30.0
REPORT_KEYS = ("fid_k", "fid_g", "div_k", "div_g", "fsr", "bas")


@dataclass
class FrechetStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        d = self.mu.shape[0]
        if self.sigma.shape != (d, d):
            raise ValueError(f"covariance shape {self.sigma.shape} does not match mean length {d}")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-6):
            raise ValueError("covariance must be symmetric")

    @classmethod
    def from_features(cls, feats) -> "FrechetStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ValueError("need a (n >= 2, dim) feature matrix")
        return cls(feats.mean(axis=0), np.cov(feats, rowvar=False).reshape(feats.shape[1], -1))


def _sym_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh((S + S.T) / 2)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    Tr (S_a S_b)^(1/2) is taken as the trace of the symmetric square root of
    S_a^(1/2) S_b S_a^(1/2), with negative eigenvalues clamped to zero.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"dimension mismatch: {a.mu.shape[0]} vs {b.mu.shape[0]}")
    if np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma):
        return 0.0
    ra = _sym_sqrt(a.sigma)
    w = np.linalg.eigvalsh(ra @ b.sigma @ ra)
    tr_cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = a.mu - b.mu
    d = diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_cross
    return float(max(d, 0.0))


def diversity(features) -> float:
    """Mean Euclidean distance over unordered pairs."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if feats.shape[0] < 2:
        raise ValueError("diversity needs at least 2 feature vectors")
    return float(pdist(feats).mean())


# ------------------------------------------------------------------ features

def _positions(motion, skel: Skeleton) -> np.ndarray:
    frames = getattr(motion, "frames", motion)
    return forward_kinematics(frames, skel)


def kinetic_features(motion, skel: Skeleton, fps: float = DEFAULT_FPS) -> np.ndarray:
    """Per joint: mean squared speed, then per joint: mean squared acceleration."""
    pos = _positions(motion, skel)
    if pos.shape[0] < 2:
        raise ValueError("kinetic features need at least 2 frames")
    vel = np.diff(pos, axis=0) * fps
    acc = np.diff(vel, axis=0) * fps
    v2 = np.mean(np.sum(vel ** 2, axis=-1), axis=0)
    a2 = np.mean(np.sum(acc ** 2, axis=-1), axis=0) if len(acc) else np.zeros(skel.joint_count)
    return np.concatenate([v2, a2])


GEOMETRIC_NAMES = ("l_foot_contact", "r_foot_contact", "hands_close", "l_hand_above_head",
                   "r_hand_above_head", "feet_crossed", "torso_lean")


def geometric_features(motion, skel: Skeleton) -> np.ndarray:
    """Time-averaged boolean pose relations, ordered as ``GEOMETRIC_NAMES``.

    Every test looks at a single frame, so the average is unchanged by
    reversing time.
    """
    frames = np.asarray(getattr(motion, "frames", motion), dtype=np.float64)
    pos = forward_kinematics(frames, skel)
    lf, rf = skel.foot_joints[:2]
    lh, rh = skel.hands
    up = pos[:, skel.head, 1]
    root_R = rot6d_to_matrix(frames[:, 3:9])
    lateral = np.einsum("ti,ti->t", pos[:, lf] - pos[:, rf], root_R[:, :, 0])
    torso = pos[:, skel.torso[1]] - pos[:, skel.torso[0]]
    cos_lean = torso[:, 1] / np.maximum(np.linalg.norm(torso, axis=-1), 1e-12)
    tests = [
        pos[:, lf, 1] - skel.ground_height < CONTACT_HEIGHT,
        pos[:, rf, 1] - skel.ground_height < CONTACT_HEIGHT,
        np.linalg.norm(pos[:, lh] - pos[:, rh], axis=-1) < HANDS_CLOSE,
        pos[:, lh, 1] > up,
        pos[:, rh, 1] > up,
        lateral < 0.0,
        cos_lean < np.cos(np.radians(LEAN_DEGREES)),
    ]
    return np.array([t.mean() for t in tests])


# ------------------------------------------------------------------ rhythm and contact

def kinematic_beats(motion, skel: Skeleton, fps: float = DEFAULT_FPS) -> np.ndarray:
    """Frames where mean joint speed is a strict minimum of its 3-frame window.

    At the first and last frame the window is cut to the neighbour that exists.
    """
    speed = np.linalg.norm(joint_velocities(_positions(motion, skel), fps), axis=-1).mean(axis=-1)
    left = np.concatenate([[np.inf], speed[:-1]])
    right = np.concatenate([speed[1:], [np.inf]])
    return np.flatnonzero((speed < left) & (speed < right))


def beat_align_score(motion, music, skel: Skeleton, sigma: float = BAS_SIGMA,
                     fps: float = DEFAULT_FPS) -> float:
    """Mean over music beats of exp(-d^2 / 2 sigma^2), d = frames to nearest kinematic beat."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    feats = getattr(music, "features", music)
    music_beats = np.flatnonzero(np.asarray(feats)[:, BEAT] > 0.5)
    if len(music_beats) == 0:
        raise ValueError("music has no beat frames")
    return bas_from_beats(music_beats, kinematic_beats(motion, skel, fps), sigma)


def bas_from_beats(music_beats, kin_beats, sigma: float = BAS_SIGMA) -> float:
    music_beats = np.asarray(music_beats, dtype=np.float64)
    kin_beats = np.asarray(kin_beats, dtype=np.float64)
    if len(music_beats) == 0:
        raise ValueError("music has no beat frames")
    if len(kin_beats) == 0:
        return 0.0
    d = np.min(np.abs(music_beats[:, None] - kin_beats[None, :]), axis=1)
    return float(np.mean(np.exp(-d ** 2 / (2.0 * sigma ** 2))))


def foot_slide_counts(motion, skel: Skeleton, h_thresh: float = SLIDE_HEIGHT,
                      v_thresh_slide: float = SLIDE_SPEED, fps: float = DEFAULT_FPS):
    """(sliding pairs, grounded pairs) over (frame, foot)."""
    if not skel.foot_joints:
        raise ValueError("skeleton has no foot joints")
    pos = _positions(motion, skel)[:, list(skel.foot_joints)]
    grounded = pos[..., 1] - skel.ground_height < h_thresh
    vel = joint_velocities(pos, fps)
    horiz = np.hypot(vel[..., 0], vel[..., 2])
    return int(np.sum(grounded & (horiz > v_thresh_slide))), int(np.sum(grounded))


def foot_slide_ratio(motion, skel: Skeleton, h_thresh: float = SLIDE_HEIGHT,
                     v_thresh_slide: float = SLIDE_SPEED, fps: float = DEFAULT_FPS) -> float:
    slide, ground = foot_slide_counts(motion, skel, h_thresh, v_thresh_slide, fps)
    return slide / ground if ground else 0.0


# ------------------------------------------------------------------ suite

def evaluate_records(gen: list, ref: list, skel: Skeleton, sigma: float = BAS_SIGMA) -> tuple:
    """Metric report dict plus per-sequence rows for generated records."""
    if not gen or not ref:
        raise ValueError("evaluation needs non-empty generated and reference sets")
    gk = np.stack([kinetic_features(r.motion, skel) for r in gen])
    rk = np.stack([kinetic_features(r.motion, skel) for r in ref])
    gg = np.stack([geometric_features(r.motion, skel) for r in gen])
    rg = np.stack([geometric_features(r.motion, skel) for r in ref])
    rows = []
    slide = ground = 0
    for r in gen:
        s, g = foot_slide_counts(r.motion, skel)
        slide += s
        ground += g
        has_beats = np.any(r.music.features[:, BEAT] > 0.5)
        rows.append({"id": r.id,
                     "bas": beat_align_score(r.motion, r.music, skel, sigma) if has_beats else float("nan"),
                     "fsr": s / g if g else 0.0})
    bas = [row["bas"] for row in rows if not np.isnan(row["bas"])]
    report = {
        "fid_k": _fid(gk, rk),
        "fid_g": _fid(gg, rg),
        "div_k": diversity(gk) if len(gk) > 1 else 0.0,
        "div_g": diversity(gg) if len(gg) > 1 else 0.0,
        "fsr": slide / ground if ground else 0.0,
        "bas": float(np.mean(bas)) if bas else 0.0,
    }
    return report, rows


def _fid(a: np.ndarray, b: np.ndarray) -> float:
    if np.array_equal(a, b):
        return 0.0
    return frechet_distance(FrechetStats.from_features(a), FrechetStats.from_features(b))


def evaluate(gen_dir, ref_dir, skel: Skeleton, out=None, csv_path=None, sigma: float = BAS_SIGMA) -> dict:
    gen = load_dataset(gen_dir, skel.motion_dim)
    ref = load_dataset(ref_dir, skel.motion_dim)
    if not gen:
        raise ValueError(f"no records in {gen_dir}")
    if not ref:
        raise ValueError(f"no records in {ref_dir}")
    report, rows = evaluate_records(gen, ref, skel, sigma)
    if out is not None:
        write_report(report, out)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["id", "bas", "fsr"])
            w.writeheader()
            w.writerows(rows)
    return report


def format_report(report: dict) -> str:
    return "".join(f"{k} = {report[k]:.6g}\n" for k in REPORT_KEYS)


def write_report(report: dict, path) -> None:
    Path(path).write_text(format_report(report))


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out
