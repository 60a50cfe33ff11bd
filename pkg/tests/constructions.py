"""Hand-built motions with known metric values."""

import numpy as np


def translated_rest(skel, root_xz) -> np.ndarray:
    """Rest pose carried along a root path (T, 2) in the ground plane."""
    root_xz = np.asarray(root_xz, dtype=np.float64)
    m = skel.rest_motion(len(root_xz)).astype(np.float64)
    m[:, 0] = root_xz[:, 0]
    m[:, 2] = root_xz[:, 1]
    return m


def sliding_motion(skel, T: int, moving_frames: int, step: float = 0.1) -> np.ndarray:
    """Grounded rest pose whose root glides ``step`` m/frame for the first ``moving_frames`` frames."""
    x = np.concatenate([[0.0], np.cumsum(np.where(np.arange(T - 1) < moving_frames, step, 0.0))])
    return translated_rest(skel, np.stack([x, np.zeros(T)], axis=1))


def single_minimum_motion(skel, T: int, frame: int) -> np.ndarray:
    """Rigid glide whose speed is V-shaped with its only strict minimum at ``frame``."""
    speed = 0.01 * (np.abs(np.arange(T - 1) - frame) + 1.0)
    x = np.concatenate([[0.0], np.cumsum(speed)])
    return translated_rest(skel, np.stack([x, np.zeros(T)], axis=1))


def music_with_beats(T: int, beats) -> np.ndarray:
    from meanflow_dance.data import BEAT, MUSIC_DIM

    m = np.zeros((T, MUSIC_DIM), dtype=np.float32)
    m[list(beats), BEAT] = 1.0
    return m
