"""scikit-learn style front end over training, sampling and feature extraction."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import MUSIC_DIM, DatasetRecord, load_dataset
from .kinematics import get_skeleton
from .metrics import geometric_features, kinetic_features
from .network import NetworkConfig, VelocityNet
from .sampler import SampleConfig, sample
from .training import LossWeights, TrainConfig, Trainer, stack_windows


def check_motion(X, motion_dim: int) -> np.ndarray:
    """(T, D) or (batch, T, D) finite float32 motion."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim not in (2, 3) or X.shape[-1] != motion_dim:
        raise ValueError(f"motion must be (T, {motion_dim}) or (batch, T, {motion_dim}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("motion contains NaN or Inf")
    return X


def check_music(X) -> np.ndarray:
    """(batch, T, 35) finite float32 music features."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[-1] != MUSIC_DIM:
        raise ValueError(f"music must be (T, {MUSIC_DIM}) or (batch, T, {MUSIC_DIM}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("music contains NaN or Inf")
    return X


def check_records(X) -> list:
    if isinstance(X, (str, bytes)) or hasattr(X, "__fspath__"):
        X = load_dataset(X)
    X = list(X)
    if not X or not all(isinstance(r, DatasetRecord) for r in X):
        raise ValueError("expected a non-empty list of DatasetRecord or a dataset directory")
    return X


class MeanFlowDancer(BaseEstimator):
    """Music-to-dance generator.

    ``fit`` takes DatasetRecords (or a directory of .fdr files). ``predict``
    takes music features (T, 35) or (batch, T, 35) and returns motion of the
    same length; ``genre`` defaults to 0 and may be an int or per-batch array.
    """

    def __init__(self, skeleton="toy13", latent_dim=64, d_state=8, conv_kernel=4, expand=2,
                 cond_layers=2, gen_blocks=4, genre_count=16, steps=2000, batch_size=16,
                 window=240, lr=4e-4, weight_decay=0.02, p_equal=0.25, cfg_dropout=0.0,
                 fcl_weight=0.0, jvp_mode="exact", sample_steps=20, solver="euler",
                 guidance=None, use_ema=False, random_state=0):
        self.skeleton = skeleton
        self.latent_dim = latent_dim
        self.d_state = d_state
        self.conv_kernel = conv_kernel
        self.expand = expand
        self.cond_layers = cond_layers
        self.gen_blocks = gen_blocks
        self.genre_count = genre_count
        self.steps = steps
        self.batch_size = batch_size
        self.window = window
        self.lr = lr
        self.weight_decay = weight_decay
        self.p_equal = p_equal
        self.cfg_dropout = cfg_dropout
        self.fcl_weight = fcl_weight
        self.jvp_mode = jvp_mode
        self.sample_steps = sample_steps
        self.solver = solver
        self.guidance = guidance
        self.use_ema = use_ema
        self.random_state = random_state

    def _network_config(self, skel) -> NetworkConfig:
        return NetworkConfig(latent_dim=self.latent_dim, d_state=self.d_state,
                             conv_kernel=self.conv_kernel, expand=self.expand,
                             cond_layers=self.cond_layers, gen_blocks=self.gen_blocks,
                             motion_dim=skel.motion_dim, genre_count=self.genre_count)

    def fit(self, X, y=None):
        records = check_records(X)
        skel = get_skeleton(self.skeleton)
        for r in records:
            check_motion(r.motion.frames, skel.motion_dim)
        cfg = TrainConfig(steps=self.steps, batch_size=self.batch_size, window=self.window,
                          stride=self.window, lr=self.lr, weight_decay=self.weight_decay,
                          p_equal=self.p_equal, cfg_dropout=self.cfg_dropout,
                          jvp_mode=self.jvp_mode, seed=self.random_state)
        net = VelocityNet(self._network_config(skel), seed=self.random_state)
        self.trainer_ = Trainer(net, stack_windows(records, self.window, self.window), skel, cfg,
                                LossWeights(fcl=self.fcl_weight))
        self.history_ = self.trainer_.run()
        self.skeleton_ = skel
        self.model_ = net
        return self

    @property
    def sampling_model_(self) -> VelocityNet:
        check_is_fitted(self, "model_")
        if self.use_ema:
            return VelocityNet(self.model_.cfg, self.trainer_.ema.shadow)
        return self.model_

    def predict(self, X, genre=0, seed=None):
        music = check_music(X)
        cfg = SampleConfig(self.sample_steps, self.solver,
                           self.random_state if seed is None else seed, self.guidance)
        genre = np.broadcast_to(np.asarray(genre, dtype=np.int64).reshape(-1), (music.shape[0],))
        return sample(self.sampling_model_, music, genre, cfg)


class MotionFeatureExtractor(TransformerMixin, BaseEstimator):
    """Stateless map from motions to kinetic (2J) or geometric feature rows."""

    def __init__(self, kind="kinetic", skeleton="toy13"):
        self.kind = kind
        self.skeleton = skeleton

    def fit(self, X, y=None):
        if self.kind not in ("kinetic", "geometric"):
            raise ValueError(f"kind must be 'kinetic' or 'geometric', got {self.kind!r}")
        self.skeleton_ = get_skeleton(self.skeleton)
        return self

    def transform(self, X):
        check_is_fitted(self, "skeleton_")
        skel = self.skeleton_
        fn = kinetic_features if self.kind == "kinetic" else geometric_features
        if isinstance(X, np.ndarray):
            X = check_motion(X, skel.motion_dim)
            motions = list(X.reshape((-1,) + X.shape[-2:]))
        else:
            motions = [check_motion(getattr(m, "frames", m), skel.motion_dim) for m in X]
        return np.stack([fn(m, skel) for m in motions])
