"""The mean-velocity estimator u(z_t, r, t | music, genre)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..autodiff import ParameterStore, Tensor, as_tensor, ops
from . import layers

MUSIC_DIM = 35


@dataclass(frozen=True)
class NetworkConfig:
    latent_dim: int = 64
    d_state: int = 8
    conv_kernel: int = 4
    expand: int = 2
    cond_layers: int = 2
    gen_blocks: int = 4
    motion_dim: int = 3 + 6 * 13
    music_dim: int = MUSIC_DIM
    genre_count: int = 16
    time_max_freq: float = 64.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"NetworkConfig.{f.name} must be positive")
        if (self.motion_dim - 3) % 6:
            raise ValueError("motion_dim must equal 3 + 6 * joints")
        if self.latent_dim % 2:
            raise ValueError("latent_dim must be even for the sinusoidal time embedding")

    @classmethod
    def paper_scale(cls, motion_dim: int = 147, genre_count: int = 16) -> "NetworkConfig":
        return cls(latent_dim=512, d_state=16, conv_kernel=4, expand=2, cond_layers=4,
                   gen_blocks=8, motion_dim=motion_dim, genre_count=genre_count)

    @property
    def null_genre(self) -> int:
        return self.genre_count

    @property
    def dt_rank(self) -> int:
        return math.ceil(self.latent_dim / 16)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


def init_params(cfg: NetworkConfig, seed: int = 0) -> ParameterStore:
    rng = np.random.default_rng(seed)
    p = ParameterStore()
    L = cfg.latent_dim
    mamba = (cfg.d_state, cfg.conv_kernel, cfg.expand)
    layers.init_linear(p, "cond.in_proj", cfg.music_dim, L, rng)
    for i in range(cfg.cond_layers):
        layers.init_bimamba(p, f"cond.layers.{i}", L, *mamba, rng)
    layers.init_genre_gate(p, "cond.genre_gate", L, cfg.genre_count, rng)
    layers.init_time_embed(p, "time", L, rng)
    layers.init_linear(p, "gen.in_proj", cfg.motion_dim, L, rng)
    for i in range(cfg.gen_blocks):
        layers.init_bimamba(p, f"gen.blocks.{i}.bimamba", L, *mamba, rng)
        layers.init_film(p, f"gen.blocks.{i}.film", L, rng)
    layers.init_rms_norm(p, "gen.out_norm", L)
    layers.init_linear(p, "gen.out_proj", L, cfg.motion_dim, rng, scale=0.5)
    return p


def _times(value, batch: int, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value if value.ndim == 1 else ops.reshape(value, (batch,))
    arr = np.broadcast_to(np.asarray(value, dtype=like.dtype), (batch,)).copy()
    return Tensor(arr)


class VelocityNet:
    """Condition stack + time embedding + BiMamba generator blocks.

    Inputs are batched: z (batch, T, motion_dim), music (batch, T, 35),
    genre (batch,) integers, r and t scalars or (batch,) arrays.
    """

    def __init__(self, cfg: NetworkConfig, params: ParameterStore | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def encode_condition(self, music, genre) -> Tensor:
        p = self.params
        music = as_tensor(music)
        if music.ndim == 2:
            music = ops.reshape(music, (1,) + music.shape)
        if music.shape[-1] != self.cfg.music_dim:
            raise ValueError(f"music features need {self.cfg.music_dim} channels, got {music.shape[-1]}")
        h = layers.linear(p, "cond.in_proj", music)
        for i in range(self.cfg.cond_layers):
            h = layers.bimamba_block(p, f"cond.layers.{i}", h)
        return layers.genre_gate(p, "cond.genre_gate", h, genre)

    def velocity(self, z, r, t, cond: Tensor) -> Tensor:
        """u(z, r, t) given an already-encoded condition of shape (batch, T, latent)."""
        p = self.params
        z = as_tensor(z)
        if z.ndim != 3 or z.shape[-1] != self.cfg.motion_dim:
            raise ValueError(f"z must be (batch, T, {self.cfg.motion_dim}), got {z.shape}")
        if z.shape[:2] != cond.shape[:2]:
            raise ValueError(f"motion {z.shape[:2]} and music {cond.shape[:2]} are not frame-aligned")
        b = z.shape[0]
        t = _times(t, b, z)
        r = _times(r, b, z)
        temb = layers.time_embed(p, "time", t, r, self.cfg.time_max_freq)
        h = layers.linear(p, "gen.in_proj", z)
        for i in range(self.cfg.gen_blocks):
            h = layers.bimamba_block(p, f"gen.blocks.{i}.bimamba", h)
            h = layers.film(p, f"gen.blocks.{i}.film", h, temb)
            h = layers.channel_fusion(h, cond)
        h = layers.rms_norm(p, "gen.out_norm", h)
        return layers.linear(p, "gen.out_proj", h)

    def __call__(self, z, r, t, music, genre) -> Tensor:
        return self.velocity(z, r, t, self.encode_condition(music, genre))
