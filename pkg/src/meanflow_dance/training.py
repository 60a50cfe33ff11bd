"""Mean-velocity flow objective, physical consistency losses, Adan, EMA and the loop.

Shapes: motion batches are (batch, T, motion_dim); per-sample times are
(batch,) arrays that broadcast over frames and channels.
"""

from __future__ import annotations

import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import ParameterStore, Tape, Tensor, as_tensor, jvp, no_grad, ops
from .data import MUSIC_DIM
from .kinematics import (Skeleton, foot_contact_labels, forward_kinematics,
                         forward_kinematics_t, joint_velocities, joint_velocities_t)

log = logging.getLogger(__name__)

P_EQUAL = 0.25
JVP_MODES = ("exact", "fd")
FD_STEP = 1e-3
# velocity terms in the loss use per-frame differences
LOSS_FPS = 1.0


class TrainingDiverged(RuntimeError):
    pass


def _per_sample(t, like) -> np.ndarray:
    # (batch,) times -> (batch, 1, 1) for broadcasting against motion
    t = np.asarray(t, dtype=np.float32)
    if t.ndim == 0:
        return t
    ndim = like.ndim if hasattr(like, "ndim") else np.ndim(like)
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


def flow_path(x, eps, t):
    """z_t = (1 - t) x + t eps."""
    if np.shape(x) != np.shape(eps):
        raise ValueError(f"x {np.shape(x)} and eps {np.shape(eps)} differ in shape")
    tb = _per_sample(t, x)
    return (1 - tb) * x + tb * eps


def instantaneous_velocity(x, eps):
    """v = eps - x, constant along the straight conditional path."""
    if np.shape(x) != np.shape(eps):
        raise ValueError(f"x {np.shape(x)} and eps {np.shape(eps)} differ in shape")
    return eps - x


def sample_times(rng: np.random.Generator, p_equal: float = P_EQUAL, size=None):
    """(r, t) with r <= t.

    With probability ``p_equal`` both equal one uniform draw; otherwise t and r
    are the max and min of two uniforms.
    """
    if not 0.0 <= p_equal <= 1.0:
        raise ValueError("p_equal must lie in [0, 1]")
    shape = () if size is None else size
    a = rng.random(shape)
    b = rng.random(shape)
    equal = rng.random(shape) < p_equal
    t = np.where(equal, a, np.maximum(a, b))
    r = np.where(equal, a, np.minimum(a, b))
    return r.astype(np.float32), t.astype(np.float32)


def meanflow_target(model, z_t, r, t, v, mode: str = "exact", h: float = FD_STEP):
    """Prediction u(z_t, r, t) and the stop-gradient target v - (t - r) du/dt.

    ``model(z, r, t)`` returns a Tensor. The total derivative along
    (dz, dr, dt) = (v, 0, 1) is exact (forward mode) or, with ``mode="fd"``,
    a forward difference of step ``h``. The returned prediction stays on the
    active tape; the target is a plain array.
    """
    if mode not in JVP_MODES:
        raise ValueError(f"jvp mode must be one of {JVP_MODES}, got {mode!r}")
    r = np.asarray(r, dtype=np.float32)
    t = np.asarray(t, dtype=np.float32)
    if np.any(r > t):
        raise ValueError("meanflow_target needs r <= t")
    z_t = np.asarray(z_t, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    if mode == "exact":
        u, du = jvp(model, [z_t, r, t], [v, np.zeros_like(r), np.ones_like(t)])
    else:
        u = model(Tensor(z_t), Tensor(r), Tensor(t))
        with no_grad():
            shifted = model(Tensor(z_t + h * v), Tensor(r), Tensor(t + h))
        du = (shifted.data - u.data) / h
    gap = _per_sample(t - r, z_t)
    u_tgt = v - gap * du
    return u, ops.stop_gradient(Tensor(u_tgt)).data


def loss_mf(u_pred, u_tgt) -> Tensor:
    """Mean squared error against a constant target."""
    if tuple(np.shape(getattr(u_pred, "data", u_pred))) != tuple(np.shape(getattr(u_tgt, "data", u_tgt))):
        raise ValueError("prediction and target shapes differ")
    return ops.mse(u_pred, ops.stop_gradient(as_tensor(u_tgt)))


def pcc_losses(model, x, eps, skel: Skeleton, t1, fps: float = LOSS_FPS):
    """One-step reconstruction losses at a fresh time t1.

    Returns ``(L_rec, L_pos, L_vel, z0_hat)`` where z0_hat = z_t1 - t1 u(z_t1, 0, t1).
    L_vel compares per-frame joint displacements (``fps=1``); in m/s it would
    be fps^2 = 900 times larger and drown out the flow objective.
    """
    x = np.asarray(x, dtype=np.float32)
    t1 = np.asarray(t1, dtype=np.float32)
    z1 = flow_path(x, eps, t1).astype(np.float32)
    u = model(Tensor(z1), Tensor(np.zeros_like(t1)), Tensor(t1))
    z0 = ops.sub(Tensor(z1), ops.mul(Tensor(_per_sample(t1, x)), u))
    l_rec = ops.mse(z0, Tensor(x))
    pos_hat = forward_kinematics_t(z0, skel)
    pos = forward_kinematics(x, skel).astype(np.float32)
    l_pos = ops.mse(pos_hat, Tensor(pos))
    vel = joint_velocities(pos, fps).astype(np.float32)
    l_vel = ops.mse(joint_velocities_t(pos_hat, fps), Tensor(vel))
    return l_rec, l_pos, l_vel, z0


def fcl_loss(z0_hat, gt_contacts, skel: Skeleton, fps: float = LOSS_FPS) -> Tensor:
    """Mean squared per-frame foot displacement of FK(z0_hat) over ground-truth contact frames."""
    mask = np.asarray(gt_contacts, dtype=bool)
    if not mask.any():
        return Tensor(np.zeros((), dtype=np.float32))
    pos = forward_kinematics_t(z0_hat, skel)
    feet = pos[..., list(skel.foot_joints), :]
    vel = joint_velocities_t(feet, fps)
    sq = ops.sum(ops.square(vel), axis=-1)
    w = mask.astype(sq.dtype) / mask.sum()
    return ops.sum(ops.mul(sq, Tensor(w)))


@dataclass(frozen=True)
class LossWeights:
    mf: float = 1.0
    rec: float = 0.636
    pos: float = 0.636
    vel: float = 0.323
    fcl: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


def total_loss(parts: dict, weights: LossWeights):
    """Weighted sum; a part that is missing or has zero weight is skipped."""
    total = None
    for name in ("mf", "rec", "pos", "vel", "fcl"):
        w = getattr(weights, name)
        if name not in parts or w == 0:
            continue
        term = ops.mul(as_tensor(parts[name]), float(w))
        total = term if total is None else ops.add(total, term)
    return total if total is not None else Tensor(np.zeros((), dtype=np.float32))


# ------------------------------------------------------------------ optimizer

@dataclass
class Adan:
    """Adan with the (beta1, beta2, beta3) = (0.02, 0.08, 0.01) weighting convention.

    With g_k the gradient and d_k = g_k - g_{k-1} (d_1 = 0)::

        m_k = (1 - b1) m + b1 g_k
        v_k = (1 - b2) v + b2 d_k
        n_k = (1 - b3) n + b3 (g_k + (1 - b2) d_k)^2
        step = (m_k / c1 + (1 - b2) v_k / c2) / (sqrt(n_k / c3) + eps)
        w <- (w - lr * step) / (1 + lr * weight_decay)

    where c_i = 1 - (1 - b_i)^k are the bias corrections.
    """

    lr: float = 4e-4
    betas: tuple = (0.02, 0.08, 0.01)
    weight_decay: float = 0.02
    eps: float = 1e-8
    step_count: int = 0
    state: dict = field(default_factory=dict)

    def step(self, params: ParameterStore, grads: dict) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient for parameter {name}")
        self.step_count += 1
        k = self.step_count
        b1, b2, b3 = self.betas
        c1 = 1.0 - (1.0 - b1) ** k
        c2 = 1.0 - (1.0 - b2) ** k
        c3 = 1.0 - (1.0 - b3) ** k
        for name, g in grads.items():
            p = params[name]
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {
                    "m": np.zeros_like(p.data), "v": np.zeros_like(p.data),
                    "n": np.zeros_like(p.data), "prev": np.array(g, dtype=p.dtype),
                }
            d = g - st["prev"]
            st["m"] += b1 * (g - st["m"])
            st["v"] += b2 * (d - st["v"])
            st["n"] += b3 * ((g + (1.0 - b2) * d) ** 2 - st["n"])
            denom = np.sqrt(st["n"] / c3) + self.eps
            upd = (st["m"] / c1 + (1.0 - b2) * st["v"] / c2) / denom
            p.data = ((p.data - self.lr * upd) / (1.0 + self.lr * self.weight_decay)).astype(p.dtype)
            st["prev"][...] = g

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, st in self.state.items():
            for key in ("m", "v", "n", "prev"):
                out[f"{name}/{key}"] = st[key]
        return out

    def load_state_arrays(self, arrays: dict, step_count: int) -> None:
        self.state = {}
        for key, arr in arrays.items():
            name, part = key.rsplit("/", 1)
            self.state.setdefault(name, {})[part] = np.array(arr)
        self.step_count = step_count


@dataclass
class Ema:
    """Shadow weights; with ``warmup`` the decay ramps as min(decay, (1+k)/(10+k))."""

    shadow: ParameterStore
    decay: float = 0.9999
    warmup: bool = False
    updates: int = 0

    @classmethod
    def from_params(cls, params: ParameterStore, decay: float = 0.9999, warmup: bool = False) -> "Ema":
        return cls(params.copy(), decay, warmup)

    def effective_decay(self) -> float:
        if self.warmup:
            return min(self.decay, (1.0 + self.updates) / (10.0 + self.updates))
        return self.decay

    def update(self, params: ParameterStore) -> None:
        d = self.effective_decay()
        for name, p in params.items():
            s = self.shadow[name]
            if s.shape != p.shape:
                raise ValueError(f"EMA shadow shape mismatch for {name}")
            s.data = (d * s.data + (1.0 - d) * p.data).astype(s.dtype)
        self.updates += 1


def ema_update(shadow: dict, params: dict, decay: float) -> dict:
    """Functional form: decay * shadow + (1 - decay) * param, per entry."""
    out = OrderedDict()
    for name, p in params.items():
        p = np.asarray(getattr(p, "data", p))
        s = np.asarray(getattr(shadow[name], "data", shadow[name]))
        if s.shape != p.shape:
            raise ValueError(f"EMA shadow shape mismatch for {name}")
        out[name] = decay * s + (1.0 - decay) * p
    return out


# ------------------------------------------------------------------ step and loop

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    window: int = 240
    stride: int = 240
    lr: float = 4e-4
    betas: tuple = (0.02, 0.08, 0.01)
    weight_decay: float = 0.02
    ema_decay: float = 0.9999
    ema_warmup: bool = True
    p_equal: float = P_EQUAL
    cfg_dropout: float = 0.0
    jvp_mode: str = "exact"
    log_every: int = 20
    ckpt_every: int = 500
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be at least 1")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise ValueError("cfg_dropout must lie in [0, 1]")
        if self.jvp_mode not in JVP_MODES:
            raise ValueError(f"jvp_mode must be one of {JVP_MODES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Per-step generator, so a resumed run replays the same draws."""
    return np.random.default_rng([seed, step])


def null_condition(music: np.ndarray, genre: np.ndarray, drop: np.ndarray, null_genre: int):
    music = np.where(drop[:, None, None], 0.0, music).astype(np.float32)
    genre = np.where(drop, null_genre, genre)
    return music, genre


def train_step(batch: dict, model, opt: Adan, ema: Ema | None, weights: LossWeights,
               skel: Skeleton, rng: np.random.Generator, cfg_dropout_p: float = 0.0,
               p_equal: float = P_EQUAL, jvp_mode: str = "exact") -> dict:
    """One optimizer update on a batch {"motion", "music", "genre"}; returns loss parts."""
    x = np.asarray(batch["motion"], dtype=np.float32)
    music = np.asarray(batch["music"], dtype=np.float32)
    genre = np.asarray(batch["genre"], dtype=np.int64)
    B = x.shape[0]
    eps = rng.standard_normal(x.shape).astype(np.float32)
    r, t = sample_times(rng, p_equal, size=(B,))
    t1 = rng.random(B).astype(np.float32)
    drop = rng.random(B) < cfg_dropout_p
    if drop.any():
        music, genre = null_condition(music, genre, drop, model.cfg.null_genre)

    params = model.params
    with Tape() as tape:
        cond = model.encode_condition(music, genre)

        def field_fn(z, rr, tt):
            return model.velocity(z, rr, tt, cond)

        z_t = flow_path(x, eps, t)
        v = instantaneous_velocity(x, eps)
        u, u_tgt = meanflow_target(field_fn, z_t, r, t, v, mode=jvp_mode)
        parts = {"mf": loss_mf(u, u_tgt)}
        parts["rec"], parts["pos"], parts["vel"], z0 = pcc_losses(field_fn, x, eps, skel, t1)
        if weights.fcl > 0:
            contacts = foot_contact_labels(forward_kinematics(x, skel), skel)
            parts["fcl"] = fcl_loss(z0, contacts, skel)
        loss = total_loss(parts, weights)
    values = {k: float(p.data) for k, p in parts.items()}
    values["total"] = float(loss.data)
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingDiverged(f"non-finite loss: {values}")
    names = list(params.keys())
    grads = tape.gradient(loss, [params[n] for n in names])
    opt.step(params, OrderedDict(zip(names, grads)))
    if ema is not None:
        ema.update(params)
    return values


def stack_windows(records, length: int, stride: int) -> dict:
    from .data import window

    wins = [w for rec in records for w in window(rec, length, stride)]
    if not wins:
        raise ValueError(f"no training windows of length {length}")
    return {
        "motion": np.stack([w.motion.frames for w in wins]),
        "music": np.stack([w.music.features for w in wins]),
        "genre": np.array([w.music.genre for w in wins], dtype=np.int64),
    }


def format_log(step: int, values: dict) -> str:
    keys = ["mf", "rec", "pos", "vel"] + (["fcl"] if "fcl" in values else []) + ["total"]
    return f"step={step} " + " ".join(f"l_{k}={values[k]:.6g}" if k != "total" else
                                      f"total={values[k]:.6g}" for k in keys)


def parse_log_line(line: str) -> dict | None:
    if not line.startswith("step="):
        return None
    out = {}
    for tok in line.split():
        k, v = tok.split("=", 1)
        out[k] = int(v) if k == "step" else float(v)
    return out


class Trainer:
    """Owns model, optimizer and EMA for one run; ``run`` continues from ``opt.step_count``."""

    def __init__(self, model, data: dict, skel: Skeleton, cfg: TrainConfig,
                 weights: LossWeights = LossWeights(), opt: Adan | None = None, ema: Ema | None = None):
        if data["music"].shape[-1] != MUSIC_DIM:
            raise ValueError("music features have the wrong channel count")
        self.model = model
        self.data = data
        self.skel = skel
        self.cfg = cfg
        self.weights = weights
        self.opt = opt or Adan(cfg.lr, cfg.betas, cfg.weight_decay)
        self.ema = ema or Ema.from_params(model.params, cfg.ema_decay, cfg.ema_warmup)
        self.history = []

    @property
    def step(self) -> int:
        return self.opt.step_count

    def sample_batch(self, rng: np.random.Generator) -> dict:
        n = self.data["motion"].shape[0]
        idx = rng.choice(n, size=min(self.cfg.batch_size, n), replace=n < self.cfg.batch_size)
        return {k: v[idx] for k, v in self.data.items()}

    def run(self, steps: int | None = None, log_file=None, on_checkpoint=None) -> list:
        end = self.cfg.steps if steps is None else self.step + steps
        window = []
        started = time.perf_counter()
        while self.step < end:
            k = self.step + 1
            rng = step_rng(self.cfg.seed, k)
            batch = self.sample_batch(rng)
            values = train_step(batch, self.model, self.opt, self.ema, self.weights, self.skel,
                                rng, self.cfg.cfg_dropout, self.cfg.p_equal, self.cfg.jvp_mode)
            self.history.append(values)
            window.append(values)
            if k % self.cfg.log_every == 0 or k == end:
                mean = {key: float(np.mean([w[key] for w in window])) for key in window[0]}
                line = format_log(k, mean)
                log.info("%s (%.1fs)", line, time.perf_counter() - started)
                if log_file is not None:
                    log_file.write(line + "\n")
                    log_file.flush()
                window = []
            if on_checkpoint is not None and self.cfg.ckpt_every and k % self.cfg.ckpt_every == 0:
                on_checkpoint(self)
        return self.history
