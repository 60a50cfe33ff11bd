"""Few-step ODE sampling from t=1 (noise) to t=0 (motion), editing masks and guidance."""

from __future__ import annotations

import shlex
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import Tensor, no_grad
from .kinematics import DEFAULT_FPS, Skeleton, forward_kinematics, joint_velocities

SOLVERS = ("euler", "midpoint", "heun")
EDIT_MODES = ("soft", "hard")


class SamplingError(RuntimeError):
    def __init__(self, step: int, message: str = "non-finite state"):
        self.step = step
        super().__init__(f"{message} at solver step {step}")


class EditSpecError(ValueError):
    def __init__(self, line: int, field: str, message: str):
        self.line = line
        self.field = field
        super().__init__(f"edit spec line {line}, field {field!r}: {message}")


@dataclass
class SampleConfig:
    steps: int = 20
    solver: str = "euler"
    seed: int = 0
    guidance: Optional[float] = None
    fresh_noise: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        check_solver(self.solver)
        if self.guidance is not None and not np.isfinite(self.guidance):
            raise ValueError("guidance weight must be finite")


def check_solver(name: str) -> str:
    if name not in SOLVERS:
        raise ValueError(f"unknown solver {name!r}; choose one of {{{', '.join(SOLVERS)}}}")
    return name


def time_grid(steps: int) -> np.ndarray:
    """Uniform partition of [1, 0] with ``steps`` intervals."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    return np.linspace(1.0, 0.0, steps + 1)


def cfg_field(u_cond, u_uncond, omega: float):
    """omega * u_cond + (1 - omega) * u_uncond."""
    if np.shape(u_cond) != np.shape(u_uncond):
        raise ValueError("conditional and unconditional fields differ in shape")
    return omega * u_cond + (1.0 - omega) * u_uncond


def model_field(model, music, genre, guidance: Optional[float] = None) -> Callable:
    """Wrap a VelocityNet as field(z, r, t) -> array with the condition encoded once."""
    music = np.asarray(music, dtype=np.float32)
    if music.ndim == 2:
        music = music[None]
    genre = np.broadcast_to(np.asarray(genre, dtype=np.int64).reshape(-1), (music.shape[0],))
    with no_grad():
        cond = model.encode_condition(music, genre)
        null = None
        if guidance is not None:
            null = model.encode_condition(np.zeros_like(music),
                                          np.full(music.shape[0], model.cfg.null_genre))

    def field(z, r, t):
        b = z.shape[0]
        rr = Tensor(np.full(b, r, dtype=np.float32))
        tt = Tensor(np.full(b, t, dtype=np.float32))
        with no_grad():
            u = model.velocity(Tensor(z.astype(np.float32)), rr, tt, cond).data
            if null is not None:
                u = cfg_field(u, model.velocity(Tensor(z.astype(np.float32)), rr, tt, null).data, guidance)
        return u

    return field


def solve(field: Callable, z1: np.ndarray, steps: int, solver: str = "euler",
          pre_step: Optional[Callable] = None, callback: Optional[Callable] = None) -> np.ndarray:
    """Integrate from t=1 to t=0 over the uniform grid.

    Euler uses the mean velocity u(z, r, t) of each interval. Midpoint and Heun
    query the r = t diagonal as an instantaneous velocity. ``pre_step(z, t)``
    runs before every step (editing); ``callback(i, t, z)`` sees the state the
    step starts from.
    """
    check_solver(solver)
    grid = time_grid(steps)
    z = np.asarray(z1, dtype=np.float32).copy()
    for i in range(steps):
        t, r = float(grid[i]), float(grid[i + 1])
        if pre_step is not None:
            z = pre_step(z, t)
        if callback is not None:
            callback(i, t, z)
        h = t - r
        if solver == "euler":
            z = z - h * field(z, r, t)
        elif solver == "midpoint":
            k1 = field(z, t, t)
            s = t - h / 2
            k2 = field(z - (h / 2) * k1, s, s)
            z = z - h * k2
        else:
            k1 = field(z, t, t)
            k2 = field(z - h * k1, r, r)
            z = z - h * 0.5 * (k1 + k2)
        z = z.astype(np.float32)
        if not np.all(np.isfinite(z)):
            raise SamplingError(i)
    return z


def initial_noise(shape, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def sample(model, music, genre, cfg: SampleConfig = SampleConfig(), batch: int | None = None) -> np.ndarray:
    """Generate motion (batch, T, motion_dim) for music (T, 35) or (batch, T, 35)."""
    music = np.asarray(music, dtype=np.float32)
    if music.ndim == 2:
        music = np.broadcast_to(music, (batch or 1,) + music.shape)
    shape = music.shape[:2] + (model.cfg.motion_dim,)
    field = model_field(model, music, genre, cfg.guidance)
    return solve(field, initial_noise(shape, cfg.seed), cfg.steps, cfg.solver)


def euler_sample(model, music, genre, cfg: SampleConfig = SampleConfig()) -> np.ndarray:
    return sample(model, music, genre, SampleConfig(cfg.steps, "euler", cfg.seed, cfg.guidance))


def midpoint_sample(model, music, genre, cfg: SampleConfig = SampleConfig()) -> np.ndarray:
    return sample(model, music, genre, SampleConfig(cfg.steps, "midpoint", cfg.seed, cfg.guidance))


def heun_sample(model, music, genre, cfg: SampleConfig = SampleConfig()) -> np.ndarray:
    return sample(model, music, genre, SampleConfig(cfg.steps, "heun", cfg.seed, cfg.guidance))


# ------------------------------------------------------------------ editing

@dataclass
class EditSpec:
    constraint: np.ndarray
    mask: np.ndarray
    mode: str = "soft"

    def __post_init__(self):
        self.constraint = np.asarray(self.constraint, dtype=np.float32)
        mask = np.asarray(self.mask)
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("edit mask must be binary")
        self.mask = mask.astype(bool)
        if self.mode not in EDIT_MODES:
            raise ValueError(f"edit mode must be one of {EDIT_MODES}, got {self.mode!r}")
        if self.constraint.shape[-2:] != self.mask.shape[-2:]:
            raise ValueError(f"constraint {self.constraint.shape} and mask {self.mask.shape} differ")
        if not np.all(np.isfinite(self.constraint[..., self.mask])):
            raise ValueError("constraint must be finite on masked entries")

    @property
    def frame_mask(self) -> np.ndarray:
        return self.mask.any(axis=-1)


def apply_edit_mask(z_t, t: float, edit: EditSpec, eps_init) -> np.ndarray:
    """Blend the noised constraint into z_t.

    soft: c = t * M, hard: c = M, and z <- c * FP(x', t) + (1 - c) * z with
    FP(x', t) = (1 - t) x' + t * eps_init.
    """
    z_t = np.asarray(z_t)
    if z_t.shape[-2:] != edit.mask.shape[-2:] or np.shape(eps_init) != z_t.shape:
        raise ValueError(f"state {z_t.shape}, mask {edit.mask.shape} and noise "
                         f"{np.shape(eps_init)} must align")
    m = edit.mask.astype(z_t.dtype)
    coeff = t * m if edit.mode == "soft" else m
    fp = (1.0 - t) * edit.constraint + t * np.asarray(eps_init)
    return (coeff * fp + (1.0 - coeff) * z_t).astype(z_t.dtype)


def edit_sample(model, music, genre, cfg: SampleConfig, edit: EditSpec, batch: int | None = None,
                callback: Optional[Callable] = None) -> np.ndarray:
    """Sampling with ``apply_edit_mask`` before each solver step."""
    music = np.asarray(music, dtype=np.float32)
    if music.ndim == 2:
        music = np.broadcast_to(music, (batch or 1,) + music.shape)
    shape = music.shape[:2] + (model.cfg.motion_dim,)
    if edit.mask.shape != shape[1:]:
        raise ValueError(f"edit mask {edit.mask.shape} does not match motion {shape[1:]}")
    eps = initial_noise(shape, cfg.seed)
    noise_rng = np.random.default_rng([cfg.seed, 1])

    def pre(z, t):
        e = noise_rng.standard_normal(shape).astype(np.float32) if cfg.fresh_noise else eps
        return apply_edit_mask(z, t, edit, e)

    field = model_field(model, music, genre, cfg.guidance)
    return solve(field, eps, cfg.steps, cfg.solver, pre_step=pre, callback=callback)


def mask_edges(frame_mask) -> np.ndarray:
    """Frames f where the temporal mask differs between f-1 and f."""
    fm = np.asarray(frame_mask, dtype=bool)
    return np.flatnonzero(fm[1:] != fm[:-1]) + 1


def boundary_jerk(motion, frame_mask, skel: Skeleton, fps: float = DEFAULT_FPS) -> float:
    """Largest FK-velocity jump (m/s) between consecutive frames next to a mask edge."""
    edges = mask_edges(frame_mask)
    if len(edges) == 0:
        return 0.0
    vel = joint_velocities(forward_kinematics(motion, skel), fps)
    jump = np.linalg.norm(np.diff(vel, axis=-3), axis=-1).max(axis=-1)  # (..., T-1)
    # jump[..., f-1] compares frames f-1 and f
    idx = np.unique(np.clip(np.concatenate([edges - 2, edges - 1, edges]), 0, jump.shape[-1] - 1))
    return float(jump[..., idx].max(axis=-1).mean())


# ------------------------------------------------------------------ spec files

def _parse_range(text: str, T: int, line: int, field: str) -> tuple:
    try:
        a, b = text.split(":")
        a = int(a) if a else 0
        b = int(b) if b else T
    except ValueError:
        raise EditSpecError(line, field, f"expected START:END, got {text!r}") from None
    if not 0 <= a < b <= T:
        raise EditSpecError(line, field, f"range {a}:{b} outside [0, {T}]")
    return a, b


def _parse_point(text: str, line: int, field: str) -> np.ndarray:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise EditSpecError(line, field, f"expected comma-separated numbers, got {text!r}") from None
    if len(vals) not in (2, 3):
        raise EditSpecError(line, field, "expected x,z or x,y,z")
    return np.array(vals)


def parse_edit_spec(text: str, skel: Skeleton, T: int, base_dir=None,
                    default_constraint: np.ndarray | None = None, mode: str | None = None) -> EditSpec:
    """Parse the text edit format.

    Each non-empty line may hold ``frames A:B[,C:D...]`` and
    ``channels GROUP[,GROUP...]`` (root, upper, lower, all); the mask is the
    union over lines of frames x channels, either defaulting to everything.
    Global keys: ``mode soft|hard``, ``constraint FILE.fdr`` (motion block
    of a record) and ``line X0,Z0:X1,Z1`` which sets a straight root path.
    """
    from .data import load_record

    mask = np.zeros((T, skel.motion_dim), dtype=bool)
    constraint = None if default_constraint is None else np.array(default_constraint, dtype=np.float32)
    line_path = None
    spec_mode = None
    any_clause = False
    for ln, raw in enumerate(text.splitlines(), start=1):
        tokens = shlex.split(raw, comments=True)
        if not tokens:
            continue
        frames = None
        channels = None
        i = 0
        while i < len(tokens):
            key = tokens[i]
            if i + 1 >= len(tokens):
                raise EditSpecError(ln, key, "missing value")
            val = tokens[i + 1]
            if key == "frames":
                frames = [_parse_range(part, T, ln, key) for part in val.split(",")]
            elif key == "channels":
                try:
                    channels = np.concatenate([skel.channel_group(g) for g in val.split(",")])
                except ValueError as e:
                    raise EditSpecError(ln, key, str(e)) from None
            elif key == "mode":
                if val not in EDIT_MODES:
                    raise EditSpecError(ln, key, f"expected soft or hard, got {val!r}")
                spec_mode = val
            elif key == "constraint":
                path = Path(val) if base_dir is None else Path(base_dir) / val
                try:
                    constraint = load_record(path, skel.motion_dim).motion.frames
                except (OSError, ValueError) as e:
                    raise EditSpecError(ln, key, str(e)) from None
            elif key == "line":
                try:
                    a, b = val.split(":")
                except ValueError:
                    raise EditSpecError(ln, key, "expected START:END points") from None
                line_path = (_parse_point(a, ln, key), _parse_point(b, ln, key))
            else:
                raise EditSpecError(ln, key, "unknown field; expected frames, channels, mode, "
                                             "constraint or line")
            i += 2
        if frames is not None or channels is not None:
            any_clause = True
            rows = np.zeros(T, dtype=bool)
            for a, b in frames or [(0, T)]:
                rows[a:b] = True
            cols = np.zeros(skel.motion_dim, dtype=bool)
            cols[channels if channels is not None else slice(None)] = True
            mask |= rows[:, None] & cols[None, :]
    if not any_clause:
        raise EditSpecError(0, "frames", "spec selects no frames or channels")
    if constraint is None:
        constraint = skel.rest_motion(T)
    if constraint.shape != (T, skel.motion_dim):
        raise EditSpecError(0, "constraint", f"constraint shape {constraint.shape} does not match "
                                             f"({T}, {skel.motion_dim})")
    if line_path is not None:
        constraint = constraint.copy()
        constraint[:, :3] = root_line(line_path[0], line_path[1], T, skel)
    chosen = mode or spec_mode or "soft"
    return EditSpec(constraint, mask, chosen)


def root_line(start, end, T: int, skel: Skeleton) -> np.ndarray:
    """Straight root path; 2-D points are (x, z) at standing height."""
    def full(p):
        p = np.asarray(p, dtype=np.float64)
        return np.array([p[0], skel.rest_height, p[1]]) if p.shape[0] == 2 else p
    s = np.linspace(0.0, 1.0, T)[:, None]
    return ((1 - s) * full(start) + s * full(end)).astype(np.float32)
