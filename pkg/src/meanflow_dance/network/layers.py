"""Network building blocks as functions over a ParameterStore.

Each ``init_*`` registers weights under a dotted prefix; the matching forward
function reads them back by the same prefix.
"""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import ParameterStore, Tensor, ops


def init_linear(params: ParameterStore, name: str, n_in: int, n_out: int, rng,
                bias: bool = True, scale: float = 1.0, bias_value: float = 0.0) -> None:
    bound = scale / math.sqrt(n_in)
    params[f"{name}.w"] = rng.uniform(-bound, bound, size=(n_in, n_out)).astype(np.float32)
    if bias:
        params[f"{name}.b"] = np.full(n_out, bias_value, dtype=np.float32)


def linear(params: ParameterStore, name: str, x) -> Tensor:
    return ops.linear(x, params[f"{name}.w"], params.get(f"{name}.b"))


def init_rms_norm(params: ParameterStore, name: str, dim: int) -> None:
    params[f"{name}.scale"] = np.ones(dim, dtype=np.float32)


def rms_norm(params: ParameterStore, name: str, x) -> Tensor:
    return ops.rms_norm(x, params[f"{name}.scale"])


# ------------------------------------------------------------------ mamba

def init_mamba(params: ParameterStore, name: str, dim: int, d_state: int, conv_kernel: int,
               expand: int, rng, dt_min: float = 1e-3, dt_max: float = 1e-1) -> None:
    inner = expand * dim
    rank = math.ceil(dim / 16)
    init_linear(params, f"{name}.in_proj", dim, 2 * inner, rng, bias=False)
    params[f"{name}.conv.w"] = rng.uniform(
        -1 / math.sqrt(conv_kernel), 1 / math.sqrt(conv_kernel), size=(conv_kernel, inner)
    ).astype(np.float32)
    params[f"{name}.conv.b"] = np.zeros(inner, dtype=np.float32)
    init_linear(params, f"{name}.x_proj", inner, rank + 2 * d_state, rng, bias=False)
    init_linear(params, f"{name}.dt_proj", rank, inner, rng)
    # softplus(bias) starts log-uniform in [dt_min, dt_max]
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=inner))
    params[f"{name}.dt_proj.b"] = (dt + np.log(-np.expm1(-dt))).astype(np.float32)
    params[f"{name}.A_log"] = np.log(
        np.tile(np.arange(1, d_state + 1, dtype=np.float64), (inner, 1))
    ).astype(np.float32)
    init_linear(params, f"{name}.out_proj", inner, dim, rng, bias=False)


def mamba_layer(params: ParameterStore, name: str, x, direction: str = "fwd") -> Tensor:
    """Selective SSM layer over x: (batch, T, dim).

    The backward direction reverses time, runs the same computation (so its
    causal conv looks at future frames), and reverses the result back.
    """
    if direction not in ("fwd", "bwd"):
        raise ValueError(f"direction must be 'fwd' or 'bwd', got {direction!r}")
    if direction == "bwd":
        x = ops.flip(x, axis=1)
    inner = params[f"{name}.conv.b"].shape[0]
    d_state = params[f"{name}.A_log"].shape[1]
    rank = params[f"{name}.dt_proj.w"].shape[0]

    xz = linear(params, f"{name}.in_proj", x)
    xi = xz[..., :inner]
    gate = xz[..., inner:]
    xi = ops.silu(ops.depthwise_conv1d(xi, params[f"{name}.conv.w"], params[f"{name}.conv.b"]))
    dbc = linear(params, f"{name}.x_proj", xi)
    delta = ops.softplus(linear(params, f"{name}.dt_proj", dbc[..., :rank]))
    B = dbc[..., rank:rank + d_state]
    C = dbc[..., rank + d_state:]
    A = ops.neg(ops.exp(params[f"{name}.A_log"]))
    y = ops.ssm_scan(xi, delta, A, B, C)
    y = ops.mul(y, ops.silu(gate))
    out = linear(params, f"{name}.out_proj", y)
    if direction == "bwd":
        out = ops.flip(out, axis=1)
    return out


def init_bimamba(params: ParameterStore, name: str, dim: int, d_state: int, conv_kernel: int,
                 expand: int, rng) -> None:
    init_rms_norm(params, f"{name}.norm", dim)
    init_mamba(params, f"{name}.fwd", dim, d_state, conv_kernel, expand, rng)
    init_mamba(params, f"{name}.bwd", dim, d_state, conv_kernel, expand, rng)
    init_linear(params, f"{name}.gate", dim, dim, rng)


def bimamba_skip(x, gate, branches) -> Tensor:
    """Multiplicative skip: x + sigmoid(gate) * (fwd + bwd)."""
    return ops.add(x, ops.mul(ops.sigmoid(gate), branches))


def bimamba_block(params: ParameterStore, name: str, x) -> Tensor:
    xn = rms_norm(params, f"{name}.norm", x)
    both = ops.add(
        mamba_layer(params, f"{name}.fwd", xn, "fwd"),
        mamba_layer(params, f"{name}.bwd", xn, "bwd"),
    )
    return bimamba_skip(x, linear(params, f"{name}.gate", xn), both)


# ------------------------------------------------------------------ conditioning

def init_genre_gate(params: ParameterStore, name: str, dim: int, genre_count: int, rng) -> None:
    # one extra row is the null genre used when the condition is dropped
    params[f"{name}.embed"] = (rng.standard_normal((genre_count + 1, dim)) * 0.5).astype(np.float32)
    init_linear(params, f"{name}.music", dim, dim, rng, bias=False)
    init_linear(params, f"{name}.genre", dim, dim, rng, bias=False)
    init_linear(params, f"{name}.z_music", dim, dim, rng)
    init_linear(params, f"{name}.z_genre", dim, dim, rng, bias=False)


def genre_gate(params: ParameterStore, name: str, music_feat, genre) -> Tensor:
    """Gated multimodal unit fusing per-frame music features with a genre embedding.

    ``genre`` is an integer array of shape (batch,); index ``genre_count``
    selects the null embedding.
    """
    table = params[f"{name}.embed"]
    genre = np.asarray(genre, dtype=np.int64).reshape(-1)
    if np.any(genre < 0) or np.any(genre >= table.shape[0]):
        raise ValueError(f"genre id out of range [0, {table.shape[0] - 1}]: {genre.tolist()}")
    onehot = np.zeros((genre.shape[0], table.shape[0]), dtype=table.dtype)
    onehot[np.arange(genre.shape[0]), genre] = 1.0
    emb = ops.matmul(Tensor(onehot), table)
    h_m = ops.tanh(linear(params, f"{name}.music", music_feat))
    h_g = ops.reshape(ops.tanh(linear(params, f"{name}.genre", emb)), (emb.shape[0], 1, -1))
    # W_z [m; e] split into its music and genre column blocks
    z_g = ops.reshape(linear(params, f"{name}.z_genre", emb), (emb.shape[0], 1, -1))
    gate = ops.sigmoid(ops.add(linear(params, f"{name}.z_music", music_feat), z_g))
    return ops.add(ops.mul(gate, h_m), ops.mul(ops.sub(1.0, gate), h_g))


def init_time_embed(params: ParameterStore, name: str, dim: int, rng) -> None:
    init_linear(params, f"{name}.fc1", dim, dim, rng)
    init_linear(params, f"{name}.fc2", dim, dim, rng)


def time_embed(params: ParameterStore, name: str, t, r, max_freq: float = 64.0) -> Tensor:
    """MLP(sinusoidal(t) + sinusoidal(r)) for per-sample times of shape (batch,)."""
    if np.any(np.asarray(r.data if isinstance(r, Tensor) else r) >
              np.asarray(t.data if isinstance(t, Tensor) else t)):
        raise ValueError("time_embed needs r <= t")
    dim = params[f"{name}.fc1.w"].shape[0]
    s = ops.add(ops.sinusoidal(t, dim, max_freq), ops.sinusoidal(r, dim, max_freq))
    return linear(params, f"{name}.fc2", ops.silu(linear(params, f"{name}.fc1", s)))


def init_film(params: ParameterStore, name: str, dim: int, rng) -> None:
    init_linear(params, f"{name}.gamma", dim, dim, rng, scale=0.1, bias_value=1.0)
    init_linear(params, f"{name}.beta", dim, dim, rng, scale=0.1)


def film(params: ParameterStore, name: str, x, time_vec) -> Tensor:
    """gamma(time) * x + beta(time), broadcast over frames."""
    b = time_vec.shape[0]
    gamma = ops.reshape(linear(params, f"{name}.gamma", time_vec), (b, 1, -1))
    beta = ops.reshape(linear(params, f"{name}.beta", time_vec), (b, 1, -1))
    return ops.add(ops.mul(gamma, x), beta)


def channel_fusion(x, cond) -> Tensor:
    if tuple(x.shape) != tuple(cond.shape):
        raise ValueError(f"fusion needs frame-aligned inputs, got {x.shape} and {cond.shape}")
    return ops.add(x, cond)
