import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meanflow_dance.autodiff import Tape, Tensor, finite_diff_directional, jvp, ops, relative_error
from meanflow_dance.network import NetworkConfig, VelocityNet, discretize, init_params, selective_scan
from meanflow_dance.network import layers

from oracles import naive_scan


def test_discretize_hand_values():
    A_bar, B_bar = discretize(1.0, np.log(0.5), 1.0)
    assert A_bar == pytest.approx(0.5, abs=1e-12)
    assert B_bar == pytest.approx(0.5 / np.log(2.0), abs=1e-12)  # 0.72135
    assert discretize(2.0, 0.0, 3.0)[1] == pytest.approx(6.0)


def test_discretize_series_is_continuous():
    for a in (-0.99e-4, -1e-9, 0.5e-4):
        _, series = discretize(1.0, a, 1.0)
        assert series == pytest.approx(np.expm1(a) / a, rel=1e-12)


def test_discretize_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        discretize(0.0, -1.0, 1.0)


def test_selective_scan_single_channel_by_hand():
    y = selective_scan(np.array([[1.0], [0.0], [2.0]]), 0.5, 1.0, 1.0)
    np.testing.assert_allclose(y[:, 0], [1.0, 0.5, 2.25])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kernel_scan_matches_naive_loops(seed):
    rng = np.random.default_rng(seed)
    b, T, c, n = rng.integers(1, 3), rng.integers(1, 9), rng.integers(1, 4), rng.integers(1, 4)
    u = rng.standard_normal((b, T, c))
    delta = rng.uniform(1e-3, 2.0, (b, T, c))
    A = -rng.uniform(1e-3, 3.0, (c, n))
    B = rng.standard_normal((b, T, n))
    C = rng.standard_normal((b, T, n))
    y = ops.ssm_scan(u, delta, A, B, C).data
    np.testing.assert_allclose(y, naive_scan(u, delta, A, B, C), atol=1e-10)


def test_scan_output_is_causal():
    rng = np.random.default_rng(0)
    args = [rng.standard_normal((1, 10, 2)), rng.uniform(0.1, 1, (1, 10, 2)),
            -rng.uniform(0.1, 1, (2, 3)), rng.standard_normal((1, 10, 3)), rng.standard_normal((1, 10, 3))]
    y0 = ops.ssm_scan(*args).data
    args[0][:, 6:] += 5.0
    y1 = ops.ssm_scan(*args).data
    np.testing.assert_array_equal(y0[:, :6], y1[:, :6])
    assert not np.allclose(y0[:, 6:], y1[:, 6:])


def test_only_the_reverse_branch_sees_the_future():
    cfg = NetworkConfig(latent_dim=8, d_state=2, conv_kernel=3, cond_layers=1, gen_blocks=1)
    p = init_params(cfg, 0).astype(np.float64)
    x = np.random.default_rng(1).standard_normal((1, 12, 8))
    x2 = x.copy()
    x2[:, 3] += 3.0

    def past_change():
        y0 = layers.bimamba_block(p, "cond.layers.0", Tensor(x)).data
        y1 = layers.bimamba_block(p, "cond.layers.0", Tensor(x2)).data
        return np.abs(y0[:, :3] - y1[:, :3]).max()

    assert past_change() > 1e-8
    p["cond.layers.0.bwd.out_proj.w"] = np.zeros_like(p["cond.layers.0.bwd.out_proj.w"].data)
    assert past_change() == 0.0


def test_network_shapes_and_condition_reuse(tiny_net, rng):
    z = rng.standard_normal((2, 16, tiny_net.cfg.motion_dim)).astype(np.float32)
    music = rng.standard_normal((2, 16, 35)).astype(np.float32)
    genre = np.array([0, 3])
    u = tiny_net(z, 0.2, 0.7, music, genre)
    assert u.shape == z.shape and u.dtype == np.float32
    cond = tiny_net.encode_condition(music, genre)
    np.testing.assert_array_equal(tiny_net.velocity(z, 0.2, 0.7, cond).data, u.data)


def test_network_accepts_per_sample_times(tiny_net, rng):
    z = rng.standard_normal((2, 5, tiny_net.cfg.motion_dim)).astype(np.float32)
    music = np.zeros((2, 5, 35), np.float32)
    both = tiny_net(z, np.array([0.1, 0.3]), np.array([0.5, 0.9]), music, [1, 1]).data
    one = tiny_net(z[1:], 0.3, 0.9, music[1:], [1]).data
    np.testing.assert_allclose(both[1:], one, atol=1e-6)


def test_null_genre_is_a_valid_index(tiny_net):
    music = np.zeros((1, 4, 35), np.float32)
    cond = tiny_net.encode_condition(music, [tiny_net.cfg.null_genre])
    assert np.all(np.isfinite(cond.data))
    with pytest.raises((ValueError, IndexError)):
        tiny_net.encode_condition(music, [tiny_net.cfg.null_genre + 1])


def test_network_rejects_misaligned_inputs(tiny_net):
    cond = tiny_net.encode_condition(np.zeros((1, 4, 35), np.float32), [0])
    with pytest.raises(ValueError):
        tiny_net.velocity(np.zeros((1, 5, tiny_net.cfg.motion_dim)), 0.0, 1.0, cond)
    with pytest.raises(ValueError):
        tiny_net.encode_condition(np.zeros((1, 4, 34)), [0])


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(latent_dim=0)
    with pytest.raises(ValueError):
        NetworkConfig(motion_dim=10)
    with pytest.raises(ValueError):
        NetworkConfig.from_dict({"latent": 3})
    cfg = NetworkConfig.paper_scale()
    assert (cfg.latent_dim, cfg.cond_layers, cfg.gen_blocks, cfg.d_state) == (512, 4, 8, 16)


def test_parameter_gradients_match_finite_differences(tiny_cfg, rng):
    params = init_params(tiny_cfg, 0).astype(np.float64)
    net = VelocityNet(tiny_cfg, params)
    z = rng.standard_normal((1, 6, tiny_cfg.motion_dim))
    music = rng.standard_normal((1, 6, 35))

    def loss():
        return ops.sum(ops.square(net(z, 0.25, 0.75, music, [2])))

    with Tape() as tape:
        value = loss()
    names = list(params)
    grads = tape.gradient(value, [params[n] for n in names])
    dirs = [rng.standard_normal(params[n].shape) for n in names]
    base = [params[n].data.copy() for n in names]
    h = 1e-6
    vals = []
    for s in (h, -h):
        for n, b, d in zip(names, base, dirs):
            params[n].data = b + s * d
        vals.append(float(loss().data))
    for n, b in zip(names, base):
        params[n].data = b
    fd = (vals[0] - vals[1]) / (2 * h)
    assert sum(float((g * d).sum()) for g, d in zip(grads, dirs)) == pytest.approx(fd, rel=1e-5)


def test_time_jvp_matches_finite_differences(tiny_cfg, rng):
    net = VelocityNet(tiny_cfg, init_params(tiny_cfg, 1).astype(np.float64))
    z = rng.standard_normal((2, 8, tiny_cfg.motion_dim))
    v = rng.standard_normal(z.shape)
    cond = net.encode_condition(rng.standard_normal((2, 8, 35)), [0, 1])
    r, t = np.array([0.1, 0.2]), np.array([0.6, 0.4])
    f = lambda zz, rr, tt: net.velocity(zz, rr, tt, cond)  # noqa: E731
    tangents = [v, np.zeros(2), np.ones(2)]
    _, d = jvp(f, [Tensor(z), Tensor(r), Tensor(t)], tangents)
    fd = finite_diff_directional(f, [Tensor(z), Tensor(r), Tensor(t)], tangents, h=1e-5)
    assert relative_error(d, fd) < 1e-7
