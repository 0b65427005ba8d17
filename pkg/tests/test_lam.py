import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signalreid import lam
from signalreid import tensor as T
from signalreid.gradcheck import finite_diff_check
from signalreid.lam import LocalAlignment, OffsetNetParams, deform_sample, local_align_loss, make_reference_grid
from signalreid.tensor import DimensionError, Tensor
from support import shifted_pair_alignment

# ---------------------------------------------------------------- grids


def test_grid_corners():
    g = make_reference_grid(2, 2, 1)
    assert g.shape == (2, 2)
    pts = g.points.data.reshape(-1, 2).tolist()
    assert pts == [[-1, -1], [-1, 1], [1, -1], [1, 1]]


def test_grid_single_point_axis_is_centered():
    g = make_reference_grid(4, 1, 1)
    np.testing.assert_array_equal(g.points.data[..., 1], 0.0)
    np.testing.assert_allclose(g.points.data[:, 0, 0], np.linspace(-1, 1, 4))


def test_grid_downsampled_matches_linspace():
    g = make_reference_grid(4, 4, 2)
    assert g.shape == (2, 2)
    for i, j in itertools.product(range(2), range(2)):
        assert g.points.data[i, j].tolist() == [[-1.0, 1.0][i], [-1.0, 1.0][j]]
    g = make_reference_grid(8, 4, 1)
    np.testing.assert_allclose(g.points.data[:, 2, 0], np.linspace(-1, 1, 8), atol=0)
    np.testing.assert_allclose(g.points.data[5, :, 1], np.linspace(-1, 1, 4), atol=0)


def test_grid_rejects_bad_factor():
    with pytest.raises(ValueError):
        make_reference_grid(4, 4, 3)
    with pytest.raises(ValueError):
        make_reference_grid(4, 4, 0)


# ---------------------------------------------------------------- offsets


def zero_net(dim):
    net = OffsetNetParams.init(np.random.default_rng(0), dim)
    for name in ("conv1", "conv1_bias", "conv2", "conv2_bias"):
        getattr(net, name).data[...] = 0.0
    return net


def test_zero_conv_weights_give_zero_offsets():
    x = Tensor(np.random.default_rng(1).normal(size=(8, 4)))
    off = lam.predict_offsets(x, (4, 2), zero_net(4))
    assert off.deltas.shape == (4, 2, 2)
    assert np.all(off.deltas.data == 0.0)


def test_offset_shape_with_stride():
    net = OffsetNetParams.init(np.random.default_rng(2), 6)
    off = lam.predict_offsets(Tensor(np.ones((3, 16, 6))), (4, 4), net, r=2)
    assert off.deltas.shape == (3, 2, 2, 2)


def test_offset_shape_mismatch():
    net = OffsetNetParams.init(np.random.default_rng(2), 6)
    with pytest.raises(DimensionError):
        lam.predict_offsets(Tensor(np.ones((15, 6))), (4, 4), net)
    with pytest.raises(DimensionError):
        lam.predict_offsets(Tensor(np.ones((16, 5))), (4, 4), net)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 3.0))
def test_offsets_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    net = OffsetNetParams.init(rng, 4, out_scale=50.0)
    x = Tensor(rng.normal(size=(12, 4)) * 100)
    off = lam.predict_offsets(x, (4, 3), net, delta_max=scale)
    assert np.all(np.abs(off.deltas.data) <= scale)


def naive_conv3x3(x, w, b, stride=1):
    H, W, C = x.shape
    out = []
    for i in range(0, H, stride):
        row = []
        for j in range(0, W, stride):
            acc = list(b)
            for di in range(3):
                for dj in range(3):
                    y, xx = i + di - 1, j + dj - 1
                    if 0 <= y < H and 0 <= xx < W:
                        for c in range(C):
                            for o in range(w.shape[3]):
                                acc[o] += x[y, xx, c] * w[di, dj, c, o]
            row.append(acc)
        out.append(row)
    return np.array(out)


def test_offsets_match_naive_conv_oracle():
    rng = np.random.default_rng(3)
    D = 4
    net = OffsetNetParams.init(rng, D)
    for p in (net.proj_bias, net.conv1_bias, net.conv2_bias):
        p.data[...] = rng.normal(size=p.shape) * 0.1
    net.conv2.data *= 5.0
    x = rng.normal(size=(4, D))
    fmap = x.reshape(2, 2, D) @ net.proj.data + net.proj_bias.data
    h = naive_conv3x3(fmap, net.conv1.data, net.conv1_bias.data)
    h = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h ** 3)))
    o = naive_conv3x3(h, net.conv2.data, net.conv2_bias.data)
    expected = 0.5 * np.tanh(o)
    got = lam.predict_offsets(Tensor(x), (2, 2), net, delta_max=0.5).deltas.data
    np.testing.assert_allclose(got, expected, atol=1e-10)


def test_default_delta_max():
    assert lam.default_delta_max((8, 4)) == 0.25
    assert LocalAlignment.init(np.random.default_rng(0), 4, (8, 4)).delta_max == 0.25


# ---------------------------------------------------------------- sampling


def test_zero_offsets_are_identity():
    x = np.random.default_rng(4).normal(size=(32, 5))
    ref = make_reference_grid(8, 4)
    out = deform_sample(Tensor(x), (8, 4), ref, Tensor(np.zeros((8, 4, 2))))
    assert np.max(np.abs(out.data - x)) <= 1e-12
    np.testing.assert_allclose(deform_sample(Tensor(x), (8, 4), ref, None).data, x, atol=1e-12)


def test_constant_map_ignores_offsets():
    x = np.tile(np.array([1.5, -2.0, 0.25]), (6, 1))
    off = Tensor(np.random.default_rng(5).uniform(-3, 3, size=(3, 2, 2)))
    out = deform_sample(Tensor(x), (3, 2), make_reference_grid(3, 2), off)
    np.testing.assert_allclose(out.data, x, atol=1e-14)


def test_quarter_cell_offsets_hand_oracle():
    # 2x2 map, scalar features a b / c d, reference points at the corners (cell size 2)
    a, b, c, d = 1.0, 2.0, 4.0, 8.0
    x = np.array([[a], [b], [c], [d]])
    off = np.zeros((2, 2, 2))
    off[0, 0] = [0.5, 0.5]    # quarter cell down and right from a
    off[1, 1] = [-0.5, 0.0]   # quarter cell up from d
    out = deform_sample(Tensor(x), (2, 2), make_reference_grid(2, 2), Tensor(off)).data[:, 0]
    assert out[0] == pytest.approx(0.75 * 0.75 * a + 0.75 * 0.25 * b + 0.25 * 0.75 * c + 0.25 * 0.25 * d, abs=1e-14)
    assert out[1] == b and out[2] == c
    assert out[3] == pytest.approx(0.75 * d + 0.25 * b, abs=1e-14)


def test_deform_sample_gradients_features_and_offsets():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(6, 3))
    off = rng.uniform(-0.3, 0.3, size=(3, 2, 2))
    ref = make_reference_grid(3, 2)
    w = rng.normal(size=(6, 3))
    assert finite_diff_check(lambda t: T.sum_(deform_sample(t, (3, 2), ref, Tensor(off)) * w), x) < 1e-6
    assert finite_diff_check(lambda t: T.sum_(deform_sample(Tensor(x), (3, 2), ref, t) * w), off) < 1e-5


def test_batched_sampling_matches_single():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 8, 4))
    align = LocalAlignment.init(rng, 4, (4, 2))
    batched, off = align.sample(Tensor(x), "N")
    for b in range(3):
        single, off1 = align.sample(Tensor(x[b]), "N")
        np.testing.assert_allclose(batched.data[b], single.data, atol=1e-12)
        np.testing.assert_allclose(off.deltas.data[b], off1.deltas.data, atol=1e-12)


def test_offset_sharing():
    rng = np.random.default_rng(8)
    shared = LocalAlignment.init(rng, 4, (4, 2), sharing=True)
    assert list(shared.nets) == ["shared"]
    assert shared.net("R") is shared.net("T")
    own = LocalAlignment.init(rng, 4, (4, 2))
    assert sorted(own.nets) == ["N", "R", "T"]
    assert own.net("R") is not own.net("N")


# ---------------------------------------------------------------- MSE


def test_mse_identical_is_zero():
    x = np.random.default_rng(9).normal(size=(4, 3))
    assert local_align_loss(x, x, x).item() == 0.0


def test_mse_closed_form():
    z = np.zeros((4, 3))
    assert local_align_loss(z, z, np.ones((4, 3))).item() == pytest.approx(2 / 3, abs=1e-15)


def test_mse_loop_oracle():
    rng = np.random.default_rng(10)
    r, n, t = (rng.normal(size=(5, 3)) for _ in range(3))

    def mse(a, b):
        return sum((a[i][j] - b[i][j]) ** 2 for i in range(5) for j in range(3)) / 15

    expected = (mse(r, n) + mse(r, t) + mse(n, t)) / 3
    assert local_align_loss(r, n, t).item() == pytest.approx(expected, abs=1e-12)
    assert local_align_loss(r, n, t, pairs="to_anchor", anchor="N").item() == \
        pytest.approx((mse(n, r) + mse(n, t)) / 2, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.permutations([0, 1, 2]))
def test_mse_permutation_invariant(seed, perm):
    xs = [np.random.default_rng(seed + i).normal(size=(4, 2)) for i in range(3)]
    base = local_align_loss(*xs).item()
    assert base >= 0
    assert local_align_loss(*[xs[i] for i in perm]).item() == pytest.approx(base, abs=1e-12)


def test_mse_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        local_align_loss(np.zeros((4, 3)), np.zeros((4, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        local_align_loss(np.zeros((4, 3)), np.zeros((4, 3)), np.zeros((4, 3)), pairs="some")


def test_loss_gradient_reaches_offset_net():
    rng = np.random.default_rng(11)
    x = [Tensor(rng.normal(size=(6, 4))) for _ in range(3)]
    align = LocalAlignment.init(rng, 4, (3, 2))
    net = align.net("N")
    before = net.conv2_bias.data.copy()

    def f(b):
        net.conv2_bias = b
        sampled = [align.sample(p, m)[0] for p, m in zip(x, "RNT")]
        return local_align_loss(*sampled)

    assert finite_diff_check(f, before + 0.3) < 1e-4


def test_shifted_pair_optimization_smoke():
    base, trained, worst, delta_max = shifted_pair_alignment(seed=1, steps=60)
    assert trained < base
    assert worst <= delta_max
