import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signalreid import gam
from signalreid import tensor as T
from signalreid.gam import DegenerateInputError, gram_contrastive_loss, gram_matrix, gram_volume, pool_normalize
from signalreid.gradcheck import finite_diff_check
from signalreid.tensor import Tensor


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def rand_units(rng, n=3, d=5):
    return [unit(rng.normal(size=d)) for _ in range(n)]


def vol(a, b, c, floor=None):
    return gram_volume(Tensor(a), Tensor(b), Tensor(c), floor=floor).item()


def det3_oracle(m):
    return (m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]))


# ---------------------------------------------------------------- pooling


def test_pool_equal_rows():
    v = np.array([3.0, 0.0, 4.0])
    emb = pool_normalize(Tensor(np.tile(v, (5, 1))), "N")
    assert emb.modality == "N"
    np.testing.assert_allclose(emb.vector.data, v / 5.0, atol=1e-15)


def test_pool_zero_mean_is_degenerate():
    v = np.array([1.0, -2.0, 0.5])
    with pytest.raises(DegenerateInputError):
        pool_normalize(Tensor(np.stack([v, -v])))


def test_pool_matches_loop_oracle():
    x = np.random.default_rng(3).normal(size=(4, 3))
    mean = [sum(x[i][j] for i in range(4)) / 4 for j in range(3)]
    norm = math.sqrt(sum(m * m for m in mean))
    out = pool_normalize(Tensor(x)).vector.data
    np.testing.assert_allclose(out, [m / norm for m in mean], atol=1e-12)
    assert abs(np.linalg.norm(out) - 1.0) < 1e-9


def test_pool_normalize_gradient():
    x = np.random.default_rng(4).normal(size=(4, 3))
    w = np.random.default_rng(5).normal(size=3)
    err = finite_diff_check(lambda t: T.sum_(pool_normalize(t).vector * w), x)
    assert err < 1e-6


# ---------------------------------------------------------------- gram matrix


def test_gram_orthonormal_is_identity():
    e = np.eye(4)
    np.testing.assert_allclose(gram_matrix(e[0], e[1], e[2]).data, np.eye(3), atol=0)


def test_gram_identical_is_all_ones():
    v = unit([1.0, 2.0, 2.0])
    np.testing.assert_allclose(gram_matrix(v, v, v).data, np.ones((3, 3)), atol=1e-15)


def test_gram_matches_loop_oracle():
    vs = rand_units(np.random.default_rng(6), 3, 7)
    G = gram_matrix(*vs).data
    for i in range(3):
        for j in range(3):
            assert abs(G[i, j] - sum(vs[i][k] * vs[j][k] for k in range(7))) < 1e-12
    np.testing.assert_allclose(G, G.T, atol=1e-12)
    np.testing.assert_allclose(np.diag(G), 1.0, atol=1e-9)


# ---------------------------------------------------------------- volume


def test_volume_orthonormal_is_one():
    e = np.eye(3)
    assert vol(e[0], e[1], e[2]) == pytest.approx(1.0, abs=1e-15)


def test_volume_coplanar_is_zero():
    e = np.eye(3)
    assert vol(e[0], e[1], unit(e[0] + e[1])) == pytest.approx(0.0, abs=1e-7)
    assert vol(e[0], e[0], e[1]) == 0.0


def test_volume_sixty_degrees():
    G = [[1, .5, .5], [.5, 1, .5], [.5, .5, 1]]
    expected = math.sqrt(det3_oracle(G))
    assert expected == pytest.approx(math.sqrt(0.5))
    # three unit vectors with pairwise cosine 1/2 from a Cholesky factor of G
    L = np.linalg.cholesky(np.array(G, dtype=float))
    assert vol(*L) == pytest.approx(expected, abs=1e-12)


def test_volume_squared_equals_det():
    rng = np.random.default_rng(7)
    for _ in range(20):
        vs = rand_units(rng)
        v = vol(*vs)
        assert 0.0 <= v <= 1.0
        assert v * v == pytest.approx(det3_oracle(gram_matrix(*vs).data.tolist()), abs=1e-9)


def test_train_floor_keeps_volume_positive():
    v = unit([1.0, 1.0, 0.0])
    assert vol(v, v, v) == 0.0
    assert vol(v, v, v, floor=gam.TRAIN_DET_FLOOR) == pytest.approx(1e-6)


def test_eval_volume_has_finite_gradient_at_collinear():
    v = unit([1.0, 2.0, 0.5])
    x = Tensor(np.stack([v, v, v]), requires_grad=True)
    out = gram_volume(x[0], x[1], x[2])
    T.backward(out)
    assert out.item() == 0.0
    assert np.all(np.isfinite(x.grad))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.permutations([0, 1, 2]))
def test_volume_permutation_invariant(seed, perm):
    vs = rand_units(np.random.default_rng(seed))
    assert abs(vol(*vs) - vol(*[vs[i] for i in perm])) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_volume_orthogonal_invariant(seed):
    rng = np.random.default_rng(seed)
    vs = rand_units(rng, 3, 5)
    Q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    assert abs(vol(*vs) - vol(*[Q @ v for v in vs])) < 1e-9


def test_volume_one_iff_orthogonal():
    rng = np.random.default_rng(8)
    Q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    assert vol(Q[:, 0], Q[:, 1], Q[:, 2]) == pytest.approx(1.0, abs=1e-12)
    for _ in range(20):
        assert vol(*rand_units(rng, 3, 6)) < 1.0 - 1e-6


def test_scale_before_normalization_is_absorbed():
    rng = np.random.default_rng(9)
    raw = [rng.normal(size=(4, 5)) for _ in range(3)]
    base = gram_volume(*[pool_normalize(Tensor(x)) for x in raw]).item()
    raw[1] = raw[1] * 7.5
    assert gram_volume(*[pool_normalize(Tensor(x)) for x in raw]).item() == pytest.approx(base, abs=1e-12)


def test_scale_after_normalization_is_multilinear():
    vs = rand_units(np.random.default_rng(10))
    s = 2.5
    assert vol(vs[0], s * vs[1], vs[2]) == pytest.approx(s * vol(*vs), rel=1e-10)


def test_volume_monotone_along_symmetric_path():
    vols = []
    for c in np.linspace(0.0, 0.95, 20):
        G = np.full((3, 3), c) + (1 - c) * np.eye(3)
        vols.append(vol(*np.linalg.cholesky(G)))
    assert vols[0] == pytest.approx(1.0)
    assert all(a > b for a, b in zip(vols, vols[1:]))


def test_volume_gradient():
    rng = np.random.default_rng(11)
    for _ in range(5):
        x = np.stack(rand_units(rng, 3, 4))
        err = finite_diff_check(lambda t: gram_volume(t[0], t[1], t[2], floor=gam.TRAIN_DET_FLOOR), x)
        assert err < 1e-4


def test_batched_volume_matches_single():
    rng = np.random.default_rng(12)
    a, b, c = (np.stack(rand_units(rng, 4, 5)) for _ in range(3))
    batched = gram_volume(Tensor(a), Tensor(b), Tensor(c)).data
    np.testing.assert_allclose(batched, [vol(a[i], b[i], c[i]) for i in range(4)], atol=1e-14)


# ---------------------------------------------------------------- contrastive loss


def units(rng, B, D):
    x = rng.normal(size=(B, D))
    return Tensor(x / np.linalg.norm(x, axis=1, keepdims=True))


def test_log_tau_positive_temperature():
    lt = gam.init_log_tau(0.07)
    assert math.exp(lt.item()) == pytest.approx(0.07)
    assert lt.requires_grad
    with pytest.raises(ValueError):
        gam.init_log_tau(0.0)


def test_single_sample_loss_is_zero():
    rng = np.random.default_rng(13)
    d2a, a2d = gram_contrastive_loss(*(units(rng, 1, 4) for _ in range(3)), gam.init_log_tau())
    assert d2a.item() == 0.0 and a2d.item() == 0.0


def test_identical_samples_give_log_b():
    rng = np.random.default_rng(14)
    B = 5
    a, b, c = (Tensor(np.tile(units(rng, 1, 4).data, (B, 1))) for _ in range(3))
    d2a, a2d = gram_contrastive_loss(a, b, c, gam.init_log_tau())
    assert d2a.item() == pytest.approx(math.log(B), abs=1e-12)
    assert a2d.item() == pytest.approx(math.log(B), abs=1e-12)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        gram_contrastive_loss(Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, 3))),
                              Tensor(np.zeros((0, 3))), gam.init_log_tau())


def test_two_sample_unrolled_oracle():
    rng = np.random.default_rng(15)
    a, b, c = (np.stack(rand_units(rng, 2, 4)) for _ in range(3))
    tau = 0.3

    def V(j, i):  # anchor from sample j, other pair from sample i
        M = [[sum(x * y for x, y in zip(u, w)) for w in (a[j], b[i], c[i])] for u in (a[j], b[i], c[i])]
        return math.sqrt(max(det3_oracle(M), 1e-12))

    d2a = a2d = 0.0
    for i in range(2):
        num = math.exp(-V(i, i) / tau)
        d2a += -math.log(num / (math.exp(-V(0, i) / tau) + math.exp(-V(1, i) / tau)))
        a2d += -math.log(num / (math.exp(-V(i, 0) / tau) + math.exp(-V(i, 1) / tau)))
    got = gram_contrastive_loss(Tensor(a), Tensor(b), Tensor(c), Tensor(math.log(tau)))
    assert got[0].item() == pytest.approx(d2a / 2, abs=1e-10)
    assert got[1].item() == pytest.approx(a2d / 2, abs=1e-10)


def test_contrastive_loss_nonnegative_and_gradients():
    rng = np.random.default_rng(16)
    a, b, c = (units(rng, 4, 5).data for _ in range(3))
    lt = Tensor(math.log(0.5), requires_grad=True)
    d2a, a2d = gram_contrastive_loss(Tensor(a), Tensor(b), Tensor(c), lt)
    assert d2a.item() >= 0 and a2d.item() >= 0
    err = finite_diff_check(lambda t: T.add(*gram_contrastive_loss(t, Tensor(b), Tensor(c), Tensor(math.log(0.5)))), a)
    assert err < 1e-4
    err_tau = finite_diff_check(lambda t: gram_contrastive_loss(Tensor(a), Tensor(b), Tensor(c), t)[0],
                                np.array(math.log(0.5)))
    assert err_tau < 1e-6


def test_order_by_anchor():
    emb = {"R": 1, "N": 2, "T": 3}
    assert gam.order_by_anchor(emb, "N") == (2, 1, 3)
    assert gam.order_by_anchor(emb, "T") == (3, 1, 2)
