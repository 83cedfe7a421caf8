import numpy as np
import pytest

from nct.contrast import (change_features, depthwise_project, diff_sub_baseline, distill, distill_common,
                          fuse_contrastive, init_cfd, init_localizer, localize, similarity_matrix)
from nct.tensor import Tensor, default_dtype, finite_difference_check, sum_

H, W, D, R = 4, 5, 6, 3
N = H * W


@pytest.fixture(autouse=True)
def float64():
    with default_dtype(np.float64):
        yield


def rand(*shape, seed=0, scale=1.0):
    return Tensor(scale * np.random.default_rng(seed).normal(size=shape))


def cfd(seed=0):
    return init_cfd(np.random.default_rng(seed), D, R)


def loc(seed=0, shared=False):
    return init_localizer(np.random.default_rng(seed), D, shared)


def jitter_biases(named, seed):
    rng = np.random.default_rng(seed)
    for t in named.values():
        if t.ndim == 1:
            t.data = t.data + 0.1 * rng.normal(size=t.shape)


# -- depthwise projection --------------------------------------------------------------

def test_identity_kernel():
    p = cfd()
    p.kernel.data = np.zeros((R * R, D))
    p.kernel.data[R * R // 2] = 1.0
    p.W_p.data = np.eye(D)
    x = rand(2, N, D)
    np.testing.assert_array_equal(depthwise_project(x, p, H, W).data, x.data)


def test_constant_input_gives_constant_interior():
    p = cfd(1)
    x = Tensor(np.broadcast_to(np.arange(D, dtype=float), (N, D)).copy())
    out = depthwise_project(x, p, H, W).data.reshape(H, W, D)
    interior = out[1:-1, 1:-1]
    np.testing.assert_allclose(interior, np.broadcast_to(interior[0, 0], interior.shape), atol=1e-12)
    assert not np.allclose(out[0, 0], interior[0, 0])       # borders see zero padding


def test_depthwise_matches_direct_convolution():
    p = cfd(2)
    x = rand(N, D, seed=3)
    grid = np.pad(x.data.reshape(H, W, D), ((1, 1), (1, 1), (0, 0)))
    kern = p.kernel.data.reshape(R, R, D)
    conv = np.zeros((H, W, D))
    for r in range(H):
        for c in range(W):
            conv[r, c] = (grid[r:r + R, c:c + R] * kern).sum(axis=(0, 1))
    expected = conv.reshape(N, D) @ p.W_p.data + p.b_p.data
    np.testing.assert_allclose(depthwise_project(x, p, H, W).data, expected, atol=1e-12)


def test_depthwise_shape_mismatch():
    with pytest.raises(ValueError):
        depthwise_project(rand(N, D + 2), cfd(), H, W)


def test_depthwise_gradient():
    p = cfd(4)
    jitter_biases(p.named(), 5)
    x = rand(2, N, D, seed=6)
    probe = rand(2, N, D, seed=7)
    rep = finite_difference_check(lambda: sum_(depthwise_project(x, p, H, W) * probe),
                                  {"kernel": p.kernel, "W_p": p.W_p, "b_p": p.b_p})
    assert rep.passed, rep.summary()


# -- similarity and distilling ----------------------------------------------------------

def test_single_cell_similarity():
    np.testing.assert_array_equal(similarity_matrix(rand(1, D), rand(1, D, seed=1)).data, [[1.0]])


def test_equal_rows_give_uniform_similarity():
    x = Tensor(np.ones((N, D)))
    np.testing.assert_allclose(similarity_matrix(x, x).data, 1 / N)


def test_one_hot_features_recover_layout():
    eye = np.eye(8) * 5.0
    perm = np.random.default_rng(0).permutation(8)
    b = similarity_matrix(Tensor(eye), Tensor(eye[perm])).data
    # row i should attend to the position j where the permuted copy holds feature i
    np.testing.assert_array_equal(np.argmax(b, axis=-1), np.argsort(perm))
    assert np.all(b.max(axis=-1) > 0.5)


def test_similarity_is_row_stochastic_and_unscaled():
    a, b = rand(3, N, D, seed=1), rand(3, N, D, seed=2)
    sim = similarity_matrix(a, b).data
    np.testing.assert_allclose(sim.sum(-1), 1.0, atol=1e-6)
    assert np.all(sim > 0) and np.all(sim < 1)
    raw = a.data @ b.data.swapaxes(-1, -2)
    expected = np.exp(raw - raw.max(-1, keepdims=True))
    np.testing.assert_allclose(sim, expected / expected.sum(-1, keepdims=True), rtol=1e-10)


def test_temperature_divides_scores():
    a, b = rand(N, D, seed=1), rand(N, D, seed=2)
    scaled = similarity_matrix(a, b, temperature=4.0).data
    np.testing.assert_allclose(scaled, similarity_matrix(Tensor(a.data / 4.0), b).data, rtol=1e-10)


def test_similarity_shape_mismatch():
    with pytest.raises(ValueError):
        similarity_matrix(rand(N, D), rand(N - 1, D))


def test_identity_attention_copies_features():
    x = rand(N, D, seed=3)
    np.testing.assert_allclose(distill_common(Tensor(np.eye(N)), x).data, x.data, rtol=0, atol=1e-15)


def test_distill_common_is_convex():
    sim = similarity_matrix(rand(N, D, seed=4), rand(N, D, seed=5))
    other = rand(N, D, seed=6)
    out = distill_common(sim, other).data
    assert np.all(out >= other.data.min(axis=0) - 1e-12)
    assert np.all(out <= other.data.max(axis=0) + 1e-12)
    const = Tensor(np.tile(np.arange(D, dtype=float), (N, 1)))
    np.testing.assert_allclose(distill_common(sim, const).data, const.data, atol=1e-12)


def test_distill_common_matches_plain_product():
    sim = similarity_matrix(rand(2, N, D, seed=4), rand(2, N, D, seed=5))
    other = rand(2, N, D, seed=6)
    np.testing.assert_allclose(distill_common(sim, other).data, sim.data @ other.data, rtol=1e-12, atol=1e-14)


def test_distill_common_shape_mismatch():
    with pytest.raises(ValueError):
        distill_common(Tensor(np.eye(N)), rand(N + 1, D))


def test_change_features():
    x = rand(N, D, seed=7)
    np.testing.assert_array_equal(change_features(x, Tensor(np.zeros((N, D)))).data, x.data)


def test_antisymmetry_with_identity_attention():
    xb, xa = rand(N, D, seed=8), rand(N, D, seed=9)
    eye = Tensor(np.eye(N))
    c_bef = change_features(xb, distill_common(eye, xa))
    c_aft = change_features(xa, distill_common(eye, xb))
    np.testing.assert_allclose(c_bef.data, -c_aft.data, rtol=0, atol=1e-15)


def test_identical_constant_grids_have_zero_change():
    const = Tensor(np.tile(np.random.default_rng(1).normal(size=D), (2, N, 1)))
    b = similarity_matrix(const, const)
    c = change_features(const, distill_common(b, const))
    assert not c.data.any()
    fused, _, _ = distill(const, const, cfd())
    np.testing.assert_array_equal(fused.data, fuse_contrastive(Tensor(np.zeros((2, N, D))),
                                                               Tensor(np.zeros((2, N, D))), cfd()).data)


def test_identical_grids_change_less_than_mismatched_pairs():
    wins = 0
    for seed in range(20):
        x = rand(N, D, seed=seed, scale=0.5)
        y = rand(N, D, seed=seed + 100, scale=0.5)
        same = change_features(x, distill_common(similarity_matrix(x, x), x))
        diff = change_features(x, distill_common(similarity_matrix(x, y), y))
        wins += np.linalg.norm(same.data) < np.linalg.norm(diff.data)
    assert wins >= 18


def test_fusion_zero_and_nonnegative():
    p = cfd()
    zeros = Tensor(np.zeros((N, D)))
    assert not fuse_contrastive(zeros, zeros, p).data.any()
    out = fuse_contrastive(rand(N, D, seed=1), rand(N, D, seed=2), p).data
    assert np.all(out >= 0)
    assert 0 < (out > 0).mean() < 1


def test_fusion_shape_mismatch():
    with pytest.raises(ValueError):
        fuse_contrastive(rand(N, D), rand(N - 1, D), cfd())


def test_distill_gradient_mixed_relu_units():
    p = cfd(3)
    jitter_biases(p.named(), 4)
    xb, xa = rand(2, N, D, seed=10, scale=0.5), rand(2, N, D, seed=11, scale=0.5)
    probe = rand(2, N, D, seed=12)

    def f():
        x_c, _, _ = distill(depthwise_project(xb, p, H, W), depthwise_project(xa, p, H, W), p)
        return sum_(x_c * probe)

    x_c, _, _ = distill(depthwise_project(xb, p, H, W), depthwise_project(xa, p, H, W), p)
    assert 0.1 < (x_c.data > 0).mean() < 0.9
    rep = finite_difference_check(f, p.named())
    assert rep.passed, rep.summary()


def test_distill_uses_separate_matrices():
    xb, xa = rand(N, D, seed=1), rand(N, D, seed=2)
    _, b_ba, b_ab = distill(xb, xa, cfd())
    np.testing.assert_allclose(b_ba.data, similarity_matrix(xb, xa).data)
    np.testing.assert_allclose(b_ab.data, similarity_matrix(xa, xb).data)
    assert not np.allclose(b_ba.data, b_ab.data.T)


# -- localizer ------------------------------------------------------------------------

def zero_mlps(p):
    for t in p.named().values():
        t.data = np.zeros_like(t.data)


def test_zero_mlp_gives_half_attention():
    p = loc()
    zero_mlps(p)
    xc, xb, xa = rand(N, D, seed=1), rand(N, D, seed=2), rand(N, D, seed=3)
    s = localize(xc, xb, xa, p)
    np.testing.assert_array_equal(s.gamma_bef.data, 0.5)
    np.testing.assert_allclose(s.l_bef.data, 0.5 * xb.data.sum(0), atol=1e-12)
    np.testing.assert_allclose(s.l_aft.data, 0.5 * xa.data.sum(0), atol=1e-12)
    np.testing.assert_allclose(s.l_diff.data, s.l_aft.data - s.l_bef.data)


def test_gamma_in_open_unit_interval():
    p = loc(1)
    s = localize(rand(3, N, D, seed=1, scale=10), rand(3, N, D, seed=2, scale=10), rand(3, N, D, seed=3), p)
    for g in (s.gamma_bef.data, s.gamma_aft.data):
        assert g.shape == (3, N)
        assert np.all((g > 0) & (g < 1))


def test_localizer_matches_per_cell_oracle():
    p = loc(2)
    jitter_biases(p.named(), 3)
    xc, xb, xa = rand(N, D, seed=4), rand(N, D, seed=5), rand(N, D, seed=6)
    s = localize(xc, xb, xa, p)
    m = p.aft
    for i in (0, 7, N - 1):
        hidden = np.maximum(np.concatenate([xc.data[i], xa.data[i]]) @ m.W1.data + m.b1.data, 0)
        logit = hidden @ m.W2.data[:, 0] + m.b2.data[0]
        assert s.gamma_aft.data[i] == pytest.approx(1 / (1 + np.exp(-logit)), rel=1e-12)


def test_shared_localizer_has_one_mlp():
    p = loc(shared=True)
    assert p.bef is p.aft
    assert not any(k.startswith("loc.aft") for k in p.named())
    assert len(loc().named()) == 8


def test_localizer_shape_mismatch():
    with pytest.raises(ValueError):
        localize(rand(N, D), rand(N, D), rand(N - 1, D), loc())


def test_localizer_gradient():
    p = loc(4)
    jitter_biases(p.named(), 5)
    xc, xb, xa = rand(2, N, D, seed=7), rand(2, N, D, seed=8), rand(2, N, D, seed=9)
    probe = rand(2, 3, D, seed=10)

    def f():
        s = localize(xc, xb, xa, p)
        return sum_(s.l_bef * probe[:, 0]) + sum_(s.l_aft * probe[:, 1]) + sum_(s.l_diff * probe[:, 2])

    rep = finite_difference_check(f, p.named())
    assert rep.passed, rep.summary()


# -- diff-sub baseline --------------------------------------------------------------------

def test_diff_sub_on_identical_inputs_has_zero_query():
    p = loc(5)
    x = rand(N, D, seed=1)
    zeros = Tensor(np.zeros((N, D)))
    s = diff_sub_baseline(x, x, p)
    ref = localize(zeros, x, x, p)
    np.testing.assert_array_equal(s.gamma_bef.data, ref.gamma_bef.data)
    np.testing.assert_array_equal(s.gamma_aft.data, ref.gamma_aft.data)


def test_diff_sub_uses_subtraction_as_query():
    p = loc(6)
    xb, xa = rand(N, D, seed=2), rand(N, D, seed=3)
    s = diff_sub_baseline(xb, xa, p)
    ref = localize(Tensor(xa.data - xb.data), xb, xa, p)
    np.testing.assert_array_equal(s.l_diff.data, ref.l_diff.data)


def test_diff_sub_shape_mismatch():
    with pytest.raises(ValueError):
        diff_sub_baseline(rand(N, D), rand(N - 1, D), loc())
