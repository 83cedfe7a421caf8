import numpy as np
import pytest

from nct.nfa import (aggregate, aggregate_fused, gather_neighborhood, init_nfa, neighborhood_index, nfa_forward,
                     position_embed, position_grid, project_grid)
from nct.tensor import Tensor, default_dtype, finite_difference_check, sum_


@pytest.fixture(autouse=True)
def float64():
    with default_dtype(np.float64):
        yield


def params(c=4, d=6, h=5, w=5, seed=0, layers=1):
    return init_nfa(np.random.default_rng(seed), c, d, h, w, layers)


def cells(h, w, d, seed=0, batch=()):
    return Tensor(np.random.default_rng(seed).normal(size=batch + (h * w, d)))


def zero(t):
    t.data = np.zeros_like(t.data)


def cyclic_shift(x, h, w, dr, dc):
    """Roll a (..., H*W, D) grid by (dr, dc) cells."""
    arr = x.reshape(x.shape[:-2] + (h, w, x.shape[-1]))
    return np.roll(arr, (dr, dc), axis=(-3, -2)).reshape(x.shape)


# -- positions and projection --------------------------------------------------------

def test_position_embed_zero_tables():
    p = params()
    zero(p.pos_row)
    zero(p.pos_col)
    assert not position_embed(2, 3, p).data.any()


def test_position_embed_shares_row_half():
    p = params()
    a, b = position_embed(0, 0, p).data, position_embed(0, 1, p).data
    np.testing.assert_array_equal(a[:3], b[:3])
    assert np.all(a[3:] != b[3:])


def test_position_embeddings_are_distinct():
    table = position_grid(params()).data
    dists = np.linalg.norm(table[:, None] - table[None], axis=-1)
    np.fill_diagonal(dists, np.inf)
    assert dists.min() > 1e-6
    assert table.shape == (25, 6)


@pytest.mark.parametrize("row,col", [(-1, 0), (5, 0), (0, 5)])
def test_position_embed_out_of_range(row, col):
    with pytest.raises(IndexError):
        position_embed(row, col, params())


def test_odd_width_is_rejected():
    with pytest.raises(ValueError):
        params(d=5)


def test_project_zero_params():
    p = params()
    for t in (p.M_v, p.b_v, p.pos_row, p.pos_col):
        zero(t)
    assert not project_grid(cells(5, 5, 4), p).data.any()


def test_project_identity():
    p = params(c=6, d=6)
    p.M_v.data = np.eye(6)
    for t in (p.b_v, p.pos_row, p.pos_col):
        zero(t)
    x = cells(5, 5, 6, batch=(2,))
    np.testing.assert_array_equal(project_grid(x, p).data, x.data)


def test_project_adds_bias_and_position():
    p = params()
    x = cells(5, 5, 4)
    expected = x.data @ p.M_v.data + p.b_v.data
    for i in range(25):
        expected[i] += position_embed(i // 5, i % 5, p).data
    np.testing.assert_allclose(project_grid(x, p).data, expected, atol=1e-12)


def test_project_shape_mismatch():
    with pytest.raises(ValueError):
        project_grid(cells(5, 5, 3), params())
    with pytest.raises(ValueError):
        project_grid(cells(4, 4, 4), params())


def test_projection_gradient():
    p = params()
    x = cells(5, 5, 4, batch=(2,))
    probe = Tensor(np.random.default_rng(1).normal(size=(2, 25, 6)))
    rep = finite_difference_check(lambda: sum_(project_grid(x, p) * probe),
                                  {"M_v": p.M_v, "b_v": p.b_v, "pos_row": p.pos_row, "pos_col": p.pos_col})
    assert rep.passed, rep.summary()


# -- neighborhoods ------------------------------------------------------------------

def test_r1_gathers_the_cell_itself():
    x = cells(4, 3, 2)
    block = gather_neighborhood(x, 4, 3, 1)
    np.testing.assert_array_equal(block.values.data[:, 0, :], x.data)


def test_corner_has_five_padded_neighbors():
    block = gather_neighborhood(cells(5, 5, 3), 5, 5, 3, "zero")
    assert block.padded[0].sum() == 5
    assert not block.values.data[0][block.padded[0]].any()
    assert block.padded[12].sum() == 0          # interior
    assert block.padded[2].sum() == 3           # edge


def test_center_slot_is_the_cell():
    x = cells(5, 5, 3)
    for r in (1, 3, 5):
        block = gather_neighborhood(x, 5, 5, r, "zero")
        np.testing.assert_array_equal(block.values.data[:, r * r // 2], x.data)


def test_neighbor_slot_layout():
    idx = neighborhood_index(5, 5, 3, "zero")
    # cell (2, 2) = 12; slots run row-major over offsets
    assert idx[12].tolist() == [6, 7, 8, 11, 12, 13, 16, 17, 18]
    assert idx[0].tolist() == [-1, -1, -1, -1, 0, 1, -1, 5, 6]


def test_cyclic_gather_commutes_with_shift():
    h, w = 4, 5
    x = cells(h, w, 3, seed=2)
    for dr, dc in [(1, 0), (0, 2), (3, 4)]:
        shifted = Tensor(cyclic_shift(x.data, h, w, dr, dc))
        a = gather_neighborhood(shifted, h, w, 3, "cyclic").values.data
        b = cyclic_shift(gather_neighborhood(x, h, w, 3, "cyclic").values.data.swapaxes(0, 1), h, w, dr, dc)
        np.testing.assert_array_equal(a, b.swapaxes(0, 1))


@pytest.mark.parametrize("r", [2, 0, -1])
def test_even_or_nonpositive_range_is_rejected(r):
    with pytest.raises(ValueError):
        gather_neighborhood(cells(5, 5, 2), 5, 5, r)


def test_range_larger_than_grid_is_rejected():
    with pytest.raises(ValueError):
        gather_neighborhood(cells(3, 3, 2), 3, 3, 5)


# -- aggregation ----------------------------------------------------------------------

def test_zero_output_map_gives_identity():
    p = params(d=6)
    layer = p.layers[0]
    zero(layer.W_t)
    zero(layer.b_t)
    x = cells(5, 5, 6, batch=(2,))
    out, _ = aggregate(x, gather_neighborhood(x, 5, 5, 3), layer)
    np.testing.assert_array_equal(out.data, x.data)


def test_attention_weights_are_distributions():
    p = params(d=6)
    x = cells(5, 5, 6, seed=3, batch=(2,))
    _, alpha = aggregate(x, gather_neighborhood(x, 5, 5, 3), p.layers[0])
    assert alpha.shape == (2, 25, 9)
    np.testing.assert_allclose(alpha.data.sum(-1), 1.0, atol=1e-6)
    assert np.all((alpha.data > 0) & (alpha.data < 1))


def test_fused_path_matches_reference():
    p = params(d=6)
    layer = p.layers[0]
    x = cells(5, 5, 6, seed=4, batch=(3,))
    for mode in ("zero", "cyclic"):
        ref, a_ref = aggregate(x, gather_neighborhood(x, 5, 5, 3, mode), layer)
        fast, a_fast = aggregate_fused(x, layer, 5, 5, 3, mode)
        np.testing.assert_allclose(fast.data, ref.data, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(a_fast.data, a_ref.data, rtol=1e-12, atol=1e-12)


def test_cosine_matches_scalar_oracle():
    p = params(d=6)
    layer = p.layers[0]
    x = cells(5, 5, 6, seed=5)
    _, alpha = aggregate(x, gather_neighborhood(x, 5, 5, 3), layer)
    i = 7
    q = x.data[i] @ layer.W_q.data + layer.b_q.data
    idx = neighborhood_index(5, 5, 3, "zero")[i]
    e = []
    for j in idx:
        nb = x.data[j] if j >= 0 else np.zeros(6)
        k = nb @ layer.W_k.data + layer.b_k.data
        e.append(k @ q / (np.linalg.norm(k) * np.linalg.norm(q)))
    e = np.exp(np.array(e) - max(e))
    np.testing.assert_allclose(alpha.data[i], e / e.sum(), rtol=1e-9)


def test_zero_vectors_do_not_break_cosine():
    p = params(d=6)
    layer = p.layers[0]
    for t in (layer.W_k, layer.b_k):
        zero(t)
    x = cells(5, 5, 6)
    out, alpha = aggregate(x, gather_neighborhood(x, 5, 5, 3), layer)
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(alpha.data, 1 / 9)


def test_shift_equivariance_all_shifts():
    h = w = 5
    p = params(c=4, d=6, h=h, w=w, seed=6)
    zero(p.pos_row)
    zero(p.pos_col)
    x = np.random.default_rng(7).normal(size=(h * w, 4))
    base, _ = nfa_forward(Tensor(x), p, h, w, 3, "cyclic")
    for dr in range(h):
        for dc in range(w):
            shifted, _ = nfa_forward(Tensor(cyclic_shift(x, h, w, dr, dc)), p, h, w, 3, "cyclic")
            np.testing.assert_allclose(shifted.data, cyclic_shift(base.data, h, w, dr, dc), rtol=0, atol=1e-10)


def test_disabled_nfa_is_projection_only():
    p = params()
    x = cells(5, 5, 4)
    out, alphas = nfa_forward(x, p, 5, 5, enabled=False)
    np.testing.assert_array_equal(out.data, project_grid(x, p).data)
    assert alphas == []


def test_stacked_layers_keep_shape():
    p = params(layers=2)
    out, alphas = nfa_forward(cells(5, 5, 4, batch=(2,)), p, 5, 5)
    assert out.shape == (2, 25, 6)
    assert len(alphas) == 2


@pytest.mark.parametrize("mode", ["zero", "cyclic"])
def test_nfa_gradient(mode):
    p = params(c=3, d=4, h=3, w=4, seed=8)
    # Zero-padded neighbors have key F_k(0) = b_k.  At b_k = 0 the guarded cosine
    # has slope ~1/eps over a width ~eps, beyond what h=1e-5 can resolve, so
    # probe at non-zero biases.
    rng = np.random.default_rng(11)
    for t in (p.b_v, *vars(p.layers[0]).values()):
        if t.ndim == 1:
            t.data = t.data + 0.1 * rng.normal(size=t.shape)
    x = cells(3, 4, 3, seed=9, batch=(2,))
    probe = Tensor(np.random.default_rng(10).normal(size=(2, 12, 4)))
    named = {"M_v": p.M_v, "b_v": p.b_v, "pos_row": p.pos_row, "pos_col": p.pos_col,
             **{f"layer.{k}": v for k, v in vars(p.layers[0]).items()}}
    rep = finite_difference_check(lambda: sum_(nfa_forward(x, p, 3, 4, 3, mode)[0] * probe), named)
    assert rep.passed, rep.summary()
