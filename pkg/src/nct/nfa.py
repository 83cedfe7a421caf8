"""Neighborhood feature aggregating.

Grid features are handled cell-major: a grid of D channels over H x W cells
is a ``(..., H*W, D)`` tensor with cell index ``row * W + col``.  Linear maps
act on row vectors (``x @ W``), so ``M_v`` is stored as C x D.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import Tensor, concat, gather_rows, init_param, matmul, softmax_last, sqrt, square, sum_

COSINE_EPS = 1e-8


@dataclass
class NfaLayerParams:
    W_q: Tensor
    b_q: Tensor
    W_k: Tensor
    b_k: Tensor
    W_v: Tensor
    b_v: Tensor
    W_t: Tensor
    b_t: Tensor


@dataclass
class NfaParams:
    M_v: Tensor
    b_v: Tensor
    pos_row: Tensor
    pos_col: Tensor
    layers: list[NfaLayerParams]

    def named(self, prefix: str = "nfa") -> dict[str, Tensor]:
        out = {f"{prefix}.M_v": self.M_v, f"{prefix}.b_v": self.b_v,
               f"{prefix}.pos_row": self.pos_row, f"{prefix}.pos_col": self.pos_col}
        for i, layer in enumerate(self.layers):
            for key, t in vars(layer).items():
                out[f"{prefix}.layer{i}.{key}"] = t
        return out


def init_nfa(rng: np.random.Generator, channels: int, dim: int, grid_h: int, grid_w: int,
             n_layers: int = 1) -> NfaParams:
    if dim % 2:
        raise ValueError(f"model width must be even to split position embeddings, got {dim}")
    layers = []
    for _ in range(n_layers):
        w = {}
        for key in ("q", "k", "v", "t"):
            w[f"W_{key}"] = init_param((dim, dim), "uniform_scaled", rng)
            w[f"b_{key}"] = init_param((dim,), "zeros")
        layers.append(NfaLayerParams(**w))
    return NfaParams(
        M_v=init_param((channels, dim), "uniform_scaled", rng),
        b_v=init_param((dim,), "zeros"),
        pos_row=init_param((grid_h, dim // 2), "uniform_scaled", rng),
        pos_col=init_param((grid_w, dim // 2), "uniform_scaled", rng),
        layers=layers,
    )


def position_embed(row: int, col: int, params: NfaParams) -> Tensor:
    h, w = params.pos_row.shape[0], params.pos_col.shape[0]
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"cell ({row}, {col}) outside {h}x{w} grid")
    return concat([params.pos_row[row], params.pos_col[col]], axis=-1)


def position_grid(params: NfaParams) -> Tensor:
    """(H*W, D) table of position embeddings, cell-major."""
    h, w = params.pos_row.shape[0], params.pos_col.shape[0]
    rows = np.repeat(np.arange(h), w)
    cols = np.tile(np.arange(w), h)
    return concat([params.pos_row[rows], params.pos_col[cols]], axis=-1)


def project_grid(x: Tensor, params: NfaParams) -> Tensor:
    """x'_i = x_i M_v + b_v + pos(row_i, col_i) for (..., H*W, C) input."""
    n_cells = params.pos_row.shape[0] * params.pos_col.shape[0]
    if x.shape[-1] != params.M_v.shape[0] or x.shape[-2] != n_cells:
        raise ValueError(f"grid of shape {x.shape} does not match params "
                         f"(C={params.M_v.shape[0]}, H*W={n_cells})")
    return matmul(x, params.M_v) + params.b_v + position_grid(params)


@lru_cache(maxsize=32)
def neighborhood_index(grid_h: int, grid_w: int, r: int, mode: str = "zero") -> np.ndarray:
    """(H*W, r*r) source cell of every neighbor slot; -1 marks zero padding.

    Slots run row-major over offsets (-k..k, -k..k), k = r // 2, so the
    centre slot is ``r*r // 2``.
    """
    if r < 1 or r % 2 == 0:
        raise ValueError(f"neighborhood range must be a positive odd number, got {r}")
    if r > min(grid_h, grid_w):
        raise ValueError(f"neighborhood range {r} exceeds grid {grid_h}x{grid_w}")
    if mode not in ("zero", "cyclic"):
        raise ValueError(f"unknown padding mode {mode!r}")
    k = r // 2
    idx = np.empty((grid_h * grid_w, r * r), dtype=np.int64)
    for row in range(grid_h):
        for col in range(grid_w):
            slot = 0
            for dr in range(-k, k + 1):
                for dc in range(-k, k + 1):
                    rr, cc = row + dr, col + dc
                    if mode == "cyclic":
                        rr, cc = rr % grid_h, cc % grid_w
                    inside = 0 <= rr < grid_h and 0 <= cc < grid_w
                    idx[row * grid_w + col, slot] = rr * grid_w + cc if inside else -1
                    slot += 1
    idx.flags.writeable = False
    return idx


@dataclass
class NeighborhoodBlock:
    values: Tensor          # (..., H*W, r*r, D)
    padded: np.ndarray      # (H*W, r*r) True where the slot was filled by padding
    r: int


def gather_neighborhood(x: Tensor, grid_h: int, grid_w: int, r: int, mode: str = "zero") -> NeighborhoodBlock:
    """Collect the r x r neighbors of every cell of a (..., H*W, D) grid."""
    if x.shape[-2] != grid_h * grid_w:
        raise ValueError(f"expected {grid_h * grid_w} cells, got {x.shape[-2]}")
    index = neighborhood_index(grid_h, grid_w, r, mode)
    return NeighborhoodBlock(gather_rows(x, index), index < 0, r)


def _norm(v: Tensor, keepdims: bool = False) -> Tensor:
    """Euclidean norm over the last axis, guarded so zero vectors stay differentiable."""
    return sqrt(sum_(square(v), axis=-1, keepdims=keepdims) + COSINE_EPS ** 2)


def _neighbor_map(x: Tensor, weight: Tensor, bias: Tensor, grid_h: int, grid_w: int, r: int, mode: str) -> Tensor:
    # gather(x) @ W == gather(x @ W) because the gather is linear; mapping
    # first is r*r times cheaper.  Adding the bias after the gather gives
    # padded slots F(0) = bias, as if zeros had been gathered and mapped.
    return gather_neighborhood(matmul(x, weight), grid_h, grid_w, r, mode).values + bias


def _attend(x: Tensor, k: Tensor, v: Tensor, layer: NfaLayerParams) -> tuple[Tensor, Tensor]:
    q = matmul(x, layer.W_q) + layer.b_q                                 # (..., N, D)
    q_row = q.reshape(q.shape[:-1] + (1, q.shape[-1]))                   # (..., N, 1, D)
    # cosine = (k . q) / (|k| |q|), reduced before normalizing
    e = sum_(k * q_row, axis=-1) / (_norm(k) * _norm(q, keepdims=True))  # (..., N, S)
    alpha = softmax_last(e)
    pooled = sum_(alpha.reshape(alpha.shape + (1,)) * v, axis=-2)       # (..., N, D)
    return x + matmul(pooled, layer.W_t) + layer.b_t, alpha


def aggregate(x: Tensor, block: NeighborhoodBlock, layer: NfaLayerParams) -> tuple[Tensor, Tensor]:
    """Cosine-attention over each cell's neighborhood with a residual update.

    ``block`` holds the gathered neighbors of ``x``.  Returns the updated grid
    (same shape as ``x``) and the attention weights of shape (..., H*W, r*r).
    """
    k = matmul(block.values, layer.W_k) + layer.b_k                      # (..., N, S, D)
    v = matmul(block.values, layer.W_v) + layer.b_v
    return _attend(x, k, v, layer)


def aggregate_fused(x: Tensor, layer: NfaLayerParams, grid_h: int, grid_w: int, r: int,
                    mode: str = "zero") -> tuple[Tensor, Tensor]:
    """Same result as ``aggregate(x, gather_neighborhood(x, ...), layer)``, computed
    without materializing the gathered raw features."""
    k = _neighbor_map(x, layer.W_k, layer.b_k, grid_h, grid_w, r, mode)
    v = _neighbor_map(x, layer.W_v, layer.b_v, grid_h, grid_w, r, mode)
    return _attend(x, k, v, layer)


def nfa_forward(x: Tensor, params: NfaParams, grid_h: int, grid_w: int, r: int = 3,
                mode: str = "zero", enabled: bool = True) -> tuple[Tensor, list[Tensor]]:
    """Project then aggregate.  ``enabled=False`` keeps only the projection.

    Position embeddings enter once, before the first aggregation layer.
    """
    h = project_grid(x, params)
    alphas = []
    if enabled:
        for layer in params.layers:
            h, alpha = aggregate_fused(h, layer, grid_h, grid_w, r, mode)
            alphas.append(alpha)
    return h, alphas
