"""Common feature distilling, contrastive fusion and the change localizer.

All grids are cell-major ``(..., N, D)`` tensors with N = H * W.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nfa import gather_neighborhood
from .tensor import Tensor, concat, init_param, matmul, relu, sigmoid, softmax_last, sum_


@dataclass
class CfdParams:
    kernel: Tensor      # (r*r, D): one r x r filter per channel, slot-major
    W_p: Tensor         # (D, D) pointwise mixing
    b_p: Tensor
    W_h: Tensor         # (2D, D) fusion
    b_h: Tensor

    def named(self, prefix: str = "cfd") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


@dataclass
class MlpParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor


@dataclass
class LocalizerParams:
    bef: MlpParams
    aft: MlpParams
    shared: bool = False

    def named(self, prefix: str = "loc") -> dict[str, Tensor]:
        out = {f"{prefix}.bef.{k}": v for k, v in vars(self.bef).items()}
        if not self.shared:
            out.update({f"{prefix}.aft.{k}": v for k, v in vars(self.aft).items()})
        return out


@dataclass
class ChangeSummary:
    l_bef: Tensor        # (..., D)
    l_aft: Tensor
    l_diff: Tensor
    gamma_bef: Tensor    # (..., N)
    gamma_aft: Tensor


def init_cfd(rng: np.random.Generator, dim: int, r: int) -> CfdParams:
    return CfdParams(
        kernel=init_param((r * r, dim), "uniform_scaled", rng),
        W_p=init_param((dim, dim), "uniform_scaled", rng),
        b_p=init_param((dim,), "zeros"),
        W_h=init_param((2 * dim, dim), "uniform_scaled", rng),
        b_h=init_param((dim,), "zeros"),
    )


def _init_mlp(rng, dim: int) -> MlpParams:
    return MlpParams(init_param((2 * dim, dim), "uniform_scaled", rng), init_param((dim,), "zeros"),
                     init_param((dim, 1), "uniform_scaled", rng), init_param((1,), "zeros"))


def init_localizer(rng: np.random.Generator, dim: int, shared: bool = False) -> LocalizerParams:
    bef = _init_mlp(rng, dim)
    return LocalizerParams(bef, bef if shared else _init_mlp(rng, dim), shared)


def depthwise_project(x: Tensor, params: CfdParams, grid_h: int, grid_w: int) -> Tensor:
    """Per-channel r x r convolution (zero same-padding) then pointwise mixing."""
    n_slots, dim = params.kernel.shape
    r = int(round(n_slots ** 0.5))
    if r * r != n_slots or x.shape[-1] != dim:
        raise ValueError(f"grid {x.shape} does not match kernel {params.kernel.shape}")
    block = gather_neighborhood(x, grid_h, grid_w, r, "zero")
    conv = sum_(block.values * params.kernel, axis=-2)     # (..., N, D)
    return matmul(conv, params.W_p) + params.b_p


def similarity_matrix(x_self: Tensor, x_other: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-stochastic B with B[i, j] = softmax_j(x_self[i] . x_other[j] / temperature)."""
    if x_self.shape != x_other.shape:
        raise ValueError(f"shape mismatch {x_self.shape} vs {x_other.shape}")
    scores = matmul(x_self, x_other.swapaxes(-1, -2))
    if temperature != 1.0:
        scores = scores * (1.0 / temperature)
    return softmax_last(scores)


def distill_common(sim: Tensor, x_other: Tensor) -> Tensor:
    """Common features ``sim @ x_other`` for a row-stochastic ``sim``.

    Evaluated as ``x_0 + sim @ (x_other - x_0)`` with x_0 the first row, which
    is the same quantity when rows sum to one but is exact on constant grids.
    """
    if sim.shape[-1] != x_other.shape[-2]:
        raise ValueError(f"similarity {sim.shape} cannot weight features {x_other.shape}")
    anchor = x_other[..., :1, :]
    return anchor + matmul(sim, x_other - anchor)


def change_features(x_self: Tensor, x_common: Tensor) -> Tensor:
    return x_self - x_common


def fuse_contrastive(c_bef: Tensor, c_aft: Tensor, params: CfdParams) -> Tensor:
    if c_bef.shape != c_aft.shape:
        raise ValueError(f"shape mismatch {c_bef.shape} vs {c_aft.shape}")
    return relu(matmul(concat([c_bef, c_aft], axis=-1), params.W_h) + params.b_h)


def distill(x_bef: Tensor, x_aft: Tensor, params: CfdParams, temperature: float = 1.0):
    """Both distilling directions plus fusion.

    Returns (contrastive features, B for bef->aft, B for aft->bef).
    """
    b_ba = similarity_matrix(x_bef, x_aft, temperature)
    b_ab = similarity_matrix(x_aft, x_bef, temperature)
    c_bef = change_features(x_bef, distill_common(b_ba, x_aft))
    c_aft = change_features(x_aft, distill_common(b_ab, x_bef))
    return fuse_contrastive(c_bef, c_aft, params), b_ba, b_ab


def _attention_map(query: Tensor, image: Tensor, mlp: MlpParams) -> Tensor:
    hidden = relu(matmul(concat([query, image], axis=-1), mlp.W1) + mlp.b1)
    logits = matmul(hidden, mlp.W2) + mlp.b2
    return sigmoid(logits.reshape(logits.shape[:-1]))


def localize(x_c: Tensor, x_bef: Tensor, x_aft: Tensor, params: LocalizerParams) -> ChangeSummary:
    """Sigmoid attention maps per image and weighted-sum pooling over cells."""
    if not (x_c.shape == x_bef.shape == x_aft.shape):
        raise ValueError(f"inconsistent shapes {x_c.shape}, {x_bef.shape}, {x_aft.shape}")
    g_bef = _attention_map(x_c, x_bef, params.bef)
    g_aft = _attention_map(x_c, x_aft, params.aft)
    l_bef = sum_(g_bef.reshape(g_bef.shape + (1,)) * x_bef, axis=-2)
    l_aft = sum_(g_aft.reshape(g_aft.shape + (1,)) * x_aft, axis=-2)
    return ChangeSummary(l_bef, l_aft, l_aft - l_bef, g_bef, g_aft)


def diff_sub_baseline(x_bef: Tensor, x_aft: Tensor, params: LocalizerParams) -> ChangeSummary:
    """Ablation front-end: plain subtraction as the localizer query."""
    if x_bef.shape != x_aft.shape:
        raise ValueError(f"shape mismatch {x_bef.shape} vs {x_aft.shape}")
    return localize(x_aft - x_bef, x_bef, x_aft, params)
