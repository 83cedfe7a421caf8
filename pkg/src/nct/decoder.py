"""Transformer decoder with a word head and a dependency-tag head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .contrast import ChangeSummary
from .tensor import Tensor, concat, gelu, init_param, layer_norm, matmul, no_grad, softmax_last

MASK_VALUE = -1e9


@dataclass
class AttentionParams:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    ln1_g: Tensor
    ln1_b: Tensor
    cross_attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    W_f1: Tensor
    b_f1: Tensor
    W_f2: Tensor
    b_f2: Tensor
    ln3_g: Tensor
    ln3_b: Tensor


@dataclass
class DecoderParams:
    embed: Tensor              # (U, E_w)
    adapter: Tensor | None     # (E_w, D) when E_w != D
    pos: Tensor                # (max_len, D)
    layers: list[DecoderLayerParams]
    W_c: Tensor
    b_c: Tensor
    W_d: Tensor
    b_d: Tensor
    n_heads: int = 8
    ln_eps: float = 1e-5

    @property
    def max_len(self) -> int:
        return self.pos.shape[0]

    def named(self, prefix: str = "dec") -> dict[str, Tensor]:
        out = {f"{prefix}.embed": self.embed}
        if self.adapter is not None:
            out[f"{prefix}.adapter"] = self.adapter
        out[f"{prefix}.pos"] = self.pos
        for i, layer in enumerate(self.layers):
            for key, val in vars(layer).items():
                if isinstance(val, AttentionParams):
                    for k2, t in vars(val).items():
                        out[f"{prefix}.layer{i}.{key}.{k2}"] = t
                else:
                    out[f"{prefix}.layer{i}.{key}"] = val
        out.update({f"{prefix}.W_c": self.W_c, f"{prefix}.b_c": self.b_c,
                    f"{prefix}.W_d": self.W_d, f"{prefix}.b_d": self.b_d})
        return out


@dataclass
class DecoderOutput:
    word_logits: Tensor    # (..., T, U)
    dep_logits: Tensor     # (..., T, n)
    self_attn: list[np.ndarray]
    cross_attn: list[np.ndarray]


def _attn_params(rng, dim):
    return AttentionParams(*(init_param((dim, dim), "uniform_scaled", rng) for _ in range(4)))


def init_decoder(rng: np.random.Generator, vocab_size: int, n_tags: int, dim: int, word_dim: int,
                 n_layers: int = 2, n_heads: int = 8, ffn_dim: int | None = None,
                 max_len: int = 16) -> DecoderParams:
    if dim % n_heads:
        raise ValueError(f"{n_heads} heads do not divide model width {dim}")
    ffn_dim = ffn_dim or 4 * dim
    layers = []
    for _ in range(n_layers):
        ones = lambda: Tensor(np.ones(dim), requires_grad=True)  # noqa: E731
        layers.append(DecoderLayerParams(
            self_attn=_attn_params(rng, dim),
            ln1_g=ones(), ln1_b=init_param((dim,), "zeros"),
            cross_attn=_attn_params(rng, dim),
            ln2_g=ones(), ln2_b=init_param((dim,), "zeros"),
            W_f1=init_param((dim, ffn_dim), "uniform_scaled", rng), b_f1=init_param((ffn_dim,), "zeros"),
            W_f2=init_param((ffn_dim, dim), "uniform_scaled", rng), b_f2=init_param((dim,), "zeros"),
            ln3_g=ones(), ln3_b=init_param((dim,), "zeros"),
        ))
    return DecoderParams(
        embed=init_param((vocab_size, word_dim), "uniform_scaled", rng),
        adapter=init_param((word_dim, dim), "uniform_scaled", rng) if word_dim != dim else None,
        pos=init_param((max_len, dim), "uniform_scaled", rng),
        layers=layers,
        W_c=init_param((dim, vocab_size), "uniform_scaled", rng),
        b_c=init_param((vocab_size,), "zeros"),
        W_d=init_param((dim, n_tags), "uniform_scaled", rng),
        b_d=init_param((n_tags,), "zeros"),
        n_heads=n_heads,
    )


def build_visual_sequence(summary: ChangeSummary) -> Tensor:
    """Stack (l_bef, l_aft, l_diff) into a (..., 3, D) sequence."""
    rows = (summary.l_bef, summary.l_aft, summary.l_diff)
    width = rows[0].shape[-1]
    if any(r.shape != rows[0].shape for r in rows):
        raise ValueError(f"summary widths differ: {[r.shape for r in rows]} (expected {width})")
    return concat([r.reshape(r.shape[:-1] + (1, width)) for r in rows], axis=-2)


def causal_mask(length: int) -> np.ndarray:
    """Additive mask letting position t see positions <= t."""
    return np.triu(np.full((length, length), MASK_VALUE), k=1)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, t, d = x.shape
    return x.reshape(tuple(lead) + (t, n_heads, d // n_heads)).swapaxes(-2, -3)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams, n_heads: int,
                         mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over ``n_heads`` heads.

    Returns the (..., T_q, D) output and the (..., h, T_q, T_v) weights.
    ``mask`` is additive and must broadcast to (T_q, T_v).
    """
    dim = q.shape[-1]
    if dim % n_heads:
        raise ValueError(f"{n_heads} heads do not divide width {dim}")
    t_q, t_v = q.shape[-2], k.shape[-2]
    qh = _split_heads(matmul(q, params.W_q), n_heads)     # (..., h, Tq, dk)
    kh = _split_heads(matmul(k, params.W_k), n_heads)
    vh = _split_heads(matmul(v, params.W_v), n_heads)
    scores = matmul(qh, kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(dim // n_heads))
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape[-2:] != (t_q, t_v):
            raise ValueError(f"mask shape {mask.shape} does not match ({t_q}, {t_v})")
        scores = scores + Tensor(mask, dtype=scores.dtype)
    weights = softmax_last(scores)
    heads = matmul(weights, vh).swapaxes(-2, -3)          # (..., Tq, h, dk)
    merged = heads.reshape(heads.shape[:-2] + (dim,))
    return matmul(merged, params.W_o), weights


def masked_self_attention_layer(e: Tensor, layer: DecoderLayerParams, n_heads: int, eps: float = 1e-5):
    out, weights = multi_head_attention(e, e, e, layer.self_attn, n_heads, causal_mask(e.shape[-2]))
    return layer_norm(e + out, layer.ln1_g, layer.ln1_b, eps), weights


def cross_attention_layer(h: Tensor, visual: Tensor, layer: DecoderLayerParams, n_heads: int, eps: float = 1e-5):
    out, weights = multi_head_attention(h, visual, visual, layer.cross_attn, n_heads)
    return layer_norm(h + out, layer.ln2_g, layer.ln2_b, eps), weights


def feed_forward_layer(h: Tensor, layer: DecoderLayerParams, eps: float = 1e-5) -> Tensor:
    ffn = matmul(gelu(matmul(h, layer.W_f1) + layer.b_f1), layer.W_f2) + layer.b_f2
    return layer_norm(h + ffn, layer.ln3_g, layer.ln3_b, eps)


def embed_tokens(tokens: np.ndarray, params: DecoderParams) -> Tensor:
    vocab_size = params.embed.shape[0]
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= vocab_size:
        raise ValueError(f"token ids must lie in [0, {vocab_size})")
    t = tokens.shape[-1]
    if t > params.max_len:
        raise ValueError(f"sequence length {t} exceeds max_len {params.max_len}")
    onehot = np.zeros(tokens.shape + (vocab_size,), dtype=params.embed.dtype)
    np.put_along_axis(onehot, tokens[..., None], 1.0, axis=-1)
    e = matmul(Tensor(onehot, dtype=onehot.dtype), params.embed)
    if params.adapter is not None:
        e = matmul(e, params.adapter)
    return e + params.pos[:t]


def decoder_forward(tokens, visual: Tensor, params: DecoderParams) -> DecoderOutput:
    """Teacher-forced pass: (..., T) token ids and (..., 3, D) visual rows."""
    tokens = np.asarray(tokens, dtype=np.int64)
    h = embed_tokens(tokens, params)
    self_maps, cross_maps = [], []
    for layer in params.layers:
        h, w_self = masked_self_attention_layer(h, layer, params.n_heads, params.ln_eps)
        h, w_cross = cross_attention_layer(h, visual, layer, params.n_heads, params.ln_eps)
        h = feed_forward_layer(h, layer, params.ln_eps)
        self_maps.append(w_self.data)
        cross_maps.append(w_cross.data)
    word_logits = matmul(h, params.W_c) + params.b_c
    dep_logits = matmul(h, params.W_d) + params.b_d
    return DecoderOutput(word_logits, dep_logits, self_maps, cross_maps)


def greedy_decode(visual: Tensor, params: DecoderParams, bos_id: int, eos_id: int,
                  max_len: int | None = None) -> list[tuple[list[int], list[int]]]:
    """Argmax decoding for a batch of (B, 3, D) visual sequences.

    Each result is (word ids, tag ids) without BOS/EOS; the tag at a step is
    the argmax of the dependency head at the position that produced the word.
    Ties go to the lowest index.
    """
    max_len = min(max_len or params.max_len, params.max_len)
    batch = visual.shape[0]
    seq = np.full((batch, 1), bos_id, dtype=np.int64)
    words = [[] for _ in range(batch)]
    tags = [[] for _ in range(batch)]
    done = np.zeros(batch, dtype=bool)
    with no_grad():
        for _ in range(max_len - 1):
            out = decoder_forward(seq, visual, params)
            next_word = np.argmax(out.word_logits.data[:, -1], axis=-1)
            next_tag = np.argmax(out.dep_logits.data[:, -1], axis=-1)
            for b in range(batch):
                if done[b]:
                    continue
                if next_word[b] == eos_id:
                    done[b] = True
                else:
                    words[b].append(int(next_word[b]))
                    tags[b].append(int(next_tag[b]))
            if done.all():
                break
            seq = np.concatenate([seq, next_word[:, None]], axis=1)
    return list(zip(words, tags))
