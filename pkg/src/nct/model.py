"""Full NCT forward pass: NFA -> CFD -> localizer -> decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .contrast import (CfdParams, ChangeSummary, LocalizerParams, depthwise_project, diff_sub_baseline,
                       distill, init_cfd, init_localizer, localize)
from .decoder import DecoderParams, build_visual_sequence, decoder_forward, greedy_decode, init_decoder
from .nfa import NfaParams, init_nfa, nfa_forward
from .scene import Sample, SceneConfig, render_pair
from .tensor import Tensor, default_dtype, no_grad

DEP_HEAD = ("dec.W_d", "dec.b_d")


@dataclass
class ModelConfig:
    channels: int = 32
    dim: int = 64
    word_dim: int = 48
    r: int = 3
    nfa_layers: int = 1
    dec_layers: int = 2
    heads: int = 8
    ffn_dim: int = 256
    max_len: int = 16
    temperature: float = 1.0
    share_localizer: bool = False
    padding: str = "zero"

    def validate(self) -> None:
        if self.dim % 2:
            raise ValueError("model.dim must be even")
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError("model.heads must divide model.dim")
        if self.r < 1 or self.r % 2 == 0:
            raise ValueError("model.r must be a positive odd number")
        if self.temperature <= 0:
            raise ValueError("model.temperature must be positive")
        if self.padding not in ("zero", "cyclic"):
            raise ValueError("model.padding must be 'zero' or 'cyclic'")
        for key in ("channels", "word_dim", "nfa_layers", "dec_layers", "ffn_dim", "max_len"):
            if getattr(self, key) < 1:
                raise ValueError(f"model.{key} must be positive")


@dataclass
class Ablation:
    use_nfa: bool = True
    use_cfd: bool = True
    diff_sub: bool = False


@dataclass
class ModelParams:
    nfa: NfaParams
    cfd: CfdParams
    localizer: LocalizerParams
    decoder: DecoderParams
    grid: tuple[int, int] = (7, 7)
    config: ModelConfig = field(default_factory=ModelConfig)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.nfa.named("nfa"))
        out.update(self.cfd.named("cfd"))
        out.update(self.localizer.named("loc"))
        out.update(self.decoder.named("dec"))
        return out

    def groups(self) -> dict[str, list[str]]:
        """theta_d is the dependency head; everything else (shared trunk included) is theta_c."""
        names = list(self.named_parameters())
        return {"theta_c": [n for n in names if n not in DEP_HEAD],
                "theta_d": [n for n in names if n in DEP_HEAD]}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"parameter mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype)

    def astype(self, dtype) -> ModelParams:
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
        return self


def init_model(config: ModelConfig, grid: tuple[int, int], vocab_size: int, n_tags: int,
               seed: int = 0, dtype=np.float64) -> ModelParams:
    config.validate()
    rng = np.random.default_rng(seed)
    h, w = grid
    with default_dtype(dtype):
        params = ModelParams(
            nfa=init_nfa(rng, config.channels, config.dim, h, w, config.nfa_layers),
            cfd=init_cfd(rng, config.dim, config.r),
            localizer=init_localizer(rng, config.dim, config.share_localizer),
            decoder=init_decoder(rng, vocab_size, n_tags, config.dim, config.word_dim,
                                 config.dec_layers, config.heads, config.ffn_dim, config.max_len),
            grid=(h, w),
            config=config,
        )
    return params.astype(dtype)


@dataclass
class Encoded:
    summary: ChangeSummary
    visual: Tensor
    x_bef: Tensor           # features that get pooled, (B, N, D)
    x_aft: Tensor
    sim_bef: Tensor | None  # B for bef -> aft
    sim_aft: Tensor | None
    nfa_alpha: list


def encode(x_bef, x_aft, params: ModelParams, ablation: Ablation | None = None) -> Encoded:
    """Visual side of the model on (B, N, C) cell-major grids."""
    ablation = ablation or Ablation()
    cfg = params.config
    h, w = params.grid
    dtype = params.nfa.M_v.dtype
    xb = x_bef if isinstance(x_bef, Tensor) else Tensor(x_bef, dtype=dtype)
    xa = x_aft if isinstance(x_aft, Tensor) else Tensor(x_aft, dtype=dtype)
    use_nfa = ablation.use_nfa and not ablation.diff_sub
    hb, alpha_b = nfa_forward(xb, params.nfa, h, w, cfg.r, cfg.padding, enabled=use_nfa)
    ha, alpha_a = nfa_forward(xa, params.nfa, h, w, cfg.r, cfg.padding, enabled=use_nfa)
    sim_b = sim_a = None
    if ablation.diff_sub or not ablation.use_cfd:
        summary = diff_sub_baseline(hb, ha, params.localizer)
        tb, ta = hb, ha
    else:
        tb = depthwise_project(hb, params.cfd, h, w)
        ta = depthwise_project(ha, params.cfd, h, w)
        x_c, sim_b, sim_a = distill(tb, ta, params.cfd, cfg.temperature)
        summary = localize(x_c, tb, ta, params.localizer)
    return Encoded(summary, build_visual_sequence(summary), tb, ta, sim_b, sim_a, alpha_b + alpha_a)


def forward(x_bef, x_aft, tokens, params: ModelParams, ablation: Ablation | None = None):
    enc = encode(x_bef, x_aft, params, ablation)
    return enc, decoder_forward(tokens, enc.visual, params.decoder)


# ---------------------------------------------------------------------------
# data preparation


def grid_to_cells(grid: np.ndarray) -> np.ndarray:
    """(..., C, H, W) -> (..., H*W, C)."""
    *lead, c, h, w = grid.shape
    return np.moveaxis(grid.reshape(tuple(lead) + (c, h * w)), -1, -2)


def cells_to_grid(cells: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """(..., H*W) or (..., H*W, D) -> (..., H, W) or (..., D, H, W)."""
    cells = np.asarray(cells)
    if cells.shape[-1] == grid_h * grid_w:
        return cells.reshape(cells.shape[:-1] + (grid_h, grid_w))
    *lead, n, d = cells.shape
    return np.moveaxis(cells, -1, -2).reshape(tuple(lead) + (d, grid_h, grid_w))


@dataclass
class RenderedSet:
    """Dataset rendered once into arrays the model consumes directly."""
    samples: list[Sample]
    x_bef: np.ndarray        # (S, N, C)
    x_aft: np.ndarray
    tokens: np.ndarray       # (S, L) padded with PAD
    tags: np.ndarray         # (S, L) padded with the PAD tag
    lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.samples)

    def batch(self, idx: Sequence[int]) -> Batch:
        idx = np.asarray(idx)
        longest = int(self.lengths[idx].max())
        tokens = self.tokens[idx, :longest]
        tags = self.tags[idx, :longest]
        mask = np.arange(1, longest)[None, :] < self.lengths[idx][:, None]
        return Batch(self.x_bef[idx], self.x_aft[idx], tokens[:, :-1], tokens[:, 1:], tags[:, 1:], mask, idx)


@dataclass
class Batch:
    x_bef: np.ndarray
    x_aft: np.ndarray
    inputs: np.ndarray       # tokens[:-1]
    targets: np.ndarray      # tokens[1:]
    dep_targets: np.ndarray  # tags[1:]
    mask: np.ndarray         # True on real (non-pad) target positions
    index: np.ndarray

    def __len__(self) -> int:
        return len(self.index)


def render_dataset(samples: Sequence[Sample], scene: SceneConfig, pad_id: int = 0, pad_tag: int = 0,
                   dtype=np.float64) -> RenderedSet:
    samples = list(samples)
    if not samples:
        raise ValueError("dataset is empty")
    pairs = [render_pair(s.pair, scene) for s in samples]
    x_bef = grid_to_cells(np.stack([p[0] for p in pairs])).astype(dtype)
    x_aft = grid_to_cells(np.stack([p[1] for p in pairs])).astype(dtype)
    lengths = np.array([len(s.caption.tokens) for s in samples])
    longest = int(lengths.max())
    tokens = np.full((len(samples), longest), pad_id, dtype=np.int64)
    tags = np.full((len(samples), longest), pad_tag, dtype=np.int64)
    for i, s in enumerate(samples):
        tokens[i, :lengths[i]] = s.caption.tokens
        tags[i, :lengths[i]] = s.caption.dep_tags
    return RenderedSet(samples, x_bef, x_aft, tokens, tags, lengths)


def caption_batch(x_bef, x_aft, params: ModelParams, bos_id: int, eos_id: int,
                  ablation: Ablation | None = None, max_len: int | None = None):
    """Greedy captions and change summaries for (B, N, C) inputs."""
    with no_grad():
        enc = encode(x_bef, x_aft, params, ablation)
        decoded = greedy_decode(enc.visual, params.decoder, bos_id, eos_id, max_len)
    return decoded, enc
