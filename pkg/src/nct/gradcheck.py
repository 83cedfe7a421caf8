"""Finite-difference verification of every module at toy sizes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .contrast import depthwise_project, distill, localize
from .decoder import build_visual_sequence, decoder_forward
from .model import ModelConfig, ModelParams, forward, init_model
from .nfa import nfa_forward
from .tensor import GradCheckReport, Tensor, default_dtype, finite_difference_check, sum_
from .train import joint_loss

TOY_MODEL = ModelConfig(channels=8, dim=8, word_dim=6, r=3, nfa_layers=1, dec_layers=2, heads=2,
                        ffn_dim=16, max_len=5)
TOY_GRID = (3, 3)
TOY_VOCAB = 11
TOY_TAGS = 5
TOY_T = 4


@dataclass
class ToyProblem:
    params: ModelParams
    x_bef: np.ndarray
    x_aft: np.ndarray
    tokens: np.ndarray
    targets: np.ndarray
    dep_targets: np.ndarray
    mask: np.ndarray
    rng: np.random.Generator

    def probe(self, shape) -> Tensor:
        """Fixed random weights so the checked scalar mixes every output entry."""
        return Tensor(self.rng.normal(size=shape), dtype=np.float64)


def toy_problem(seed: int = 0, batch: int = 2) -> ToyProblem:
    rng = np.random.default_rng(seed)
    cfg = TOY_MODEL
    n = TOY_GRID[0] * TOY_GRID[1]
    params = init_model(cfg, TOY_GRID, TOY_VOCAB, TOY_TAGS, seed=seed, dtype=np.float64)
    # non-trivial biases and norms so their gradients are exercised away from zero
    for p in params.named_parameters().values():
        if p.ndim == 1:
            p.data = p.data + 0.1 * rng.normal(size=p.shape)
    mask = np.ones((batch, TOY_T), dtype=bool)
    mask[-1, -1] = False
    return ToyProblem(
        params=params,
        x_bef=rng.normal(size=(batch, n, cfg.channels)),
        x_aft=rng.normal(size=(batch, n, cfg.channels)),
        tokens=rng.integers(0, TOY_VOCAB, size=(batch, TOY_T)),
        targets=rng.integers(0, TOY_VOCAB, size=(batch, TOY_T)),
        dep_targets=rng.integers(0, TOY_TAGS, size=(batch, TOY_T)),
        mask=mask,
        rng=rng,
    )


def _module_objectives(toy: ToyProblem, lam: float) -> dict[str, tuple[Callable[[], Tensor], dict]]:
    p = toy.params
    cfg = p.config
    h, w = p.grid
    named = p.named_parameters()

    def pick(prefix):
        return {k: v for k, v in named.items() if k.startswith(prefix)}

    xb = Tensor(toy.x_bef)
    feat_shape = (toy.x_bef.shape[0], h * w, cfg.dim)
    hb, ha = Tensor(toy.rng.normal(size=feat_shape)), Tensor(toy.rng.normal(size=feat_shape))
    r_nfa, r_cfd = toy.probe(feat_shape), toy.probe(feat_shape)
    r_loc = toy.probe((feat_shape[0], 3, cfg.dim))
    visual = Tensor(toy.rng.normal(size=(feat_shape[0], 3, cfg.dim)))
    r_word = toy.probe(toy.tokens.shape + (TOY_VOCAB,))
    r_dep = toy.probe(toy.tokens.shape + (TOY_TAGS,))

    def f_nfa():
        out, _ = nfa_forward(xb, p.nfa, h, w, cfg.r, cfg.padding)
        return sum_(out * r_nfa)

    def f_cfd():
        tb = depthwise_project(hb, p.cfd, h, w)
        ta = depthwise_project(ha, p.cfd, h, w)
        x_c, _, _ = distill(tb, ta, p.cfd, cfg.temperature)
        return sum_(x_c * r_cfd)

    x_c = Tensor(toy.rng.normal(size=feat_shape))

    def f_loc():
        return sum_(build_visual_sequence(localize(x_c, hb, ha, p.localizer)) * r_loc)

    def f_dec():
        out = decoder_forward(toy.tokens, visual, p.decoder)
        return sum_(out.word_logits * r_word) + sum_(out.dep_logits * r_dep)

    def f_joint():
        _, out = forward(toy.x_bef, toy.x_aft, toy.tokens, p)
        loss, _, _ = joint_loss(out.word_logits, out.dep_logits, toy.targets, toy.dep_targets, toy.mask, lam)
        return loss

    return {
        "nfa": (f_nfa, pick("nfa.")),
        "cfd": (f_cfd, pick("cfd.")),
        "localizer": (f_loc, pick("loc.")),
        "decoder": (f_dec, pick("dec.")),
        "joint_loss": (f_joint, named),
    }


MODULES = ("nfa", "cfd", "localizer", "decoder", "joint_loss")


def run_grad_check(modules=MODULES, seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
                   lam: float = 0.5, max_entries: int | None = None) -> dict[str, GradCheckReport]:
    """One report per module; all arithmetic in float64."""
    unknown = set(modules) - set(MODULES)
    if unknown:
        raise ValueError(f"unknown modules {sorted(unknown)}; choose from {MODULES}")
    with default_dtype(np.float64):
        toy = toy_problem(seed)
        objectives = _module_objectives(toy, lam)
        reports = {}
        for name in modules:
            f, params = objectives[name]
            reports[name] = finite_difference_check(f, params, h=h, tol=tol, max_entries=max_entries,
                                                    rng=seed)
    return reports
