"""Evaluation harness: captions, accuracies, pointing, breakdowns, lambda sweep."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .metrics import bleu4, pointing_hit
from .model import Ablation, ModelParams, RenderedSet, caption_batch, forward
from .scene import Vocabulary, change_type_from_words
from .tensor import default_dtype, no_grad

DEFAULT_JITTER_BUCKETS = ((0, 0), (1, 1), (2, 2))


@dataclass
class SampleResult:
    """Per-sample evaluation record; reports are aggregates over these."""
    index: int
    change_type: str
    jitter: int
    candidate: list[str]
    reference: list[str]
    token_correct: int
    token_total: int
    dep_correct: int
    dep_total: int
    free_tag_correct: int
    free_tag_total: int
    predicted_type: str
    pointing_hit: bool | None      # None for unchanged pairs
    gamma_bef: np.ndarray
    gamma_aft: np.ndarray
    predicted_tags: list[str] = field(default_factory=list)


@dataclass
class EvalReport:
    n: int
    bleu4: float
    token_accuracy: float
    dep_accuracy: float
    free_tag_accuracy: float
    change_type_accuracy: float
    pointing_accuracy: float | None    # None when no changed pairs are present
    n_pointing: int
    by_change_type: dict[str, EvalReport] = field(default_factory=dict)
    by_jitter: dict[str, EvalReport] = field(default_factory=dict)

    def scores(self) -> dict[str, float]:
        out = {k: getattr(self, k) for k in ("bleu4", "token_accuracy", "dep_accuracy",
                                             "free_tag_accuracy", "change_type_accuracy")}
        if self.pointing_accuracy is not None:
            out["pointing_accuracy"] = self.pointing_accuracy
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["by_change_type"] = {k: v.to_dict() for k, v in self.by_change_type.items()}
        d["by_jitter"] = {k: v.to_dict() for k, v in self.by_jitter.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary(self) -> str:
        lines = [f"n={self.n} " + " ".join(f"{k}={v:.4f}" for k, v in self.scores().items())]
        for title, table in (("change type", self.by_change_type), ("jitter", self.by_jitter)):
            for key, rep in table.items():
                lines.append(f"  [{title} {key}] n={rep.n} " +
                             " ".join(f"{k}={v:.4f}" for k, v in rep.scores().items()))
        return "\n".join(lines)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def aggregate(results: Sequence[SampleResult]) -> EvalReport:
    if not results:
        raise ValueError("cannot aggregate an empty result set")
    points = [r.pointing_hit for r in results if r.pointing_hit is not None]
    return EvalReport(
        n=len(results),
        bleu4=bleu4([r.candidate for r in results], [[r.reference] for r in results]),
        token_accuracy=_ratio(sum(r.token_correct for r in results), sum(r.token_total for r in results)),
        dep_accuracy=_ratio(sum(r.dep_correct for r in results), sum(r.dep_total for r in results)),
        free_tag_accuracy=_ratio(sum(r.free_tag_correct for r in results),
                                 sum(r.free_tag_total for r in results)),
        change_type_accuracy=float(np.mean([r.predicted_type == r.change_type for r in results])),
        pointing_accuracy=float(np.mean(points)) if points else None,
        n_pointing=len(points),
    )


def _bucket_label(lo: int, hi: int) -> str:
    return str(lo) if lo == hi else f"{lo}-{hi}"


def jitter_breakdown(results: Sequence[SampleResult],
                     buckets: Sequence[tuple[int, int]] = DEFAULT_JITTER_BUCKETS) -> dict[str, EvalReport]:
    """Reports per inclusive jitter-magnitude range; empty buckets are omitted."""
    table = {}
    for lo, hi in buckets:
        members = [r for r in results if lo <= r.jitter <= hi]
        if members:
            table[_bucket_label(lo, hi)] = aggregate(members)
    return table


def change_type_breakdown(results: Sequence[SampleResult]) -> dict[str, EvalReport]:
    kinds = sorted({r.change_type for r in results})
    return {k: aggregate([r for r in results if r.change_type == k]) for k in kinds}


def sample_results(data: RenderedSet, params: ModelParams, vocab: Vocabulary,
                   ablation: Ablation | None = None, batch_size: int = 100) -> list[SampleResult]:
    """Teacher-forced accuracies plus greedy captions and change maps for every sample."""
    dtype = params.nfa.M_v.dtype
    grid_w = params.grid[1]
    out = []
    with default_dtype(dtype), no_grad():
        for lo in range(0, len(data), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(data)))
            batch = data.batch(idx)
            _, dec = forward(batch.x_bef, batch.x_aft, batch.inputs, params, ablation)
            word_hit = (np.argmax(dec.word_logits.data, -1) == batch.targets) & batch.mask
            dep_hit = (np.argmax(dec.dep_logits.data, -1) == batch.dep_targets) & batch.mask
            decoded, enc = caption_batch(batch.x_bef, batch.x_aft, params, vocab.bos_id, vocab.eos_id,
                                         ablation, params.decoder.max_len)
            g_bef = enc.summary.gamma_bef.data
            g_aft = enc.summary.gamma_aft.data
            for j, i in enumerate(idx):
                sample = data.samples[i]
                n_tok = int(data.lengths[i])
                gold_words = vocab.decode(data.tokens[i, 1:n_tok - 1])
                gold_tags = list(data.tags[i, 1:n_tok - 1])
                words, tags = decoded[j]
                cand = vocab.decode(words)
                kind = sample.caption.change_type
                hit = None
                if kind != "none":
                    gamma = g_bef[j] if kind == "drop" else g_aft[j]
                    hit = pointing_hit(gamma, sample.caption.footprint, grid_w)
                free = sum(int(a == b) for a, b in zip(tags, gold_tags))
                out.append(SampleResult(
                    index=int(i), change_type=kind, jitter=sample.pair.jitter.magnitude,
                    candidate=cand, reference=gold_words,
                    token_correct=int(word_hit[j].sum()), token_total=int(batch.mask[j].sum()),
                    dep_correct=int(dep_hit[j].sum()), dep_total=int(batch.mask[j].sum()),
                    free_tag_correct=free, free_tag_total=max(len(tags), len(gold_tags)),
                    predicted_type=change_type_from_words(cand), pointing_hit=hit,
                    gamma_bef=g_bef[j].copy(), gamma_aft=g_aft[j].copy(),
                    predicted_tags=vocab.decode_tags(tags),
                ))
    return out


def evaluate(data: RenderedSet, params: ModelParams, vocab: Vocabulary, ablation: Ablation | None = None,
             jitter_buckets: Sequence[tuple[int, int]] = DEFAULT_JITTER_BUCKETS,
             batch_size: int = 100) -> EvalReport:
    results = sample_results(data, params, vocab, ablation, batch_size)
    return report_from_results(results, jitter_buckets)


def report_from_results(results: Sequence[SampleResult],
                        jitter_buckets: Sequence[tuple[int, int]] = DEFAULT_JITTER_BUCKETS) -> EvalReport:
    report = aggregate(results)
    report.by_change_type = change_type_breakdown(results)
    report.by_jitter = jitter_breakdown(results, jitter_buckets)
    return report


def format_heatmap(gamma: np.ndarray, grid_h: int, grid_w: int, digits: int = 6) -> str:
    """H lines of W space-separated values."""
    g = np.asarray(gamma, dtype=np.float64).reshape(grid_h, grid_w)
    return "\n".join(" ".join(f"{v:.{digits}f}" for v in row) for row in g) + "\n"


def parse_heatmap(text: str) -> np.ndarray:
    return np.array([[float(v) for v in line.split()] for line in text.strip().splitlines()])


# ---------------------------------------------------------------------------
# lambda sweep

CURVE_FIELDS = ("lam", "bleu4", "token_accuracy", "dep_accuracy", "free_tag_accuracy",
                "change_type_accuracy", "pointing_accuracy", "final_loss")


def lambda_sweep(train: RenderedSet, val: RenderedSet, lambdas: Sequence[float], train_config,
                 model_config, vocab: Vocabulary) -> list[dict]:
    """Train one model per lambda (same seed, data and budget) and score it on ``val``."""
    from .train import train_loop

    if any(not lam >= 0 for lam in lambdas):
        raise ValueError("lambda values must be non-negative")
    rows = []
    for lam in lambdas:
        cfg = replace(train_config, lam=float(lam))
        result = train_loop(train, cfg, model_config, vocab)
        rep = evaluate(val, result.params, vocab, cfg.ablation)
        row = {"lam": float(lam), **rep.scores(),
               "final_loss": result.history[-1]["loss"] if result.history else float("nan")}
        row.setdefault("pointing_accuracy", float("nan"))
        rows.append(row)
    return rows


def curve_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CURVE_FIELDS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{row[k]:.6g}" if isinstance(row.get(k), float) else row.get(k))
                         for k in CURVE_FIELDS})
    return buf.getvalue()
