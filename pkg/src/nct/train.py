"""Joint caption + dependency training, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import Ablation, Batch, ModelConfig, ModelParams, RenderedSet, forward, init_model, render_dataset
from .scene import Sample, SceneConfig, Vocabulary
from .tensor import (AdamState, Tensor, adam_step, backward, clip_grad_norm, cross_entropy_mean, default_dtype,
                     first_nonfinite, no_grad, zero_grad)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.01
    lr: float = 2e-4
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    grad_clip: float = 0.0          # 0 disables global-norm clipping
    use_nfa: bool = True
    use_cfd: bool = True
    use_syntax: bool = True
    diff_sub: bool = False
    dtype: str = "float32"
    checkpoint_every: int = 0       # epochs; 0 = only at the end
    log_every: int = 0              # steps; 0 = once per epoch

    def validate(self) -> None:
        if not self.lam >= 0:
            raise ValueError("train.lam must be >= 0")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("train.epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("train.lr must be positive")
        if self.grad_clip < 0:
            raise ValueError("train.grad_clip must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("train.dtype must be 'float32' or 'float64'")

    @property
    def ablation(self) -> Ablation:
        return Ablation(self.use_nfa, self.use_cfd, self.diff_sub)

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.use_syntax else 0.0


def joint_loss(word_logits: Tensor, dep_logits: Tensor, targets, dep_targets, mask, lam: float):
    """(L, L_cap, L_dep) with L = L_cap + lam * L_dep.

    With lam == 0 the dependency loss is evaluated outside the graph and
    L is L_cap itself, so the dependency head receives no gradient.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    targets = np.asarray(targets)
    dep_targets = np.asarray(dep_targets)
    if word_logits.shape[:-1] != dep_logits.shape[:-1] or targets.shape != dep_targets.shape \
            or targets.shape != word_logits.shape[:-1]:
        raise ValueError(f"misaligned shapes: words {word_logits.shape}, deps {dep_logits.shape}, "
                         f"targets {targets.shape}, dep targets {dep_targets.shape}")
    l_cap = cross_entropy_mean(word_logits, targets, mask)
    if lam == 0:
        with no_grad():
            l_dep = cross_entropy_mean(dep_logits, dep_targets, mask)
        return l_cap, l_cap, l_dep
    l_dep = cross_entropy_mean(dep_logits, dep_targets, mask)
    return l_cap + l_dep * lam, l_cap, l_dep


@dataclass
class StepResult:
    loss: float
    l_cap: float
    l_dep: float
    grad_norm: float = float("nan")


def train_step(batch: Batch, params: ModelParams, adam: AdamState, config: TrainConfig) -> StepResult:
    names = params.named_parameters()
    plist = list(names.values())
    _, out = forward(batch.x_bef, batch.x_aft, batch.inputs, params, config.ablation)
    loss, l_cap, l_dep = joint_loss(out.word_logits, out.dep_logits, batch.targets, batch.dep_targets,
                                    batch.mask, config.effective_lambda)
    if not np.isfinite(loss.data):
        bad = first_nonfinite(loss)
        label = bad.name or bad.op if bad is not None else "?"
        raise NonFiniteLossError(f"non-finite loss; first non-finite tensor: {label} {bad.shape if bad else ''}")
    backward(loss)
    grads = [p.grad for p in plist]
    norm = float("nan")
    if config.grad_clip > 0:
        norm = clip_grad_norm(grads, config.grad_clip)
    adam_step(plist, grads, adam)
    zero_grad(plist)
    return StepResult(float(loss.data), float(l_cap.data), float(l_dep.data), norm)


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def train_loop(train: RenderedSet | list[Sample], config: TrainConfig, model_config: ModelConfig,
               vocab: Vocabulary, scene: SceneConfig | None = None, checkpoint_path=None,
               params: ModelParams | None = None, callback=None,
               config_echo: dict | None = None) -> TrainResult:
    """Shuffled minibatch training.

    Batches are drawn by a permutation per epoch from ``default_rng(seed)``;
    parameters are initialised from the same seed.  ``callback(epoch, params)``
    runs after every epoch.  ``config_echo`` is stored in checkpoints
    (default: the training config under ``train.*`` keys).
    """
    config.validate()
    dtype = np.dtype(config.dtype)
    if not isinstance(train, RenderedSet):
        train = render_dataset(train, scene or SceneConfig(), vocab.pad_id, vocab.pad_tag_id, dtype)
    if len(train) == 0:
        raise ValueError("training set is empty")
    grid = train.samples[0].pair.grid
    if params is None:
        params = init_model(model_config, grid, vocab.size, vocab.n_tags, seed=config.seed, dtype=dtype)
    adam = AdamState(lr=config.lr)
    rng = np.random.default_rng(config.seed)
    echo = config_echo if config_echo is not None else {f"train.{k}": v for k, v in asdict(config).items()}
    history = []
    start = time.perf_counter()
    with default_dtype(dtype):
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train))
            sums = np.zeros(3)
            steps = 0
            for lo in range(0, len(order), config.batch_size):
                step = train_step(train.batch(order[lo:lo + config.batch_size]), params, adam, config)
                sums += (step.loss, step.l_cap, step.l_dep)
                steps += 1
                if config.log_every and adam.t % config.log_every == 0:
                    log.info("step %d loss %.4f", adam.t, step.loss)
            mean = sums / steps
            history.append({"epoch": epoch, "loss": mean[0], "l_cap": mean[1], "l_dep": mean[2],
                            "seconds": time.perf_counter() - start})
            log.info("epoch %d loss %.4f (cap %.4f dep %.4f)", epoch, *mean)
            if callback is not None:
                callback(epoch, params)
            if checkpoint_path and config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, params, vocab, echo)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, params, vocab, echo)
    return TrainResult(params, history, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# checkpoints: a .npz holding float64 parameter arrays plus a JSON header


def save_checkpoint(path, params: ModelParams, vocab: Vocabulary, config_echo: dict | None = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "model": asdict(params.config),
        "grid": list(params.grid),
        "vocab": vocab.to_dict(),
        "dtype": str(params.nfa.M_v.dtype),
        "config": config_echo or {},
        "shapes": {k: list(v.shape) for k, v in params.named_parameters().items()},
    }
    arrays = {f"param/{k}": np.asarray(v, dtype=np.float64) for k, v in params.state_dict().items()}
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)


def load_checkpoint(path, dtype=None) -> tuple[ModelParams, Vocabulary, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(data["__meta__"].tobytes().decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        state = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    vocab = Vocabulary.from_dict(meta["vocab"])
    model_config = ModelConfig(**meta["model"])
    dtype = np.dtype(dtype or meta["dtype"])
    params = init_model(model_config, tuple(meta["grid"]), vocab.size, vocab.n_tags, dtype=dtype)
    params.load_state_dict(state)
    return params, vocab, meta


def parameter_count(params: ModelParams) -> int:
    return int(sum(math.prod(p.shape) for p in params.named_parameters().values()))
