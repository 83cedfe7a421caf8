"""Command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, parse_config, parse_flag_overrides
from .evaluate import curve_to_csv, evaluate, format_heatmap, lambda_sweep, report_from_results, sample_results
from .gradcheck import MODULES, run_grad_check
from .model import Ablation, caption_batch, grid_to_cells, render_dataset
from .scene import (DatasetFormatError, Sample, Vocabulary, generate_dataset, grammar_vocabulary, load_dataset,
                    render_pair, sample_from_record, save_dataset)
from .train import NonFiniteLossError, load_checkpoint, train_loop

log = logging.getLogger("nct")

VAL_OFFSET = 10_000_000   # validation samples come from a disjoint index range of the same stream


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nct", description="Change captioning on synthetic scene pairs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text,
                           epilog="Any config key can be overridden as --section-key VALUE, "
                                  "e.g. --train-lam 0.02 or --model-dim 64.")
        p.add_argument("--config", help="JSON file with flat (train.lam) or nested config keys")
        return p

    p = command("gen-data", "generate train/val splits")
    p.add_argument("--out", required=True, help="output directory")

    p = command("train", "train a model and write a checkpoint plus report")
    p.add_argument("--data", help="dataset directory from gen-data (default: generate in memory)")
    p.add_argument("--checkpoint", help="checkpoint path to write")
    p.add_argument("--report", help="where to write the validation report (JSON)")

    p = command("eval", "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: regenerate from the config)")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--limit", type=int, help="evaluate only the first N samples")
    p.add_argument("--heatmaps", help="directory for per-sample change maps")
    p.add_argument("--report", help="write the report as JSON here")

    p = command("caption", "caption one sample")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--sample-id", type=int, help="index into the split given by --data/--split")
    src.add_argument("--pair", help="JSON file holding one serialized sample record")
    p.add_argument("--data", help="dataset directory (default: regenerate from the config)")
    p.add_argument("--split", default="val", choices=("train", "val"))

    p = command("grad-check", "finite-difference check of every module (float64, toy sizes)")
    p.add_argument("--modules", nargs="+", default=list(MODULES), choices=MODULES)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)

    p = command("sweep-lambda", "train once per lambda and print the validation curve")
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.005, 0.01, 0.02, 0.1, 1.0])
    p.add_argument("--data", help="dataset directory (default: generate in memory)")
    p.add_argument("--out", help="CSV file for the curve")
    return parser


def _echo(config: RunConfig) -> None:
    print("effective config:", json.dumps(config.flat(), sort_keys=True), file=sys.stderr)


def _splits(config: RunConfig, vocab: Vocabulary, data_dir=None) -> dict[str, list[Sample]]:
    if data_dir:
        root = Path(data_dir)
        for name in ("train.jsonl", "val.jsonl"):
            if not (root / name).exists():
                raise FileNotFoundError(f"dataset file {root / name} not found")
        return {"train": load_dataset(root / "train.jsonl"), "val": load_dataset(root / "val.jsonl")}
    sc = config.scene
    return {"train": generate_dataset(sc, sc.n_train, vocab),
            "val": generate_dataset(sc, sc.n_val, vocab, offset=VAL_OFFSET)}


def _vocab(data_dir=None) -> Vocabulary:
    if data_dir and (Path(data_dir) / "vocab.json").exists():
        return Vocabulary.from_dict(json.loads((Path(data_dir) / "vocab.json").read_text()))
    return grammar_vocabulary()


def _render(samples, config: RunConfig, vocab: Vocabulary, dtype=None):
    return render_dataset(samples, config.scene, vocab.pad_id, vocab.pad_tag_id,
                          np.dtype(dtype or config.train.dtype))


def cmd_gen_data(args, config: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = grammar_vocabulary()
    splits = _splits(config, vocab)
    for name, samples in splits.items():
        save_dataset(samples, out / f"{name}.jsonl")
    (out / "vocab.json").write_text(json.dumps(vocab.to_dict(), indent=1))
    (out / "config.json").write_text(config.to_json())
    print(f"wrote {len(splits['train'])} train / {len(splits['val'])} val samples to {out}")
    return 0


def cmd_train(args, config: RunConfig) -> int:
    data_dir = args.data or config.paths.data
    vocab = _vocab(data_dir)
    splits = _splits(config, vocab, data_dir)
    out = Path(config.paths.out)
    ckpt = Path(args.checkpoint or config.paths.checkpoint or out / "model.npz")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    train_set = _render(splits["train"], config, vocab)
    result = train_loop(train_set, config.train, config.model, vocab, config.scene, checkpoint_path=ckpt,
                        config_echo=config.flat())
    report = evaluate(_render(splits["val"], config, vocab), result.params, vocab, config.train.ablation)
    print(report.summary())
    report_path = Path(args.report) if args.report else ckpt.with_suffix(".report.json")
    report_path.write_text(report.to_json())
    print(f"checkpoint: {ckpt}\nreport: {report_path}")
    return 0


def _load_params(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def _checkpoint_ablation(meta: dict, config: RunConfig) -> Ablation:
    echo = meta.get("config", {})
    return Ablation(echo.get("train.use_nfa", config.train.use_nfa), echo.get("train.use_cfd", config.train.use_cfd),
                    echo.get("train.diff_sub", config.train.diff_sub))


def cmd_eval(args, config: RunConfig) -> int:
    params, vocab, meta = _load_params(args.checkpoint)
    data_dir = args.data or config.paths.data
    samples = _splits(config, vocab, data_dir)[args.split]
    if args.limit:
        samples = samples[:args.limit]
    data = _render(samples, config, vocab, params.nfa.M_v.dtype)
    results = sample_results(data, params, vocab, _checkpoint_ablation(meta, config))
    report = report_from_results(results)
    print(report.summary())
    if args.report:
        Path(args.report).write_text(report.to_json())
    if args.heatmaps:
        hdir = Path(args.heatmaps)
        hdir.mkdir(parents=True, exist_ok=True)
        h, w = params.grid
        for r in results:
            (hdir / f"{r.index:05d}_bef.txt").write_text(format_heatmap(r.gamma_bef, h, w))
            (hdir / f"{r.index:05d}_aft.txt").write_text(format_heatmap(r.gamma_aft, h, w))
        print(f"heat maps: {hdir}")
    return 0


def cmd_caption(args, config: RunConfig) -> int:
    params, vocab, meta = _load_params(args.checkpoint)
    if args.pair:
        text = Path(args.pair).read_text().strip()
        try:
            sample = sample_from_record(json.loads(text.splitlines()[0]))
        except (ValueError, KeyError, TypeError) as e:
            raise DatasetFormatError(f"{args.pair}: not a sample record ({e})") from None
    else:
        samples = _splits(config, vocab, args.data or config.paths.data)[args.split]
        if not 0 <= args.sample_id < len(samples):
            raise UsageError(f"--sample-id must lie in [0, {len(samples)})")
        sample = samples[args.sample_id]
    before, after = render_pair(sample.pair, config.scene)
    dtype = params.nfa.M_v.dtype
    x_bef = grid_to_cells(before[None]).astype(dtype)
    x_aft = grid_to_cells(after[None]).astype(dtype)
    decoded, _ = caption_batch(x_bef, x_aft, params, vocab.bos_id, vocab.eos_id,
                               _checkpoint_ablation(meta, config))
    words, tags = decoded[0]
    print(" ".join(vocab.decode(words)))
    print(" ".join(f"{w}/{t}" for w, t in zip(vocab.decode(words), vocab.decode_tags(tags))))
    return 0


def cmd_grad_check(args, config: RunConfig) -> int:
    reports = run_grad_check(args.modules, seed=args.seed, h=args.h, tol=args.tol)
    ok = True
    for name, rep in reports.items():
        status = "PASS" if rep.passed else "FAIL"
        print(f"{name:<12s} max rel err {rep.max_error:.3e}  {status}  ({rep.seconds:.1f}s)")
        if not rep.passed:
            ok = False
            print(rep.summary())
    worst = max(r.max_error for r in reports.values())
    print(f"overall max relative error {worst:.3e} (tol {args.tol:g}): {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_sweep(args, config: RunConfig) -> int:
    data_dir = args.data or config.paths.data
    vocab = _vocab(data_dir)
    splits = _splits(config, vocab, data_dir)
    rows = lambda_sweep(_render(splits["train"], config, vocab), _render(splits["val"], config, vocab),
                        args.lambdas, config.train, config.model, vocab)
    table = curve_to_csv(rows)
    print(table, end="")
    if args.out:
        Path(args.out).write_text(table)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "caption": cmd_caption,
            "grad-check": cmd_grad_check, "sweep-lambda": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        config = parse_config(args.config, parse_flag_overrides(extra))
    except ConfigError as e:
        parser.error(f"invalid configuration: {e}")
    except (FileNotFoundError, ValueError) as e:
        parser.error(str(e))
    _echo(config)
    try:
        return COMMANDS[args.command](args, config)
    except UsageError as e:
        parser.error(str(e))
    except (FileNotFoundError, DatasetFormatError, NonFiniteLossError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
