"""``arac`` command line: train, eval, gradcheck, inspect-attention, make-toy.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck as G
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, tiny_config
from .data import Dataset, ToyTaskSpec, generate_toy_dataset, random_batch
from .errors import AracError, ConfigError, ShapeError, UsageError, ValidationError
from .model import AracModel
from .training import accuracy_from_logits, predict, train

log = logging.getLogger("arac")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _dataset(path, split):
    """``path`` is an archive or a directory holding ``<split>.arc``."""
    path = Path(path)
    if path.is_dir():
        path = path / f"{split}.arc"
    if not path.is_file():
        raise CliError(f"no dataset at {path}")
    return Dataset.load(path)


def _load_ckpt(path):
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# -- train -------------------------------------------------------------------

def cmd_train(args):
    if not Path(args.config).is_file():
        raise CliError(f"config not found: {args.config}")
    cfg = ModelConfig.load(args.config)
    changes = {}
    if args.no_mask:
        changes["use_masking"] = False
    if args.no_gate:
        changes["use_gate"] = False
    if args.no_answer_token:
        changes["use_answer_token"] = False
    if args.ac_layers is not None:
        changes["check_layers"] = args.ac_layers
    if args.pos_enc is not None:
        changes["positional_encoding"] = args.pos_enc
    cfg = cfg.replace(**changes)
    cfg.validate()
    train_set = _dataset(args.data, "train")
    data_dir = Path(args.data)
    eval_set = _dataset(data_dir, "eval") if data_dir.is_dir() and (data_dir / "eval.arc").is_file() else None
    model = AracModel(cfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.cfg")
    report = train(model, train_set, eval_set, seed=args.seed, out_dir=out,
                   save_checkpoint=lambda m, p: save_checkpoint(m, p, {"seed": args.seed}))
    print(f"steps={report.steps} final_accuracy={report.final_accuracy} best_epoch={report.best_epoch}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------

def _config_mismatch(expected, actual):
    for key, value in expected.to_dict().items():
        if actual.to_dict()[key] != value:
            return key, value, actual.to_dict()[key]
    return None


def cmd_eval(args):
    model, header = _load_ckpt(args.checkpoint)
    if args.config is not None:
        if not Path(args.config).is_file():
            raise CliError(f"config not found: {args.config}")
        diff = _config_mismatch(ModelConfig.load(args.config), model.config)
        if diff:
            raise CliError(f"config field {diff[0]!r} is {diff[1]!r} but the checkpoint has {diff[2]!r}")
    data = _dataset(args.data, "eval")
    logits = predict(model, data, model.config.eval_batch_size)
    acc = accuracy_from_logits(logits, data.targets)
    record = {"accuracy": acc, "n_samples": len(data), "checkpoint": str(args.checkpoint),
              "config_hash": model.config.config_hash()}
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(record, sort_keys=True) + "\n")
    print(f"accuracy={acc!r}")
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------

def cmd_gradcheck(args):
    start = time.perf_counter()
    with T.inject_fault(args.inject_fault):
        if args.scope == "ops":
            errors = G.check_elementwise_ops(h=args.h if args.h is not None else 1e-5, seed=args.seed)
        else:
            cfg = tiny_config()
            if cfg.d_c > 32:
                raise CliError("gradcheck needs d_c <= 32")
            model = AracModel(cfg, seed=args.seed)
            batch = random_batch(cfg, batch_size=2, seed=args.seed + 1)
            errors = G.group_errors(G.check_model_gradients(
                model, batch, h=args.h if args.h is not None else 1e-4))
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"{name:<16} {err:.3e} {'ok' if err < args.threshold else 'FAIL'}")
    status = "pass" if worst < args.threshold else "fail"
    print(f"max_error={worst:.3e} threshold={args.threshold:g} {status} "
          f"({time.perf_counter() - start:.1f}s)")
    return EXIT_OK if worst < args.threshold else EXIT_RUNTIME


# -- inspect-attention -------------------------------------------------------

def heatmap_pgm(row):
    """Plain PGM (P2) of one row; darker pixels carry more weight."""
    row = np.asarray(row, dtype=np.float64)
    peak = row.max()
    levels = np.zeros(row.shape, np.int64) if peak <= 0 else np.rint(255 * row / peak).astype(np.int64)
    pixels = " ".join(str(255 - v) for v in levels)
    return f"P2\n{row.size} 1\n255\n{pixels}\n"


def top_regions(row, image_range, image_mask, boxes, k=5):
    """``[(region, weight, box)]`` for the ``k`` heaviest valid regions, heaviest first."""
    lo, hi = image_range
    weights = np.asarray(row)[lo:hi + 1]
    valid = np.flatnonzero(image_mask)
    order = valid[np.argsort(-weights[valid], kind="stable")][:k]
    return [(int(r), float(weights[r]), [float(v) for v in boxes[r]]) for r in order]


def cmd_inspect(args):
    model, _ = _load_ckpt(args.checkpoint)
    cfg = model.config
    if not cfg.use_answer_token or cfg.check_layers < 1:
        raise CliError("inspect-attention needs an answer token and at least one check layer")
    data = _dataset(args.data, "eval")
    if not 0 <= args.index < len(data):
        raise CliError(f"sample index {args.index} outside 0..{len(data) - 1}")
    batch = data.batch([args.index])
    with T.no_grad():
        _, trace = model.forward(batch, trace=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = trace.to_dict(0)
    doc["sample"] = args.index
    (out / "trace.json").write_text(json.dumps(doc) + "\n")
    lines = [f"# sample {args.index}: top-{args.top_k} regions by head-mean answer attention",
             "# layer rank region weight x1 y1 x2 y2"]
    for layer in range(len(trace.layers)):
        row = trace.answer_row(layer, 0).mean(axis=0)
        (out / f"layer{layer}.pgm").write_text(heatmap_pgm(row))
        for rank, (r, w, box) in enumerate(top_regions(row, trace.image, batch.image_mask[0],
                                                       batch.boxes[0], args.top_k), 1):
            lines.append(f"{layer} {rank} {r} {w!r} " + " ".join(f"{v:.6f}" for v in box))
    (out / "top_regions.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {out / 'trace.json'} and {len(trace.layers)} heatmaps")
    return EXIT_OK


# -- make-toy ----------------------------------------------------------------

def cmd_make_toy(args):
    spec = ToyTaskSpec(seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    generate_toy_dataset(spec, args.n_train, seed=args.seed + 1).save(out / "train.arc")
    generate_toy_dataset(spec, args.n_eval, seed=args.seed + 2).save(out / "eval.arc")
    spec.model_config().dump(out / "toy.cfg")
    print(f"wrote {args.n_train} train / {args.n_eval} eval samples and toy.cfg to {out}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="arac", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="dataset directory (train.arc, optional eval.arc)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--no-mask", action="store_true")
    t.add_argument("--no-gate", action="store_true")
    t.add_argument("--no-answer-token", action="store_true")
    t.add_argument("--ac-layers", type=int)
    t.add_argument("--pos-enc", choices=["none", "question", "image", "both"])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", help="fail if this config differs from the checkpoint's")
    e.add_argument("--out", help="directory for eval.json (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of the tiny model")
    g.add_argument("--threshold", type=float, default=1e-3)
    g.add_argument("--scope", choices=["model", "ops"], default="model")
    g.add_argument("--h", type=float)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect-attention", help="export answer attention of one sample")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--out", required=True)
    i.add_argument("--top-k", type=int, default=5)
    i.set_defaults(func=cmd_inspect)

    m = sub.add_parser("make-toy", help="generate the synthetic lookup task")
    m.add_argument("--out", required=True)
    m.add_argument("--n-train", type=int, default=2560)
    m.add_argument("--n-eval", type=int, default=500)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_toy)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"arac: error: {e}", file=sys.stderr)
        return e.code
    except (ConfigError, ShapeError, ValidationError, UsageError) as e:
        print(f"arac: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (AracError, OSError, FloatingPointError, ArithmeticError) as e:
        print(f"arac: runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
