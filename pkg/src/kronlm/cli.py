"""Command-line front end: compress | train | eval | bench.

Every command honors --seed (falling back to the KNZ_SEED environment
variable) and is end-to-end deterministic for a fixed seed, apart from the
wall-clock fields in metrics and benchmark output. Exit code 0 on success;
failures print a diagnostic to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .archive import load_model, save_model
from .bench import DEFAULT_SHAPES, rows_to_csv, run_bench
from .corpus import load_corpus
from .distill import (
    DistillWeights,
    TrainConfig,
    evaluate_lm,
    perplexity,
    run_phase,
    weights_for_mode,
)
from .errors import KronlmError, PlanningError
from .layers import CompressionSchedule, KroneckerEmbedding, KroneckerLinear, param_count
from .model import TinyGPTModel, compress_model
from .tensor_core import Rng


def _default_seed() -> int:
    return int(os.environ.get("KNZ_SEED", "0"))


def _add_seed(parser):
    parser.add_argument("--seed", type=int, default=_default_seed(),
                        help="deterministic seed (default: $KNZ_SEED or 0)")


def _onoff(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on|off, got {value!r}")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kronlm")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="Kronecker-compress a checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--report", default=None, help="write a JSON compression report here")
    p.add_argument("--layers", default="odd",
                   help="odd|even|all or a comma-separated block index list")
    p.add_argument("--factor", type=int, default=2)
    p.add_argument("--embedding", type=_onoff, default=True, metavar="on|off")
    p.add_argument("--embedding-factor", type=int, default=None)
    p.add_argument("--include-wo", type=_onoff, default=True, metavar="on|off")
    _add_seed(p)

    p = sub.add_parser("train", help="train a student against a frozen teacher")
    p.add_argument("--teacher", default=None)
    p.add_argument("--student", required=True)
    p.add_argument("--corpus", required=True, nargs="+")
    p.add_argument("--mode", default="lm+kd", choices=["none", "lm", "kd", "lm+kd"])
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=2.5e-4)
    p.add_argument("--alphas", default=None,
                   help="a1,a2,a3,a4 loss weights overriding the mode defaults")
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--steps-per-epoch", type=int, default=None)
    p.add_argument("--val-ratio", type=float, default=0.1)
    p.add_argument("--output", default=None, help="trained checkpoint path (default: --student)")
    p.add_argument("--metrics", default=None, help="JSONL metrics history path")
    _add_seed(p)

    p = sub.add_parser("eval", help="validation cross entropy and perplexity")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, nargs="+")
    p.add_argument("--json", action="store_true")
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--val-ratio", type=float, default=0.1)
    p.add_argument("--max-windows", type=int, default=None)
    _add_seed(p)

    p = sub.add_parser("bench", help="dense vs factored matmul microbenchmark")
    p.add_argument("--shapes", default=None,
                   help="semicolon-separated m,n,m1,n1,m2,n2 tuples (default: shape table)")
    p.add_argument("--rows", type=int, default=32)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--output", default=None, help="CSV path (default: stdout)")
    _add_seed(p)
    return parser


def _layer_selector(raw: str):
    if raw in ("odd", "even", "all"):
        return raw
    try:
        return tuple(int(tok) for tok in raw.split(",") if tok.strip() != "")
    except ValueError as exc:
        raise PlanningError(f"bad --layers value {raw!r}: {exc}") from exc


def _tensor_report_entry(name, layer, report_by_name):
    # weight tensors only; biases and norm vectors are listed as their own
    # (uncompressed) entries, so factored counts here exclude the bias
    if isinstance(layer, KroneckerLinear):
        shape = list(layer.factors.shape)
        factor_shapes = [list(layer.factors.a.shape), list(layer.factors.b.shape)]
        before = shape[0] * shape[1]
        after = layer.factors.param_count
    elif isinstance(layer, KroneckerEmbedding):
        shape = [layer.vocab, layer.dim]
        factor_shapes = [list(layer.a_e.shape), list(layer.b_e.shape)]
        before = layer.vocab * layer.dim
        after = layer.a_e.size + layer.b_e.size
    else:
        arr = layer.weight if hasattr(layer, "weight") else layer
        shape = list(arr.shape)
        factor_shapes = None
        before = after = int(np.prod(arr.shape))
    rep = report_by_name.get(name)
    return {
        "name": name,
        "original_shape": shape,
        "factor_shapes": factor_shapes,
        "params_before": before,
        "params_after": after,
        "relative_residual": rep.relative_residual if rep else 0.0,
    }


def _compression_report(student: TinyGPTModel, reports) -> dict:
    """Per-tensor accounting for every stored tensor except the LM head,
    which is never compressed and excluded from the parameter totals."""
    report_by_name = dict(reports)
    entries = []
    entries.append(_tensor_report_entry("tok_emb.weight", student.tok_emb, report_by_name))
    entries.append(_tensor_report_entry("pos_emb.weight", student.pos_emb, report_by_name))
    for i, block in enumerate(student.blocks):
        p = f"block{i}"
        for vec_name, vec in ((f"{p}.ln1.gain", block.ln1_gain), (f"{p}.ln1.bias", block.ln1_bias),
                              (f"{p}.ln2.gain", block.ln2_gain), (f"{p}.ln2.bias", block.ln2_bias)):
            entries.append(_tensor_report_entry(vec_name, vec, report_by_name))
        for role in ("wq", "wk", "wv", "wo", "c_fc", "c_proj"):
            layer = getattr(block, role)
            entries.append(_tensor_report_entry(f"{p}.{role}.weight", layer, report_by_name))
            if layer.bias is not None:
                entries.append(_tensor_report_entry(f"{p}.{role}.bias", layer.bias, report_by_name))
    entries.append(_tensor_report_entry("ln_f.gain", student.lnf_gain, report_by_name))
    entries.append(_tensor_report_entry("ln_f.bias", student.lnf_bias, report_by_name))
    before = sum(e["params_before"] for e in entries)
    after = sum(e["params_after"] for e in entries)
    return {
        "tensors": entries,
        "totals": {
            "params_before": before,
            "params_after": after,
            "compression_factor": before / after,
        },
        "excluded_lm_head_params": param_count(student.lm_head),
    }


def cmd_compress(args) -> int:
    if args.factor <= 1:
        raise PlanningError(f"--factor must exceed 1, got {args.factor}")
    teacher = load_model(args.input)
    cfg = teacher.config
    schedule = CompressionSchedule.for_dims(
        n_layers=cfg.n_layers,
        d_model=cfg.d_model,
        d_ff=cfg.d_ff,
        factor=args.factor,
        layers=_layer_selector(args.layers),
        compress_embedding=args.embedding,
        embedding_factor=args.embedding_factor,
        include_wo=args.include_wo,
    )
    student, reports = compress_model(teacher, schedule, rng=Rng(args.seed))
    save_model(student, args.output)
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(_compression_report(student, reports), fh, indent=2)
    totals = _compression_report(student, reports)["totals"]
    print(
        f"compressed {args.input} -> {args.output}: "
        f"{totals['params_before']} -> {totals['params_after']} params "
        f"(factor {totals['compression_factor']:.3f})"
    )
    return 0


def cmd_train(args) -> int:
    student = load_model(args.student)
    weights = None
    if args.alphas is not None:
        parts = [float(x) for x in args.alphas.split(",")]
        if len(parts) != 4:
            raise KronlmError(f"--alphas needs 4 comma-separated values, got {args.alphas!r}")
        weights = DistillWeights(*parts)
    # explicit --alphas overrides the mode's default weights entirely
    if args.mode == "none":
        effective = None
    elif weights is not None:
        effective = weights
    else:
        effective = weights_for_mode(args.mode)
    teacher = None
    if effective is not None and effective.needs_teacher():
        if args.teacher is None:
            raise KronlmError(f"--mode {args.mode} needs --teacher for the trace losses")
        teacher = load_model(args.teacher)
    corpus = load_corpus(args.corpus, val_ratio=args.val_ratio)
    config = TrainConfig(
        batch_size=args.batch,
        learning_rate=args.lr,
        epochs=args.epochs,
        seed=args.seed,
        seq_len=args.seq_len,
    )
    history = run_phase(
        args.mode, student, teacher, corpus.train, config,
        weights=effective, metrics_path=args.metrics,
        steps_per_epoch=args.steps_per_epoch,
    )
    out_path = args.output or args.student
    save_model(student, out_path)
    if history:
        print(f"trained {len(history)} steps; final total loss {history[-1].L_total:.4f}")
    else:
        print("mode none: no training steps; checkpoint copied through")
    print(f"wrote {out_path}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    corpus = load_corpus(args.corpus, val_ratio=args.val_ratio)
    ce = evaluate_lm(model, corpus.val, seq_len=args.seq_len, max_windows=args.max_windows)
    pp = perplexity(ce)
    if args.json:
        print(json.dumps({"val_ce": ce, "perplexity": pp}))
    else:
        print(f"val_ce={ce:.6f} perplexity={pp:.4f}")
    return 0


def cmd_bench(args) -> int:
    if args.shapes:
        shapes = []
        for chunk in args.shapes.split(";"):
            parts = [int(x) for x in chunk.split(",")]
            if len(parts) != 6:
                raise KronlmError(f"bad shape tuple {chunk!r}: need m,n,m1,n1,m2,n2")
            m, n, m1, n1, m2, n2 = parts
            if m != m1 * m2 or n != n1 * n2:
                raise KronlmError(f"shape tuple {chunk!r}: ({m},{n}) != ({m1}*{m2},{n1}*{n2})")
            shapes.append(tuple(parts))
    else:
        shapes = DEFAULT_SHAPES
    csv = rows_to_csv(run_bench(shapes, rows=args.rows, repeats=args.repeats, seed=args.seed))
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(csv)
        print(f"wrote {args.output}")
    else:
        sys.stdout.write(csv)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "compress": cmd_compress,
        "train": cmd_train,
        "eval": cmd_eval,
        "bench": cmd_bench,
    }
    try:
        return handlers[args.command](args)
    except (KronlmError, OSError, ValueError) as exc:
        print(f"kronlm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
