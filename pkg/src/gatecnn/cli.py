"""Command-line entry point exposing the pipeline: quantize, check-budget,
and eval (with optional oracle comparison).

Exit codes: 0 success, 1 usage, 2 validation, 3 budget failure,
4 circuit/oracle mismatch.
"""

import argparse
import json
import os
import sys

import numpy as np

from .backend import DepthBudget, GateCostModel
from .compile import BudgetExceeded, check_budget, compile_model, format_ledger
from .dataio import load_images, load_labels
from .model import ModelError, fold_batchnorm, parse_model, quantize_model, serialize_model
from .runtime import emit_report, encode_image, evaluate_batch, reference_eval_batch

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_BUDGET = 3
EXIT_ORACLE = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser():
    p = _Parser(prog="gatecnn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--model", required=True, help="model JSON file")
        sp.add_argument("--cost-model", default=os.environ.get("SHE_COST_MODEL"),
                        help="gate cost model JSON (default: $SHE_COST_MODEL or built-in)")
        sp.add_argument("--budget", type=int, default=32768, help="depth budget")
        sp.add_argument("--format", choices=("text", "json"), default="text")
        sp.add_argument("--seed", type=int, default=0, help="rng seed for sweep modes")
        sp.add_argument("--strict", action="store_true",
                        help="make budget failure fatal during compile")

    q = sub.add_parser("quantize", help="log-quantize float weights")
    q.add_argument("--model", required=True)
    q.add_argument("--output", required=True, help="where to write the quantized model")
    q.add_argument("--format", choices=("text", "json"), default="text")

    cb = sub.add_parser("check-budget", help="per-layer depth ledger and verdict")
    common(cb)

    ev = sub.add_parser("eval", help="run images through the compiled circuits")
    common(ev)
    ev.add_argument("--input", required=True, help="IDX or CSV image file")
    ev.add_argument("--labels", help="IDX or text label file")
    ev.add_argument("--limit", type=int, default=0, help="evaluate only the first N images")
    ev.add_argument("--workers", type=int, default=1)
    ev.add_argument("--compare-oracle", action="store_true",
                    help="also run the plaintext oracle; exit 4 on any logit mismatch")
    return p


def _load_model(path):
    with open(path, "rb") as f:
        return parse_model(f.read())


def _prepare(args):
    model = _load_model(args.model)
    if not model.is_quantized():
        model, _ = quantize_model(model)
        print("note: model had float weights; quantized with the file's config", file=sys.stderr)
    model = fold_batchnorm(model)
    cost = GateCostModel.from_file(args.cost_model) if args.cost_model else GateCostModel()
    budget = DepthBudget(args.budget)
    plan = compile_model(model, cost, budget, strict=args.strict)
    return model, plan, budget


def cmd_quantize(args):
    model = _load_model(args.model)
    quantized, stats = quantize_model(model)
    with open(args.output, "wb") as f:
        f.write(serialize_model(quantized))
    if args.format == "json":
        print(json.dumps({"layers": stats}, indent=2, sort_keys=True))
    else:
        for s in stats:
            print(f"layer {s['layer']:3d} {s['kind']:4s} "
                  f"max_rel_err {s['max_rel_err']:.4f}  mean_rel_err {s['mean_rel_err']:.4f}  "
                  f"zeroed {s['zero_fraction']:.1%}")
    for s in stats:
        if s["all_zero"]:
            print(f"warning: layer {s['layer']} quantized to all zeros", file=sys.stderr)
    return EXIT_OK


def cmd_check_budget(args):
    _, plan, budget = _prepare(args)
    report = check_budget(plan, budget)
    print(format_ledger(report, args.format))
    return EXIT_OK if report.passed else EXIT_BUDGET


def cmd_eval(args):
    model, plan, budget = _prepare(args)
    images = load_images(args.input)
    if args.limit:
        images = images[: args.limit]
    labels = None
    if args.labels:
        labels = load_labels(args.labels)
        if args.limit:
            labels = labels[: args.limit]
        if len(labels) != len(images):
            print(f"error: {len(labels)} labels for {len(images)} images", file=sys.stderr)
            return EXIT_VALIDATION
    raws = np.stack([encode_image(im, model.quant.activation_format) for im in images])
    results = evaluate_batch(plan, raws, workers=args.workers)

    mismatches = 0
    if args.compare_oracle:
        oracle_raw, _ = reference_eval_batch(model, raws)
        for i, r in enumerate(results):
            if not np.array_equal(r.raw_logits, oracle_raw[i]):
                mismatches += 1
                print(f"oracle mismatch on image {i}: circuit {r.raw_logits.tolist()} "
                      f"oracle {oracle_raw[i].tolist()}", file=sys.stderr)

    for i, r in enumerate(results):
        if args.format == "json":
            print(emit_report(r, "json"))
        else:
            print(f"image {i}")
            print(emit_report(r, "text"))
    if labels is not None:
        acc = float(np.mean([r.predicted_class == labels[i] for i, r in enumerate(results)]))
        print(f"accuracy {acc:.4f} over {len(results)} images")
    verdict = check_budget(plan, budget)
    if not verdict.passed:
        print(f"budget FAIL: total {verdict.total} > {verdict.budget}", file=sys.stderr)
        if args.strict:
            return EXIT_BUDGET
    if mismatches:
        return EXIT_ORACLE
    return EXIT_OK


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else EXIT_USAGE
    try:
        if args.command == "quantize":
            return cmd_quantize(args)
        if args.command == "check-budget":
            return cmd_check_budget(args)
        if args.command == "eval":
            return cmd_eval(args)
        return EXIT_USAGE
    except BudgetExceeded as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except (ModelError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
