"""Command-line surface: analyze, gradcheck, train-toy, infer."""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import checkpoint, gradcheck, pixmap, report
from .network import (
    REFERENCE_PARAMS,
    VariantSpec,
    build_network,
    count_parameters,
    effective_receptive_field,
    factorization_savings,
    layer_table,
)
from .tensor import ShapeError, Tensor
from .training import toy_protocol


def _resolve_variant(args):
    if args.config:
        with open(args.config) as fh:
            return VariantSpec.from_config(fh.read())
    return VariantSpec.preset(args.variant, args.classes)


def _write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        fh.write("iter,lr,loss\n")
        for it, lr, loss in history:
            fh.write(f"{it},{lr:.10g},{loss:.10g}\n")


def cmd_analyze(args):
    spec = _resolve_variant(args)
    start = time.perf_counter()
    net = build_network(spec, seed=args.seed)
    counts = count_parameters(net)

    print(layer_table(net))
    print()
    print(f"{'layer':<14}{'conv weights':>14}{'biases':>8}{'bn affine':>11}"
          f"{'prelu':>7}{'bn buffers':>12}")
    for row in counts.rows:
        print(f"{row.name:<14}{row.conv_weights:>14}{row.biases:>8}"
              f"{row.bn_affine:>11}{row.prelu:>7}{row.bn_buffers:>12}")
    print()
    print(f"conv weights + biases:            {counts.total_weights}")
    print(f"trained params (incl. BN/PReLU):  {counts.total_trained}")
    print(f"batch-norm running-stat buffers:  {counts.total_buffers} (not counted)")
    print(f"model size at 4 bytes/param:      {counts.size_mb:.3f} MB")
    print("counting convention: per-branch 1x1 reductions; conv branch of each "
          "downsampler carries out-in filters; running stats excluded")

    reference = REFERENCE_PARAMS.get(spec.name)
    if reference:
        ratio = reference / counts.total_trained
        verdict = "within" if 0.5 <= ratio <= 2.0 else "OUTSIDE"
        print(f"reference total for {spec.name}: {reference / 1e6:.2f} M; "
              f"this build: {counts.total_trained / 1e6:.3f} M "
              f"(gap factor {ratio:.2f}, {verdict} factor-of-2)")

    print()
    print("factorization savings (conv weights, equal widths):")
    print(f"  5x5 -> two 3x3:        "
          f"{float(factorization_savings(5, 'stacked_3x3')):.1%}")
    print(f"  7x7 -> three 3x3:      "
          f"{float(factorization_savings(7, 'stacked_3x3')):.1%}")
    print(f"  3x3 -> 3x1 + 1x3:      "
          f"{float(factorization_savings(3, 'asymmetric_pair')):.1%}")
    fp_saving = factorization_savings(3, "fp_channel")
    print(f"  pyramid channel vs three-branch stacked-3x3: "
          f"{float(fp_saving):.2%} (reference figure: 67%; convention: "
          "width-16 channel, N/4, N/4, N/2 allocation, every branch fed the "
          "full input width)")

    print()
    print("per-cluster receptive fields (single 3x3 stage / full FP channel):")
    for label, rates in (("cluster 1", spec.cluster1_rates),
                         ("cluster 2", spec.cluster2_rates)):
        for rate in rates:
            side = effective_receptive_field(3, rate)
            stacked = 3 * (side - 1) + 1  # three stacked dilated 3x3-equivalents
            print(f"  {label}: rate {rate:>2} -> {side}x{side} per stage, "
                  f"{stacked}x{stacked} through block 3")
    print(f"analyze completed in {time.perf_counter() - start:.3f} s")

    if args.plot:
        report.save_param_chart(counts, args.plot)
        print(f"wrote parameter chart to {args.plot}")
    return 0


def cmd_gradcheck(args):
    results = gradcheck.run_suite(args.seed, args.tolerance)
    failed = []
    for name, err, ok in results:
        print(f"{name:<24} max rel err {err:.3e}  {'PASS' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"FAILED above tolerance {args.tolerance:g}: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks within tolerance {args.tolerance:g}")
    return 0


def cmd_train_toy(args):
    if args.size % 8:
        print(f"error: size must be divisible by 8, got {args.size}",
              file=sys.stderr)
        return 2
    try:
        net, history, mean, accuracy, mean_iou = toy_protocol(
            args.classes, args.size, args.iters, args.seed)
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    checkpoint.save_checkpoint(net, args.weights)
    history_path = f"{args.weights}.history.csv"
    _write_history_csv(history, history_path)
    print(f"wrote checkpoint to {args.weights}")
    print(f"wrote history to {history_path}")
    if history:
        figure_path = f"{args.weights}.loss.png"
        report.save_loss_curve(history, figure_path)
        print(f"wrote loss curve to {figure_path}")
    print(f"held-out pixel accuracy: {accuracy:.4f}")
    print(f"held-out mIoU: {mean_iou:.4f}")
    return 0


def cmd_infer(args):
    try:
        net = checkpoint.load_checkpoint(args.weights)
    except checkpoint.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        rgb = pixmap.read_ppm(args.input)
    except pixmap.PixmapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    h, w = rgb.shape[:2]
    if h % 8 or w % 8:
        print(f"error: input dimensions {w}x{h} must be divisible by 8",
              file=sys.stderr)
        return 2
    image = rgb.astype(np.float32).transpose(2, 0, 1) / 255.0
    image -= net.input_mean[:, None, None]
    start = time.perf_counter()
    scores = net.forward(Tensor(image[None]), mode="infer")
    elapsed = time.perf_counter() - start
    # argmax ties break toward the lowest class index
    prediction = scores.data[0].argmax(axis=0).astype(np.uint8)
    pixmap.write_pgm(args.output, prediction)
    print(f"wrote class map to {args.output}")
    if args.color_output:
        palette = pixmap.color_palette(max(net.num_classes, 1))
        pixmap.write_ppm(args.color_output, palette[prediction])
        print(f"wrote color map to {args.color_output}")
    print(f"forward pass: {elapsed:.3f} s for {w}x{h}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cfpnet",
        description="Channel-wise feature pyramid segmentation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    analyze = sub.add_parser("analyze", help="architecture and parameter report")
    analyze.add_argument("--variant", default="v3", help="v1, v2, or v3")
    analyze.add_argument("--classes", type=int, default=19)
    analyze.add_argument("--config", help="custom variant config file")
    analyze.add_argument("--seed", type=int, default=0)
    analyze.add_argument("--plot", help="write a parameter bar chart (PNG)")
    analyze.set_defaults(func=cmd_analyze)

    check = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--tolerance", type=float, default=1e-4)
    check.set_defaults(func=cmd_gradcheck)

    toy = sub.add_parser("train-toy", help="desk-scale training run")
    toy.add_argument("--classes", type=int, default=3)
    toy.add_argument("--size", type=int, default=64)
    toy.add_argument("--iters", type=int, default=2000)
    toy.add_argument("--seed", type=int, default=1)
    toy.add_argument("--weights", required=True, help="output checkpoint path")
    toy.set_defaults(func=cmd_train_toy)

    infer = sub.add_parser("infer", help="segment a P6 pixmap")
    infer.add_argument("--weights", required=True)
    infer.add_argument("--input", required=True, help="P6 portable pixmap")
    infer.add_argument("--output", required=True, help="P5 class-index map")
    infer.add_argument("--color-output", help="optional P6 color rendering")
    infer.set_defaults(func=cmd_infer)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
