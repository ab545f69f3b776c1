"""Command-line entry point: ``dcama <subcommand> ...``.

Exit codes: 0 ok, 2 bad input (missing/corrupt files, invalid flags), 3 numeric failure.
The default seed comes from ``DCAMA_SEED`` (0 when unset).
"""

import argparse
import logging
import sys

from . import harness, kernels
from .dtc import DTCError
from .episodes import DatasetError, ToyDatasetConfig, generate_toy_dataset, load_dataset, save_dataset
from .pipeline import ConfigMismatchError, ModelWeights
from .tensor import NonFiniteError, ShapeError

log = logging.getLogger("dcama")

EXIT_OK, EXIT_BAD_INPUT, EXIT_NUMERIC = 0, 2, 3
GRADCHECK_TOLERANCE = 1e-4


def _pixel(text):
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"pixel must be 'row,col', got {text!r}")
    return r, c


def _load_weights(args, dataset):
    if args.weights:
        weights = ModelWeights.load(args.weights)
        if weights.config.input_size != (dataset.size, dataset.size):
            raise ConfigMismatchError(
                f"weights expect {weights.config.input_size} inputs, dataset images are {dataset.size}x{dataset.size}"
            )
        return weights
    log.info("no --weights given; using seeded random weights (seed %d)", args.seed)
    return ModelWeights.init(harness.model_config_for(dataset), args.seed)


def cmd_gen_dataset(args):
    cfg = ToyDatasetConfig(args.classes, args.images, args.size)
    save_dataset(generate_toy_dataset(cfg, seed=args.seed), args.out)
    print(f"wrote {args.classes}x{args.images} toy images to {args.out}")


def cmd_eval(args):
    dataset = load_dataset(args.dataset)
    weights = _load_weights(args, dataset)
    report = harness.run_eval(
        dataset,
        weights,
        fold=args.fold,
        folds=args.folds,
        shots=args.shots,
        episodes=args.episodes,
        seed=args.seed,
        strategy=args.strategy,
        zero_background=args.zero_background,
        miou_mode=args.miou_mode,
        workers=args.workers,
    )
    if args.out:
        harness.write_report(report, args.out)
        print(f"mIoU {report['miou']:.4f}  FB-IoU {report['fb_iou']:.4f}  -> {args.out}")
    else:
        sys.stdout.write(harness.report_json(report))


def cmd_train_toy(args):
    dataset = load_dataset(args.dataset)

    def progress(step, loss, _state):
        if step % 10 == 0:
            log.info("step %d loss %.5f", step, loss)

    losses = harness.train_toy(
        dataset,
        args.out,
        steps=args.steps,
        seed=args.seed,
        fold=args.fold,
        folds=args.folds,
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.wd,
        batch=args.batch,
        resume=args.resume,
        zero_background=args.zero_background,
        callback=progress,
    )
    if losses:
        print(f"trained {len(losses)} steps; loss {losses[0]:.4f} -> {losses[-1]:.4f}; checkpoint in {args.out}")


def cmd_bench_nshot(args):
    dataset = load_dataset(args.dataset)
    weights = _load_weights(args, dataset)
    rows = harness.bench_nshot(dataset, weights, args.fold, args.folds, args.max_shots, args.reps, args.seed)
    harness.write_bench_csv(rows, args.out)
    for r in rows:
        print(f"n={r['n']}  median {r['median_s'] * 1e3:.1f} ms  peak {r['peak_bytes'] / 2**20:.1f} MiB  "
              f"kv tokens {r['kv_tokens']}")


def cmd_gradcheck(args):
    unit = harness.gradcheck_unit(args.seed, eps=args.eps)
    print(f"unit max relative error: {unit:.3e}")
    worst = unit
    if not args.unit_only:
        episode = harness.gradcheck_episode(args.size, args.seed, args.per_tensor, eps=args.eps)
        print(f"episode max relative error: {episode:.3e}")
        worst = max(worst, episode)
    print(f"max relative error: {worst:.3e}")
    if not worst < GRADCHECK_TOLERANCE:
        print(f"dcama: gradient check error exceeds {GRADCHECK_TOLERANCE:g}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_export_attention(args):
    dataset = load_dataset(args.dataset)
    weights = _load_weights(args, dataset)
    heat = harness.export_attention(
        dataset, weights, args.pixel, args.out, fold=args.fold, folds=args.folds, shots=args.shots, seed=args.seed
    )
    print(f"wrote attention heatmap {heat.shape} to {args.out}.dtc.json")


def build_parser():
    seed = harness.default_seed()
    p = argparse.ArgumentParser(prog="dcama", description="Few-shot segmentation on toy data: generation, training, evaluation and diagnostics.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, weights=True):
        sp.add_argument("--dataset", required=True, help="toy dataset directory")
        if weights:
            sp.add_argument("--weights", help="weights directory (default: seeded random init)")
        sp.add_argument("--fold", type=int, default=0)
        sp.add_argument("--folds", type=int, default=2)
        sp.add_argument("--seed", type=int, default=seed)

    g = sub.add_parser("gen-dataset", help="generate a seeded toy dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=seed)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--images", type=int, default=8, help="images per class")
    g.add_argument("--size", type=int, default=96)
    g.set_defaults(func=cmd_gen_dataset)

    e = sub.add_parser("eval", help="episodic evaluation, writes a JSON report")
    common(e)
    e.add_argument("--shots", type=int, default=1)
    e.add_argument("--episodes", type=int, default=1000)
    e.add_argument("--strategy", choices=harness.STRATEGIES, default="onepass")
    e.add_argument("--zero-background", action="store_true", help="zero support features outside the mask")
    e.add_argument("--miou-mode", choices=("accumulate", "episode_mean"), default="accumulate")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", help="report path (default: stdout)")
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("train-toy", help="episodic SGD on the fold's train classes")
    common(t, weights=False)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--steps", type=int, default=200, help="total step count (including resumed steps)")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--wd", type=float, default=1e-4)
    t.add_argument("--batch", type=int, default=4, help="episodes per step")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--zero-background", action="store_true")
    t.set_defaults(func=cmd_train_toy)

    b = sub.add_parser("bench-nshot", help="latency/memory table for n = 1..max")
    common(b)
    b.add_argument("--max-shots", type=int, default=5)
    b.add_argument("--reps", type=int, default=20)
    b.add_argument("--out", required=True, help="CSV path")
    b.set_defaults(func=cmd_bench_nshot)

    c = sub.add_parser("gradcheck", help="finite-difference check of the backward pass (64-bit)")
    c.add_argument("--seed", type=int, default=seed)
    c.add_argument("--size", type=int, default=48)
    c.add_argument("--per-tensor", type=int, default=4)
    c.add_argument("--eps", type=float, default=harness.GRADCHECK_EPS)
    c.add_argument("--unit-only", action="store_true")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("export-attention", help="support heatmap for one query pixel, as DTC")
    common(a)
    a.add_argument("--pixel", type=_pixel, required=True, help="row,col at input resolution")
    a.add_argument("--shots", type=int, default=1)
    a.add_argument("--out", required=True, help="output stem (writes <stem>.dtc.json/.bin)")
    a.set_defaults(func=cmd_export_attention)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    log.debug("kernel backend: %s", kernels.BACKEND)
    try:
        code = args.func(args)
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"dcama: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, NotADirectoryError, DTCError, DatasetError, ConfigMismatchError, ShapeError,
            ValueError, KeyError) as exc:
        print(f"dcama: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
