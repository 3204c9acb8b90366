"""``sttn`` command line: train, export, eval, analyze, bench."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import analysis
from .autograd import Tensor, no_record
from .export import ExportError, FormatError, TernaryModel, export_model, is_fused_model
from .inference.bench import DEFAULT_SIZES, bench_kernels, write_csv
from .training.checkpoint import CheckpointError, load_checkpoint
from .training.config import ConfigParseError, load_config
from .training.data import BatchLoader, DataError, DatasetSource, channel_stats, load_arrays
from .training.trainer import train

log = logging.getLogger("sttn")


class CliError(RuntimeError):
    pass


def _threads(args) -> int:
    return args.threads or 1


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    if args.out:
        cfg = replace(cfg, output_dir=Path(args.out))
    if not Path(cfg.dataset_path).exists():
        raise CliError(f"{args.config}: key 'dataset.path' points to missing path {cfg.dataset_path}")
    result = train(cfg)
    final = result.metrics[-1] if result.metrics else None
    print(f"checkpoint: {result.checkpoint}")
    print(f"metrics: {result.metrics_csv}")
    if final is not None:
        print(f"final: train_acc={final.train_acc:.4f} test_acc={final.test_acc:.4f} "
              f"best_test_acc={result.best_test_acc:.4f} ({result.seconds:.1f}s)")
    return 0


def cmd_export(args) -> int:
    if not args.checkpoint or not args.out:
        raise CliError("export needs --checkpoint and --out")
    model, meta = load_checkpoint(args.checkpoint)
    with threadpool_limits(limits=_threads(args)):
        report = export_model(model, args.out, seed=args.seed or 0,
                              extra_meta={"source": str(args.checkpoint), "run": meta.get("run")})
    worst = report.worst
    print(f"wrote {args.out} ({report.nbytes} bytes); {len(report.layers)} fused layers, "
          f"worst {worst.name} max deviation {worst.max_abs_dev:.3g} (tolerance {worst.tolerance:.3g})")
    return 0


def _eval_loader(dataset: Path, in_channels: int, image_size: int, split: str) -> BatchLoader:
    kind = "mnist_idx" if in_channels == 1 else "cifar10_bin"
    train_split = load_arrays(DatasetSource(kind, dataset, "train"))
    data = train_split if split == "train" else load_arrays(DatasetSource(kind, dataset, split))
    if data.images.shape[1:] != (in_channels, image_size, image_size):
        raise CliError(f"dataset images are {data.images.shape[1:]}, model expects "
                       f"{(in_channels, image_size, image_size)}")
    return BatchLoader(data, 500, *channel_stats(train_split.images))


def cmd_eval(args) -> int:
    if not args.checkpoint or not args.dataset:
        raise CliError("eval needs --checkpoint and --dataset")
    path = Path(args.checkpoint)
    with threadpool_limits(limits=_threads(args)):
        if is_fused_model(path):
            model = TernaryModel.load(path)
            c, h, _ = model.input_shape
            forward, kind = model.forward, "fused ternary"
        else:
            net, _ = load_checkpoint(path)
            c, h = net.config.in_channels, net.config.image_size
            kind = "training graph (float path)" if net.config.mode == "float" else "training graph"

            def forward(x):
                with no_record():
                    return net(Tensor(x)).data
        loader = _eval_loader(Path(args.dataset), c, h, args.split)
        correct = sum(int((forward(x).argmax(axis=1) == y).sum()) for x, y in loader.epoch(0))
    acc = correct / loader.num_items
    print(f"{kind} accuracy on {args.split}: {acc:.4f} ({correct}/{loader.num_items})")
    return 0


def cmd_analyze(args) -> int:
    if not args.checkpoint:
        raise CliError("analyze needs --checkpoint")
    model, _ = load_checkpoint(args.checkpoint)
    reference = load_checkpoint(args.reference)[0] if args.reference else None
    report = analysis.analyze(model, reference)
    out = args.out or str(Path(args.checkpoint).with_suffix("")) + "_analysis"
    paths = analysis.write_report(report, out)
    for layer in report.layers:
        print(f"{layer.layer}: sparsity={layer.sparsity:.4f} err_sttn={layer.err_sttn} "
              f"err_twn_heuristic={layer.err_twn_heuristic:.4f}")
    print("sparsity trend (report only): first-last = "
          f"{report.trend['first_minus_last']}, non-increasing = {report.trend['non_increasing']}")
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return 0


def cmd_bench(args) -> int:
    sizes = DEFAULT_SIZES
    if args.sizes:
        sizes = [tuple(int(v) for v in s.split("x")) for s in args.sizes]
    rows = bench_kernels(sizes, repeats=args.repeats, seed=args.seed or 0)
    out = args.out or "bench.csv"
    write_csv(rows, out)
    for r in rows:
        print(f"{r.m}x{r.k}x{r.n} {r.path:12s} {r.median_s * 1e3:9.3f} ms  {r.gmacs:8.3f} GMAC/s"
              + (f"  x{r.speedup_vs_naive:.1f} vs naive" if r.speedup_vs_naive else ""))
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (YAML)")
    common.add_argument("--checkpoint", help="training checkpoint or fused model file")
    common.add_argument("--out", help="output path")
    common.add_argument("--dataset", help="dataset directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help="0 = deterministic single thread")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sttn", description="Soft-threshold ternary networks")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train from a config").set_defaults(func=cmd_train)
    sub.add_parser("export", parents=[common], help="fuse and pack a checkpoint").set_defaults(func=cmd_export)
    ev = sub.add_parser("eval", parents=[common], help="top-1 accuracy of a checkpoint or fused model")
    ev.add_argument("--split", choices=("train", "test"), default="test")
    ev.set_defaults(func=cmd_eval)
    an = sub.add_parser("analyze", parents=[common], help="sparsity / error / histogram report")
    an.add_argument("--reference", help="float checkpoint for the hard-threshold comparison")
    an.set_defaults(func=cmd_analyze)
    be = sub.add_parser("bench", parents=[common], help="packed vs float GEMM timings")
    be.add_argument("--sizes", nargs="*", help="MxKxN triples")
    be.add_argument("--repeats", type=int, default=7)
    be.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(asctime)s %(message)s")
    if args.command == "train" and not args.config:
        print("error: train needs --config", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (CliError, ConfigParseError, CheckpointError, DataError, ExportError, FormatError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
