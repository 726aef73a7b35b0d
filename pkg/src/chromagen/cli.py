"""Command-line entry point: ``chromagen {train,eval,colorize,grid,plot,inspect}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from chromagen import data as D
from chromagen.config import ConfigError, build_config, dump_config
from chromagen.errors import ChromagenError
from chromagen.experiment_io import (
    emit_image_grid,
    latest_checkpoint,
    make_run_id,
    read_metrics,
)
from chromagen.training import colorize, colorize_dataset, restore_networks, train

log = logging.getLogger("chromagen")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _add_config_flags(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable; dotted keys for nested fields")
    p.add_argument("--seed", type=int, help="shorthand for --override seed=N")


def _add_checkpoint_flags(p):
    p.add_argument("--run-dir", help="run directory (latest ckpt-* is used)")
    p.add_argument("--checkpoint", help="explicit checkpoint file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chromagen", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model configuration")
    _add_config_flags(p)
    p.add_argument("--data-dir", required=True, help="directory with CIFAR-10 .bin files")
    p.add_argument("--run-dir", help="fresh directory for this run (default runs/<run-id>)")
    p.add_argument("--no-train-extractor", action="store_true",
                   help="fail instead of training the surrogate extractor when not cached")

    p = sub.add_parser("eval", help="Inception Score and FID on the test split")
    _add_checkpoint_flags(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--splits", type=int, default=1)
    p.add_argument("--limit", type=int, help="evaluate only the first N test images")
    p.add_argument("--real", action="store_true", help="score the real test images themselves")
    p.add_argument("--no-train-extractor", action="store_true")

    p = sub.add_parser("colorize", help="colorize image files")
    _add_checkpoint_flags(p)
    p.add_argument("inputs", nargs="+", help="input images (RGB inputs are converted to gray)")
    p.add_argument("--k", type=int, default=3, help="samples per input for latent models")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-resize", action="store_true", help="reject inputs that are not 64x64")
    p.add_argument("--out-dir", default="colorized")

    p = sub.add_parser("grid", help="gray / generated / original comparison grid")
    _add_checkpoint_flags(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--n", type=int, default=8, help="images per row")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output PNG (default <run-dir>/grids/epoch-<n>.png)")

    p = sub.add_parser("plot", help="metric-vs-epoch chart over one or more runs")
    p.add_argument("runs", nargs="+", help="run directories or metrics.log files")
    p.add_argument("--metric", action="append", help="column to plot, repeatable (default is_mean)")
    p.add_argument("--out", default="metrics.png")

    p = sub.add_parser("inspect", help="print resolved config, shape chains, receptive fields")
    _add_config_flags(p)
    return parser


def _resolve_config(args):
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        return build_config(args.config, overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _checkpoint(args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    if not args.run_dir:
        raise UsageError("give --run-dir or --checkpoint")
    path = latest_checkpoint(args.run_dir)
    if path is None:
        raise ChromagenError(f"no checkpoint found in {args.run_dir}")
    return path


def _extractor(data_dir, seed: int, allow_train: bool):
    from chromagen.metrics import (
        SURROGATE_WARNING,
        default_cache_dir,
        load_cached_extractor,
        train_surrogate_extractor,
    )

    print(f"note: {SURROGATE_WARNING}")
    train_set = D.load_cifar10(data_dir, "train")
    cached = load_cached_extractor(default_cache_dir(), seed, train_set)
    if cached is not None:
        return cached
    if not allow_train:
        raise ChromagenError(
            f"no cached extractor under {default_cache_dir()} and --no-train-extractor was given"
        )
    print("training surrogate extractor (cached for later runs)...")
    return train_surrogate_extractor(train_set, D.load_cifar10(data_dir, "test"), seed=seed,
                                     cache_dir=default_cache_dir())


def cmd_train(args) -> int:
    config = _resolve_config(args)
    train_set = D.load_cifar10(args.data_dir, "train")
    test_set, extractor = None, None
    if config.eval_every:
        test_set = D.load_cifar10(args.data_dir, "test")
        extractor = _extractor(args.data_dir, config.seed, not args.no_train_extractor)
    run_dir = Path(args.run_dir) if args.run_dir else Path("runs") / make_run_id(config.to_dict())
    if (run_dir / "metrics.log").exists():
        raise UsageError(f"{run_dir} already holds a run")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config").write_text(dump_config(config))
    print(f"run directory: {run_dir}")

    def report(record):
        parts = [f"epoch {record.epoch:3d}"]
        parts += [f"{k}={v:.4g}" for k, v in record.losses.items()]
        if record.is_mean is not None:
            parts.append(f"IS={record.is_mean:.3f}")
        if record.fid is not None:
            parts.append(f"FID={record.fid:.3f}")
        parts.append(f"{record.wall_seconds:.1f}s")
        print("  ".join(parts), flush=True)

    train(config, train_set, run_dir=run_dir, test_data=test_set, extractor=extractor,
          on_epoch=report)
    return EXIT_OK


def cmd_eval(args) -> int:
    from chromagen.metrics import score_images

    test_set = D.load_cifar10(args.data_dir, "test").subset(args.limit)
    extractor = _extractor(args.data_dir, args.seed, not args.no_train_extractor)
    if args.real:
        real = torch.cat([b.color for b in D.make_batches(test_set, 256, shuffle=False)])
        scores = score_images(extractor, real, args.splits, reference=real)
        source, out_dir = "real", None
    else:
        ckpt = _checkpoint(args)
        state, bundle = restore_networks(ckpt)
        fake, real = colorize_dataset(state, test_set, seed=args.seed)
        scores = score_images(extractor, fake, args.splits, reference=real)
        source, out_dir = f"{bundle.model}@epoch{bundle.epoch}", ckpt.parent
    print(f"{source}: IS {scores['is_mean']:.4f} +- {scores['is_std']:.4f}  FID {scores['fid']:.4f}")
    if out_dir is not None:
        line = {"source": source, "n_images": len(test_set), "splits": args.splits,
                "seed": args.seed, **scores}
        with open(out_dir / "eval.log", "a") as fh:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    return EXIT_OK


def _load_gray_input(path: Path, no_resize: bool) -> torch.Tensor:
    from PIL import Image

    img = Image.open(path)
    arr = np.asarray(img.convert("RGB" if img.mode not in ("L", "I;16") else "L"), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w = arr.shape[:2]
    if (h, w) != (64, 64):
        if no_resize:
            raise ChromagenError(f"{path}: input is {w}x{h}, expected 64x64 (--no-resize)")
        if (h, w) == (32, 32):
            arr = D.upscale2x(arr)
        else:
            mode = "L" if arr.shape[2] == 1 else "RGB"
            resized = Image.fromarray(np.squeeze(arr.astype(np.uint8)), mode).resize(
                (64, 64), Image.BILINEAR)
            arr = np.asarray(resized, dtype=np.float64).reshape(64, 64, -1)
    arr = np.clip(arr / 255.0, 0.0, 1.0)
    gray = D.to_grayscale(arr) if arr.shape[2] == 3 else arr
    return torch.from_numpy((gray * 2 - 1).transpose(2, 0, 1)[None].astype(np.float32))


def _save_rgb(tensor: torch.Tensor, path: Path) -> None:
    from PIL import Image

    arr = np.clip(np.rint(D.denormalize(tensor.numpy())), 0, 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path, format="PNG")


def cmd_colorize(args) -> int:
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    state, _ = restore_networks(_checkpoint(args))
    k = 1 if state.family == "cnn" else args.k
    gen = torch.Generator().manual_seed(args.seed)
    out_dir = Path(args.out_dir)
    for inp in args.inputs:
        gray = _load_gray_input(Path(inp), args.no_resize)
        for i in range(k):
            out = colorize(state, gray, gen)[0]
            target = out_dir / f"{Path(inp).stem}_{i}.png"
            _save_rgb(out, target)
            print(target)
    return EXIT_OK


def cmd_grid(args) -> int:
    ckpt = _checkpoint(args)
    state, bundle = restore_networks(ckpt)
    test_set = D.load_cifar10(args.data_dir, "test").subset(args.n)
    batch = next(D.make_batches(test_set, args.n, shuffle=False))
    fake = colorize(state, batch.gray, torch.Generator().manual_seed(args.seed))
    out = Path(args.out) if args.out else ckpt.parent / "grids" / f"epoch-{bundle.epoch}.png"
    emit_image_grid([batch.gray.expand(-1, 3, -1, -1), fake, batch.color], out,
                    captions=["gray input", f"{bundle.model} epoch {bundle.epoch}", "original"])
    print(out)
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = args.metric or ["is_mean"]
    series = []
    for run in args.runs:
        path = Path(run)
        log_path = path / "metrics.log" if path.is_dir() else path
        records = read_metrics(log_path).records
        if not records:
            raise ChromagenError(f"{log_path} holds no records")
        label = log_path.parent.name if log_path.name == "metrics.log" else log_path.stem
        available = sorted({c for r in records for c in r.columns()})
        for m in metrics:
            if m not in available:
                raise ChromagenError(
                    f"{log_path}: no column {m!r}; available columns: {', '.join(available)}"
                )
        series.append((label, records))
    fig, axes = plt.subplots(len(metrics), 1, figsize=(7, 3.2 * len(metrics)), squeeze=False)
    for ax, m in zip(axes[:, 0], metrics):
        for label, records in series:
            pts = [(r.epoch, r.columns()[m]) for r in records if m in r.columns()]
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="o", label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel(m)
        ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, format="png")
    plt.close(fig)
    print(args.out)
    return EXIT_OK


def cmd_inspect(args) -> int:
    from chromagen.models import specs as S
    from chromagen.models.networks import build_network, count_parameters
    from chromagen.training import FAMILY

    config = _resolve_config(args).resolved()
    print("# resolved config")
    print(dump_config(config), end="")
    family = FAMILY[config.model]
    names = {
        "cnn": ["cnn_colorizer"],
        "cwgan": ["cwgan_generator", "cwgan_critic"],
    }.get(family, ["cvae_encoder", "cvae_conditional", "cvae_decoder"])
    specs = S.all_specs()
    for name in names:
        spec = specs[name]
        print(f"\n# {name}  input {spec.input_shape}  parameters "
              f"{count_parameters(build_network(name)):,}")
        for branch_name, branch in spec.branches.items():
            print(f"  branch {branch_name}: {S.infer_shapes(branch)}")
        for i, (layer, shape) in enumerate(zip(spec.layers, S.infer_shapes(spec)), 1):
            print(f"  {i:2d} {layer.kind:16s} -> {shape}")
        for head in spec.heads:
            print(f"  head {head} -> {S.infer_shapes(spec)[len(spec.layers) + list(spec.heads).index(head)]}")
    cnn = S.build_cnn_colorizer()
    rf = S.compute_receptive_field(cnn.layers[:S.CNN_ENCODER_DEPTH])
    print(f"\n# receptive field of the colorizer's five-layer encoder: {rf}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "colorize": cmd_colorize,
    "grid": cmd_grid, "plot": cmd_plot, "inspect": cmd_inspect,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"chromagen {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ChromagenError, FileNotFoundError, ValueError) as exc:
        print(f"chromagen {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
