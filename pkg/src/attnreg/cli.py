"""Command-line entry point: train, eval, register, export-grid.

Every run prints its fully resolved configuration (defaults included) as
a JSON line before doing any work, so runs are reproducible from logs.
Exit codes: 0 success, 1 runtime failure, 2 argument errors.
"""

import argparse
import json
import os
import sys
from contextlib import contextmanager

LOCK_NAME = ".attnreg.lock"


def _apply_thread_cap():
    cap = os.environ.get("AIR_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


@contextmanager
def _output_lock(directory):
    """One invocation at a time per output directory."""
    os.makedirs(directory or ".", exist_ok=True)
    path = os.path.join(directory or ".", LOCK_NAME)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"output directory is locked by another run ({path}); "
            "remove the lock file if that run is dead"
        )
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        try:
            os.remove(path)
        except OSError:
            pass


def _add_arch_flags(sub):
    sub.add_argument("--scales", default="2", help="comma-separated patch sizes; one transformer per scale")
    sub.add_argument("--dim", type=int, default=16, help="token embedding dimension")
    sub.add_argument("--heads", type=int, default=4, help="attention heads")
    sub.add_argument("--blocks", type=int, default=1, help="encoder/decoder blocks")


def _add_train_flags(sub):
    sub.add_argument("--dropout", type=float, default=0.5)
    sub.add_argument("--lr", type=float, default=5e-4, help="Adam learning rate")
    sub.add_argument("--batch", type=int, default=64)
    sub.add_argument("--epochs", type=int, default=30)
    sub.add_argument("--pairing", choices=["same-class", "unconditional"], default="same-class")
    sub.add_argument("--loss", choices=["mse", "ncc"], default="mse")
    sub.add_argument("--smooth-weight", type=float, default=0.0, help="field smoothness penalty weight")
    sub.add_argument("--pairs", type=int, default=10000, help="training pairs sampled per epoch")
    sub.add_argument("--input-blur", type=float, default=0.75, help="Gaussian sigma applied to images before the model and metrics")
    sub.add_argument("--dice-blur", type=float, default=1.3, help="extra Gaussian sigma inside the Dice metric")
    sub.add_argument("--val-fraction", type=float, default=0.05)


def build_parser():
    parser = argparse.ArgumentParser(prog="attnreg", description=__doc__)
    subparsers = parser.add_subparsers(dest="command", required=True)

    p_train = subparsers.add_parser("train", help="train a registration model")
    p_train.add_argument("--data", required=True, help="directory with images-idx3-ubyte / labels-idx1-ubyte")
    p_train.add_argument("--out", required=True, help="checkpoint output directory")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--split-seed", type=int, default=0, help="train/test partition seed")
    _add_arch_flags(p_train)
    _add_train_flags(p_train)

    p_eval = subparsers.add_parser("eval", help="evaluate a checkpoint on the test split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--seed", type=int, default=0, help="pair sampling seed")
    p_eval.add_argument("--split-seed", type=int, default=0)
    p_eval.add_argument("--pairs", type=int, default=2000, help="evaluation pair count")
    p_eval.add_argument("--pairing", choices=["same-class", "unconditional"], default=None,
                        help="override the checkpoint's pairing mode")
    p_eval.add_argument("--input-blur", type=float, default=None, help="override checkpoint input smoothing")
    p_eval.add_argument("--dice-blur", type=float, default=None, help="override checkpoint dice smoothing")
    p_eval.add_argument("--out", default=None, help="report path (default: print to stdout)")

    p_reg = subparsers.add_parser("register", help="warp one moving image onto a fixed image")
    p_reg.add_argument("--checkpoint", required=True)
    p_reg.add_argument("--fixed", required=True, help="fixed image (binary PGM)")
    p_reg.add_argument("--moving", required=True, help="moving image (binary PGM)")
    p_reg.add_argument("--out", required=True, help="warped image output (PGM); the displacement field lands next to it with extension .fld")

    p_grid = subparsers.add_parser("export-grid", help="tile fixed/moving/warped test pairs into one raster")
    p_grid.add_argument("--checkpoint", required=True)
    p_grid.add_argument("--data", required=True)
    p_grid.add_argument("--seed", type=int, default=0)
    p_grid.add_argument("--split-seed", type=int, default=0)
    p_grid.add_argument("--pairs", type=int, default=10, help="columns in the grid")
    p_grid.add_argument("--out", required=True, help="output PGM path")
    return parser


def _echo_config(args):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print("config " + json.dumps(resolved, sort_keys=True, separators=(",", ":")))
    sys.stdout.flush()
    return resolved


def _parse_scales(text):
    try:
        scales = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ValueError(f"--scales expects comma-separated integers, got {text!r}")
    if not scales:
        raise ValueError("--scales must name at least one patch size")
    return scales


def _load_split(data_dir, split_seed):
    from . import dataio

    images, labels = dataio.load_dataset_dir(data_dir)
    return dataio.split_train_test(images, labels, split_seed)


def cmd_train(args):
    from . import train

    train_ds, _ = _load_split(args.data, args.split_seed)
    arch = train.ArchConfig(
        scales=_parse_scales(args.scales), dim=args.dim, heads=args.heads, blocks=args.blocks
    )
    cfg = train.TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        dropout=args.dropout,
        seed=args.seed,
        pairing_mode=args.pairing,
        loss=args.loss,
        smoothness_weight=args.smooth_weight,
        pairs_per_epoch=args.pairs,
        input_smoothing=args.input_blur,
        dice_smoothing=args.dice_blur,
        val_fraction=args.val_fraction,
    )
    with _output_lock(args.out):
        train.fit(train_ds, arch, cfg, out_dir=args.out, log=print)
    return 0


def cmd_eval(args):
    from . import evaluation, train

    params, cfg, _, _ = train.load_checkpoint(args.checkpoint)
    _, test_ds = _load_split(args.data, args.split_seed)
    pairing = args.pairing if args.pairing is not None else cfg.pairing_mode
    input_blur = args.input_blur if args.input_blur is not None else cfg.input_smoothing
    dice_blur = args.dice_blur if args.dice_blur is not None else cfg.dice_smoothing
    metrics = evaluation.evaluate(
        params,
        test_ds,
        pair_count=args.pairs,
        pair_seed=args.seed,
        pairing_mode=pairing,
        input_smoothing=input_blur,
        dice_smoothing=dice_blur,
    )
    resolved = {k: v for k, v in sorted(vars(args).items())}
    report = evaluation.render_report(metrics, resolved)
    if args.out:
        with _output_lock(os.path.dirname(os.path.abspath(args.out))):
            with open(args.out, "w", encoding="utf-8") as f:
                f.write(report)
    else:
        sys.stdout.write(report)
    return 0


def cmd_register(args):
    import numpy as np

    from . import dataio, deform, evaluation, train, warp

    params, cfg, _, _ = train.load_checkpoint(args.checkpoint)
    fixed = evaluation.read_pgm(args.fixed)
    moving = evaluation.read_pgm(args.moving)
    arch = params.arch
    if fixed.shape != (arch.image_height, arch.image_width) or fixed.shape != moving.shape:
        raise ValueError(
            f"register expects {arch.image_height}x{arch.image_width} inputs, "
            f"got fixed {fixed.shape} and moving {moving.shape}"
        )
    # field is estimated on the configured (possibly smoothed) intensities,
    # then applied to the raw moving image
    fixed_in = dataio.smooth_images(fixed, cfg.input_smoothing)
    moving_in = dataio.smooth_images(moving, cfg.input_smoothing)
    with _output_lock(os.path.dirname(os.path.abspath(args.out))):
        from . import engine

        with engine.no_grad():
            _, field = train.forward_batch(fixed_in[None], moving_in[None], params)
        field = np.asarray(field.data[0], dtype=np.float32)
        grid = warp.identity_grid(*fixed.shape)
        warped = warp.bilinear_sample(moving, grid, field)
        evaluation.write_pgm(args.out, warped)
        deform.write_field(os.path.splitext(args.out)[0] + ".fld", field)
    return 0


def cmd_export_grid(args):
    import numpy as np

    from . import dataio, engine, evaluation, train

    params, cfg, _, _ = train.load_checkpoint(args.checkpoint)
    _, test_ds = _load_split(args.data, args.split_seed)
    pairs = dataio.sample_pairs(test_ds, args.pairs, cfg.pairing_mode, args.seed)
    images = dataio.smooth_images(test_ds.images, cfg.input_smoothing)
    fixed = images[[p.fixed_index for p in pairs]]
    moving = images[[p.moving_index for p in pairs]]
    with engine.no_grad():
        warped, _ = train.forward_batch(fixed, moving, params)
    with _output_lock(os.path.dirname(os.path.abspath(args.out))):
        shape = evaluation.export_grid(fixed, moving, np.asarray(warped.data), args.out)
    print(f"wrote {shape[0]}x{shape[1]} grid to {args.out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "register": cmd_register,
    "export-grid": cmd_export_grid,
}


def main(argv=None):
    _apply_thread_cap()
    from . import engine

    engine.tune_allocator()
    parser = build_parser()
    args = parser.parse_args(argv)
    _echo_config(args)
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # runtime failures exit 1, argparse already exits 2
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
