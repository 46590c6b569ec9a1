"""Command-line interface: ``rstmri <command> [options]``.

Exit status is 0 on success, 2 when flags or input files are invalid and 1
when the work itself fails.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import dmt4, trainer
from .errors import ConfigError, FormatError, RstmriError, ShapeError
from .kspace import dft2_frames, make_vista_mask, undersample, zero_filled_recon
from .metrics import sequence_report
from .phantom import PhantomSpec, generate_cine

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("rstmri")


class UsageError(RstmriError):
    """Bad flags or unusable input files."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read(path, what, ndim=None, dtype=None):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} {path}: no such file")
    try:
        arr = dmt4.read(path)
    except FormatError as e:
        raise UsageError(f"{what} {path}: malformed DMT4: {e}") from e
    if ndim is not None and arr.ndim != ndim:
        raise UsageError(f"{what} {path}: expected {ndim} dimensions, got shape {arr.shape}")
    if dtype is not None and arr.dtype != np.dtype(dtype):
        raise UsageError(f"{what} {path}: expected {np.dtype(dtype)}, got {arr.dtype}")
    return arr


def _positive(kind):
    def parse(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v

    return parse


def _ints(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# -- commands --------------------------------------------------------------------


def cmd_phantom(args):
    spec = PhantomSpec(
        frames=args.frames, height=args.height, width=args.width, slices=args.slices,
        n_ellipses=args.ellipses, motion_amplitude=args.motion,
        period_frames=args.period if args.period is not None else float(args.frames),
        noise_sigma=args.noise, seed=args.seed,
    )
    img = generate_cine(spec)
    dmt4.write(args.out, img)
    print(f"wrote {args.out} {img.shape} float32")


def cmd_mask(args):
    mask = make_vista_mask(args.t, args.h, args.w, args.r, args.seed)
    dmt4.write(args.out, mask)
    rows = int(mask[0, :, 0].sum())
    print(f"wrote {args.out} {mask.shape} uint8, {rows} rows per frame")


def cmd_undersample(args):
    img = _read(args.image, "image", ndim=4, dtype=np.float32)
    mask = _read(args.mask, "mask", ndim=3, dtype=np.uint8)
    if mask.shape != img.shape[:3]:
        raise UsageError(f"mask {mask.shape} does not match image {img.shape[:3]}")
    k = undersample(dft2_frames(img), mask)
    if args.out_kspace:
        dmt4.write(args.out_kspace, k.astype(np.complex64))
    if args.out_zerofilled:
        dmt4.write(args.out_zerofilled, zero_filled_recon(k).astype(np.float32))
    print(f"undersampled {img.shape}: {mask.mean():.4f} of k-space kept")


def cmd_dataset(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = trainer.make_dataset(args.n, args.r, args.seed, args.frames, args.height, args.width, args.slices)
    for s in data:
        dmt4.write(out / f"{s.name}.truth.dmt4", s.truth)
        dmt4.write(out / f"{s.name}.zf.dmt4", s.zero_filled)
        dmt4.write(out / f"{s.name}.mask.dmt4", s.mask)
    print(f"wrote {len(data)} sequences to {out}")


def load_data_dir(path):
    """Samples from ``<name>.truth.dmt4`` / ``<name>.zf.dmt4`` pairs in ``path``."""
    root = Path(path)
    if not root.is_dir():
        raise UsageError(f"data directory {root} does not exist")
    out = []
    for truth_path in sorted(root.glob("*.truth.dmt4")):
        name = truth_path.name[: -len(".truth.dmt4")]
        zf_path = root / f"{name}.zf.dmt4"
        truth = _read(truth_path, "truth", ndim=4, dtype=np.float32)
        zf = _read(zf_path, "zero-filled", ndim=4, dtype=np.float32)
        if truth.shape != zf.shape:
            raise UsageError(f"{name}: truth {truth.shape} and zero-filled {zf.shape} differ")
        out.append(trainer.Sample(truth, zf, None, name))
    if not out:
        raise UsageError(f"{root} holds no <name>.truth.dmt4 / <name>.zf.dmt4 pairs")
    if len({s.truth.shape for s in out}) > 1:
        raise UsageError(f"{root}: sequences have differing shapes")
    return out


def _train_config(args):
    overrides = {
        "stage": args.stage, "variant": args.variant, "lr": args.lr, "batch_size": args.batch_size,
        "steps": args.steps, "seed": args.seed, "embed_dim": args.embed_dim, "blocks": args.blocks,
        "checkpoint": args.out_checkpoint, "eval_interval": args.eval_interval,
    }
    if args.no_augment:
        overrides["augment"] = False
    if args.strict:
        overrides["strict"] = True
    try:
        if args.config:
            return trainer.TrainConfig.from_json(args.config, **overrides)
        return trainer.TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise UsageError(f"bad training config: {e}") from e


def cmd_train(args):
    cfg = _train_config(args)
    if cfg.stage == "sadxnet" and args.sadxnet_checkpoint:
        raise UsageError("--sadxnet-checkpoint only applies to --stage rst")
    sadx = None
    if args.sadxnet_checkpoint:
        kind, sadx = _load(args.sadxnet_checkpoint)
        if kind != "sadxnet":
            raise UsageError(f"{args.sadxnet_checkpoint} is a {kind} checkpoint, not sadxnet")
    data = load_data_dir(args.data_dir)
    t0 = time.perf_counter()
    if cfg.stage == "sadxnet":
        res = trainer.train_sadxnet(cfg, data)
    else:
        res = trainer.train_rst(cfg, data, sadx=sadx)
    print(
        f"{cfg.stage}: {cfg.steps} steps in {time.perf_counter() - t0:.1f}s, "
        f"loss {res.losses[0]:.5f} -> {res.losses[-1]:.5f}; checkpoint {res.checkpoint}"
    )


def _load(path):
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise UsageError(f"{p} is not a checkpoint directory")
    try:
        return trainer.load_model(p)
    except FormatError as e:
        raise UsageError(f"{p}: malformed DMT4: {e}") from e
    except (json.JSONDecodeError, KeyError) as e:
        raise UsageError(f"{p}: unreadable manifest: {e}") from e


def cmd_reconstruct(args):
    models = dict(_load(c) for c in args.checkpoint)
    if len(models) != len(args.checkpoint):
        raise UsageError("give at most one sadxnet and one rst checkpoint")
    img = _read(args.input, "input", ndim=4, dtype=np.float32)
    out = trainer.reconstruct(img, models.get("sadxnet"), models.get("rst"))
    dmt4.write(args.out, out.astype(np.float32))
    print(f"wrote {args.out} {out.shape} using {' + '.join(models)}")


def cmd_eval(args):
    pred = _read(args.pred, "prediction", ndim=4)
    truth = _read(args.truth, "truth", ndim=4)
    if pred.shape != truth.shape:
        raise UsageError(f"prediction {pred.shape} and truth {truth.shape} differ")
    report = sequence_report(pred.real if np.iscomplexobj(pred) else pred, truth.real if np.iscomplexobj(truth) else truth)
    text = json.dumps(report, indent=2)
    if args.out_json:
        Path(args.out_json).write_text(text + "\n")
    print(
        f"rmse {report['rmse']:.6f}  psnr {report['psnr_db']:.3f} dB  "
        f"1-ssim {report['one_minus_ssim']:.6f}  ms-ssim {report['ms_ssim']:.6f}"
    )


def cmd_gradcheck(args):
    from .diffcore import CASES, grad_check

    ops = sorted(CASES) if args.op == "all" else [args.op]
    if args.op != "all" and args.op not in CASES:
        raise UsageError(f"unknown primitive {args.op!r}; choose from {', '.join(sorted(CASES))}")
    failed = 0
    for op in ops:
        r = grad_check(op, trials=args.trials, tol=args.tol, seed=args.seed)
        print(f"{'PASS' if r.passed else 'FAIL'} {op:<22} max rel err {r.max_rel_err:.3e}")
        failed += not r.passed
    if failed:
        raise RuntimeError(f"{failed} of {len(ops)} primitives failed the gradient check")


def cmd_export_png(args):
    from PIL import Image

    img = _read(args.input, "input")
    if np.iscomplexobj(img):
        img = np.abs(img)
    if img.ndim == 4:
        if not 0 <= args.frame < img.shape[0] or not 0 <= args.slice < img.shape[3]:
            raise UsageError(f"frame {args.frame}, slice {args.slice} outside {img.shape}")
        frame = img[args.frame, :, :, args.slice]
    elif img.ndim == 3:
        if not 0 <= args.frame < img.shape[0]:
            raise UsageError(f"frame {args.frame} outside {img.shape}")
        frame = img[args.frame]
    else:
        raise UsageError(f"expected a (T, H, W, Z) or (T, H, W) array, got {img.shape}")
    frame = frame.astype(np.float64)
    lo, hi = float(frame.min()), float(frame.max())
    scaled = np.zeros(frame.shape) if hi <= lo else (frame - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(args.out)
    print(f"wrote {args.out} {frame.shape[1]}x{frame.shape[0]}")


# -- parser ----------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="rstmri", description="Dynamic MRI reconstruction with SADXNet and RST.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, fn, help):
        s = sub.add_parser(name, help=help)
        s.add_argument("--seed", type=int, default=0)
        s.set_defaults(func=fn)
        return s

    s = cmd("phantom", cmd_phantom, "generate a synthetic cardiac cine phantom")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=18)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--slices", type=int, default=1)
    s.add_argument("--ellipses", type=int, default=3)
    s.add_argument("--motion", type=float, default=0.05)
    s.add_argument("--period", type=float)
    s.add_argument("--noise", type=float, default=0.0)

    s = cmd("mask", cmd_mask, "generate a VISTA-like undersampling mask")
    s.add_argument("--t", type=_positive(int), required=True)
    s.add_argument("--h", type=_positive(int), required=True)
    s.add_argument("--w", type=_positive(int), required=True)
    s.add_argument("--r", type=float, required=True)
    s.add_argument("--out", required=True)

    s = cmd("undersample", cmd_undersample, "simulate acquisition and zero-filled recon")
    s.add_argument("--image", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out-kspace")
    s.add_argument("--out-zerofilled")

    s = cmd("dataset", cmd_dataset, "write a directory of phantom training pairs")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=_positive(int), default=8)
    s.add_argument("--r", type=float, default=4.0)
    s.add_argument("--frames", type=_positive(int), default=8)
    s.add_argument("--height", type=_positive(int), default=32)
    s.add_argument("--width", type=_positive(int), default=32)
    s.add_argument("--slices", type=_positive(int), default=1)

    s = cmd("train", cmd_train, "train SADXNet or RST")
    s.add_argument("--stage", choices=("sadxnet", "rst"), required=True)
    s.add_argument("--variant", choices=("t", "s", "b", "l"))
    s.add_argument("--config", help="JSON file of training options; flags override it")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out-checkpoint", required=True)
    s.add_argument("--sadxnet-checkpoint", help="frozen SADXNet applied to RST inputs")
    s.add_argument("--steps", type=_positive(int))
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=_positive(int))
    s.add_argument("--embed-dim", type=_positive(int))
    s.add_argument("--blocks", type=_ints, help="comma-separated blocks per stage, e.g. 1,1,2,1,1,2,1,1")
    s.add_argument("--eval-interval", type=int)
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--strict", action="store_true", help="single-threaded, bit-reproducible")

    s = cmd("reconstruct", cmd_reconstruct, "apply trained models to a zero-filled sequence")
    s.add_argument("--checkpoint", action="append", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)

    s = cmd("eval", cmd_eval, "score a reconstruction against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out-json")

    s = cmd("gradcheck", cmd_gradcheck, "finite-difference check of the autodiff primitives")
    s.add_argument("--op", default="all")
    s.add_argument("--trials", type=_positive(int), default=10)
    s.add_argument("--tol", type=_positive(float), default=1e-4)

    s = cmd("export-png", cmd_export_png, "write one frame as an 8-bit grayscale PNG")
    s.add_argument("--input", required=True)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--slice", type=int, default=0)
    s.add_argument("--out", required=True)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with trainer.strict_mode(getattr(args, "strict", False)):
            args.func(args)
    except (UsageError, ConfigError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as e:
        print(f"error: malformed DMT4: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
