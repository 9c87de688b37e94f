"""Command-line entry point.

Exit codes: 0 success, 1 a reported metric misses its target, 2 bad input
(unreadable or malformed files, invalid arguments).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys

import numpy as np

from ..autograd import grad_check, random_instance
from ..filterops import PermutohedralKernel, bilateral_filter, gaussian_kernel, identity_kernel
from ..lattice import FeatureSet, InvalidInputError
from .io import FormatError, read_checkpoint, read_image, read_tensor, write_image, write_tensor
from .metrics import psnr

EXIT_OK, EXIT_METRIC, EXIT_INPUT = 0, 1, 2

log = logging.getLogger("permconv")


class InputError(Exception):
    """Bad user input detected after argument parsing."""


def _report(rows: list[tuple[str, float]]) -> None:
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v:8.3f}")


def _scalar_kernel(kernel: PermutohedralKernel) -> np.ndarray:
    if kernel.c_in != 1 or kernel.c_out != 1:
        raise InputError("a single-channel (1 x 1 x t) kernel is required")
    return kernel.weights[0, 0]


def cmd_upsample(args) -> int:
    from .images import bicubic_resize, luma
    from .upsample import INTENSITY_SCALE, joint_upsample

    guide = read_image(args.guide)
    low = read_image(args.low)
    F = args.factor
    if guide.shape[0] != low.shape[0] * F or guide.shape[1] != low.shape[1] * F:
        raise InputError(f"guide {guide.shape[:2]} is not {F}x the low-res {low.shape[:2]}")
    kw = {"intensity_scale": args.intensity_scale or INTENSITY_SCALE}
    if args.position_scale:
        kw["position_scale"] = args.position_scale
    if args.bicubic:
        out = bicubic_resize(low, guide.shape[:2])
    else:
        weights, own_norm = None, False
        if args.kernel:
            ckpt = read_checkpoint(args.kernel)
            weights = _scalar_kernel(ckpt.kernel)
            kw["s"] = ckpt.kernel.s
        elif args.identity:
            weights = identity_kernel(3, args.hops).weights[0, 0]
            kw["s"] = args.hops
            own_norm = True
        out = joint_upsample(guide, low, F, weights, self_normalize=own_norm, **kw)
    if low.ndim == 2:
        out = luma(out) if out.ndim == 3 else out
    if args.output:
        write_image(args.output, out)
    ref = args.reference
    if ref:
        value = psnr(read_image(ref), out)
        print(f"PSNR {value:.3f} dB")
        if args.min_psnr is not None and value < args.min_psnr:
            return EXIT_METRIC
    return EXIT_OK


def cmd_denoise(args) -> int:
    from .denoise import run_denoising
    from .images import load_corpus

    chosen = [m for m in ("spatial", "gauss", "learned", "both") if getattr(args, m)]
    methods = tuple(chosen) or ("spatial", "gauss", "learned", "both")
    images = load_corpus(args.images, size=args.size, gray=True)
    if len(images) < 2:
        raise InputError("need at least two images")
    res = run_denoising(images, sigma=args.sigma / 255.0, seed=args.seed, methods=methods)
    print(f"test images: {', '.join(res.names)}; feature scales {res.scales}")
    _report([(k, v) for k, v in res.means().items()])
    m = res.means()
    ok = all(m[k] >= m["noisy"] for k in methods)
    if "learned" in m and "gauss" in m:
        ok = ok and m["learned"] >= m["gauss"]
    return EXIT_OK if ok else EXIT_METRIC


def cmd_crf(args) -> int:
    from .crfbench import CrfConfig, run_crf_benchmark

    cfg = CrfConfig(steps=args.steps, epochs=args.epochs)
    results = [run_crf_benchmark(seed, cfg) for seed in range(args.seed, args.seed + args.seeds)]
    print("seed  unary   gauss   learned loose")
    for r in results:
        print(f"{r.seed:<5} {r.unary:.4f}  {r.gauss:.4f}  {r.learned:.4f}  {r.loose:.4f}")
    med = {k: float(np.median([getattr(r, k) for r in results])) for k in ("unary", "gauss", "learned", "loose")}
    print("median " + "  ".join(f"{k} {v:.4f}" for k, v in med.items()))
    ok = med["gauss"] > med["unary"] and med["learned"] >= med["gauss"] and med["loose"] >= med["learned"]
    return EXIT_OK if ok else EXIT_METRIC


def cmd_tiles(args) -> int:
    from ..nn import TilesConfig, train_tiles

    cfg = TilesConfig(variant=args.variant, kernel_size=args.kernel_size, n_train=args.n_train,
                      n_val=args.n_val, n_test=args.n_test, epochs=args.epochs, batch=args.batch,
                      lr=args.lr, seed=args.seed, stop_iou=args.stop_iou, dtype=args.dtype)
    rows = []

    def progress(epoch, loss, val):
        rows.append((epoch, loss, val))
        print(f"epoch {epoch:3d}  loss {loss:.4f}  val IoU {val:.4f}", flush=True)

    res = train_tiles(cfg, progress)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_iou"])
            for epoch, loss, val in rows:
                w.writerow([epoch, f"{loss:.6f}", f"{val:.6f}"])
    print(f"test IoU {res.test_iou:.4f}  parameters {res.n_params}  {res.seconds:.1f} s")
    if args.min_iou is not None and (not res.val_iou or max(res.val_iou) < args.min_iou):
        return EXIT_METRIC
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.instances):
        d = int(rng.integers(1, 5))
        s = int(rng.integers(1, 3))
        inst = random_instance(rng, d, s, int(rng.integers(2, 31)),
                               int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        report = grad_check(inst, tolerance=args.tolerance)
        worst = max(worst, report.max_error)
    print(f"max relative error {worst:.3e} over {args.instances} instances "
          f"({'PASS' if worst < args.tolerance else 'FAIL'} at {args.tolerance:g})")
    return EXIT_OK if worst < args.tolerance else EXIT_METRIC


def cmd_filter(args) -> int:
    points = read_tensor(args.features)
    signal = read_tensor(args.signal)
    if points.ndim != 2:
        raise InputError(f"features must be an n x d tensor, got shape {points.shape}")
    if signal.shape[0] != points.shape[0]:
        raise InputError(f"signal has {signal.shape[0]} rows, features have {points.shape[0]}")
    d = points.shape[1]
    scales = None
    if args.kernel:
        ckpt = read_checkpoint(args.kernel)
        kernel, scales = ckpt.kernel, ckpt.scales
    elif args.identity:
        kernel = identity_kernel(d, args.hops)
    else:
        kernel = gaussian_kernel(d, args.hops)
    if args.scales:
        scales = np.array(args.scales, dtype=np.float64)
    if scales is None:
        scales = np.ones(d)
    if scales.size != d:
        raise InputError(f"{scales.size} scales for {d}-dimensional features")
    sig = signal.reshape(signal.shape[0], -1)
    c = sig.shape[1]
    if kernel.c_in != c:
        if kernel.c_in == 1 and kernel.c_out == 1:
            kernel = PermutohedralKernel(kernel.d, kernel.s,
                                         np.einsum("ab,t->abt", np.eye(c), kernel.weights[0, 0]))
        else:
            raise InputError(f"kernel expects {kernel.c_in} channels, signal has {c}")
    out = bilateral_filter(FeatureSet(points, scales), None, sig, kernel, normalize=not args.no_normalize)
    write_tensor(args.output, out.reshape(signal.shape[:1] + out.shape[1:]) if signal.ndim > 1 else out[:, 0])
    return EXIT_OK


def cmd_lattice_viz(args) -> int:
    from .viz import lattice_viz

    img = read_image(args.image)
    out = lattice_viz(img, args.features, args.scale)
    write_image(args.output, out)
    print(f"{len(np.unique(out.reshape(-1, 3), axis=0))} distinct cells")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="permconv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    up = sub.add_parser("upsample", help="joint bilateral upsampling of a low-res image")
    up.add_argument("--factor", type=int, required=True)
    up.add_argument("--guide", required=True)
    up.add_argument("--low", required=True)
    g = up.add_mutually_exclusive_group()
    g.add_argument("--kernel", help="learned kernel checkpoint")
    g.add_argument("--gauss", action="store_true", help="Gaussian kernel (default)")
    g.add_argument("--bicubic", action="store_true")
    g.add_argument("--identity", action="store_true")
    up.add_argument("--hops", type=int, default=2)
    up.add_argument("--position-scale", type=float)
    up.add_argument("--intensity-scale", type=float)
    up.add_argument("--reference", help="ground-truth image for PSNR")
    up.add_argument("--min-psnr", type=float)
    up.add_argument("--output")
    up.set_defaults(func=cmd_upsample)

    dn = sub.add_parser("denoise", help="denoising benchmark on a directory of images")
    dn.add_argument("--sigma", type=float, default=25.0, help="noise std on the 0..255 scale")
    dn.add_argument("--images", help="directory of PGM/PPM images (default: bundled samples)")
    dn.add_argument("--size", type=int, default=128)
    dn.add_argument("--seed", type=int, default=0)
    for m in ("spatial", "gauss", "learned", "both"):
        dn.add_argument(f"--{m}", action="store_true")
    dn.set_defaults(func=cmd_denoise)

    cr = sub.add_parser("crf", help="synthetic dense-CRF benchmark")
    cr.add_argument("--seed", type=int, default=0)
    cr.add_argument("--seeds", type=int, default=5)
    cr.add_argument("--steps", type=int, default=2)
    cr.add_argument("--epochs", type=int, default=10)
    cr.set_defaults(func=cmd_crf)

    ti = sub.add_parser("tiles", help="train the tiles segmentation network")
    ti.add_argument("--variant", choices=("bnn", "cnn", "pixel"), default="bnn")
    ti.add_argument("--kernel-size", type=int, default=9)
    ti.add_argument("--n-train", type=int, default=1000)
    ti.add_argument("--n-val", type=int, default=200)
    ti.add_argument("--n-test", type=int, default=200)
    ti.add_argument("--epochs", type=int, default=30)
    ti.add_argument("--batch", type=int, default=100)
    ti.add_argument("--lr", type=float, default=0.01)
    ti.add_argument("--seed", type=int, default=0)
    ti.add_argument("--stop-iou", type=float)
    ti.add_argument("--min-iou", type=float)
    ti.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    ti.add_argument("--csv", help="write epoch, train_loss, val_iou rows here")
    ti.set_defaults(func=cmd_tiles)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--instances", type=int, default=10)
    gc.add_argument("--tolerance", type=float, default=1e-5)
    gc.set_defaults(func=cmd_gradcheck)

    fi = sub.add_parser("filter", help="filter a signal over features read from tensor files")
    fi.add_argument("--features", required=True)
    fi.add_argument("--signal", required=True)
    fi.add_argument("--output", required=True)
    g = fi.add_mutually_exclusive_group()
    g.add_argument("--kernel")
    g.add_argument("--gauss", action="store_true")
    g.add_argument("--identity", action="store_true")
    fi.add_argument("--scales", type=float, nargs="+")
    fi.add_argument("--hops", type=int, default=1)
    fi.add_argument("--no-normalize", action="store_true")
    fi.set_defaults(func=cmd_filter)

    lv = sub.add_parser("lattice-viz", help="color pixels by enclosing simplex")
    lv.add_argument("--image", required=True)
    lv.add_argument("--features", choices=("xy", "rgb", "xyrgb"), default="xyrgb")
    lv.add_argument("--scale", type=float, default=0.05)
    lv.add_argument("--output", required=True)
    lv.set_defaults(func=cmd_lattice_viz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FormatError, InputError, InvalidInputError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
