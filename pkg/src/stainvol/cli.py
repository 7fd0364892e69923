"""``stainvol`` command line entry point."""

from __future__ import annotations

import argparse
import io
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as config_mod
from .discriminator import PATCH, DiscriminatorNet
from .errors import DivergenceError, EstimationFailedError, StainVolError
from .inference import (InferenceConfig, export_views, infer_volume, infer_volume_tiled, slab_offsets,
                        write_png)
from .stain_model import StainModel, estimate_stain_matrix, unmix
from .training import TrainConfig, reals_from_images, train_discriminator
from .volume import project_x, project_y, read_scv, write_scv

log = logging.getLogger("stainvol")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}


class InputError(StainVolError):
    pass


def read_image(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc


def list_images(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _atomic_write_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _settings(args, keys):
    cli = {k: getattr(args, k, None) for k in keys}
    return config_mod.resolve(cli, args.config)


def _inference_config(s):
    return InferenceConfig(step=s["step"], max_iters=s["max_iters"], tau=s["tau"],
                           slab_stride=s["slab_stride"], tile_stride=s["tile_stride"],
                           optimizer=s["optimizer"], depth=s["depth"])


def _image_stain_model(img, source, fallback):
    try:
        return estimate_stain_matrix(img, source=source)
    except EstimationFailedError as exc:
        log.warning("%s: %s; using %s stain matrix", source, exc,
                    "the given" if fallback.source else "the default")
        return fallback


def _run_inference(img, model, net, icfg):
    h, w = img.shape[:2]
    if (h, w) == (PATCH, PATCH):
        return infer_volume(img, model, net, icfg)
    return infer_volume_tiled(img, model, net, icfg)


# -- commands --------------------------------------------------------------

def cmd_estimate_stains(args):
    img = read_image(args.input)
    model = estimate_stain_matrix(img, source=Path(args.input).name)
    model.save(args.out)
    print("stain matrix (rows R,G,B; columns H,E):")
    for row in model.A:
        print(f"  {row[0]:.6f} {row[1]:.6f}")
    return EXIT_OK


def cmd_train(args):
    s = _settings(args, ["seed", "iters", "batch_size", "k_steps", "harvest_size", "pool_capacity",
                         "rescore_fraction", "lr", "step", "patches_per_image"])
    paths = list_images(args.data)
    if not paths:
        raise InputError(f"no training images in {args.data}")
    fixed = StainModel.load(args.stains) if args.stains else StainModel()
    images = [read_image(p) for p in paths]
    models = [fixed if args.stains else _image_stain_model(img, p.name, fixed)
              for img, p in zip(images, paths)]
    rng = np.random.default_rng(s["seed"])
    reals = reals_from_images(images, models, s["patches_per_image"], rng)
    tcfg = TrainConfig(iters=s["iters"], batch_size=s["batch_size"], pool_capacity=s["pool_capacity"],
                       k_steps=s["k_steps"], harvest_size=s["harvest_size"],
                       rescore_fraction=s["rescore_fraction"], lr=s["lr"], step=s["step"], seed=s["seed"])
    if len(reals) < tcfg.batch_size // 2:
        raise InputError(f"only {len(reals)} real patches, need at least {tcfg.batch_size // 2}")
    buf = io.StringIO()
    buf.write("iter\tloss\tacc_real\tacc_fake\tpool_size\n")
    net, _, stats = train_discriminator(reals, tcfg, log=buf)
    out = Path(args.out)
    tmp = out.with_name(out.name + ".tmp")
    net.save(tmp)
    tmp.replace(out)
    _atomic_write_text(args.log or str(out) + ".log", buf.getvalue())
    print(f"trained {s['iters']} iterations on {len(reals)} patches: "
          f"acc_real={stats['acc_real']:.3f} acc_fake={stats['acc_fake']:.3f} pool={stats['pool_size']}")
    return EXIT_OK


def cmd_infer(args):
    s = _settings(args, ["seed", "step", "max_iters", "tau", "slab_stride", "tile_stride", "optimizer"])
    img = read_image(args.input)
    if min(img.shape[:2]) < PATCH:
        raise InputError(f"{args.input}: image must be at least {PATCH}x{PATCH}")
    model = StainModel.load(args.stains)
    net = DiscriminatorNet.load(args.disc)
    icfg = _inference_config(s)
    code = EXIT_OK
    try:
        result = _run_inference(img, model, net, icfg)
    except DivergenceError as exc:
        log.error("%s", exc)
        result, code = exc.result, EXIT_DIVERGED
    write_scv(args.out, result.volume)
    if args.views_out:
        export_views(result, model, {"x", "y", "z"}, args.views_out, icfg.slab_stride)
    print(f"iterations={result.iterations} final_loss={result.best_loss:.6f} "
          f"p_fake={result.best_p_fake:.4f} converged={str(result.converged).lower()}")
    return code


def cmd_project(args):
    s = _settings(args, ["slab_stride"])
    vol = read_scv(args.volume)
    model = StainModel.load(args.stains)
    views = {v.strip() for v in args.views.split(",") if v.strip()}
    written = export_views(vol, model, views, args.out, s["slab_stride"])
    for path in written:
        print(path)
    return EXIT_OK


def augment_candidates(vol):
    """All full-thickness slab views of a volume, plus their transposes."""
    n = vol.depth
    slabs = [("x", o) for o in slab_offsets(vol.width, n, 1)] + \
            [("y", o) for o in slab_offsets(vol.height, n, 1)]
    return [(axis, off, t) for t in (False, True) for axis, off in slabs]


def _augment_one(job):
    path, model, net_path, icfg, count, out_dir, seed = job
    img = read_image(path)
    net = DiscriminatorNet.load(net_path)
    try:
        result = _run_inference(img, model, net, icfg)
    except DivergenceError as exc:
        return path, False, [], str(exc)
    if not result.converged:
        return path, False, [], "did not converge"
    vol = result.volume
    cands = augment_candidates(vol)
    if count > len(cands):
        raise InputError(f"{path}: {count} views requested, only {len(cands)} distinct views available")
    rng = np.random.default_rng(seed)
    pick = sorted(rng.choice(len(cands), size=count, replace=False)) if count else []
    rows = []
    for k in pick:
        axis, off, transpose = cands[k]
        proj = (project_x if axis == "x" else project_y)(vol, off, model).rgb
        if transpose:
            proj = proj.transpose(1, 0, 2)
        name = f"{Path(path).stem}_{axis}{off}{'t' if transpose else ''}.png"
        write_png(Path(out_dir) / name, proj)
        rows.append((name, axis, off, transpose))
    return path, True, rows, ""


def cmd_augment(args):
    s = _settings(args, ["seed", "step", "max_iters", "tau", "slab_stride", "tile_stride", "optimizer", "jobs"])
    paths = list_images(args.data)
    fixed = StainModel.load(args.stains) if args.stains else StainModel()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    DiscriminatorNet.load(args.disc)          # fail fast on a bad checkpoint
    icfg = _inference_config(s)
    jobs = []
    for i, p in enumerate(paths):
        img = read_image(p)
        if min(img.shape[:2]) < PATCH:
            raise InputError(f"{p}: image must be at least {PATCH}x{PATCH}")
        model = _image_stain_model(img, p.name, fixed) if args.stains_per_image else fixed
        jobs.append((p, model, args.disc, icfg, args.count, out_dir, s["seed"] + i))
    if args.count == 0:
        results = [(p, True, [], "") for p, *_ in jobs]
    elif s["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=s["jobs"]) as pool:
            results = list(pool.map(_augment_one, jobs))
    else:
        results = [_augment_one(j) for j in jobs]

    lines = ["output\tsource\taxis\toffset\ttransposed"]
    skipped = 0
    for src, ok, rows, why in results:
        if not ok:
            skipped += 1
            log.warning("%s: skipped (%s)", src, why)
        for name, axis, off, transposed in rows:
            lines.append(f"{name}\t{Path(src).resolve()}\t{axis}\t{off}\t{int(transposed)}")
    _atomic_write_text(out_dir / "manifest.tsv", "\n".join(lines) + "\n")
    print(f"wrote {len(lines) - 1} views for {len(results) - skipped}/{len(results)} inputs")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="stainvol", description="Infer stain-concentration volumes from 2D H&E images and render new views.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="file of 'key = value' settings")
        p.set_defaults(func=func)
        return p

    def inference_flags(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--step", type=float)
        p.add_argument("--max-iters", dest="max_iters", type=int)
        p.add_argument("--tau", type=float)
        p.add_argument("--slab-stride", dest="slab_stride", type=int)
        p.add_argument("--tile-stride", dest="tile_stride", type=int)
        p.add_argument("--optimizer", choices=["gd", "adam"])

    p = add("estimate-stains", cmd_estimate_stains, "estimate the H&E stain matrix of an image")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train the discriminator")
    p.add_argument("--data", required=True, help="directory of training images")
    p.add_argument("--out", required=True, help="DISC1 checkpoint to write")
    p.add_argument("--stains", help="use this stain model for every image instead of estimating")
    p.add_argument("--log", help="training log path (default: <out>.log)")
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--k-steps", dest="k_steps", type=int)
    p.add_argument("--harvest-size", dest="harvest_size", type=int)
    p.add_argument("--pool-capacity", dest="pool_capacity", type=int)
    p.add_argument("--rescore-fraction", dest="rescore_fraction", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--step", type=float)
    p.add_argument("--patches-per-image", dest="patches_per_image", type=int)

    p = add("infer", cmd_infer, "infer a stain concentration volume")
    p.add_argument("--input", required=True)
    p.add_argument("--stains", required=True)
    p.add_argument("--disc", required=True)
    p.add_argument("--out", required=True, help="SCV1 volume to write")
    p.add_argument("--views-out", dest="views_out", help="also export PNG views to this directory")
    inference_flags(p)

    p = add("project", cmd_project, "render PNG views of a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--stains", required=True)
    p.add_argument("--views", default="x,y,z")
    p.add_argument("--out", required=True)
    p.add_argument("--slab-stride", dest="slab_stride", type=int)

    p = add("augment", cmd_augment, "generate augmented views for a directory of patches")
    p.add_argument("--data", required=True)
    p.add_argument("--stains", help="stain model file (default: built-in H&E matrix)")
    p.add_argument("--stains-per-image", dest="stains_per_image", action="store_true",
                   help="estimate a stain matrix for each input image")
    p.add_argument("--disc", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=2)
    p.add_argument("--jobs", type=int)
    inference_flags(p)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="stainvol: %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (StainVolError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
