"""``progstain`` command-line entry point.

Machine-readable results go to stdout as JSON; human-readable summaries
go to stderr.  Exit codes: 0 success, 1 usage error (bad arguments,
unreadable inputs, mismatched images, bad config), 2 computation or
output error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ToolkitConfig, load_config
from .deconv import STAIN_NAMES, normalize_weight, rgb_to_od, separate_stains
from .images import load_image, save_image, synth_fixture
from .losses import (asp_loss, dab_cf_loss, gaussian_pyramid_loss, gcbr_loss,
                     patchnce_loss, total_loss)
from .metrics import evaluate_pair
from .refine import GRADCHECK_TOL, DivergenceError, embed_pyramid, gradcheck, run_progressive

EXIT_OK, EXIT_USAGE, EXIT_COMPUTE = 0, 1, 2


class UsageError(Exception):
    pass


class ComputeError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _config(args) -> ToolkitConfig:
    try:
        return load_config(args.config)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _load(path) -> np.ndarray:
    try:
        return load_image(path)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _load_pair(real_path, gen_path, rgb: bool = False):
    real, gen = _load(real_path), _load(gen_path)
    if real.shape != gen.shape:
        raise UsageError(f"image dimension mismatch: {real.shape} vs {gen.shape}")
    if rgb and real.ndim != 3:
        raise UsageError("this command needs RGB images")
    return real, gen


def _save(img, path) -> None:
    path = Path(path)
    bits = 16 if path.suffix.lower() in (".ppm", ".pgm", ".pnm") else 8
    try:
        save_image(img, path, bits=bits)
    except (OSError, ValueError) as exc:
        raise ComputeError(f"cannot write {path}: {exc}") from exc


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise ComputeError(f"cannot write {path}: {exc}") from exc


# --- subcommands ------------------------------------------------------------

def cmd_deconvolve(args) -> int:
    cfg = _config(args)
    img = _load(args.image)
    if img.ndim != 3:
        raise UsageError("deconvolution needs an RGB image")
    try:
        maps = separate_stains(rgb_to_od(img, cfg.i0, cfg.eps), cfg.stains())
    except ValueError as exc:
        raise ComputeError(str(exc)) from exc
    summary = {}
    for name, cmap in zip(STAIN_NAMES, maps):
        _save(normalize_weight(cmap), f"{args.out}_{name}.png")
        summary[name] = {"mean": float(cmap.mean()), "max": float(cmap.max())}
    _write_text(f"{args.out}_summary.json", json.dumps(summary, indent=2) + "\n")
    _emit(summary)
    _say(f"wrote {args.out}_{{{','.join(STAIN_NAMES)}}}.png")
    return EXIT_OK


def cmd_loss(args) -> int:
    cfg = _config(args)
    if args.stage not in (1, 2, 3):
        raise UsageError(f"invalid stage {args.stage}; expected 1, 2 or 3")
    real, gen = _load_pair(args.real, args.gen, rgb=args.stage != 1)
    m = cfg.stains()
    lc = cfg.loss
    if args.stage == 1:
        source = _load(args.source) if args.source else real
        if source.shape != real.shape:
            raise UsageError("source image does not match the generated image")
        levels = lc.pyramid_levels
        try:
            sup = embed_pyramid(gen, real, cfg.embed, levels)
            unsup = embed_pyramid(gen, source, cfg.embed, levels)
            terms = {
                "adv": 0.0,
                "asp": asp_loss(sup, lc),
                "patchnce": patchnce_loss(unsup, lc.tau),
                "gp": gaussian_pyramid_loss(real, gen, levels),
            }
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    elif args.stage == 2:
        terms = {"dab_cf": dab_cf_loss(real, gen, m, cfg.i0, cfg.eps)}
    else:
        terms = {"gcbr": gcbr_loss(real, gen, m, cfg.i0, cfg.eps)}
    _emit(total_loss(args.stage, terms, lc).active())
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg = _config(args)
    init, real = _load_pair(args.init, args.real, rgb=True)
    try:
        result = run_progressive(init, real, cfg.stage2, cfg.stage3, cfg.loss,
                                 cfg.stains(), cfg.i0, cfg.eps)
    except DivergenceError as exc:
        _say(f"refinement aborted: {exc}")
        return EXIT_COMPUTE
    _save(result.image, args.out)
    stem = args.trace or str(Path(args.out).with_suffix(""))
    _write_text(f"{stem}_stage2.jsonl", result.stage2.to_jsonl())
    _write_text(f"{stem}_stage3.jsonl", result.stage3.to_jsonl())
    summary = result.summary()
    _emit(summary)
    for key in ("stage2", "stage3"):
        s = summary[key]
        _say(f"{key}: {s['initial']:.6g} -> {s['final']:.6g} ({s['iterations']} iterations)")
    return EXIT_OK


def cmd_metrics(args) -> int:
    real, gen = _load_pair(args.real, args.gen)
    try:
        report = evaluate_pair(real, gen)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _emit(report.as_dict())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.size < 8:
        raise UsageError("gradcheck size must be >= 8")
    err = gradcheck(args.loss, args.seed, args.size)
    tol = GRADCHECK_TOL[args.loss]
    ok = err < tol
    _emit({"loss": args.loss, "seed": args.seed, "size": args.size,
           "max_rel_error": err, "tolerance": tol, "ok": ok})
    return EXIT_OK if ok else EXIT_COMPUTE


def cmd_synth(args) -> int:
    cfg = _config(args)
    try:
        he, ihc, truth = synth_fixture(args.seed, args.size, args.size, args.n_cells,
                                       cfg.stains(), cfg.i0, cfg.eps)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ext = args.format
    _save(he, f"{args.out}_he.{ext}")
    _save(ihc, f"{args.out}_ihc.{ext}")
    _write_text(f"{args.out}_truth.json", truth.to_json())
    _say(f"wrote {args.out}_he.{ext}, {args.out}_ihc.{ext}, {args.out}_truth.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="progstain", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("deconvolve", help="separate H, E and DAB concentration maps")
    p.add_argument("image")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--config")
    p.set_defaults(func=cmd_deconvolve)

    p = sub.add_parser("loss", help="stage objective for a real/generated pair")
    p.add_argument("real")
    p.add_argument("gen")
    p.add_argument("--stage", type=int, required=True)
    p.add_argument("--source", help="input (H&E) image for the unsupervised PatchNCE term")
    p.add_argument("--config")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("refine", help="colour then boundary refinement in pixel space")
    p.add_argument("init")
    p.add_argument("real")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="stem for <stem>_stage2.jsonl and <stem>_stage3.jsonl")
    p.add_argument("--config")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("metrics", help="SSIM, PSNR, gradient MSE and pHash distances")
    p.add_argument("real")
    p.add_argument("gen")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--loss", choices=sorted(GRADCHECK_TOL), default="dab_cf")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic H&E/IHC fixture pair")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n-cells", type=int, default=3)
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        _say(f"progstain: error: {exc}")
        return EXIT_USAGE
    except ComputeError as exc:
        _say(f"progstain: error: {exc}")
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
