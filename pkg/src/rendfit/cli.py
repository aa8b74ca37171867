"""Command-line entry point: ``rendfit {fit,synth,gradcheck,eval,render-debug}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import RendfitError

log = logging.getLogger("rendfit")


def _cmd_fit(args):
    from .io.config import load_config
    from .io.pipeline import run_directory

    cfg = load_config(args.config)
    results = run_directory(args.input_dir, args.output_dir, cfg, frames=args.frames or None)
    n_obj = sum(len(r.labels) for r in results)
    n_fail = sum(len(r.failures) for r in results)
    print(f"fitted {n_obj} objects in {len(results)} frames ({n_fail} failures)")
    return 0


def _cmd_synth(args):
    from .generator import make_generator
    from .synth import write_synthetic_frames

    gen = make_generator("decoder", args.decoder_seed)
    ids = write_synthetic_frames(args.output_dir, args.frames, gen, seed=args.seed, n_objects=args.objects)
    print(f"wrote {len(ids)} frames to {args.output_dir}")
    return 0


def _cmd_gradcheck(args):
    from .gradcheck import SUITES, run_suites

    names = args.suite or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise RendfitError(f"unknown suite(s): {', '.join(unknown)}; choose from {', '.join(SUITES)}")
    results = run_suites(names, report=lambda r: print(r.line(), flush=True))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def _cmd_eval(args):
    from .evaluator import eval_run, format_csv, format_table

    views = tuple(args.view) if args.view else ("BEV", "3D")
    thresholds = tuple(args.threshold) if args.threshold else (0.7, 0.5, 0.3)
    rows, missing = eval_run(args.pred_dir, args.gt_dir, views, thresholds, args.metric)
    for name in missing:
        print(f"missing prediction file: {name} (treated as empty)", file=sys.stderr)
    sys.stdout.write(format_table(rows, args.metric))
    if args.csv:
        Path(args.csv).write_text(format_csv(rows))
    return 0


def _cmd_render_debug(args):
    from dataclasses import replace

    from .fitter import fit_object, init_params, object_forward
    from .generator import make_generator
    from .imaging import write_pfm, write_ppm
    from .io.config import load_config
    from .io.pipeline import build_evidence, filter_detections, foreground_map, frame_seed, load_frame
    from .raster import dump_buffers

    cfg = load_config(args.config)
    frame = load_frame(args.input_dir, args.frame, cfg.mask_mode)
    size = frame.image.shape[:2]
    kept, _ = filter_detections(frame.detections, size, cfg.score_threshold, cfg.min_height,
                                cfg.boundary_margin, cfg.object_class)
    if not 0 <= args.detection < len(kept):
        raise RendfitError(f"frame {args.frame} has {len(kept)} kept detections; index {args.detection} is invalid")
    gen = make_generator(cfg.generator, cfg.decoder_seed)
    det = kept[args.detection]
    ev = build_evidence(det, frame, (cfg.crop_h, cfg.crop_w), foreground_map([d.mask for d in frame.detections], size))
    seed = frame_seed(cfg.seed, frame.frame_id) + args.detection
    fcfg = replace(cfg.fit_config(), iterations=args.iterations)
    if args.iterations > 0:
        params = fit_object(ev, frame.K, cfg.stats(), gen, cfg.loss_weights(), fcfg, seed=seed).params
    else:
        params = init_params(seed, ev.box, cfg.stats(), fcfg.init_rot_std, fcfg.init_latent_std)
    res = object_forward(params.as_arrays(), ev, frame.K, cfg.stats(), gen, cfg.loss_weights(), fcfg.raster)
    prefix = Path(args.output_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    dump_buffers(res.buffers, str(prefix))
    write_ppm(f"{prefix}_evidence_rgb.ppm", ev.rgb)
    write_pfm(f"{prefix}_evidence_mask.pfm", ev.foreground)
    write_pfm(f"{prefix}_evidence_depth.pfm", ev.depth)
    for name, v in res.components.items():
        print(f"{name}={float(v.data):.6f}")
    print(f"wrote {prefix}_*.ppm/.pfm")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="rendfit", description="Render-and-compare 3D object fitting.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit every kept detection of every frame in a directory")
    f.add_argument("config", help="key = value config file")
    f.add_argument("input_dir")
    f.add_argument("output_dir")
    f.add_argument("--frames", nargs="*", help="frame ids (default: all)")
    f.set_defaults(func=_cmd_fit)

    s = sub.add_parser("synth", help="write synthetic frames and ground-truth labels")
    s.add_argument("output_dir")
    s.add_argument("--frames", type=int, default=4)
    s.add_argument("--objects", type=int, default=2, help="objects per frame")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--decoder-seed", type=int, default=0)
    s.set_defaults(func=_cmd_synth)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites; exit 1 on any failure")
    g.add_argument("--suite", action="append", help="suite name (repeatable; default all)")
    g.set_defaults(func=_cmd_gradcheck)

    e = sub.add_parser("eval", help="average precision of predicted labels against ground truth")
    e.add_argument("pred_dir")
    e.add_argument("gt_dir")
    e.add_argument("--threshold", type=float, action="append", help="IoU threshold (repeatable)")
    e.add_argument("--metric", choices=("R40", "R11"), default="R40")
    e.add_argument("--view", choices=("BEV", "3D", "2D"), action="append")
    e.add_argument("--csv", help="also write the machine-readable table here")
    e.set_defaults(func=_cmd_eval)

    r = sub.add_parser("render-debug", help="dump render buffers and evidence for one detection")
    r.add_argument("config")
    r.add_argument("input_dir")
    r.add_argument("frame")
    r.add_argument("output_prefix")
    r.add_argument("--detection", type=int, default=0, help="index among kept detections")
    r.add_argument("--iterations", type=int, default=0, help="fit this many iterations first")
    r.set_defaults(func=_cmd_render_debug)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (RendfitError, ValueError, OSError) as exc:
        print(f"rendfit: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
