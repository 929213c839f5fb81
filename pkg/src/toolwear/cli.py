"""Command-line entry point: ``toolwear <command> [options]``.

Exit codes: 0 success, 2 bad configuration or arguments, 3 bad input data,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from threadpoolctl import threadpool_limits

from . import __version__, pipeline
from .config import PipelineConfig, load_config
from .errors import ConfigError, DataError

log = logging.getLogger("toolwear")

PROFILES = {"desk": PipelineConfig.desk, "full": PipelineConfig.full}


def _global_options(suppress: bool) -> argparse.ArgumentParser:
    # Shared by the top-level parser and every subparser so global flags work
    # on either side of the command; SUPPRESS keeps the subparser from
    # clobbering a value given before the command.
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", default=default, help="JSON config overlay")
    g.add_argument("--profile", choices=sorted(PROFILES), default=argparse.SUPPRESS if suppress else "desk",
                   help="base settings before --config (default: desk)")
    g.add_argument("--seed", type=int, default=default, help="override every seed")
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1,
                   help="worker threads (results do not depend on this)")
    g.add_argument("--out", default=argparse.SUPPRESS if suppress else "run", help="run directory")
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="toolwear",
        description="Wear characterization of cutting-tool inserts.",
        parents=[_global_options(False)],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = [_global_options(True)]
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("generate", parents=common, help="render the synthetic corpus")
    p.add_argument("--n", type=int, help="number of images (default from config)")

    sub.add_parser("extract", parents=common, help="cache conv-base features for the corpus")

    for name, text in (("train", "fit a classifier on the whole corpus"),
                       ("crossval", "stratified k-fold evaluation")):
        p = sub.add_parser(name, parents=common, help=text)
        p.add_argument("--target", choices=pipeline.TARGETS, required=True)
        if name == "crossval":
            p.add_argument("--dummy", choices=["majority"], help="evaluate a trivial baseline instead")

    p = sub.add_parser("predict", parents=common, help="classify one image with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("image")

    sub.add_parser("segment", parents=common, help="cell-wise segmentation baseline with IoU")

    p = sub.add_parser("measure", parents=common, help="flank wear width statistics")
    p.add_argument("maps", nargs="*", help="segmentation maps (default: corpus ground truth)")

    p = sub.add_parser("heatmap", parents=common, help="per-pixel wear frequency image")
    p.add_argument("--cls", type=int, default=2, choices=[1, 2, 3])
    p.add_argument("--output", help="output PGM (default: reports/heatmap_class<cls>.pgm)")
    p.add_argument("maps", nargs="*", help="segmentation maps (default: corpus ground truth)")

    sub.add_parser("report", parents=common, help="consolidated summary of all stages")
    sub.add_parser("all", parents=common, help="run every stage in order")
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = PROFILES[args.profile]()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "n", None) is not None:
        try:
            cfg = replace(cfg, corpus=replace(cfg.corpus, n_images=args.n))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg


def dispatch(args, cfg: PipelineConfig) -> None:
    out, threads = args.out, args.threads
    cmd = args.command
    if cmd == "generate":
        pipeline.cmd_generate(cfg, out, threads)
    elif cmd == "extract":
        fm = pipeline.cmd_extract(cfg, out, threads)
        print(f"extracted {fm.n_samples} x {fm.n_features} features")
    elif cmd == "train":
        pipeline.cmd_train(cfg, out, args.target)
        print(f"wrote {pipeline.Run(cfg, out).model_path(args.target)}")
    elif cmd == "crossval":
        rep = pipeline.cmd_crossval(cfg, out, args.target, args.dummy)
        p = rep.pooled
        print(f"{rep.task}: pooled MCC {rep.pooled_mcc:.3f} (tp={p.tp} fp={p.fp} fn={p.fn} tn={p.tn})")
    elif cmd == "predict":
        label, proba = pipeline.cmd_predict(cfg, args.model, args.image)
        print(f"{label}\t{proba:.6f}")
    elif cmd == "segment":
        rep = pipeline.cmd_segment(cfg, out, threads)
        for split, res in rep["iou"].items():
            print(f"{split}: IoU flank_wear {res['flank_wear']['pooled']:.3f} "
                  f"chipping {res['chipping']['pooled']:.3f}")
    elif cmd == "measure":
        rep = pipeline.cmd_measure(cfg, out, args.maps)
        print(f"{rep['n_maps']} maps, exceedance rate {100 * rep['exceedance_rate']:.2f}%")
    elif cmd == "heatmap":
        img = pipeline.cmd_heatmap(cfg, out, args.maps, args.cls, args.output)
        print(f"heatmap {img.width}x{img.height}, peak frequency {img.data.max() / 255:.3f}")
    elif cmd == "report":
        _, text = pipeline.cmd_report(cfg, out)
        print(text, end="")
    elif cmd == "all":
        pipeline.run_all(cfg, out, threads)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        with threadpool_limits(limits=1):
            dispatch(args, cfg)
    except ConfigError as exc:
        print(f"toolwear: config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"toolwear: data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"toolwear: I/O error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
