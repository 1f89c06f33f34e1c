"""Command-line entry point: ``segdet <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import metrics, phantom, pipeline
from .checkpoint import load_checkpoint
from .config import PipelineConfig, dump_config, load_config, set_value, validate
from .errors import FormatError, InputError, DimensionError, NumericalError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("--out", type=Path, required=True, help="output directory (infer: output prefix)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segdet", description="Detection-guided 3D segmentation on synthetic phantoms.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the phantom dataset and its manifest")
    _common(p)

    p = sub.add_parser("train-rpn", help="train the slice detector")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="continue from this detector checkpoint")

    p = sub.add_parser("train-seg", help="train the 3D segmenter")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--mode", choices=pipeline.MODES, default="attention")
    p.add_argument("--rpn", type=Path, help="detector checkpoint (attention and mask3d modes)")
    p.add_argument("--gt-attention", action="store_true", help="build attention from ground-truth boxes")
    p.add_argument("--resume", type=Path, help="continue from this segmenter checkpoint")

    p = sub.add_parser("infer", help="segment one SVOL volume")
    _common(p)
    p.add_argument("--volume", type=Path, required=True)
    p.add_argument("--seg", type=Path, required=True, help="segmenter checkpoint")
    p.add_argument("--rpn", type=Path, help="detector checkpoint")
    p.add_argument("--mode", choices=pipeline.MODES, help="defaults to the mode stored in the checkpoint")

    p = sub.add_parser("eval", help="evaluate a trained pipeline on the test split")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--seg", type=Path, required=True)
    p.add_argument("--rpn", type=Path)
    p.add_argument("--mode", choices=pipeline.MODES)

    p = sub.add_parser("compare", help="train and evaluate all three modes")
    _common(p)
    p.add_argument("--manifest", type=Path, help="dataset manifest; generated under --out when omitted")
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        set_value(cfg, key.strip(), value)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "gt_attention", False):
        cfg.train.gt_attention = True
    validate(cfg)
    return cfg


def _prior_log(path: Path):
    return metrics.read_loss_curve(path) if path.exists() else []


def cmd_gen_data(cfg: PipelineConfig, args) -> None:
    d = cfg.data
    ds = phantom.make_dataset(d.n_train, d.n_test, cfg.seed, d.dims, d.phantom_params())
    manifest = phantom.write_dataset(ds, args.out)
    print(manifest)


def cmd_train_rpn(cfg: PipelineConfig, args) -> None:
    args.out.mkdir(parents=True, exist_ok=True)
    slices, boxes = pipeline.collect_slices(pipeline.load_split(args.manifest, "train"))
    out = args.out / "rpn.sgck"
    loss_path = args.out / "loss_rpn.tsv"
    resume = load_checkpoint(args.resume) if args.resume else None
    res = pipeline.train_rpn(cfg, slices, boxes, out, resume=resume,
                             prior_log=_prior_log(loss_path) if resume else ())
    metrics.write_loss_curve(loss_path, res.log)
    (args.out / "config.txt").write_text(dump_config(cfg))
    print(out)


def cmd_train_seg(cfg: PipelineConfig, args) -> None:
    args.out.mkdir(parents=True, exist_ok=True)
    mode = args.mode
    rpn = None
    if mode != "plain" and not cfg.train.gt_attention:
        if args.rpn is None:
            raise UsageError(f"--mode {mode} needs --rpn (or --gt-attention)")
        rpn = pipeline.load_rpn(cfg, args.rpn)
    train = pipeline.load_split(args.manifest, "train")
    out = args.out / f"seg_{mode}.sgck"
    loss_path = args.out / f"loss_{mode}.tsv"
    val_path = args.out / f"val_{mode}.tsv"
    resume = load_checkpoint(args.resume) if args.resume else None
    res = pipeline.train_seg(cfg, mode, train, rpn, out, val=pipeline.validation_phantoms(cfg), resume=resume,
                             prior_log=_prior_log(loss_path) if resume else (),
                             prior_val=_prior_log(val_path) if resume else ())
    metrics.write_loss_curve(loss_path, res.log)
    metrics.write_loss_curve(val_path, res.val_log)
    print(res.best_path or out)


def cmd_infer(cfg: PipelineConfig, args) -> None:
    seg, mode = pipeline.load_seg(cfg, args.seg, args.mode)
    rpn = pipeline.load_rpn(cfg, args.rpn) if args.rpn else None
    volume = phantom.read_svol(args.volume)
    att, pred = pipeline.infer(seg, mode, volume, rpn)
    prefix = str(args.out)
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    if att is not None:
        phantom.write_svol(prefix + "_attention.svol", att)
    phantom.write_svol(prefix + "_labels.svol", pred.astype("float32"))
    print(prefix + "_labels.svol")


def cmd_eval(cfg: PipelineConfig, args) -> None:
    seg, mode = pipeline.load_seg(cfg, args.seg, args.mode)
    rpn = pipeline.load_rpn(cfg, args.rpn) if args.rpn else None
    test = pipeline.load_split(args.manifest, "test")
    if not test:
        raise InputError(f"{args.manifest} lists no test volumes")
    report = pipeline.evaluate(cfg, seg, mode, test, rpn)
    pipeline.write_report(report, args.out)
    sys.stdout.write(metrics.comparison_table([report]))


def cmd_compare(cfg: PipelineConfig, args) -> None:
    manifest = args.manifest
    if manifest is None:
        d = cfg.data
        ds = phantom.make_dataset(d.n_train, d.n_test, cfg.seed, d.dims, d.phantom_params())
        manifest = phantom.write_dataset(ds, args.out / "data")
    train = pipeline.load_split(manifest, "train")
    test = pipeline.load_split(manifest, "test")
    result = pipeline.compare(cfg, train, test, args.out)
    sys.stdout.write(result.table)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-rpn": cmd_train_rpn,
    "train-seg": cmd_train_seg,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(message)s", stream=sys.stderr)
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"segdet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, InputError, DimensionError, FileNotFoundError, OSError) as exc:
        print(f"segdet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"segdet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
