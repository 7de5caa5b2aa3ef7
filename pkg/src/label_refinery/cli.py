"""Command-line front end: ``label-refinery {train,eval,audit,taxonomy,plot}``.

Every command accepts ``--seed`` and ``--out``.  Without ``--out`` results go
under ``$LABEL_REFINERY_OUT`` (default ``./runs``).  Data goes to files and
standard output, diagnostics to standard error; the exit status is 0 only if
all requested work completed.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import load_config
from .data import (
    _load_image_file,
    center_crop_spec,
    load_dataset,
    read_class_names,
    read_stats,
    standardize,
    stream,
)
from .evaluation import (
    audit_crops,
    curves_csv,
    evaluate_split,
    gap_csv,
    gap_report,
    per_category_csv,
    plot_curves,
    plot_gap,
    read_metrics,
)
from .exceptions import RefineryError
from .refinery import run_chain
from .taxonomy import TaxonomyTree, load_taxonomy, taxonomy_label_table

OUT_ENV = "LABEL_REFINERY_OUT"
log = logging.getLogger("label_refinery.cli")


def default_out_root():
    return Path(os.environ.get(OUT_ENV) or "runs")


def _out_dir(args, sub):
    out = Path(args.out) if args.out else default_out_root() / sub
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_topk(text):
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise argparse.ArgumentTypeError("top-k values must be positive")
    return ks


def _num(v):
    return repr(float(v))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        out = Path(args.out)
    elif cfg.output is not None:
        out = cfg.output
    else:
        out = default_out_root() / Path(args.config).stem
    train = load_dataset(cfg.dataset_root, cfg.train_split)
    val = load_dataset(cfg.dataset_root, cfg.val_split) if cfg.val_split else None
    tree = None
    if cfg.taxonomy_tree is not None:
        tree = load_taxonomy(cfg.taxonomy_tree, cfg.taxonomy_leaves)
    result = run_chain(cfg.chain, train, val, out_dir=out, taxonomy=tree, resume=not args.no_resume)
    for name, metrics, digest in zip((s.name for s in cfg.chain.stages), result.metrics, result.hashes):
        status = "skipped" if name in result.skipped else "trained"
        summary = metrics.summary()
        print(f"{name}\t{status}\tval_top1={summary.get('val_top1')}\tsha256={digest}")
    print(f"manifest\t{result.manifest_path}")
    return 0


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint, expected_arch=args.arch)
    ds = load_dataset(args.dataset, args.split)
    if model.arch.num_classes != ds.num_classes:
        raise RefineryError(
            f"checkpoint predicts {model.arch.num_classes} classes but dataset has {ds.num_classes}"
        )
    ks = [k for k in args.topk if k <= ds.num_classes]
    res = evaluate_split(model, ds, ks)
    out = _out_dir(args, "eval")
    stem = f"{Path(args.checkpoint).stem}-{args.split}"
    metrics = {f"top{k}": res[f"top{k}"] for k in ks}
    for k in ks:
        print(f"top{k}\t{res[f'top{k}']!r}")
    (out / f"{stem}.json").write_text(json.dumps(
        {"checkpoint": str(args.checkpoint), "split": args.split, "num_images": len(ds), **metrics},
        indent=2, sort_keys=True) + "\n")
    nan = np.full(ds.num_classes, np.nan)
    (out / f"{stem}-per-category.csv").write_text(per_category_csv(nan, res["per_category"], ds.class_names))
    return 0


def cmd_audit(args):
    model = load_checkpoint(args.checkpoint, expected_arch=args.arch)
    path = Path(args.image)
    try:
        raw = _load_image_file(path)
    except Exception as exc:  # PIL raises several unrelated types for bad files
        raise RefineryError(f"cannot read image {str(path)!r}: {exc}") from None
    if raw.ndim != 3 or raw.shape[2] != model.arch.in_channels:
        raise RefineryError(f"image {str(path)!r} has shape {raw.shape}; expected H x W x {model.arch.in_channels}")
    names = None
    image = raw
    if args.dataset:
        root = Path(args.dataset)
        names = read_class_names(root / "classes.tsv")
        mean, std = read_stats(root / "stats.tsv")
        image = standardize(raw[None], mean, std)[0]
    h, w = image.shape[:2]
    if args.crops == 0:
        crops = [center_crop_spec(w, h)]
    else:
        crops = args.crops
    seed = 0 if args.seed is None else args.seed
    specs, rows = audit_crops(model, image, crops, args.topk, names, rng=stream(seed, "audit"))
    lines = ["crop,x,y,w,h,hflip,rank,class,probability"]
    for i, (spec, row) in enumerate(zip(specs, rows)):
        desc = ", ".join(f"{c} {p:.3f}" for c, p in row)
        print(f"crop {i}\t({spec.x:.1f},{spec.y:.1f},{spec.w:.1f}x{spec.h:.1f}{' flip' if spec.hflip else ''})\t{desc}")
        for rank, (c, p) in enumerate(row, 1):
            lines.append(f"{i},{_num(spec.x)},{_num(spec.y)},{_num(spec.w)},{_num(spec.h)},"
                         f"{int(spec.hflip)},{rank},{c},{_num(p)}")
    out = _out_dir(args, "audit")
    (out / f"audit-{path.stem}.csv").write_text("\n".join(lines) + "\n")
    return 0


def _tree_with_leaves(args):
    tree_path = Path(args.tree)
    leaves = Path(args.leaves) if args.leaves else tree_path.with_name("leaves.tsv")
    tree = load_taxonomy(tree_path, leaves if leaves.exists() else None)
    if not tree.leaf_categories:
        leaf_nodes = sorted(n for n in tree.nodes if not tree.children[n])
        tree = TaxonomyTree(tree.parent, dict(enumerate(leaf_nodes)))
    return tree


def cmd_taxonomy(args):
    tree = _tree_with_leaves(args)
    if args.pair:
        a, b = args.pair
        for node in (a, b):
            if node not in tree:
                raise RefineryError(f"node {node!r} is not in the taxonomy")
        print(repr(tree.wu_palmer(a, b)))
        return 0
    table = taxonomy_label_table(tree, None, args.normalization, args.temperature)
    nodes = tree.category_nodes()
    text = "," + ",".join(nodes) + "\n"
    text += "".join(n + "," + ",".join(_num(v) for v in row) + "\n" for n, row in zip(nodes, table))
    sys.stdout.write(text)
    if args.out:
        out = _out_dir(args, "taxonomy")
        (out / "taxonomy-matrix.csv").write_text(text)
    return 0


def _find_metrics(root):
    root = Path(root)
    if not root.is_dir():
        raise RefineryError(f"metrics directory {str(root)!r} does not exist")
    files = sorted(root.glob("*.jsonl"))
    if not files and (root / "metrics").is_dir():
        files = sorted((root / "metrics").glob("*.jsonl"))
    if not files:
        raise RefineryError(f"no metrics files (*.jsonl) in {str(root)!r}")
    return files


def cmd_plot(args):
    files = _find_metrics(args.metrics_dir)
    out = _out_dir(args, "plots")
    reports = {}
    for f in files:
        rec = read_metrics(f)
        (out / f"{f.stem}-curves.csv").write_text(curves_csv(rec))
        plot_curves(rec, out / f"{f.stem}-curves.svg")
        if rec.train_per_category is None or rec.val_per_category is None:
            print(f"warning: {f.name} has no per-category accuracy; gap plot skipped", file=sys.stderr)
            continue
        bins = min(args.bins, len(rec.train_per_category))
        try:
            report = gap_report(rec.train_per_category, rec.val_per_category, bins)
        except RefineryError as exc:
            print(f"warning: {f.name}: gap plot skipped ({exc})", file=sys.stderr)
            continue
        reports[f.stem] = report
        (out / f"{f.stem}-gap.csv").write_text(gap_csv(report))
        plot_gap({rec.stage: report}, out / f"{f.stem}-gap.svg")
    if len(reports) > 1:
        plot_gap(reports, out / "gap-all.svg")
    print(f"wrote plots to {out}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    common.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV} or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="label-refinery", description="Train and inspect label refinery chains.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="run a refinement chain from a config file")
    t.add_argument("config")
    t.add_argument("--no-resume", action="store_true", help="retrain stages even if already complete")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="top-k accuracy of a checkpoint on a dataset split")
    e.add_argument("checkpoint")
    e.add_argument("dataset", help="dataset directory")
    e.add_argument("--split", default="val")
    e.add_argument("--topk", type=_parse_topk, default=[1, 5], help="comma-separated, e.g. 1,5")
    e.add_argument("--arch", default=None, help="expected architecture name")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit", parents=[common], help="top-k predictions on crops of one image")
    a.add_argument("checkpoint")
    a.add_argument("image", help=".npy (H x W x C) or any image file Pillow can read")
    a.add_argument("--crops", type=int, default=5, help="random crops to audit; 0 audits the full image")
    a.add_argument("--topk", type=int, default=3)
    a.add_argument("--dataset", default=None, help="dataset directory for class names and channel stats")
    a.add_argument("--arch", default=None, help="expected architecture name")
    a.set_defaults(func=cmd_audit)

    x = sub.add_parser("taxonomy", parents=[common], help="Wu-Palmer similarity queries")
    x.add_argument("tree", help="'<child>\\t<parent>' file")
    x.add_argument("--leaves", default=None, help="'<class>\\t<node>' file (default: leaves.tsv beside the tree)")
    g = x.add_mutually_exclusive_group(required=True)
    g.add_argument("--pair", nargs=2, metavar=("A", "B"))
    g.add_argument("--matrix", action="store_true", help="normalized per-category label table as CSV")
    x.add_argument("--normalization", choices=("sum", "softmax"), default="sum")
    x.add_argument("--temperature", type=float, default=1.0)
    x.set_defaults(func=cmd_taxonomy)

    pl = sub.add_parser("plot", parents=[common], help="curves and gap reports from metrics files")
    pl.add_argument("metrics_dir")
    pl.add_argument("--bins", type=int, default=20)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (RefineryError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ValueError) else 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
