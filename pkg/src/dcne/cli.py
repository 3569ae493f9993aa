"""``dcne`` command line: explain, clusterize, evaluate, sweep, synth, render."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import evalbench as eb
from . import imageio
from . import pipeline as pl
from . import relprop as rp
from . import synth
from .tensornet import NetworkError, read_network

log = logging.getLogger("dcne")

MODES = {"per-image-sum": rp.PER_IMAGE_SUM, "class-mean": rp.CLASS_MEAN}


def int_list(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _eval_config(args) -> eb.EvalConfig:
    return eb.EvalConfig(args.thresholds, args.holdout_fraction, args.seed)


def _network(args, manifest: pl.DatasetManifest | None = None):
    path = args.net or (manifest.network if manifest else None)
    if path is None:
        raise pl.PipelineError("no network given (--net) and the manifest names none")
    return read_network(path)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    spec = synth.default_spec(args.seed, args.images_per_class)
    if args.image_size:
        spec = dataclasses.replace(spec, image_size=args.image_size)
    manifest = synth.write_dataset(spec, Path(args.out))
    log.info("wrote %s", manifest)
    return 0


def cmd_explain(args) -> int:
    manifest = pl.load_manifest(args.manifest) if args.manifest else None
    net = _network(args, manifest)
    mode = MODES[args.mode] if args.mode else (rp.CLASS_MEAN if manifest else rp.PER_IMAGE_SUM)
    cfg = pl.ExplainConfig(args.components, args.base_size, mode, args.seed,
                           args.max_iterations, args.jobs)
    out = Path(args.out)
    if args.image:
        stats = None
        target = args.target
        if mode == rp.CLASS_MEAN:
            if manifest is None or args.class_id is None:
                raise pl.PipelineError("class-mean selection needs --manifest and --class")
            entry = manifest.get(args.class_id)
            stats = pl.attribute_class(net, entry, args.jobs).relevance_table()
            target = entry.label if target is None else target
        index = pl.explain_image_to_dir(net, Path(args.image), out, cfg, target, stats)
        log.info("explained %s as class %d: %d base maps, %d concise maps", index["image_id"],
                 index["target_class"], len(index["base"]), len(index["concise"]))
        return 0
    if manifest is None:
        raise pl.PipelineError("explain needs --image or --manifest")
    dirs = pl.explain_manifest(net, manifest, out, cfg, [args.class_id] if args.class_id else None)
    log.info("wrote %s and %s", dirs["base"], dirs["concise"])
    return 0


def cmd_clusterize(args) -> int:
    manifest = pl.load_manifest(args.manifest)
    net = _network(args, manifest)
    cfg = pl.ClusterConfig(args.components, args.base_size, args.epsilon, args.min_points,
                           args.seed, args.max_iterations, jobs=args.jobs)
    mode = MODES[args.mode or "class-mean"]
    class_ids = [args.class_id] if args.class_id else [c.class_id for c in manifest.classes]
    for class_id in class_ids:
        report, css, t = pl.clusterize_class(net, manifest, class_id, cfg, _eval_config(args), mode)
        doc = pl.write_cluster_outputs(Path(args.out) / class_id, manifest, class_id,
                                       report, css, t, cfg)
        log.info("class %s: %d clusters, %d noise rows", class_id, len(doc["clusters"]),
                 doc["noise_count"])
    return 0


def cmd_evaluate(args) -> int:
    manifest = pl.load_manifest(args.manifest)
    methods = {}
    for spec in args.method:
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise pl.PipelineError(f"--method expects NAME=DIR, got {spec!r}")
        methods[name] = pl.read_method_maps(path)
    report = pl.evaluate_methods(manifest, methods, _eval_config(args))
    out = Path(args.out)
    _write(out / "report.json", json.dumps(report, indent=1))
    _write(out / "report.csv", pl.report_csv(report))
    for name, m in report["methods"].items():
        log.info("%s: mean IoU %.4f, %g maps per image", name,
                 m["mean_iou_class_weighted"] or 0.0, m["complexity_per_image"])
    return 0


def cmd_sweep(args) -> int:
    manifest = pl.load_manifest(args.manifest)
    net = _network(args, manifest)
    spec = pl.SweepSpec(args.components, args.base_size, MODES[args.mode or "class-mean"],
                        args.seed, args.max_iterations)
    rows = pl.sweep(net, manifest, spec, _eval_config(args), args.jobs)
    out = Path(args.out)
    _write(out / "sweep.json", json.dumps({"rows": rows}, indent=1))
    _write(out / "sweep.csv", pl.sweep_csv(rows))
    return 0


def cmd_render(args) -> int:
    rgb = imageio.read_pnm(args.image)
    if rgb.ndim != 3:
        raise imageio.FormatError(f"{args.image} is not a colour (P6) image")
    out = Path(args.out)
    maps = []
    for p in map(Path, args.maps):
        if p.suffix == ".dcns":
            cs = imageio.decode_concise(p.read_bytes())
            maps.extend((f"{p.stem}_{j:02d}", m) for j, m in enumerate(cs.maps))
        else:
            maps.append((p.stem, imageio.read_map(p)))
    if len(maps) == 1 and out.suffix == ".ppm":
        imageio.write_pnm(out, imageio.overlay(rgb, maps[0][1], args.alpha))
        return 0
    out.mkdir(parents=True, exist_ok=True)
    for name, m in maps:
        imageio.write_pnm(out / f"{name}.ppm", imageio.overlay(rgb, m, args.alpha))
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcne", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, factor=True, evaluate=False):
        sp.add_argument("--net", help="network JSON (defaults to the manifest's network)")
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--jobs", type=int, default=1, help="worker threads across images")
        if factor:
            sp.add_argument("--mode", choices=sorted(MODES))
            sp.add_argument("--max-iterations", type=int, default=200)
        if evaluate:
            sp.add_argument("--thresholds", type=int_list, default=eb.DEFAULT_THRESHOLDS)
            sp.add_argument("--holdout-fraction", type=float, default=0.2)

    sp = sub.add_parser("explain", help="base and concise explanations")
    common(sp)
    sp.add_argument("--image")
    sp.add_argument("--manifest")
    sp.add_argument("--class", dest="class_id")
    sp.add_argument("--target", type=int, help="class index to explain (default: argmax)")
    sp.add_argument("--components", type=int, default=10)
    sp.add_argument("--base-size", type=int, default=300)
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("clusterize", help="class-level clusters of concise maps")
    common(sp, evaluate=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--class", dest="class_id")
    sp.add_argument("--components", type=int, default=10)
    sp.add_argument("--base-size", type=int, default=300)
    sp.add_argument("--epsilon", type=float, default=pl.cl.DEFAULT_EPSILON)
    sp.add_argument("--min-points", type=int, default=pl.cl.DEFAULT_MIN_POINTS)
    sp.set_defaults(func=cmd_clusterize)

    sp = sub.add_parser("evaluate", help="IoU against feature masks")
    common(sp, factor=False, evaluate=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--method", action="append", required=True, metavar="NAME=DIR")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="mean IoU over a grid of (components, base size)")
    common(sp, evaluate=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--components", type=int_list, default=(3, 5, 10, 20, 25, 50, 100, 250))
    sp.add_argument("--base-size", type=int_list, default=(300,))
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("synth", help="synthetic dataset with a constructed detector network")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--images-per-class", type=int, default=20)
    sp.add_argument("--image-size", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("render", help="overlay maps on an image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True, help="a .ppm file for one map, else a directory")
    sp.add_argument("--alpha", type=float, default=imageio.OVERLAY_ALPHA)
    sp.add_argument("maps", nargs="+", help=".f32, .pgm or .dcns files")
    sp.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (pl.PipelineError, NetworkError, imageio.FormatError, synth.SynthError,
            OSError, ValueError, KeyError) as exc:
        print(f"dcne {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
