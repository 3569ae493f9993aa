"""Synthetic benchmark: build the planted-feature suite, explain every image,
score DCNE against top-n relevance baselines, and cluster each class.

    python scripts/synthetic_benchmark.py --out runs/bench --images-per-class 20
"""

import argparse
import json
import logging
import time
from pathlib import Path

from dcne import evalbench as eb
from dcne import pipeline as pl
from dcne import relprop as rp
from dcne import synth
from dcne.tensornet import read_network

log = logging.getLogger("benchmark")


def records(ca, sets, maps_of):
    masks = {e.image_id: pl.load_masks(e) for e in ca.entry.images}
    return [eb.ImageRecord.build(ex.image_id, maps_of(ex), masks[ex.image_id]) for ex in sets]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/bench"))
    ap.add_argument("--images-per-class", type=int, default=20)
    ap.add_argument("--components", type=int, default=10)
    ap.add_argument("--base-size", type=int, default=300)
    ap.add_argument("--baseline-sizes", type=int, nargs="+", default=[10, 300])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    t0 = time.perf_counter()
    manifest_path = synth.write_dataset(synth.default_spec(args.seed, args.images_per_class),
                                        args.out / "data")
    manifest = pl.load_manifest(manifest_path)
    net = read_network(manifest.network)
    ecfg = eb.EvalConfig(seed=args.seed)
    xcfg = pl.ExplainConfig(args.components, args.base_size, seed=args.seed, jobs=args.jobs)

    results = {"config": vars(args) | {"out": str(args.out)}, "classes": {}}
    for entry in manifest.classes:
        ca = pl.attribute_class(net, entry, args.jobs)
        row = {}
        sets = pl.base_sets(ca, xcfg.selection())
        css = {cs.image_id: cs for cs in pl.concise_sets(sets, xcfg.factorization(), args.jobs)}
        r = eb.evaluate_class(entry.class_id, records(ca, sets, lambda ex: css[ex.image_id].maps), ecfg)
        row[f"dcne-{args.components}"] = {"mean_iou": r.mean(), "threshold": r.threshold,
                                          "complexity_per_image": r.complexity_per_image}
        for n in args.baseline_sizes:
            base = pl.base_sets(ca, rp.SelectionConfig(rp.CLASS_MEAN, n))
            r = eb.evaluate_class(entry.class_id, records(ca, base, lambda ex: ex.stack()), ecfg)
            row[f"crp-{n}"] = {"mean_iou": r.mean(), "threshold": r.threshold,
                               "complexity_per_image": r.complexity_per_image}
        ccfg = pl.ClusterConfig(args.components, args.base_size, seed=args.seed, jobs=args.jobs)
        report, css, t = pl.clusterize_class(net, manifest, entry.class_id, ccfg, ecfg, ca=ca)
        doc = pl.write_cluster_outputs(args.out / "clusters" / entry.class_id, manifest,
                                       entry.class_id, report, css, t, ccfg)
        row["clusters"] = [c["feature_scores"] for c in doc["clusters"]]
        results["classes"][entry.class_id] = row

    results["seconds"] = round(time.perf_counter() - t0, 1)
    (args.out / "benchmark.json").write_text(json.dumps(results, indent=1))
    print(f"{'class':<14}{'method':<12}{'mean IoU':>10}{'t':>6}{'maps/img':>10}")
    for class_id, row in results["classes"].items():
        for method, m in row.items():
            if method == "clusters":
                continue
            print(f"{class_id:<14}{method:<12}{m['mean_iou']:>10.3f}{m['threshold']:>6}"
                  f"{m['complexity_per_image']:>10g}")
        for k, scores in enumerate(row["clusters"]):
            pretty = ", ".join(f"{f}={'-' if s is None else f'{s:.2f}'}" for f, s in scores.items())
            print(f"{class_id:<14}cluster {k:<4}{pretty}")
    print(f"done in {results['seconds']}s, outputs under {args.out}")


if __name__ == "__main__":
    main()
