"""Ablation over the number of concise components and the base-set size.

Runs two sweeps on the synthetic suite: components at a fixed base size, and
base size at a fixed component count. Writes sweep CSVs and prints a table.

    python scripts/ablation_sweep.py --out runs/ablation
"""

import argparse
import logging
from pathlib import Path

from dcne import evalbench as eb
from dcne import pipeline as pl
from dcne import synth
from dcne.tensornet import read_network


def table(rows, key):
    classes = sorted({r["class_id"] for r in rows})
    values = sorted({r[key] for r in rows})
    print(f"{key:>12} " + " ".join(f"{c:>12}" for c in classes))
    for v in values:
        cells = []
        for c in classes:
            q = next(r["mean_iou"] for r in rows if r["class_id"] == c and r[key] == v)
            cells.append(f"{'-' if q is None else f'{q:.3f}':>12}")
        print(f"{v:>12} " + " ".join(cells))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--images-per-class", type=int, default=20)
    ap.add_argument("--components", type=int, nargs="+", default=[3, 5, 10, 20, 25, 50])
    ap.add_argument("--base-sizes", type=int, nargs="+", default=[10, 25, 50, 100, 200, 300])
    ap.add_argument("--fixed-components", type=int, default=10)
    ap.add_argument("--fixed-base-size", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    manifest = pl.load_manifest(synth.write_dataset(
        synth.default_spec(args.seed, args.images_per_class), args.out / "data"))
    net = read_network(manifest.network)
    ecfg = eb.EvalConfig(seed=args.seed)
    # attributions do not depend on z or n, so compute them once
    cache = {c.class_id: pl.attribute_class(net, c, args.jobs) for c in manifest.classes}

    by_z = pl.sweep(net, manifest, pl.SweepSpec(tuple(args.components), (args.fixed_base_size,),
                                                seed=args.seed), ecfg, args.jobs, cache)
    by_n = pl.sweep(net, manifest, pl.SweepSpec((args.fixed_components,), tuple(args.base_sizes),
                                                seed=args.seed), ecfg, args.jobs, cache)
    (args.out / "sweep_components.csv").write_text(pl.sweep_csv(by_z))
    (args.out / "sweep_base_size.csv").write_text(pl.sweep_csv(by_n))
    print(f"mean IoU by components (base size {args.fixed_base_size})")
    table(by_z, "components")
    print(f"\nmean IoU by base size ({args.fixed_components} components)")
    table(by_n, "base_size")


if __name__ == "__main__":
    main()
