"""Dataset-level orchestration behind the ``dcne`` command line.

Output layout for a method (``docs/formats.md`` has the byte formats)::

    <method_dir>/index.json
    <method_dir>/<class_id>/<image_id>/<map>.f32

``evaluate`` reads any directory in this layout, so maps produced by other
attribution methods can be scored the same way.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import cluster as cl
from . import evalbench as eb
from . import factorize as fz
from . import imageio
from . import relprop as rp
from .tensornet import NetworkSpec, forward

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


# ----------------------------------------------------------------- manifest

@dataclass
class ImageEntry:
    image_id: str
    image: Path
    masks: dict = field(default_factory=dict)  # feature index -> Path


@dataclass
class ClassEntry:
    class_id: str
    label: int
    features: list
    images: list


@dataclass
class DatasetManifest:
    root: Path
    classes: list
    network: Path | None = None

    def get(self, class_id: str) -> ClassEntry:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise PipelineError(f"class {class_id!r} not in manifest "
                            f"(have {[c.class_id for c in self.classes]})")


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineError(f"cannot read manifest {path}: {exc}") from None
    root = path.parent
    classes = []
    problems = []
    for ci, c in enumerate(doc.get("classes", [])):
        images = []
        for e in c.get("images", []):
            entry = ImageEntry(e["image_id"], root / e["image"],
                               {int(f): root / p for f, p in e.get("masks", {}).items()})
            images.append(entry)
            if not check_files:
                continue
            try:
                shape = imageio.read_image(entry.image).shape[1:]
            except (OSError, imageio.FormatError) as exc:
                problems.append(f"{entry.image}: {exc}")
                continue
            for f, mpath in entry.masks.items():
                try:
                    m = imageio.read_mask(mpath)
                except (OSError, imageio.FormatError) as exc:
                    problems.append(f"{mpath}: {exc}")
                    continue
                if m.shape != shape:
                    problems.append(f"{mpath}: mask {m.shape} does not match image {shape}")
        classes.append(ClassEntry(c["class_id"], int(c.get("label", ci)),
                                  list(c.get("features", [])), images))
    if problems:
        raise PipelineError("manifest problems:\n  " + "\n  ".join(problems))
    net = root / doc["network"] if doc.get("network") else None
    return DatasetManifest(root, classes, net)


def load_masks(entry: ImageEntry) -> dict:
    return {f: imageio.read_mask(p) for f, p in sorted(entry.masks.items())}


# ------------------------------------------------------------ attributions

@dataclass
class ImageAttributions:
    image_id: str
    target: int
    logits: np.ndarray
    conditions: list
    maps: np.ndarray  # (all conditions, h, w)

    def sums(self) -> np.ndarray:
        return self.maps.sum(axis=(1, 2))


def attribute_image(net: NetworkSpec, image: np.ndarray, target: int | None,
                    image_id: str = "") -> ImageAttributions:
    trace = forward(net, image)
    if target is None:
        target = trace.predicted_class
    conds, maps = rp.all_attributions(net, trace, target)
    return ImageAttributions(image_id, target, trace.logits, conds, maps)


def _map_ordered(fn, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


@dataclass
class ClassAttributions:
    entry: ClassEntry
    images: list  # ImageAttributions, manifest order

    def relevance_table(self) -> dict:
        conds = self.images[0].conditions
        total = np.zeros(len(conds))
        for a in self.images:
            total = total + a.sums()
        return dict(zip(conds, total / len(self.images)))


def attribute_class(net: NetworkSpec, entry: ClassEntry, jobs: int = 1) -> ClassAttributions:
    if not entry.images:
        raise PipelineError(f"class {entry.class_id!r} has no images")

    def one(e: ImageEntry) -> ImageAttributions:
        return attribute_image(net, imageio.read_image(e.image), entry.label, e.image_id)

    return ClassAttributions(entry, _map_ordered(one, entry.images, jobs))


def base_sets(ca: ClassAttributions, sel: rp.SelectionConfig) -> list:
    """Top-n explanation set for every image of a class."""
    if sel.mode == rp.CLASS_MEAN:
        chosen = rp.rank_conditions(ca.relevance_table(), sel.n)
        return [rp.select_from(a.conditions, a.maps, chosen, a.image_id) for a in ca.images]
    out = []
    for a in ca.images:
        chosen = rp.rank_conditions(dict(zip(a.conditions, a.sums())), sel.n)
        out.append(rp.select_from(a.conditions, a.maps, chosen, a.image_id))
    return out


def concise_sets(sets: Sequence[rp.ExplanationSet], cfg: fz.FactorizationConfig,
                 jobs: int = 1) -> list:
    return _map_ordered(lambda ex: fz.concise_set(ex, cfg), list(sets), jobs)


# ------------------------------------------------------------------ writers

def _write_index(method_dir: Path, method: str, files: Mapping, extra: dict | None = None) -> None:
    doc = {"method": method, "classes": files}
    if extra:
        doc.update(extra)
    (method_dir / "index.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def write_method_maps(method_dir: Path, method: str, per_class: Mapping[str, Mapping[str, list]],
                      extra: dict | None = None) -> None:
    """per_class: class_id -> image_id -> [(name, (h, w) array)]."""
    files: dict = {}
    for class_id, images in per_class.items():
        files[class_id] = {}
        for image_id, maps in images.items():
            d = method_dir / class_id / image_id
            d.mkdir(parents=True, exist_ok=True)
            names = []
            for name, values in maps:
                imageio.write_raw_map(d / f"{name}.f32", values)
                names.append(f"{class_id}/{image_id}/{name}.f32")
            files[class_id][image_id] = names
    _write_index(method_dir, method, files, extra)


def read_method_maps(method_dir: str | Path) -> dict:
    """class_id -> image_id -> (N, h, w) array, from index.json or the tree."""
    method_dir = Path(method_dir)
    index = method_dir / "index.json"
    out: dict = {}
    if index.exists():
        doc = json.loads(index.read_text())
        for class_id, images in doc["classes"].items():
            for image_id, names in images.items():
                maps = [imageio.read_map(method_dir / n) for n in names]
                out.setdefault(class_id, {})[image_id] = np.stack(maps) if maps else None
        return out
    for cdir in sorted(p for p in method_dir.iterdir() if p.is_dir()):
        for idir in sorted(p for p in cdir.iterdir() if p.is_dir()):
            names = sorted(list(idir.glob("*.f32")) + list(idir.glob("*.pgm")))
            out.setdefault(cdir.name, {})[idir.name] = (
                np.stack([imageio.read_map(n) for n in names]) if names else None)
    return out


# ------------------------------------------------------------------- explain

@dataclass
class ExplainConfig:
    components: int = 10
    base_size: int = 300
    mode: str = rp.CLASS_MEAN
    seed: int = 0
    max_iterations: int = 200
    jobs: int = 1

    def factorization(self) -> fz.FactorizationConfig:
        return fz.FactorizationConfig(components=self.components, seed=self.seed,
                                      max_iterations=self.max_iterations)

    def selection(self) -> rp.SelectionConfig:
        return rp.SelectionConfig(self.mode, self.base_size)


def explain_image_to_dir(net: NetworkSpec, image_path: Path, out: Path, cfg: ExplainConfig,
                         target: int | None = None, class_stats: Mapping | None = None) -> dict:
    """Single image: base maps, concise set and overlays under ``out``."""
    image = imageio.read_image(image_path)
    image_id = Path(image_path).stem
    att = attribute_image(net, image, target, image_id)
    if cfg.mode == rp.CLASS_MEAN:
        if class_stats is None:
            raise PipelineError("class-mean selection needs --manifest and --class")
        chosen = rp.rank_conditions(class_stats, cfg.base_size)
    else:
        chosen = rp.rank_conditions(dict(zip(att.conditions, att.sums())), cfg.base_size)
    ex = rp.select_from(att.conditions, att.maps, chosen, image_id)
    cs = fz.concise_set(ex, cfg.factorization())
    out.mkdir(parents=True, exist_ok=True)
    (out / "base").mkdir(exist_ok=True)
    (out / "concise").mkdir(exist_ok=True)
    (out / "overlays").mkdir(exist_ok=True)
    rgb = imageio.tensor_to_image(image)
    base_files = []
    for m in ex.maps:
        name = f"base/{m.condition.tag()}.f32"
        imageio.write_raw_map(out / name, m.values)
        base_files.append(name)
    concise_files = []
    for j, m in enumerate(cs.maps):
        imageio.write_raw_map(out / f"concise/comp_{j:02d}.f32", m)
        imageio.write_pnm(out / f"concise/comp_{j:02d}.pgm", eb.normalize_to_uint8(m))
        imageio.write_pnm(out / f"overlays/comp_{j:02d}.ppm", imageio.overlay(rgb, m))
        concise_files.append(f"concise/comp_{j:02d}.f32")
    (out / "concise.dcns").write_bytes(imageio.encode_concise(cs))
    index = {
        "image_id": image_id, "target_class": att.target,
        "logits": [float(v) for v in att.logits],
        "selection": {"mode": cfg.mode, "base_size": cfg.base_size},
        "components": cfg.components, "seed": cfg.seed,
        "base": [{"file": f, "layer": m.condition.layer_index, "channel": m.condition.channel_index}
                 for f, m in zip(base_files, ex.maps)],
        "concise": concise_files, "concise_set": "concise.dcns",
    }
    (out / "index.json").write_text(json.dumps(index, indent=1))
    return index


def explain_manifest(net: NetworkSpec, manifest: DatasetManifest, out: Path, cfg: ExplainConfig,
                     class_ids: Sequence[str] | None = None) -> dict:
    """All images: ``out/base`` (CRP-n maps) and ``out/concise`` (DCNE maps)."""
    base: dict = {}
    concise: dict = {}
    chosen_all = {}
    for entry in manifest.classes:
        if class_ids and entry.class_id not in class_ids:
            continue
        log.info("explaining class %s (%d images)", entry.class_id, len(entry.images))
        ca = attribute_class(net, entry, cfg.jobs)
        sets = base_sets(ca, cfg.selection())
        css = concise_sets(sets, cfg.factorization(), cfg.jobs)
        base[entry.class_id] = {ex.image_id: [(m.condition.tag(), m.values) for m in ex.maps]
                                for ex in sets}
        concise[entry.class_id] = {cs.image_id: [(f"comp_{j:02d}", m) for j, m in enumerate(cs.maps)]
                                   for cs in css}
        chosen_all[entry.class_id] = [[c.layer_index, c.channel_index] for c in sets[0].conditions] \
            if cfg.mode == rp.CLASS_MEAN else None
    settings = {"mode": cfg.mode, "base_size": cfg.base_size, "components": cfg.components,
                "seed": cfg.seed}
    write_method_maps(out / "base", f"crp-{cfg.base_size}", base,
                      {"settings": settings, "conditions": chosen_all})
    write_method_maps(out / "concise", f"dcne-{cfg.components}", concise, {"settings": settings})
    return {"base": str(out / "base"), "concise": str(out / "concise")}


# ------------------------------------------------------------------ evaluate

def class_records(entry: ClassEntry, maps_by_image: Mapping[str, np.ndarray]) -> list:
    missing = [e.image_id for e in entry.images if maps_by_image.get(e.image_id) is None]
    if missing:
        raise PipelineError(f"class {entry.class_id!r}: no maps for images {missing}")
    return [eb.ImageRecord.build(e.image_id, maps_by_image[e.image_id], load_masks(e))
            for e in entry.images]


def evaluate_methods(manifest: DatasetManifest, methods: Mapping[str, Mapping],
                     cfg: eb.EvalConfig) -> dict:
    """methods: name -> class_id -> image_id -> (N, h, w) maps."""
    problems = []
    for name, per_class in methods.items():
        for entry in manifest.classes:
            have = per_class.get(entry.class_id, {})
            for e in entry.images:
                if have.get(e.image_id) is None:
                    problems.append(f"{name}: {entry.class_id}/{e.image_id}")
    if problems:
        raise PipelineError("missing attribution maps:\n  " + "\n  ".join(problems))
    report = {"config": {"thresholds": list(cfg.thresholds),
                         "holdout_fraction": cfg.holdout_fraction, "seed": cfg.seed},
              "methods": {}}
    for name, per_class in methods.items():
        results = []
        for entry in manifest.classes:
            recs = class_records(entry, per_class[entry.class_id])
            results.append(eb.evaluate_class(entry.class_id, recs, cfg,
                                             range(len(entry.features)) if entry.features else None))
        method = {"classes": {}, **eb.aggregate(results)}
        method["complexity_total"] = sum(r.complexity_total for r in results)
        n_images = sum(len(r.holdout) + len(r.scored) for r in results)
        method["complexity_per_image"] = method["complexity_total"] / n_images
        for entry, r in zip(manifest.classes, results):
            names = dict(enumerate(entry.features))
            method["classes"][entry.class_id] = {
                "threshold": r.threshold,
                "holdout": r.holdout,
                "features": {names.get(f, str(f)): v for f, v in r.features.items()},
                "mean_iou": r.mean(),
                "complexity_per_image": r.complexity_per_image,
                "per_image": {i: {names.get(f, str(f)): v for f, v in row.items()}
                              for i, row in r.per_image.items()},
                "per_image_best": {i: {names.get(f, str(f)): v for f, v in row.items()}
                                   for i, row in r.per_image_best.items()},
            }
        report["methods"][name] = method
    return report


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "class_id", "feature", "threshold", "mean_iou", "complexity_per_image"])
    for name, m in report["methods"].items():
        for class_id, c in m["classes"].items():
            for feat, v in c["features"].items():
                w.writerow([name, class_id, feat, c["threshold"],
                            "" if v is None else f"{v:.6f}", f"{c['complexity_per_image']:g}"])
        for key in ("mean_iou_class_weighted", "mean_iou_image_weighted"):
            v = m[key]
            w.writerow([name, "*", key, "", "" if v is None else f"{v:.6f}",
                        f"{m['complexity_per_image']:g}"])
    return buf.getvalue()


# -------------------------------------------------------------------- sweep

@dataclass
class SweepSpec:
    component_counts: tuple = (3, 5, 10, 20, 25, 50, 100, 250)
    base_sizes: tuple = (300,)
    mode: str = rp.CLASS_MEAN
    seed: int = 0
    max_iterations: int = 200

    def __post_init__(self):
        self.component_counts = tuple(int(z) for z in self.component_counts)
        self.base_sizes = tuple(int(n) for n in self.base_sizes)
        if not self.component_counts or not self.base_sizes:
            raise ValueError("sweep needs at least one component count and one base size")
        if min(self.component_counts) < 1 or min(self.base_sizes) < 1:
            raise ValueError("sweep values must be positive")


def sweep(net: NetworkSpec, manifest: DatasetManifest, spec: SweepSpec, eval_cfg: eb.EvalConfig,
          jobs: int = 1, cache: Mapping[str, ClassAttributions] | None = None) -> list:
    rows = []
    for entry in manifest.classes:
        ca = cache[entry.class_id] if cache else attribute_class(net, entry, jobs)
        masks = {e.image_id: load_masks(e) for e in entry.images}
        for n in spec.base_sizes:
            sets = base_sets(ca, rp.SelectionConfig(spec.mode, n))
            for z in spec.component_counts:
                row = {"class_id": entry.class_id, "components": z, "base_size": n}
                if z > n:
                    log.warning("skipping components=%d > base size %d", z, n)
                    rows.append({**row, "mean_iou": None, "threshold": None, "features": {}})
                    continue
                fcfg = fz.FactorizationConfig(components=z, seed=spec.seed,
                                              max_iterations=spec.max_iterations)
                css = concise_sets(sets, fcfg, jobs)
                recs = [eb.ImageRecord.build(cs.image_id, cs.maps, masks[cs.image_id]) for cs in css]
                r = eb.evaluate_class(entry.class_id, recs, eval_cfg)
                rows.append({**row, "mean_iou": r.mean(), "threshold": r.threshold,
                             "features": {str(f): v for f, v in r.features.items()}})
    return rows


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class_id", "components", "base_size", "threshold", "mean_iou"])
    for r in rows:
        w.writerow([r["class_id"], r["components"], r["base_size"],
                    "" if r["threshold"] is None else r["threshold"],
                    "" if r["mean_iou"] is None else f"{r['mean_iou']:.6f}"])
    return buf.getvalue()


# --------------------------------------------------------------- clusterize

@dataclass
class ClusterConfig:
    components: int = 10
    base_size: int = 300
    epsilon: float = cl.DEFAULT_EPSILON
    min_points: int = cl.DEFAULT_MIN_POINTS
    seed: int = 0
    max_iterations: int = 200
    montage_size: int = 5
    jobs: int = 1


def clusterize_class(net: NetworkSpec, manifest: DatasetManifest, class_id: str,
                     cfg: ClusterConfig, eval_cfg: eb.EvalConfig, mode: str = rp.CLASS_MEAN,
                     ca: ClassAttributions | None = None):
    """Cluster the concise maps of one class; returns (report, concise sets, threshold)."""
    if mode != rp.CLASS_MEAN:
        raise PipelineError("clustering needs class-mean selection: per-image selection gives "
                            "every image a different condition list")
    entry = manifest.get(class_id)
    ca = ca or attribute_class(net, entry, cfg.jobs)
    sets = base_sets(ca, rp.SelectionConfig(rp.CLASS_MEAN, cfg.base_size))
    fcfg = fz.FactorizationConfig(components=cfg.components, seed=cfg.seed,
                                  max_iterations=cfg.max_iterations)
    css = concise_sets(sets, fcfg, cfg.jobs)
    masks = {e.image_id: load_masks(e) for e in entry.images}
    recs = [eb.ImageRecord.build(cs.image_id, cs.maps, masks[cs.image_id]) for cs in css]
    threshold = eb.evaluate_class(class_id, recs, eval_cfg).threshold
    tensor = cl.build_tensor([cl.similarity_block(cs, ex) for cs, ex in zip(css, sets)])
    if cfg.min_points > tensor.flattened.shape[0]:
        log.warning("min_points=%d exceeds the %d rows: every row is noise",
                    cfg.min_points, tensor.flattened.shape[0])
    report = cl.cluster_rows(tensor, cfg.epsilon, cfg.min_points)
    cl.cluster_feature_score(report, {cs.image_id: cs for cs in css}, masks, threshold,
                             range(len(entry.features)) if entry.features else None)
    return report, {cs.image_id: cs for cs in css}, threshold


def write_cluster_outputs(out: Path, manifest: DatasetManifest, class_id: str, report,
                          css: Mapping, threshold: int, cfg: ClusterConfig) -> dict:
    entry = manifest.get(class_id)
    out.mkdir(parents=True, exist_ok=True)
    names = dict(enumerate(entry.features))
    doc = {"class_id": class_id, "threshold": threshold, "components": cfg.components,
           "base_size": cfg.base_size, "seed": cfg.seed, **report.to_json(names)}
    (out / "clusters.json").write_text(json.dumps(doc, indent=1))
    images = {e.image_id: e.image for e in entry.images}
    for c in report.clusters:
        tiles = []
        for image_id, j in c.members[:cfg.montage_size]:
            rgb = imageio.read_pnm(images[image_id])
            tiles.append(imageio.montage([rgb, imageio.overlay(rgb, css[image_id].maps[j])], gap=0))
        imageio.write_pnm(out / f"cluster_{c.cluster_id:02d}.ppm", imageio.montage(tiles, gap=4))
    return doc
