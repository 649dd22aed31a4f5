"""Synthetic open-world scenes, task manifests, COCO-subset ingestion,
and the crop-resize view augmentation.

Scenes are 64x64 RGB rasters: solid-colored shapes on a noisy gray
background. Eight archetypes (four shapes, two color families) split
into task groups; objects of future-task classes appear in training
images but stay unannotated there, while eval annotations keep every
true label.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import serial
from .geometry import cxcywh_to_xyxy, iou_matrix, xyxy_to_cxcywh
from .structures import ANNOTATED, Target

IMAGE_SIZE = 64
BACKGROUND_LEVEL = 120.0
BACKGROUND_NOISE = 4.0

# class id -> (shape, RGB); ids 1..4 warm family, 5..8 cool family
ARCHETYPES = {
    1: ("circle", (220, 60, 50)),
    2: ("square", (230, 160, 40)),
    3: ("triangle", (200, 40, 130)),
    4: ("cross", (240, 220, 60)),
    5: ("circle", (50, 90, 220)),
    6: ("square", (60, 200, 210)),
    7: ("triangle", (100, 70, 200)),
    8: ("cross", (70, 190, 90)),
}

DEFAULT_GROUPS = [[1, 2, 3, 4], [5, 6, 7, 8]]


@dataclass
class SceneImage:
    image_id: int
    raster: np.ndarray  # (64, 64, 3) uint8
    annotations: list   # visible Targets (filtered by the split's label set)
    all_objects: list = field(default_factory=list)  # every placed object


@dataclass
class SplitManifest:
    groups: list
    train_ids: list  # per task
    eval_ids: list   # per task
    seed: int

    def to_json(self):
        return json.dumps({"groups": self.groups, "train_ids": self.train_ids,
                           "eval_ids": self.eval_ids, "seed": self.seed},
                          sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(groups=d["groups"], train_ids=d["train_ids"],
                   eval_ids=d["eval_ids"], seed=d["seed"])


def _shape_mask(shape, x0, y0, size):
    """Boolean (64, 64) mask of one rasterized shape."""
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    if shape == "circle":
        r = size / 2
        cx, cy = x0 + r, y0 + r
        return (xx - cx + 0.5) ** 2 + (yy - cy + 0.5) ** 2 <= r * r
    if shape == "square":
        return (xx >= x0) & (xx < x0 + size) & (yy >= y0) & (yy < y0 + size)
    if shape == "triangle":
        # apex at top center, base at the bottom row
        rel_y = (yy - y0 + 1) / size
        half = rel_y * size / 2
        cx = x0 + size / 2
        return (yy >= y0) & (yy < y0 + size) & (np.abs(xx - cx + 0.5) <= half)
    if shape == "cross":
        arm = max(2, size // 3)
        cx, cy = x0 + size / 2, y0 + size / 2
        vert = (np.abs(xx - cx + 0.5) <= arm / 2) & (yy >= y0) & (yy < y0 + size)
        horiz = (np.abs(yy - cy + 0.5) <= arm / 2) & (xx >= x0) & (xx < x0 + size)
        return vert | horiz
    raise ValueError(f"unknown shape {shape}")


def _mask_bbox_xyxy(mask):
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


def render_scene(master_seed, image_id, class_pool, annotate_labels,
                 n_objects=None, max_attempts=60):
    """Deterministically place 1..4 non-overlapping shapes and rasterize.

    At least one object drawn from ``annotate_labels`` is guaranteed so
    every scene has a visible annotation. Placement keeps pairwise box
    IoU under 0.1.
    """
    rng = np.random.default_rng((master_seed, image_id))
    count = int(rng.integers(1, 5)) if n_objects is None else int(n_objects)
    raster = np.clip(BACKGROUND_LEVEL +
                     rng.normal(0, BACKGROUND_NOISE, (IMAGE_SIZE, IMAGE_SIZE, 3)),
                     0, 255).astype(np.uint8)
    annotate_set = set(annotate_labels)
    pool = list(class_pool)
    placed_boxes = []
    objects = []
    for obj_idx in range(count):
        if obj_idx == 0:
            candidates = sorted(annotate_set & set(pool)) or pool
        else:
            candidates = pool
        label = int(candidates[rng.integers(0, len(candidates))])
        shape, color = ARCHETYPES[label]
        for _ in range(max_attempts):
            size = int(rng.integers(12, 25))
            x0 = int(rng.integers(1, IMAGE_SIZE - size - 1))
            y0 = int(rng.integers(1, IMAGE_SIZE - size - 1))
            mask = _shape_mask(shape, x0, y0, size)
            bbox = _mask_bbox_xyxy(mask)
            if placed_boxes:
                overlap = iou_matrix(bbox[None, :], np.stack(placed_boxes)).max()
                if overlap >= 0.1:
                    continue
            placed_boxes.append(bbox)
            raster[mask] = color
            norm = xyxy_to_cxcywh(bbox / IMAGE_SIZE)
            objects.append(Target(label=label, box=norm, source=ANNOTATED,
                                  track_id=len(objects)))
            break
    visible = [t for t in objects if t.label in annotate_set]
    return SceneImage(image_id=image_id, raster=raster, annotations=visible,
                      all_objects=objects)


def generate_synthetic(train_per_task, eval_per_task, seed,
                       groups=None):
    """Build the task manifest and all scenes.

    Training scenes of task t are annotated with group-t labels only;
    future-task objects are present but unlabeled. Eval scenes carry
    every label (relabeling to unknown happens in the metrics layer).
    """
    groups = [list(g) for g in (groups or DEFAULT_GROUPS)]
    flat = [c for g in groups for c in g]
    if len(set(flat)) != len(flat):
        raise ValueError("class groups overlap")
    if len(groups) < 2:
        raise ValueError("need at least 2 class groups")
    all_classes = sorted(flat)
    scenes = {}
    train_ids, eval_ids = [], []
    next_id = 0
    for gi, group in enumerate(groups):
        ids = []
        for _ in range(train_per_task):
            scene = render_scene(seed, next_id, all_classes, group)
            scenes[next_id] = scene
            ids.append(next_id)
            next_id += 1
        train_ids.append(ids)
        ids = []
        for _ in range(eval_per_task):
            scene = render_scene(seed, next_id, all_classes, all_classes)
            scenes[next_id] = scene
            ids.append(next_id)
            next_id += 1
        eval_ids.append(ids)
    manifest = SplitManifest(groups=groups, train_ids=train_ids,
                             eval_ids=eval_ids, seed=seed)
    return manifest, scenes


def save_scenes(path, scenes):
    """Persist rasters and annotations in the deterministic container."""
    arrays = {}
    meta = {"image_ids": sorted(scenes), "format": "scenes-v1"}
    ann = {}
    for sid in sorted(scenes):
        s = scenes[sid]
        arrays[f"raster_{sid}"] = s.raster
        ann[str(sid)] = {
            "annotations": [[t.label, *t.box.tolist(), t.source,
                             -1 if t.track_id is None else t.track_id]
                            for t in s.annotations],
            "all_objects": [[t.label, *t.box.tolist(), t.source,
                             -1 if t.track_id is None else t.track_id]
                            for t in s.all_objects],
        }
    meta["targets"] = ann
    serial.save_arrays(path, arrays, meta)


def load_scenes(path):
    arrays, meta = serial.load_arrays(path)
    if meta.get("format") != "scenes-v1":
        raise ValueError("not a scene container")

    def unpack(rows):
        return [Target(label=int(r[0]), box=np.array(r[1:5]), source=r[5],
                       track_id=None if r[6] == -1 else int(r[6])) for r in rows]

    scenes = {}
    for sid in meta["image_ids"]:
        entry = meta["targets"][str(sid)]
        scenes[sid] = SceneImage(image_id=sid, raster=arrays[f"raster_{sid}"],
                                 annotations=unpack(entry["annotations"]),
                                 all_objects=unpack(entry["all_objects"]))
    return scenes


# -- view augmentation ------------------------------------------------------

@dataclass
class AffineCrop:
    """Per-axis map u = a*x + b from source to destination normalized coords."""

    ax: float
    bx: float
    ay: float
    by: float

    def apply_point(self, x, y):
        return self.ax * x + self.bx, self.ay * y + self.by

    def apply_box(self, box_cxcywh):
        x1, y1, x2, y2 = cxcywh_to_xyxy(np.asarray(box_cxcywh))
        u1, v1 = self.apply_point(x1, y1)
        u2, v2 = self.apply_point(x2, y2)
        return xyxy_to_cxcywh(np.array([min(u1, u2), min(v1, v2),
                                        max(u1, u2), max(v1, v2)]))

    def invert(self):
        if self.ax == 0 or self.ay == 0:
            raise ValueError("degenerate crop transform")
        return AffineCrop(ax=1.0 / self.ax, bx=-self.bx / self.ax,
                          ay=1.0 / self.ay, by=-self.by / self.ay)


def _clip_box_to_unit(box_cxcywh):
    """Clip to [0,1]^2; returns (clipped box, area retention fraction)."""
    x1, y1, x2, y2 = cxcywh_to_xyxy(np.asarray(box_cxcywh))
    full = max(x2 - x1, 0) * max(y2 - y1, 0)
    cx1, cy1 = max(x1, 0.0), max(y1, 0.0)
    cx2, cy2 = min(x2, 1.0), min(y2, 1.0)
    kept = max(cx2 - cx1, 0) * max(cy2 - cy1, 0)
    if full <= 0 or kept <= 0:
        return None, 0.0
    return xyxy_to_cxcywh(np.array([cx1, cy1, cx2, cy2])), kept / full


def transfer_box(box_cxcywh, transform: AffineCrop, min_retention=0.25):
    """Map a box into the destination frame; None if too little survives."""
    moved = transform.apply_box(box_cxcywh)
    clipped, retention = _clip_box_to_unit(moved)
    if clipped is None or retention < min_retention:
        return None
    return clipped


def augment_view(scene: SceneImage, seed, min_side=0.6, min_retention=0.25):
    """Random crop-resize. Returns (augmented scene, forward transform).

    The crop window is pixel-aligned so the raster operation and the
    returned transform agree exactly. Annotations are remapped and
    dropped below the retention threshold, keeping their track ids.
    """
    rng = np.random.default_rng((seed, scene.image_id))
    wpix = int(round(rng.uniform(min_side, 1.0) * IMAGE_SIZE))
    hpix = int(round(rng.uniform(min_side, 1.0) * IMAGE_SIZE))
    wpix, hpix = max(1, min(IMAGE_SIZE, wpix)), max(1, min(IMAGE_SIZE, hpix))
    px0 = int(rng.integers(0, IMAGE_SIZE - wpix + 1))
    py0 = int(rng.integers(0, IMAGE_SIZE - hpix + 1))

    x0, y0 = px0 / IMAGE_SIZE, py0 / IMAGE_SIZE
    wc, hc = wpix / IMAGE_SIZE, hpix / IMAGE_SIZE
    transform = AffineCrop(ax=1.0 / wc, bx=-x0 / wc, ay=1.0 / hc, by=-y0 / hc)

    cols = px0 + (np.arange(IMAGE_SIZE) * wpix) // IMAGE_SIZE
    rows = py0 + (np.arange(IMAGE_SIZE) * hpix) // IMAGE_SIZE
    raster = scene.raster[np.ix_(rows, cols)]

    def remap(targets):
        out = []
        for t in targets:
            moved = transfer_box(t.box, transform, min_retention)
            if moved is not None:
                out.append(Target(label=t.label, box=moved, source=t.source,
                                  track_id=t.track_id))
        return out

    aug = SceneImage(image_id=scene.image_id, raster=raster,
                     annotations=remap(scene.annotations),
                     all_objects=remap(scene.all_objects))
    return aug, transform


# -- COCO-subset ingestion ---------------------------------------------------

def load_coco_subset(path_or_dict, groups=None):
    """Read COCO-format annotations into normalized targets.

    Returns (manifest, images) where images maps image id to a dict with
    width, height, file_name, and Target annotations. Rasters are not
    loaded; this entry point covers annotation-driven workflows.
    """
    if isinstance(path_or_dict, dict):
        doc = path_or_dict
    else:
        with open(path_or_dict) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as e:
                raise ValueError(f"malformed COCO JSON at line {e.lineno}, "
                                 f"column {e.colno}: {e.msg}") from e
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise ValueError(f"COCO document missing '{key}' section")

    cat_ids = sorted(c["id"] for c in doc["categories"])
    remap = {cid: i + 1 for i, cid in enumerate(cat_ids)}
    images = {}
    for i, im in enumerate(doc["images"]):
        for fld in ("id", "width", "height"):
            if fld not in im:
                raise ValueError(f"images[{i}]: missing '{fld}'")
        images[im["id"]] = {"width": im["width"], "height": im["height"],
                            "file_name": im.get("file_name", ""),
                            "annotations": []}
    for i, ann in enumerate(doc["annotations"]):
        for fld in ("image_id", "category_id", "bbox"):
            if fld not in ann:
                raise ValueError(f"annotations[{i}]: missing '{fld}'")
        if ann["image_id"] not in images:
            raise ValueError(f"annotations[{i}]: unknown image id {ann['image_id']}")
        im = images[ann["image_id"]]
        x, y, w, h = (float(v) for v in ann["bbox"])
        if x < 0 or y < 0 or x + w > im["width"] or y + h > im["height"]:
            warnings.warn(f"annotations[{i}]: box exceeds image bounds, clipping")
            x2, y2 = min(x + w, im["width"]), min(y + h, im["height"])
            x, y = max(x, 0.0), max(y, 0.0)
            w, h = x2 - x, y2 - y
        box = np.array([(x + w / 2) / im["width"], (y + h / 2) / im["height"],
                        w / im["width"], h / im["height"]])
        im["annotations"].append(Target(label=remap[ann["category_id"]], box=box))

    kept = {}
    for iid in sorted(images):
        if images[iid]["annotations"]:
            kept[iid] = images[iid]
        else:
            warnings.warn(f"image {iid} has no annotations, excluded from training")
    groups = groups or [sorted(remap.values())]
    manifest = SplitManifest(groups=[list(g) for g in groups],
                             train_ids=[sorted(kept)], eval_ids=[[]], seed=0)
    return manifest, kept


def export_coco_subset(images, class_names=None):
    """Inverse of load_coco_subset for round-trip tests and dumps."""
    doc = {"images": [], "annotations": [], "categories": []}
    labels = sorted({t.label for im in images.values() for t in im["annotations"]})
    for lab in labels:
        name = (class_names or {}).get(lab, f"class_{lab}")
        doc["categories"].append({"id": lab, "name": name})
    next_ann = 1
    for iid in sorted(images):
        im = images[iid]
        doc["images"].append({"id": iid, "width": im["width"],
                              "height": im["height"],
                              "file_name": im.get("file_name", "")})
        for t in im["annotations"]:
            x1, y1, x2, y2 = cxcywh_to_xyxy(t.box)
            doc["annotations"].append({
                "id": next_ann, "image_id": iid, "category_id": t.label,
                "bbox": [x1 * im["width"], y1 * im["height"],
                         (x2 - x1) * im["width"], (y2 - y1) * im["height"]],
            })
            next_ann += 1
    return doc
