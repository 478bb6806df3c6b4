"""Datasets: synthetic shape corpus, COCO-format ingestion/export,
low-data subset samplers, and geometric train-time augmentation.

The synthetic generator plants colored shapes (rect / ellipse /
triangle) on a textured background and is the canonical desk-scale
corpus: ground-truth boxes are exact analytic extents, pixel values are
quantized to the 8-bit grid so a PNG round-trip is lossless, and
everything is a pure function of the spec seed.
"""

from __future__ import annotations

import colorsys
import json
import math
import os
from dataclasses import dataclass, field, replace

import cv2
import numpy as np

from .errors import ConfigError, InfeasibleShotError, IngestionError
from .geometry import BoxBatch, BoxXYXY


@dataclass
class ImageRecord:
    image_id: str
    width: int
    height: int
    gt_boxes: BoxBatch
    gt_classes: np.ndarray | None = None  # contiguous labels, None if unlabeled
    pixels: np.ndarray | None = None      # HxWx3 float32 in [0,1]
    path: str | None = None

    def load_pixels(self) -> np.ndarray:
        if self.pixels is not None:
            return self.pixels
        bgr = cv2.imread(self.path, cv2.IMREAD_COLOR)
        if bgr is None:
            raise IngestionError(f"cannot read image file {self.path!r}")
        rgb = bgr[:, :, ::-1].astype(np.float64) / 255.0
        return rgb.astype(np.float32)


@dataclass
class Dataset:
    records: list[ImageRecord]
    class_names: tuple[str, ...] = ()
    category_id_map: dict[int, int] = field(default_factory=dict)
    clamp_warnings: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> ImageRecord:
        return self.records[i]

    def __iter__(self):
        return iter(self.records)

    @property
    def image_ids(self) -> list[str]:
        return [r.image_id for r in self.records]


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------

SHAPE_KINDS = ("rect", "ellipse", "triangle")


@dataclass(frozen=True)
class SyntheticSpec:
    n_images: int = 100
    image_size: int = 64
    shapes_per_image: tuple[int, int] = (1, 4)
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    palette_size: int = 6
    texture_amplitude: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 1:
            raise ConfigError("n_images must be >= 1")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        lo, hi = self.shapes_per_image
        if not (1 <= lo <= hi <= 8):
            raise ConfigError("shapes_per_image must satisfy 1 <= lo <= hi <= 8")
        for kind in self.shape_kinds:
            if kind not in SHAPE_KINDS:
                raise ConfigError(f"unknown shape kind {kind!r}")
        if self.palette_size < 2:
            raise ConfigError("palette_size must be >= 2")


def _palette(n: int) -> np.ndarray:
    """n bright saturated colors, quantized to the 8-bit grid."""
    colors = [colorsys.hsv_to_rgb(i / n, 0.85, 0.95) for i in range(n)]
    return np.round(np.array(colors) * 255.0) / 255.0


def _pixel_centers(size: int):
    ys = np.arange(size)[:, None] + 0.5
    xs = np.arange(size)[None, :] + 0.5
    return xs, ys


def _render_image(spec: SyntheticSpec, rng: np.random.Generator):
    s = spec.image_size
    palette = _palette(spec.palette_size)

    bg_hue = rng.random()
    bg = np.array(colorsys.hsv_to_rgb(bg_hue, 0.25, 0.35))
    img = np.broadcast_to(bg, (s, s, 3)).copy()
    if spec.texture_amplitude > 0:
        coarse = rng.uniform(-1, 1, (max(2, s // 8), max(2, s // 8), 3))
        noise = cv2.resize(coarse, (s, s), interpolation=cv2.INTER_LINEAR)
        img = img + spec.texture_amplitude * noise

    xs, ys = _pixel_centers(s)
    n_shapes = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    smin, smax = max(6, round(s * 0.16)), max(10, round(s * 0.44))
    boxes_px: list[tuple[int, int, int, int]] = []
    classes: list[int] = []
    kind_index = {k: i for i, k in enumerate(spec.shape_kinds)}
    for _ in range(n_shapes):
        placed = False
        for _attempt in range(25):
            kind = spec.shape_kinds[int(rng.integers(len(spec.shape_kinds)))]
            w = int(rng.integers(smin, smax + 1))
            h = int(rng.integers(smin, smax + 1))
            if kind == "triangle":
                w = max(w, int(math.ceil(0.6 * h)))  # keep the apex rasterizable
            if kind == "ellipse":
                w, h = (w // 2) * 2, (h // 2) * 2  # even extents, integer radii
            x1 = int(rng.integers(0, s - w + 1))
            y1 = int(rng.integers(0, s - h + 1))
            candidate = (x1, y1, x1 + w, y1 + h)
            if all(_pixel_iou(candidate, b) <= 0.25 for b in boxes_px):
                placed = True
                break
        if not placed:
            continue
        color = palette[int(rng.integers(spec.palette_size))]
        x2, y2 = x1 + w, y1 + h
        if kind == "rect":
            mask = np.zeros((s, s), dtype=bool)
            mask[y1:y2, x1:x2] = True
        elif kind == "ellipse":
            rx, ry = w / 2.0, h / 2.0
            cx, cy = x1 + rx, y1 + ry
            mask = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
        else:  # right triangle: vertical leg at x1, horizontal leg at y2
            below_hypotenuse = ys >= y1 + (xs - x1) * (h / w)
            mask = (xs >= x1) & (xs <= x2) & (ys <= y2) & below_hypotenuse
        img[mask] = color
        boxes_px.append(candidate)
        classes.append(kind_index[kind])

    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    boxes = BoxBatch(
        [BoxXYXY(b[0] / s, b[1] / s, b[2] / s, b[3] / s) for b in boxes_px]
    )
    return img.astype(np.float32), boxes, np.array(classes, dtype=np.int64)


def _pixel_iou(a, b) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union else 0.0


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic dataset of colored shapes with exact ground truth."""
    root = np.random.SeedSequence(spec.seed)
    records = []
    for i, child in enumerate(root.spawn(spec.n_images)):
        rng = np.random.default_rng(child)
        pixels, boxes, classes = _render_image(spec, rng)
        records.append(
            ImageRecord(
                image_id=f"synth_{spec.seed}_{i:05d}",
                width=spec.image_size,
                height=spec.image_size,
                gt_boxes=boxes,
                gt_classes=classes,
                pixels=pixels,
            )
        )
    return Dataset(records=records, class_names=tuple(spec.shape_kinds))


# ---------------------------------------------------------------------------
# COCO-format JSON
# ---------------------------------------------------------------------------


def load_coco_json(annotations_path: str, images_root: str) -> Dataset:
    """Ingest a COCO-format annotation file. Boxes are converted from pixel
    xywh to normalized xyxy (clamped, with a warning counter); category ids
    are remapped to contiguous 0..L-1."""
    try:
        with open(annotations_path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise IngestionError(f"cannot parse {annotations_path!r}: {e}") from e
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise IngestionError(f"COCO document missing {key!r} array")

    cats = sorted(doc["categories"], key=lambda c: c["id"])
    cat_map = {c["id"]: i for i, c in enumerate(cats)}
    class_names = tuple(c["name"] for c in cats)

    seen = set()
    images = {}
    for im in doc["images"]:
        if im["id"] in seen:
            raise IngestionError(f"duplicate image id {im['id']}")
        seen.add(im["id"])
        images[im["id"]] = im

    by_image: dict = {i: [] for i in images}
    clamp_warnings = 0
    for ann in doc["annotations"]:
        if ann["image_id"] not in images:
            raise IngestionError(f"annotation references unknown image {ann['image_id']}")
        by_image[ann["image_id"]].append(ann)

    records = []
    for image_id in sorted(images):
        im = images[image_id]
        w, h = im["width"], im["height"]
        path = os.path.join(images_root, im["file_name"])
        if not os.path.exists(path):
            raise IngestionError(f"missing image file {path!r}")
        boxes = []
        classes = []
        for ann in by_image[image_id]:
            x, y, bw, bh = ann["bbox"]
            x1, y1, x2, y2 = x / w, y / h, (x + bw) / w, (y + bh) / h
            clamped = (
                min(max(x1, 0.0), 1.0),
                min(max(y1, 0.0), 1.0),
                min(max(x2, 0.0), 1.0),
                min(max(y2, 0.0), 1.0),
            )
            if clamped != (x1, y1, x2, y2):
                clamp_warnings += 1
            boxes.append(BoxXYXY(*clamped))
            classes.append(cat_map[ann["category_id"]])
        records.append(
            ImageRecord(
                image_id=str(image_id),
                width=w,
                height=h,
                gt_boxes=BoxBatch(boxes),
                gt_classes=np.array(classes, dtype=np.int64),
                path=path,
            )
        )
    return Dataset(
        records=records,
        class_names=class_names,
        category_id_map=cat_map,
        clamp_warnings=clamp_warnings,
    )


def write_coco_json(dataset: Dataset, out_dir: str) -> str:
    """Export a dataset as COCO-format JSON plus PNG images. Returns the
    annotation file path; images land in <out_dir>/images/."""
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for idx, rec in enumerate(dataset.records):
        file_name = f"{rec.image_id}.png"
        pixels = rec.load_pixels()
        bgr = np.round(pixels[:, :, ::-1] * 255.0).astype(np.uint8)
        cv2.imwrite(os.path.join(images_dir, file_name), bgr)
        images.append(
            {
                "id": idx,
                "file_name": file_name,
                "width": rec.width,
                "height": rec.height,
                "source_id": rec.image_id,
            }
        )
        classes = rec.gt_classes if rec.gt_classes is not None else [0] * rec.gt_boxes.count
        for box, cls in zip(rec.gt_boxes, classes):
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": idx,
                    "bbox": [
                        box.x1 * rec.width,
                        box.y1 * rec.height,
                        box.width * rec.width,
                        box.height * rec.height,
                    ],
                    "category_id": int(cls),
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    categories = [
        {"id": i, "name": name}
        for i, name in enumerate(dataset.class_names or ("object",))
    ]
    doc = {"images": images, "annotations": annotations, "categories": categories}
    ann_path = os.path.join(out_dir, "annotations.json")
    with open(ann_path, "w") as f:
        json.dump(doc, f)
    return ann_path


# ---------------------------------------------------------------------------
# Subset samplers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubsetSpec:
    kind: str  # fraction_k_percent | k_shot_balanced
    k: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fraction_k_percent", "k_shot_balanced"):
            raise ConfigError(f"unknown subset kind {self.kind!r}")
        if self.kind == "fraction_k_percent" and not 0 < self.k <= 100:
            raise ConfigError("fraction must be in (0, 100]")
        if self.kind == "k_shot_balanced" and (self.k < 1 or self.k != int(self.k)):
            raise ConfigError("k-shot k must be a positive integer")


def sample_subset(dataset: Dataset, spec: SubsetSpec) -> Dataset:
    if spec.kind == "fraction_k_percent":
        rng = np.random.default_rng(spec.seed)
        order = rng.permutation(len(dataset))
        take = math.ceil(spec.k / 100.0 * len(dataset))
        keep = sorted(order[:take].tolist())
        return replace(dataset, records=[dataset.records[i] for i in keep])
    return _sample_k_shot(dataset, int(spec.k), spec.seed)


def _sample_k_shot(dataset: Dataset, k: int, seed: int) -> Dataset:
    n_classes = len(dataset.class_names)
    totals = np.zeros(n_classes, dtype=np.int64)
    for rec in dataset.records:
        if rec.gt_classes is None:
            raise ConfigError("k-shot sampling needs a labeled dataset")
        for c in rec.gt_classes:
            totals[c] += 1
    for c, total in enumerate(totals):
        if total < k:
            name = dataset.class_names[c] if dataset.class_names else str(c)
            raise InfeasibleShotError(
                f"class {name!r} has only {total} instances; cannot build {k}-shot set"
            )

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    counts = np.zeros(n_classes, dtype=np.int64)
    picked: list[int] = []
    for i in order:
        rec = dataset.records[i]
        if len(rec.gt_classes) == 0:
            continue
        if np.any(counts[rec.gt_classes] < k):
            picked.append(int(i))
            for c in rec.gt_classes:
                counts[c] += 1
        if np.all(counts >= k):
            break

    # trim surplus annotations, newest images first, down to exactly k
    trimmed: dict[int, set[int]] = {}
    for i in reversed(picked):
        rec = dataset.records[i]
        drop = set()
        for j in range(len(rec.gt_classes) - 1, -1, -1):
            c = rec.gt_classes[j]
            if counts[c] > k:
                drop.add(j)
                counts[c] -= 1
        if drop:
            trimmed[i] = drop

    records = []
    for i in sorted(picked):
        rec = dataset.records[i]
        drop = trimmed.get(i, set())
        if drop:
            keep = [j for j in range(len(rec.gt_classes)) if j not in drop]
            rec = replace(
                rec,
                gt_boxes=BoxBatch([rec.gt_boxes[j] for j in keep]),
                gt_classes=rec.gt_classes[keep],
            )
        records.append(rec)
    return replace(dataset, records=records)


# ---------------------------------------------------------------------------
# Train-time geometric augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    flip_p: float = 0.5
    scales: tuple[int, ...] = (64, 80, 96)  # target shorter side
    crop_size: int = 64


@dataclass(frozen=True)
class Transform:
    """A sampled geometric transform, applicable to pixels and to any
    number of normalized box arrays (ground truth, proposals) identically."""

    flip: bool
    resized_w: int
    resized_h: int
    crop_x: int
    crop_y: int
    crop_size: int

    def apply_image(self, pixels: np.ndarray) -> np.ndarray:
        out = pixels[:, ::-1] if self.flip else pixels
        h, w = out.shape[:2]
        if (w, h) != (self.resized_w, self.resized_h):
            out = cv2.resize(
                out, (self.resized_w, self.resized_h), interpolation=cv2.INTER_LINEAR
            )
        out = out[
            self.crop_y : self.crop_y + self.crop_size,
            self.crop_x : self.crop_x + self.crop_size,
        ]
        return np.ascontiguousarray(out)

    def apply_boxes(self, boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Transform (N,4) normalized xyxy boxes; returns (boxes, keep_mask)
        with boxes clipped to the crop and zero-area boxes dropped."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
        if self.flip:
            x1 = 1.0 - boxes[:, 2].copy()
            x2 = 1.0 - boxes[:, 0].copy()
            boxes[:, 0], boxes[:, 2] = x1, x2
        px = boxes * [self.resized_w, self.resized_h, self.resized_w, self.resized_h]
        px -= [self.crop_x, self.crop_y, self.crop_x, self.crop_y]
        px = np.clip(px, 0, self.crop_size)
        out = px / self.crop_size
        keep = (out[:, 2] - out[:, 0] > 1e-9) & (out[:, 3] - out[:, 1] > 1e-9)
        return out[keep], keep


def identity_transform(width: int, height: int) -> Transform:
    return Transform(
        flip=False,
        resized_w=width,
        resized_h=height,
        crop_x=0,
        crop_y=0,
        crop_size=min(width, height),
    )


def random_transform(
    seed: int, params: AugmentParams, width: int, height: int
) -> Transform:
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < params.flip_p)
    scale = int(params.scales[int(rng.integers(len(params.scales)))])
    shorter = min(width, height)
    factor = scale / shorter
    rw, rh = max(1, round(width * factor)), max(1, round(height * factor))
    crop = min(params.crop_size, rw, rh)
    cx = int(rng.integers(0, rw - crop + 1))
    cy = int(rng.integers(0, rh - crop + 1))
    return Transform(
        flip=flip, resized_w=rw, resized_h=rh, crop_x=cx, crop_y=cy, crop_size=crop
    )


def augment_train(
    record: ImageRecord, seed: int, params: AugmentParams | None = None
) -> ImageRecord:
    """Seeded flip + random-resize + random-crop of a record, with ground
    truth transformed and clipped identically."""
    params = params or AugmentParams()
    t = random_transform(seed, params, record.width, record.height)
    pixels = t.apply_image(record.load_pixels())
    boxes, keep = t.apply_boxes(record.gt_boxes.to_array())
    classes = record.gt_classes[keep] if record.gt_classes is not None else None
    return ImageRecord(
        image_id=record.image_id,
        width=pixels.shape[1],
        height=pixels.shape[0],
        gt_boxes=BoxBatch.from_array(boxes),
        gt_classes=classes,
        pixels=pixels,
    )
