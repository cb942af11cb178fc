"""Synthetic clean/corrupted shape scenes, annotation files and batching.

On disk a dataset root looks like::

    <root>/source/images/*.png
    <root>/source/annotations.json
    <root>/target/images/*.png
    <root>/target/annotations.json

Annotation files hold ``images``, ``annotations`` (absolute ``[x, y, w, h]``)
and ``categories``.  Image records carry a ``split`` (``train`` or ``val``).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFilter

from .criterion import GroundTruth
from .errors import ConfigError, ParseError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
CLASSES = ("disc", "square", "triangle")
CORRUPTIONS = ("none", "fog", "blur", "color_shift")
# per-class base colours; each object jitters around its class colour
PALETTE = np.array([[230, 80, 60], [70, 200, 90], [80, 120, 235]], dtype=np.float64)
FOG_VEIL = 200.0


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 10
    max_size: int = 22
    color_jitter: float = 40.0
    corruption: str = "fog"
    strength: float = 0.8

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ConfigError("canvas must be at least 8x8")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("object count range is invalid")
        if not 2 <= self.min_size <= self.max_size < min(self.height, self.width):
            raise ConfigError("object size range does not fit the canvas")
        if self.corruption not in CORRUPTIONS:
            raise ConfigError(f"unknown corruption {self.corruption!r}")
        if not 0.0 <= self.strength <= 1.0:
            raise ConfigError("corruption strength must lie in [0, 1]")


@dataclass
class AnnotationRecord:
    image_id: int
    label: int
    box: tuple[float, float, float, float]  # absolute x, y, w, h


@dataclass
class Manifest:
    root: Path
    images: list[dict]
    annotations: list[dict]
    categories: list[dict]
    domain: str = ""
    _by_image: dict[int, list[dict]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_image = {img["id"]: [] for img in self.images}
        for ann in self.annotations:
            self._by_image[ann["image_id"]].append(ann)

    def __len__(self) -> int:
        return len(self.images)

    def annotations_for(self, image_id: int) -> list[dict]:
        return self._by_image[image_id]

    def subset(self, split: str | None) -> "Manifest":
        if split in (None, "all"):
            return self
        imgs = [im for im in self.images if im.get("split", "train") == split]
        ids = {im["id"] for im in imgs}
        anns = [a for a in self.annotations if a["image_id"] in ids]
        return Manifest(self.root, imgs, anns, self.categories, self.domain)

    def to_json(self) -> dict:
        return {"format_version": FORMAT_VERSION, "domain": self.domain, "images": self.images,
                "annotations": self.annotations, "categories": self.categories}


# -- rendering ---------------------------------------------------------------


def _draw_shape(draw: ImageDraw.ImageDraw, label: int, x: int, y: int, w: int, h: int, color: tuple[int, int, int]):
    x1, y1 = x + w - 1, y + h - 1
    if label == 0:
        draw.ellipse([x, y, x1, y1], fill=color)
    elif label == 1:
        draw.rectangle([x, y, x1, y1], fill=color)
    else:
        draw.polygon([(x + (w - 1) / 2, y), (x, y1), (x1, y1)], fill=color)


def _iou_xywh(a, b) -> float:
    ix = max(0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def render_scene(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[AnnotationRecord]]:
    """One clean ``H x W x 3`` uint8 scene plus its boxes."""
    h, w = spec.height, spec.width
    base = rng.uniform(10, 60, size=3) + rng.uniform(0, 110)
    ramp = np.linspace(0, rng.uniform(-15, 15), w)[None, :, None]
    bg = base[None, None, :] + ramp + rng.normal(0, 4, size=(h, w, 3))
    img = Image.fromarray(np.clip(bg, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    records: list[AnnotationRecord] = []
    attempts = 0
    while len(records) < n and attempts < 50 * max(n, 1):
        attempts += 1
        bw = int(rng.integers(spec.min_size, spec.max_size + 1))
        bh = int(np.clip(bw + rng.integers(-3, 4), spec.min_size, spec.max_size))
        x = int(rng.integers(0, w - bw + 1))
        y = int(rng.integers(0, h - bh + 1))
        box = (x, y, bw, bh)
        if any(_iou_xywh(box, r.box) > 0.0 for r in records):
            continue
        label = int(rng.integers(0, len(CLASSES)))
        color = np.clip(PALETTE[label] + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0, 255)
        _draw_shape(draw, label, x, y, bw, bh, tuple(int(c) for c in color))
        records.append(AnnotationRecord(-1, label, (float(x), float(y), float(bw), float(bh))))
    return np.asarray(img), records


def corrupt(image: np.ndarray, kind: str, strength: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply a corruption to a uint8 image; strength 0 returns the input unchanged."""
    if kind not in CORRUPTIONS:
        raise ConfigError(f"unknown corruption {kind!r}")
    if kind == "none" or strength == 0:
        return image.copy()
    x = image.astype(np.float64)
    h = x.shape[0]
    if kind == "fog":
        # depth proxy: rows farther from the bottom edge get a thicker veil
        depth = (h - 1 - np.arange(h)) / max(h - 1, 1)
        a = strength * (0.35 + 0.65 * depth)[:, None, None]
        out = (1 - a) * x + a * FOG_VEIL
    elif kind == "blur":
        radius = 2.5 * strength
        return np.asarray(Image.fromarray(image).filter(ImageFilter.GaussianBlur(radius)))
    else:
        shift = np.array([1.0, -0.6, -0.8]) * 80 * strength
        out = x + shift[None, None, :]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def generate_domain_pair(
    root: str | Path,
    spec: SceneSpec,
    n_source: int,
    n_target: int,
    seed: int = 0,
    n_val: int = 0,
) -> tuple[Manifest, Manifest]:
    """Write a clean source set and a corrupted target set under ``root``.

    Each domain gets ``n`` training images plus ``n_val`` validation images.
    Target annotations are written for evaluation only.
    """
    spec.validate()
    if n_source < 1 or n_target < 1 or n_val < 0:
        raise ConfigError("n_source and n_target must be >= 1")
    root = Path(root)
    out = []
    for d_i, (domain, n, kind) in enumerate(
        (("source", n_source, "none"), ("target", n_target, spec.corruption))
    ):
        rng = np.random.default_rng([seed, d_i])
        img_dir = root / domain / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        images, anns = [], []
        for i in range(n + n_val):
            clean, recs = render_scene(spec, rng)
            pixels = corrupt(clean, kind, spec.strength if kind != "none" else 0.0, rng)
            name = f"{i:05d}.png"
            Image.fromarray(pixels).save(img_dir / name, format="PNG", optimize=False)
            images.append({"id": i, "file_name": f"images/{name}", "width": spec.width, "height": spec.height,
                           "split": "train" if i < n else "val"})
            for r in recs:
                anns.append({"id": len(anns), "image_id": i, "category_id": r.label, "bbox": list(r.box)})
        manifest = Manifest(root / domain, images, anns,
                            [{"id": k, "name": c} for k, c in enumerate(CLASSES)], domain)
        (root / domain / "annotations.json").write_text(json.dumps(manifest.to_json(), indent=1))
        out.append(manifest)
    (root / "scene_spec.json").write_text(json.dumps({"seed": seed, **asdict(spec)}, indent=1))
    return out[0], out[1]


# -- loading -----------------------------------------------------------------


def _require(obj: dict, key: str, kind, where: str):
    if key not in obj:
        raise ParseError(f"{where}: missing field '{key}'")
    val = obj[key]
    if not isinstance(val, kind):
        raise ParseError(f"{where}: field '{key}' has type {type(val).__name__}")
    return val


def load_annotations(path: str | Path) -> Manifest:
    """Parse and validate an annotation file; image paths resolve next to it."""
    path = Path(path)
    if path.is_dir():
        path = path / "annotations.json"
    if not path.exists():
        raise FileNotFoundError(f"annotation file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: top level must be an object")
    images = _require(raw, "images", list, "file")
    anns = _require(raw, "annotations", list, "file")
    cats = _require(raw, "categories", list, "file")
    cat_ids = set()
    for i, c in enumerate(cats):
        cat_ids.add(_require(c, "id", int, f"categories[{i}]"))
        _require(c, "name", str, f"categories[{i}]")
    ids = {}
    for i, im in enumerate(images):
        iid = _require(im, "id", int, f"images[{i}]")
        _require(im, "file_name", str, f"images[{i}]")
        width = _require(im, "width", int, f"images[{i}]")
        height = _require(im, "height", int, f"images[{i}]")
        if iid in ids:
            raise ParseError(f"images[{i}]: duplicate id {iid}")
        ids[iid] = (width, height)
    for i, a in enumerate(anns):
        _require(a, "id", int, f"annotations[{i}]")
        iid = _require(a, "image_id", int, f"annotations[{i}]")
        if iid not in ids:
            raise ParseError(f"annotations[{i}]: field 'image_id' references unknown image {iid}")
        cid = _require(a, "category_id", int, f"annotations[{i}]")
        if cid not in cat_ids:
            raise ParseError(f"annotations[{i}]: field 'category_id' references unknown category {cid}")
        box = _require(a, "bbox", list, f"annotations[{i}]")
        if len(box) != 4 or not all(isinstance(v, (int, float)) for v in box):
            raise ParseError(f"annotations[{i}]: field 'bbox' must hold four numbers")
        width, height = ids[iid]
        x, y, w, h = box
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > width + 1e-6 or y + h > height + 1e-6:
            raise ParseError(f"annotations[{i}]: field 'bbox' lies outside image {iid}")
    return Manifest(path.parent, images, anns, cats, raw.get("domain", ""))


def load_domain(root: str | Path, domain: str) -> Manifest:
    return load_annotations(Path(root) / domain / "annotations.json")


def normalize_box(box, width: int, height: int) -> list[float]:
    """Absolute ``xywh`` to normalized ``cxcywh``."""
    x, y, w, h = box
    return [(x + w / 2) / width, (y + h / 2) / height, w / width, h / height]


def denormalize_box(box, width: int, height: int) -> list[float]:
    cx, cy, w, h = box
    return [(cx - w / 2) * width, (cy - h / 2) * height, w * width, h * height]


# -- batching ----------------------------------------------------------------


@dataclass
class Batch:
    images: torch.Tensor  # (B, 3, H, W), values in [0, 1]
    image_ids: list[int]
    targets: list[GroundTruth] | None


class ImageCache:
    """Decoded images held in memory, keyed by image id."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._data: dict[int, torch.Tensor] = {}

    def get(self, image_id: int, file_name: str) -> torch.Tensor:
        if image_id not in self._data:
            with Image.open(self.manifest.root / file_name) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            self._data[image_id] = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
        return self._data[image_id]


def targets_for(manifest: Manifest, image: dict) -> GroundTruth:
    anns = manifest.annotations_for(image["id"])
    if not anns:
        return GroundTruth.empty()
    labels = torch.tensor([a["category_id"] for a in anns], dtype=torch.long)
    boxes = torch.tensor([normalize_box(a["bbox"], image["width"], image["height"]) for a in anns], dtype=torch.float32)
    return GroundTruth(labels, boxes)


def batch_order(n: int, seed: int, shuffle: bool) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng(seed).permutation(n)


def batch_iterator(
    manifest: Manifest,
    batch_size: int,
    seed: int = 0,
    shuffle: bool = False,
    with_labels: bool = True,
    cache: ImageCache | None = None,
) -> Iterator[Batch]:
    """Deterministic batches; the last partial batch is emitted.

    With ``with_labels=False`` batches carry no annotation payload at all.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    cache = cache or ImageCache(manifest)
    order = batch_order(len(manifest.images), seed, shuffle)
    for start in range(0, len(order), batch_size):
        chunk = [manifest.images[i] for i in order[start : start + batch_size]]
        imgs = torch.stack([cache.get(im["id"], im["file_name"]) for im in chunk])
        targets = [targets_for(manifest, im) for im in chunk] if with_labels else None
        yield Batch(imgs, [im["id"] for im in chunk], targets)
