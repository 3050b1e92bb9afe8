"""Dataset manifests, letterboxing, augmentation and the synthetic sign generator."""

from __future__ import annotations

import json
import logging
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import cv2
import numpy as np
from PIL import Image

from .errors import DataError

log = logging.getLogger(__name__)

PAD_VALUE = 114


@dataclass
class BoxAnnotation:
    class_name: str
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass
class Annotation:
    image_path: str
    width: int
    height: int
    boxes: list[BoxAnnotation] = field(default_factory=list)

    @property
    def image_id(self) -> str:
        return Path(self.image_path).stem


@dataclass
class DatasetIndex:
    label_set: list[str]
    items: list[Annotation]
    split: str = "train"
    root: Path = Path(".")
    warnings: int = 0

    def __len__(self) -> int:
        return len(self.items)

    def class_id(self, name: str) -> int:
        return self.label_set.index(name)

    def resolve(self, item: Annotation) -> Path:
        p = Path(item.image_path)
        return p if p.is_absolute() else self.root / p

    def targets(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """``(boxes n×4 float64, class_ids n int64)`` for item ``i``."""
        boxes = self.items[i].boxes
        xyxy = np.array([b.xyxy for b in boxes], dtype=np.float64).reshape(-1, 4)
        cls = np.array([self.class_id(b.class_name) for b in boxes], dtype=np.int64)
        return xyxy, cls

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "label_set": list(self.label_set),
            "items": [
                {"image_path": it.image_path, "width": it.width, "height": it.height,
                 "boxes": [{"class": b.class_name, "x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2} for b in it.boxes]}
                for it in self.items
            ],
        }


def index_from_dict(doc: dict, root: Path = Path("."), check_images: bool = False) -> DatasetIndex:
    labels = list(doc.get("label_set", []))
    known = set(labels)
    warnings = 0
    items = []
    missing = []
    for raw in doc.get("items", []):
        W, H = int(raw["width"]), int(raw["height"])
        boxes = []
        for b in raw.get("boxes", []):
            name = b["class"]
            if name not in known:
                raise DataError(f"unknown class name {name!r} in {raw['image_path']}")
            x1, y1, x2, y2 = (float(b[k]) for k in ("x1", "y1", "x2", "y2"))
            cx1, cy1 = min(max(x1, 0.0), W), min(max(y1, 0.0), H)
            cx2, cy2 = min(max(x2, 0.0), W), min(max(y2, 0.0), H)
            if (cx1, cy1, cx2, cy2) != (x1, y1, x2, y2):
                warnings += 1
            if cx2 <= cx1 or cy2 <= cy1:
                warnings += 1
                continue
            boxes.append(BoxAnnotation(name, cx1, cy1, cx2, cy2))
        item = Annotation(raw["image_path"], W, H, boxes)
        items.append(item)
        if check_images:
            p = Path(item.image_path)
            if not (p if p.is_absolute() else root / p).exists():
                missing.append(str(p))
    if missing:
        raise DataError("missing image files: " + ", ".join(missing))
    return DatasetIndex(labels, items, doc.get("split", "train"), root, warnings)


def load_dataset(manifest_path, check_images: bool = True) -> DatasetIndex:
    path = Path(manifest_path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    index = index_from_dict(doc, path.parent, check_images)
    if index.warnings:
        log.warning("%s: %d boxes clamped or dropped", path, index.warnings)
    return index


def save_dataset(index: DatasetIndex, manifest_path) -> None:
    Path(manifest_path).write_text(json.dumps(index.to_dict(), indent=1))


# -- images -------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(image).save(path, format="PNG")


def to_chw_float(image: np.ndarray, dtype=np.float32) -> np.ndarray:
    return (image.astype(dtype) / 255.0).transpose(2, 0, 1)


# -- letterbox ----------------------------------------------------------------

@dataclass(frozen=True)
class LetterboxTransform:
    scale: float
    pad_x: int
    pad_y: int
    src_w: int
    src_h: int

    def forward_boxes(self, boxes: np.ndarray) -> np.ndarray:
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        return b * self.scale + np.array([self.pad_x, self.pad_y, self.pad_x, self.pad_y])

    def inverse_boxes(self, boxes: np.ndarray) -> np.ndarray:
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        out = (b - np.array([self.pad_x, self.pad_y, self.pad_x, self.pad_y])) / self.scale
        return np.clip(out, 0, [self.src_w, self.src_h, self.src_w, self.src_h])


def letterbox(image: np.ndarray, boxes: np.ndarray, target: int):
    """Aspect-preserving resize into a ``target``² canvas, padded with gray on both sides."""
    if target % 32:
        raise DataError(f"letterbox target {target} must be divisible by 32")
    h, w = image.shape[:2]
    scale = min(target / w, target / h)
    nw, nh = int(round(w * scale)), int(round(h * scale))
    pad_x, pad_y = (target - nw) // 2, (target - nh) // 2
    tf = LetterboxTransform(scale, pad_x, pad_y, w, h)
    if (nw, nh) == (w, h) and (pad_x, pad_y) == (0, 0):
        return image.copy(), tf.forward_boxes(boxes), tf
    resized = cv2.resize(image, (nw, nh), interpolation=cv2.INTER_LINEAR) if (nw, nh) != (w, h) else image
    canvas = np.full((target, target, 3), PAD_VALUE, dtype=np.uint8)
    canvas[pad_y : pad_y + nh, pad_x : pad_x + nw] = resized
    return canvas, tf.forward_boxes(boxes), tf


# -- augmentation -------------------------------------------------------------

@dataclass
class AugmentConfig:
    p_hsv: float = 0.0
    hsv_gains: tuple[float, float, float] = (0.015, 0.7, 0.4)
    p_affine: float = 0.0
    scale_range: tuple[float, float] = (0.8, 1.2)
    translate: float = 0.1
    p_mosaic: float = 0.0
    min_box: float = 2.0


def clip_boxes(boxes: np.ndarray, classes: np.ndarray, w: int, h: int, min_box: float = 2.0):
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    b[:, [0, 2]] = b[:, [0, 2]].clip(0, w)
    b[:, [1, 3]] = b[:, [1, 3]].clip(0, h)
    keep = ((b[:, 2] - b[:, 0]) >= min_box) & ((b[:, 3] - b[:, 1]) >= min_box)
    return b[keep], np.asarray(classes).reshape(-1)[keep]


def hsv_jitter(image: np.ndarray, gains: Sequence[float]) -> np.ndarray:
    """Scale hue, saturation and value by the given multiplicative gains."""
    hue, sat, val = cv2.split(cv2.cvtColor(image, cv2.COLOR_RGB2HSV))
    x = np.arange(256, dtype=np.float64)
    lut_h = ((x * gains[0]) % 180).astype(np.uint8)
    lut_s = np.clip(x * gains[1], 0, 255).astype(np.uint8)
    lut_v = np.clip(x * gains[2], 0, 255).astype(np.uint8)
    hsv = cv2.merge((cv2.LUT(hue, lut_h), cv2.LUT(sat, lut_s), cv2.LUT(val, lut_v)))
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)


def affine_matrix(w: int, h: int, scale: float, tx: float, ty: float) -> np.ndarray:
    """Scale about the image center, then translate by ``(tx, ty)`` pixels."""
    cx, cy = w / 2.0, h / 2.0
    return np.array([[scale, 0.0, (1 - scale) * cx + tx], [0.0, scale, (1 - scale) * cy + ty]])


def random_affine(image, boxes, classes, scale: float, tx: float, ty: float, min_box: float = 2.0):
    h, w = image.shape[:2]
    M = affine_matrix(w, h, scale, tx, ty)
    if scale == 1.0 and tx == 0.0 and ty == 0.0:
        out = image.copy()
    else:
        out = cv2.warpAffine(image, M, (w, h), flags=cv2.INTER_LINEAR, borderValue=(PAD_VALUE,) * 3)
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    moved = np.empty_like(b)
    moved[:, [0, 2]] = b[:, [0, 2]] * M[0, 0] + M[0, 2]
    moved[:, [1, 3]] = b[:, [1, 3]] * M[1, 1] + M[1, 2]
    nb, nc = clip_boxes(moved, classes, w, h, min_box)
    return out, nb, nc


def mosaic(samples, size: int, min_box: float = 2.0):
    """2×2 composite: sample ``q`` is letterboxed into quadrant ``(q % 2, q // 2)``."""
    if len(samples) != 4:
        raise ValueError("mosaic needs exactly four samples")
    half = size // 2
    canvas = np.full((size, size, 3), PAD_VALUE, dtype=np.uint8)
    all_boxes, all_cls = [], []
    for q, (img, boxes, cls) in enumerate(samples):
        ox, oy = (q % 2) * half, (q // 2) * half
        h, w = img.shape[:2]
        s = min(half / w, half / h)
        nw, nh = max(1, int(round(w * s))), max(1, int(round(h * s)))
        canvas[oy : oy + nh, ox : ox + nw] = cv2.resize(img, (nw, nh), interpolation=cv2.INTER_LINEAR)
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * s + np.array([ox, oy, ox, oy])
        b[:, [0, 2]] = b[:, [0, 2]].clip(ox, ox + nw)
        b[:, [1, 3]] = b[:, [1, 3]].clip(oy, oy + nh)
        all_boxes.append(b)
        all_cls.append(np.asarray(cls).reshape(-1))
    return (canvas, *clip_boxes(np.concatenate(all_boxes), np.concatenate(all_cls), size, size, min_box))


def augment(image: np.ndarray, boxes: np.ndarray, classes: np.ndarray, cfg: AugmentConfig,
            rng: np.random.Generator, draw_sample: Callable[[], tuple] | None = None):
    """Mosaic, random affine, then HSV jitter, each with its configured probability.

    ``draw_sample`` returns extra ``(image, boxes, classes)`` triples for the
    mosaic; without it the mosaic step is skipped. No horizontal flips.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(classes).reshape(-1)
    h, w = image.shape[:2]
    if cfg.p_mosaic > 0 and draw_sample is not None and rng.random() < cfg.p_mosaic:
        image, boxes, classes = mosaic([(image, boxes, classes)] + [draw_sample() for _ in range(3)], w, cfg.min_box)
    if cfg.p_affine > 0 and rng.random() < cfg.p_affine:
        s = rng.uniform(*cfg.scale_range)
        tx, ty = rng.uniform(-cfg.translate, cfg.translate, size=2) * np.array([w, h])
        image, boxes, classes = random_affine(image, boxes, classes, float(s), float(tx), float(ty), cfg.min_box)
    if cfg.p_hsv > 0 and rng.random() < cfg.p_hsv:
        gains = rng.uniform(-1, 1, 3) * np.asarray(cfg.hsv_gains) + 1
        image = hsv_jitter(image, gains)
    boxes, classes = clip_boxes(boxes, classes, w, h, cfg.min_box)
    return image, boxes, classes


def sample_seed(global_seed: int, image_id: str, epoch: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(global_seed), zlib.crc32(image_id.encode()), int(epoch)])


# -- synthetic signs ----------------------------------------------------------

@dataclass
class ShapeSpec:
    name: str
    geometry: str  # circle | triangle | rectangle | ring
    fill: tuple[int, int, int]
    border: tuple[int, int, int]


DEFAULT_SHAPES = [
    ShapeSpec("ring-red", "ring", (255, 255, 255), (210, 20, 30)),
    ShapeSpec("triangle-yellow", "triangle", (250, 200, 20), (20, 20, 20)),
    ShapeSpec("circle-blue", "circle", (30, 80, 200), (245, 245, 245)),
    ShapeSpec("rectangle-green", "rectangle", (20, 140, 60), (245, 245, 245)),
]


@dataclass
class SynthConfig:
    n_images: int = 16
    image_size: int = 128
    shapes: list[ShapeSpec] = field(default_factory=lambda: list(DEFAULT_SHAPES[:3]))
    size_range: tuple[int, int] = (12, 44)
    signs_per_image: tuple[int, int] = (1, 3)
    noise_std: float = 12.0
    gradient: float = 60.0
    seed: int = 0

    def __post_init__(self):
        self.shapes = [s if isinstance(s, ShapeSpec) else ShapeSpec(**s) for s in self.shapes]
        self.size_range = tuple(self.size_range)
        self.signs_per_image = tuple(self.signs_per_image)
        if self.size_range[0] < 6:
            raise ValueError(f"size_range minimum must be ≥ 6 px, got {self.size_range}")
        if self.size_range[1] > self.image_size:
            raise ValueError("size_range maximum exceeds the image size")

    def to_dict(self) -> dict:
        return asdict(self)


def shape_mask(geometry: str, x0: int, y0: int, size: int, shape: tuple[int, int]):
    """Boolean ``(inside, border)`` masks of a sign occupying the square at ``(x0, y0)``."""
    H, W = shape
    ys, xs = np.mgrid[0:H, 0:W]
    px, py = xs + 0.5, ys + 0.5
    s = float(size)
    bw = max(1.0, 0.12 * s)
    if geometry in ("circle", "ring"):
        r = s / 2
        dist = np.hypot(px - (x0 + r), py - (y0 + r))
        inside = dist <= r
        border = inside & (dist > r - (bw * 1.6 if geometry == "ring" else bw))
    elif geometry == "triangle":
        # apex at top center, base along the bottom edge
        ax, ay = x0 + s / 2, y0
        lx, ly = x0, y0 + s
        rx, ry = x0 + s, y0 + s

        def side(x1, y1, x2, y2):
            n = np.hypot(x2 - x1, y2 - y1)
            return ((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)) / n

        d1, d2, d3 = side(ax, ay, rx, ry), side(rx, ry, lx, ly), side(lx, ly, ax, ay)
        inside = (d1 >= 0) & (d2 >= 0) & (d3 >= 0)
        border = inside & (np.minimum(np.minimum(d1, d2), d3) < bw)
    elif geometry == "rectangle":
        inside = (px >= x0) & (px < x0 + s) & (py >= y0) & (py < y0 + s)
        edge = np.minimum(np.minimum(px - x0, x0 + s - px), np.minimum(py - y0, y0 + s - py))
        border = inside & (edge < bw)
    else:
        raise ValueError(f"unknown geometry {geometry!r}")
    return inside, border


def _background(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    S = cfg.image_size
    base = rng.uniform(60, 190, size=3)
    direction = rng.normal(size=2)
    direction /= np.linalg.norm(direction) + 1e-12
    ys, xs = np.mgrid[0:S, 0:S] / max(S - 1, 1) - 0.5
    ramp = (xs * direction[0] + ys * direction[1])[..., None] * cfg.gradient
    noise = rng.normal(0, cfg.noise_std, size=(S, S, 3)) if cfg.noise_std > 0 else 0.0
    return np.clip(base + ramp + noise, 0, 255).astype(np.uint8)


def render_image(cfg: SynthConfig, rng: np.random.Generator):
    """Draw one image; returns ``(image, [(class_index, (x1, y1, x2, y2)), ...])``."""
    S = cfg.image_size
    img = _background(rng, cfg)
    n_signs = int(rng.integers(cfg.signs_per_image[0], cfg.signs_per_image[1] + 1))
    placed: list[tuple[int, int, int, int]] = []
    signs = []
    for _ in range(n_signs):
        cls = int(rng.integers(len(cfg.shapes)))
        size = int(rng.integers(cfg.size_range[0], cfg.size_range[1] + 1))
        for _attempt in range(50):
            x0 = int(rng.integers(0, S - size + 1))
            y0 = int(rng.integers(0, S - size + 1))
            cand = (x0 - 2, y0 - 2, x0 + size + 2, y0 + size + 2)
            if all(cand[2] <= p[0] or p[2] <= cand[0] or cand[3] <= p[1] or p[3] <= cand[1] for p in placed):
                break
        else:
            continue
        spec = cfg.shapes[cls]
        inside, border = shape_mask(spec.geometry, x0, y0, size, (S, S))
        if not inside.any():
            continue
        img[inside] = spec.fill
        img[border] = spec.border
        rows, cols = np.nonzero(inside)
        box = (float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))
        placed.append((x0, y0, x0 + size, y0 + size))
        signs.append((cls, box))
    return img, signs


def synth_generate(cfg: SynthConfig, out_dir) -> DatasetIndex:
    """Render ``cfg.n_images`` PNGs plus ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    rng = np.random.default_rng(cfg.seed)
    labels = [s.name for s in cfg.shapes]
    items = []
    for i in range(cfg.n_images):
        img, signs = render_image(cfg, rng)
        rel = f"images/{i:05d}.png"
        try:
            write_image(out / rel, img)
        except OSError as exc:
            raise DataError(f"cannot write {out / rel}: {exc}") from exc
        boxes = [BoxAnnotation(labels[c], *b) for c, b in signs]
        items.append(Annotation(rel, cfg.image_size, cfg.image_size, boxes))
    index = DatasetIndex(labels, items, "train", out)
    save_dataset(index, out / "manifest.json")
    return index


# -- TT100K conversion ----------------------------------------------------------

def convert_tt100k(annotations_path, ids_path, labels_path, out_path, default_size: int = 2048) -> DatasetIndex:
    """Build a manifest from TT100K's ``annotations.json`` restricted to listed ids and labels."""
    ann_path = Path(annotations_path)
    try:
        doc = json.loads(ann_path.read_text())
        ids = Path(ids_path).read_text().split()
        labels = [ln.strip() for ln in Path(labels_path).read_text().splitlines() if ln.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read TT100K inputs: {exc}") from exc
    imgs = doc.get("imgs", {})
    wanted = set(labels)
    out = Path(out_path)
    items = []
    for img_id in ids:
        rec = imgs.get(img_id)
        if rec is None:
            raise DataError(f"image id {img_id} not present in {ann_path}")
        src = ann_path.parent / rec["path"]
        W = H = default_size
        if src.exists():
            with Image.open(src) as im:
                W, H = im.size
        boxes = []
        for obj in rec.get("objects", []):
            if obj["category"] not in wanted:
                continue
            bb = obj["bbox"]
            x1, y1 = max(0.0, float(bb["xmin"])), max(0.0, float(bb["ymin"]))
            x2, y2 = min(float(W), float(bb["xmax"])), min(float(H), float(bb["ymax"]))
            if x2 > x1 and y2 > y1:
                boxes.append(BoxAnnotation(obj["category"], x1, y1, x2, y2))
        items.append(Annotation(os.path.relpath(src, out.parent), W, H, boxes))
    index = DatasetIndex(labels, items, "train", out.parent)
    save_dataset(index, out)
    return index
