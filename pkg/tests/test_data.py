import json

import numpy as np
import pytest
from PIL import Image

from mddfnet.data import (DEFAULT_SHAPES, PAD_VALUE, AugmentConfig, DatasetIndex, SynthConfig, _background, augment,
                          convert_tt100k, index_from_dict, letterbox, load_dataset, mosaic, random_affine,
                          read_image, render_image, sample_seed, save_dataset, synth_generate, to_chw_float)
from mddfnet.errors import DataError


def _write_manifest(tmp_path, doc, images=()):
    for rel in images:
        p = tmp_path / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(p)
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


# -- manifests ------------------------------------------------------------------

def test_empty_manifest(tmp_path):
    idx = load_dataset(_write_manifest(tmp_path, {"label_set": [], "items": []}))
    assert len(idx) == 0 and idx.warnings == 0


def test_single_item_resolves_class_by_label_order(tmp_path):
    doc = {"label_set": ["a", "b", "c"],
           "items": [{"image_path": "im/0.png", "width": 4, "height": 4,
                      "boxes": [{"class": "c", "x1": 0, "y1": 0, "x2": 2, "y2": 3}]}]}
    idx = load_dataset(_write_manifest(tmp_path, doc, ["im/0.png"]))
    boxes, cls = idx.targets(0)
    assert len(idx) == 1 and cls.tolist() == [2]
    assert boxes.tolist() == [[0.0, 0.0, 2.0, 3.0]]


def _random_doc(rng):
    labels = [f"c{i}" for i in range(int(rng.integers(1, 6)))]
    items = []
    for i in range(int(rng.integers(0, 8))):
        W, H = int(rng.integers(16, 400)), int(rng.integers(16, 400))
        boxes = []
        for _ in range(int(rng.integers(0, 5))):
            x1, y1 = float(rng.uniform(0, W - 4)), float(rng.uniform(0, H - 4))
            boxes.append({"class": str(rng.choice(labels)), "x1": x1, "y1": y1,
                          "x2": float(rng.uniform(x1 + 1, W)), "y2": float(rng.uniform(y1 + 1, H))})
        items.append({"image_path": f"img/{i}.png", "width": W, "height": H, "boxes": boxes})
    return {"split": str(rng.choice(["train", "test"])), "label_set": labels, "items": items}


@pytest.mark.parametrize("seed", range(20))
def test_manifest_round_trip(tmp_path, seed):
    doc = _random_doc(np.random.default_rng(seed))
    idx = index_from_dict(doc, tmp_path)
    save_dataset(idx, tmp_path / "m.json")
    again = load_dataset(tmp_path / "m.json", check_images=False)
    assert again.to_dict() == idx.to_dict() == doc


def test_out_of_bounds_boxes_clamped_and_counted(tmp_path):
    doc = {"label_set": ["a"],
           "items": [{"image_path": "x.png", "width": 10, "height": 10,
                      "boxes": [{"class": "a", "x1": -3, "y1": 2, "x2": 5, "y2": 14},
                                {"class": "a", "x1": 1, "y1": 1, "x2": 4, "y2": 4}]}]}
    idx = load_dataset(_write_manifest(tmp_path, doc, ["x.png"]))
    assert idx.warnings == 1
    assert idx.targets(0)[0].tolist() == [[0.0, 2.0, 5.0, 10.0], [1.0, 1.0, 4.0, 4.0]]


def test_box_outside_image_dropped(tmp_path):
    doc = {"label_set": ["a"], "items": [{"image_path": "x.png", "width": 10, "height": 10,
                                          "boxes": [{"class": "a", "x1": 20, "y1": 2, "x2": 25, "y2": 4}]}]}
    idx = load_dataset(_write_manifest(tmp_path, doc, ["x.png"]))
    assert idx.items[0].boxes == [] and idx.warnings >= 1


def test_unknown_class_named(tmp_path):
    doc = {"label_set": ["a"], "items": [{"image_path": "x.png", "width": 10, "height": 10,
                                          "boxes": [{"class": "zz9", "x1": 0, "y1": 0, "x2": 5, "y2": 4}]}]}
    with pytest.raises(DataError, match="zz9"):
        load_dataset(_write_manifest(tmp_path, doc, ["x.png"]))


def test_missing_images_listed(tmp_path):
    doc = {"label_set": ["a"], "items": [{"image_path": p, "width": 4, "height": 4, "boxes": []}
                                         for p in ("here.png", "gone1.png", "gone2.png")]}
    with pytest.raises(DataError) as info:
        load_dataset(_write_manifest(tmp_path, doc, ["here.png"]))
    assert "gone1.png" in str(info.value) and "gone2.png" in str(info.value) and "here.png" not in str(info.value)


def test_unreadable_manifest(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(DataError):
        load_dataset(tmp_path / "bad.json")


def test_image_io_png_and_jpeg(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (10, 12, 3), dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "a.png")
    Image.fromarray(img).save(tmp_path / "a.jpg", quality=95)
    assert np.array_equal(read_image(tmp_path / "a.png"), img)
    assert read_image(tmp_path / "a.jpg").shape == (10, 12, 3)
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(DataError):
        read_image(tmp_path / "junk.png")
    chw = to_chw_float(img)
    assert chw.shape == (3, 10, 12) and chw.dtype == np.float32 and chw.max() <= 1.0


# -- letterbox --------------------------------------------------------------------

def test_letterbox_identity_for_square_target():
    img = np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    boxes = np.array([[3.0, 4.0, 20.0, 30.0]])
    out, b, tf = letterbox(img, boxes, 64)
    assert np.array_equal(out, img) and np.array_equal(b, boxes)
    assert (tf.scale, tf.pad_x, tf.pad_y) == (1.0, 0, 0)


def test_letterbox_wide_image():
    img = np.zeros((640, 1280, 3), dtype=np.uint8)
    out, b, tf = letterbox(img, np.array([[0.0, 0.0, 1280.0, 640.0]]), 640)
    assert out.shape == (640, 640, 3)
    assert tf.scale == 0.5 and tf.pad_x == 0 and tf.pad_y == 160
    assert np.all(out[:160] == PAD_VALUE) and np.all(out[480:] == PAD_VALUE) and np.all(out[160:480] == 0)
    assert b.tolist() == [[0.0, 160.0, 640.0, 480.0]]


def test_letterbox_target_divisible_by_32():
    with pytest.raises(DataError):
        letterbox(np.zeros((10, 10, 3), dtype=np.uint8), np.zeros((0, 4)), 100)


@pytest.mark.parametrize("seed", range(10))
def test_letterbox_inverse_round_trip(seed):
    rng = np.random.default_rng(seed)
    W, H = int(rng.integers(20, 700)), int(rng.integers(20, 700))
    xy = rng.uniform(0, 0.5, (8, 2)) * [W, H]
    boxes = np.concatenate([xy, xy + rng.uniform(0.05, 0.5, (8, 2)) * [W, H]], axis=1)
    _, fwd, tf = letterbox(np.zeros((H, W, 3), dtype=np.uint8), boxes, 128)
    assert np.max(np.abs(tf.inverse_boxes(fwd) - boxes)) < 1e-4


# -- augmentation --------------------------------------------------------------------

def _scene(rng, size=128):
    img = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
    xy = rng.uniform(0, size * 0.6, (3, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(8, size * 0.4, (3, 2))], axis=1)
    return img, boxes, rng.integers(0, 3, 3)


def test_augment_all_off_is_identity(rng):
    img, boxes, cls = _scene(rng)
    out, b, c = augment(img, boxes, cls, AugmentConfig(), rng)
    assert np.array_equal(out, img) and np.array_equal(b, boxes) and np.array_equal(c, cls)


def test_identity_affine(rng):
    img, boxes, cls = _scene(rng)
    out, b, c = random_affine(img, boxes, cls, 1.0, 0.0, 0.0)
    assert np.array_equal(out, img)
    assert np.max(np.abs(b - boxes)) < 1e-4 and np.array_equal(c, cls)


def test_affine_maps_boxes_about_center():
    img = np.zeros((100, 100, 3), dtype=np.uint8)
    _, b, _ = random_affine(img, np.array([[40.0, 40.0, 60.0, 60.0]]), np.array([1]), 2.0, 5.0, -3.0)
    assert np.allclose(b, [[35.0, 27.0, 75.0, 67.0]])


def test_mosaic_quadrant_oracle():
    size, half = 128, 64
    shapes = [(64, 64), (32, 96), (128, 40), (50, 50)]  # (h, w)
    samples, expected = [], []
    for q, (h, w) in enumerate(shapes):
        img = np.full((h, w, 3), 10 * (q + 1), dtype=np.uint8)
        box = np.array([[w * 0.25, h * 0.25, w * 0.75, h * 0.75]])
        samples.append((img, box, np.array([q])))
        s = min(half / w, half / h)
        ox, oy = (q % 2) * half, (q // 2) * half
        expected.append(box[0] * s + [ox, oy, ox, oy])
    canvas, boxes, cls = mosaic(samples, size)
    assert cls.tolist() == [0, 1, 2, 3]
    assert np.allclose(boxes, np.array(expected), atol=1e-9)
    for q, b in enumerate(boxes):
        ox, oy = (q % 2) * half, (q // 2) * half
        assert ox <= b[0] < b[2] <= ox + half and oy <= b[1] < b[3] <= oy + half


def test_augment_keeps_boxes_in_bounds_over_1000_draws():
    cfg = AugmentConfig(p_hsv=0.5, p_affine=0.8, p_mosaic=0.5, scale_range=(0.8, 1.2), translate=0.1)
    pool = np.random.default_rng(99)
    scenes = [_scene(pool, 64) for _ in range(8)]
    for k in range(1000):
        rng = np.random.default_rng(k)
        img, boxes, cls = scenes[k % 8]
        draw = lambda: scenes[int(rng.integers(8))]  # noqa: E731
        out, b, c = augment(img, boxes, cls, cfg, rng, draw)
        assert out.shape == (64, 64, 3) and out.dtype == np.uint8
        assert len(b) == len(c)
        if len(b):
            assert b.min() >= 0 and b[:, [0, 2]].max() <= 64 and b[:, [1, 3]].max() <= 64
            assert np.all(b[:, 2] - b[:, 0] >= 2) and np.all(b[:, 3] - b[:, 1] >= 2)


def test_augment_is_pure_function_of_seed():
    cfg = AugmentConfig(p_hsv=1.0, p_affine=1.0, p_mosaic=1.0)
    scenes = [_scene(np.random.default_rng(i), 64) for i in range(4)]

    def run():
        rng = np.random.default_rng(sample_seed(7, "img01", 3))
        it = iter(scenes[1:])
        return augment(*scenes[0], cfg, rng, lambda: next(it))

    a, b = run(), run()
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_sample_seed_depends_on_all_parts():
    draws = {np.random.default_rng(sample_seed(*k)).integers(1 << 62) for k in
             [(0, "a", 0), (1, "a", 0), (0, "b", 0), (0, "a", 1)]}
    assert len(draws) == 4


# -- synthetic signs ------------------------------------------------------------------

def test_synth_bit_reproducible(tmp_path):
    cfg = SynthConfig(n_images=4, seed=11)
    a = synth_generate(cfg, tmp_path / "a")
    b = synth_generate(cfg, tmp_path / "b")
    assert a.to_dict() == b.to_dict()
    for item in a.items:
        assert (tmp_path / "a" / item.image_path).read_bytes() == (tmp_path / "b" / item.image_path).read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_synth_zero_signs(tmp_path):
    idx = synth_generate(SynthConfig(n_images=3, signs_per_image=(0, 0)), tmp_path)
    assert all(item.boxes == [] for item in idx.items)


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(size_range=(4, 20))


def test_synth_unwritable_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(DataError):
        synth_generate(SynthConfig(n_images=1), blocker / "sub")


@pytest.mark.parametrize("geometry", ["circle", "ring", "triangle", "rectangle"])
def test_tight_box_matches_raster_extent(geometry):
    spec = next(s for s in DEFAULT_SHAPES if s.geometry == geometry)
    cfg = SynthConfig(shapes=[spec], signs_per_image=(1, 1), noise_std=0.0)
    for seed in range(10):
        bg = _background(np.random.default_rng(seed), cfg)
        img, signs = render_image(cfg, np.random.default_rng(seed))
        rows, cols = np.nonzero(np.any(img != bg, axis=2))
        (_, box), = signs
        extent = (cols.min(), rows.min(), cols.max() + 1, rows.max() + 1)
        assert np.max(np.abs(np.array(box) - extent)) <= 1


def test_synth_class_balance_and_size_spread():
    cfg = SynthConfig(n_images=500, shapes=list(DEFAULT_SHAPES), seed=3)
    rng = np.random.default_rng(cfg.seed)
    counts = np.zeros(len(cfg.shapes))
    areas = []
    for _ in range(cfg.n_images):
        _, signs = render_image(cfg, rng)
        for c, (x1, y1, x2, y2) in signs:
            counts[c] += 1
            areas.append((x2 - x1) * (y2 - y1))
    assert np.all(np.abs(counts - counts.mean()) <= 0.3 * counts.mean())
    areas = np.array(areas)
    assert (areas < 32**2).any() and ((areas >= 32**2) & (areas < 96**2)).any()


# -- TT100K converter -------------------------------------------------------------------

def test_convert_tt100k(tmp_path):
    root = tmp_path / "tt100k"
    (root / "train").mkdir(parents=True)
    Image.fromarray(np.zeros((300, 400, 3), dtype=np.uint8)).save(root / "train" / "7.jpg")
    ann = {"imgs": {
        "7": {"path": "train/7.jpg", "objects": [
            {"category": "pne", "bbox": {"xmin": 10, "ymin": 20, "xmax": 50, "ymax": 60}},
            {"category": "zz", "bbox": {"xmin": 1, "ymin": 1, "xmax": 5, "ymax": 5}},
            {"category": "pl80", "bbox": {"xmin": 380, "ymin": 290, "xmax": 420, "ymax": 310}}]},
        "8": {"path": "train/8.jpg", "objects": []}}}
    (root / "annotations.json").write_text(json.dumps(ann))
    (tmp_path / "ids.txt").write_text("7\n8\n")
    (tmp_path / "labels.txt").write_text("pl80\npne\n")
    out = tmp_path / "out" / "manifest.json"
    out.parent.mkdir()
    idx = convert_tt100k(root / "annotations.json", tmp_path / "ids.txt", tmp_path / "labels.txt", out)
    assert idx.label_set == ["pl80", "pne"]
    first = idx.items[0]
    assert (first.width, first.height) == (400, 300)
    assert [(b.class_name, b.xyxy) for b in first.boxes] == [("pne", (10.0, 20.0, 50.0, 60.0)),
                                                             ("pl80", (380.0, 290.0, 400.0, 300.0))]
    assert idx.items[1].boxes == [] and idx.items[1].width == 2048
    again = load_dataset(out, check_images=False)
    assert again.to_dict() == idx.to_dict()
    assert again.resolve(again.items[0]).resolve() == (root / "train" / "7.jpg").resolve()

    (tmp_path / "ids.txt").write_text("99\n")
    with pytest.raises(DataError, match="99"):
        convert_tt100k(root / "annotations.json", tmp_path / "ids.txt", tmp_path / "labels.txt", out)


def test_dataset_index_defaults():
    idx = DatasetIndex(["a"], [])
    assert idx.split == "train" and idx.warnings == 0
