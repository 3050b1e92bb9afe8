"""SGD training loop, learning-rate schedule and the bit-exact checkpoint container."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import tensor as T
from .backbone import full_config, tiny_config
from .boxes import Detection, GroundTruthBox
from .data import AugmentConfig, DatasetIndex, augment, letterbox, read_image, sample_seed, to_chw_float
from .detect import assign_targets, detection_loss
from .errors import ConfigurationError, DataError, NumericFault
from .metrics import APReport, evaluate
from .model import VARIANTS, Detector, variant_config

log = logging.getLogger(__name__)

BACKBONE_PRESETS = {"tiny": tiny_config, "full": full_config}


@dataclass
class TrainConfig:
    epochs: int = 300
    lr0: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 5e-4
    warmup_epochs: int = 5
    batch_size: int = 8
    input_size: int = 128
    variant: str = "full"
    seed: int = 0
    backbone: str = "tiny"
    neck_width: int = 32
    cls_weight: float = 1.0
    box_weight: float = 5.0
    grad_clip: float = 10.0  # global L2 norm; 0 disables
    eval_score_thr: float = 0.01
    nms_iou_thr: float = 0.45
    max_det: int = 100
    eval_interval: int = 0  # 0: evaluate only after the last epoch
    checkpoint_interval: int = 0  # 0: checkpoint only at the end
    target_map50: float | None = None  # stop after an evaluation reaching this mAP@.5
    augment: dict = field(default_factory=dict)
    data: str | None = None
    val_data: str | None = None
    out_dir: str = "runs/train"

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigurationError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 1 or not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigurationError(f"need 0 <= warmup_epochs ({self.warmup_epochs}) <= epochs ({self.epochs})")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.input_size % 32:
            raise ConfigurationError(f"input_size must be a multiple of 32, got {self.input_size}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.backbone not in BACKBONE_PRESETS:
            raise ConfigurationError(f"unknown backbone preset {self.backbone!r}")
        self.augment_config()  # validates keys

    def augment_config(self) -> AugmentConfig:
        known = {f.name for f in fields(AugmentConfig)}
        bad = sorted(set(self.augment) - known)
        if bad:
            raise ConfigurationError(f"unknown augment keys: {', '.join(bad)}")
        return AugmentConfig(**self.augment)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        if not isinstance(doc, dict):
            raise ConfigurationError("config must be a mapping")
        known = {f.name for f in fields(cls)}
        bad = sorted(set(doc) - known)
        if bad:
            raise ConfigurationError(f"unknown config keys: {', '.join(bad)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> TrainConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return TrainConfig.from_dict(doc)


def build_model(cfg: TrainConfig, num_classes: int) -> Detector:
    base = variant_config(cfg.variant, BACKBONE_PRESETS[cfg.backbone]())
    return Detector(base, num_classes, cfg.neck_width, rng=np.random.default_rng(cfg.seed))


# -- optimisation ---------------------------------------------------------------

def lr_schedule(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from lr0/100 to lr0, then cosine annealing back to lr0/100 at the final step."""
    lr0 = cfg.lr0
    lr_min = lr0 / 100
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return lr_min + (lr0 - lr_min) * step / warm
    span = cfg.epochs * steps_per_epoch - 1 - warm
    if span <= 0:
        return lr0
    t = min(step - warm, span)
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * t / span))


def decays(name: str, p: T.Tensor) -> bool:
    # biases, norm scale/shift and the scan skip gain D are all vectors
    return p.ndim > 1


def clip_grad_norm(params: T.ParamStore, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total


def sgd_step(params: T.ParamStore, buffers: dict[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float) -> None:
    """``v <- m*v + g + wd*w`` (no decay on vectors), then ``w <- w - lr*v``, in place."""
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient in parameter {name}")
        v = buffers.get(name)
        if v is None:
            v = buffers[name] = np.zeros_like(p.data)
        v *= momentum
        v += g
        if weight_decay and decays(name, p):
            v += weight_decay * p.data
        p.data -= lr * v


# -- checkpoint container ---------------------------------------------------------

MAGIC = b"MDDFCKPT"
FORMAT_VERSION = 1
ALIGN = 64


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    epoch: int = 0
    step: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        entries = []
        blobs = []
        offset = 0
        for group, arrays in (("param", self.params), ("momentum", self.momentum)):
            for name, arr in arrays.items():
                a = np.ascontiguousarray(arr)
                raw = a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
                entries.append({"group": group, "name": name, "shape": list(a.shape),
                                "dtype": a.dtype.newbyteorder("<").str, "offset": offset, "nbytes": len(raw)})
                blobs.append((offset, raw))
                offset = _align(offset + len(raw))
        manifest = {
            "format_version": self.format_version, "config": self.config, "epoch": self.epoch,
            "step": self.step, "rng_state": self.rng_state, "extra": self.extra,
            "tensors": entries, "payload_bytes": offset,
        }
        mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        header = MAGIC + struct.pack("<IQ", self.format_version, len(mbytes))
        head = header + mbytes
        head += b"\0" * (_align(len(head)) - len(head))
        payload = bytearray(offset)
        for off, raw in blobs:
            payload[off : off + len(raw)] = raw
        return bytes(head) + bytes(payload)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[: len(MAGIC)] != MAGIC:
            raise DataError("not a checkpoint file (bad magic)")
        try:
            return cls._parse(buf)
        except (struct.error, ValueError, KeyError, TypeError) as exc:
            raise DataError(f"corrupt checkpoint: {exc}") from exc

    @classmethod
    def _parse(cls, buf: bytes) -> "Checkpoint":
        version, mlen = struct.unpack_from("<IQ", buf, len(MAGIC))
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        start = len(MAGIC) + struct.calcsize("<IQ")
        manifest = json.loads(buf[start : start + mlen])
        base = _align(start + mlen)
        if base + manifest["payload_bytes"] != len(buf):
            raise DataError("checkpoint payload size does not match its manifest")
        params, mom = {}, {}
        end = 0
        for e in sorted(manifest["tensors"], key=lambda e: e["offset"]):
            if e["offset"] < end:
                raise DataError(f"checkpoint tensor {e['name']} overlaps its predecessor")
            end = e["offset"] + e["nbytes"]
            if end > manifest["payload_bytes"]:
                raise DataError(f"checkpoint tensor {e['name']} runs past the payload")
            lo = base + e["offset"]
            arr = np.frombuffer(buf[lo : lo + e["nbytes"]], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
            (params if e["group"] == "param" else mom)[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
        order = [e["name"] for e in manifest["tensors"] if e["group"] == "param"]
        morder = [e["name"] for e in manifest["tensors"] if e["group"] == "momentum"]
        return cls(manifest["config"], {k: params[k] for k in order}, {k: mom[k] for k in morder},
                   manifest["epoch"], manifest["step"], manifest["rng_state"], manifest.get("extra", {}), version)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            return cls.from_bytes(Path(path).read_bytes())
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def model_from_checkpoint(ck: Checkpoint) -> tuple[Detector, TrainConfig]:
    cfg = TrainConfig.from_dict(ck.config)
    model = build_model(cfg, int(ck.extra["num_classes"]))
    store = model.parameters()
    if list(store) != list(ck.params):
        raise DataError("checkpoint parameters do not match the configured architecture")
    for name, p in store.items():
        if p.shape != ck.params[name].shape:
            raise DataError(f"checkpoint shape mismatch for {name}")
        p.data = ck.params[name].copy()
    return model, cfg


# -- data ---------------------------------------------------------------------------

@dataclass
class Sample:
    image_id: str
    image: np.ndarray  # letterboxed HWC uint8
    boxes: np.ndarray  # letterboxed coordinates
    classes: np.ndarray
    transform: Any
    orig_boxes: np.ndarray


def load_samples(index: DatasetIndex, input_size: int) -> list[Sample]:
    out = []
    for i, item in enumerate(index.items):
        img = read_image(index.resolve(item))
        boxes, cls = index.targets(i)
        lb, lb_boxes, tr = letterbox(img, boxes, input_size)
        out.append(Sample(item.image_id, lb, lb_boxes, cls, tr, boxes))
    return out


def _batch_targets(model: Detector, levels, boxes, classes):
    shapes = [lv.cls_logits.shape[2:] for lv in levels]
    strides = [lv.stride for lv in levels]
    return [assign_targets(b, c, shapes, strides) for b, c in zip(boxes, classes)]


def evaluate_samples(model: Detector, samples: list[Sample], num_classes: int, score_thr: float = 0.01,
                     iou_thr: float = 0.45, max_det: int = 100, batch_size: int = 8) -> APReport:
    """Predict on letterboxed samples, map back to source pixels and score with the evaluator."""
    dets: list[Detection] = []
    gts: list[GroundTruthBox] = []
    for s in samples:
        for b, c in zip(s.orig_boxes, s.classes):
            gts.append(GroundTruthBox(tuple(float(v) for v in b), int(c), s.image_id))
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        x = np.stack([to_chw_float(s.image, model.dtype) for s in chunk])
        preds = model.predict(x, score_thr, iou_thr, [s.image_id for s in chunk], max_det)
        for s, ds in zip(chunk, preds):
            if not ds:
                continue
            back = s.transform.inverse_boxes(np.array([d.box for d in ds]))
            dets.extend(Detection(tuple(float(v) for v in bb), d.score, d.class_id, d.image_id)
                        for bb, d in zip(back, ds))
    return evaluate(dets, gts, num_classes)


# -- loop -------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Detector
    history: list[dict]
    checkpoint: Checkpoint
    checkpoint_path: Path | None
    final_report: APReport | None
    step_losses: list[float] = field(default_factory=list)


def _snapshot(cfg, model, buffers, epoch, step, rng, num_classes, labels) -> Checkpoint:
    return Checkpoint(
        config=cfg.to_dict(),
        params={k: p.data.copy() for k, p in model.parameters().items()},
        momentum={k: v.copy() for k, v in buffers.items()},
        epoch=epoch, step=step, rng_state=rng.bit_generator.state,
        extra={"num_classes": num_classes, "label_set": list(labels)},
    )


def train(cfg: TrainConfig, dataset: DatasetIndex, val: DatasetIndex | None = None,
          resume: Checkpoint | None = None, out_dir: str | Path | None = None,
          stop_after_steps: int | None = None, echo: bool = False) -> TrainResult:
    """Train ``cfg.variant`` on ``dataset``; deterministic given ``cfg.seed``.

    ``stop_after_steps`` ends the run early. The returned checkpoint resumes
    exactly only when the stop falls on an epoch boundary.
    """
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    out = Path(out_dir) if out_dir is not None else (Path(cfg.out_dir) if cfg.out_dir else None)
    num_classes = len(dataset.label_set)
    samples = load_samples(dataset, cfg.input_size)
    val_samples = load_samples(val, cfg.input_size) if val is not None else samples
    aug = cfg.augment_config()
    model = build_model(cfg, num_classes)
    params = model.parameters()
    buffers: dict[str, np.ndarray] = {}
    rng = np.random.default_rng(cfg.seed)
    start_epoch, step = 0, 0
    if resume is not None:
        for name, p in params.items():
            p.data = resume.params[name].copy()
        buffers = {k: v.copy() for k, v in resume.momentum.items()}
        rng.bit_generator.state = resume.rng_state
        start_epoch, step = resume.epoch, resume.step
    spe = math.ceil(len(samples) / cfg.batch_size)
    history: list[dict] = []
    step_losses: list[float] = []
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "a")
    bad_streak = 0
    report = None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            order = rng.permutation(len(samples))
            sums = {"loss": 0.0, "cls": 0.0, "box": 0.0}
            n_batches, npos = 0, 0
            for b0 in range(0, len(order), cfg.batch_size):
                idx = order[b0 : b0 + cfg.batch_size]
                imgs, boxes, classes = [], [], []
                for j in idx:
                    s = samples[j]
                    srng = np.random.default_rng(sample_seed(cfg.seed, s.image_id, epoch))

                    def draw(srng=srng):
                        o = samples[int(srng.integers(len(samples)))]
                        return o.image, o.boxes, o.classes

                    im, bx, cl = augment(s.image, s.boxes, s.classes, aug, srng, draw)
                    imgs.append(to_chw_float(im))
                    boxes.append(bx)
                    classes.append(cl)
                x = T.Tensor(np.stack(imgs))
                levels = model(x)
                targets = _batch_targets(model, levels, boxes, classes)
                terms = detection_loss(levels, targets, boxes, cfg.cls_weight, cfg.box_weight)
                loss = terms.total.item()
                step_losses.append(loss)
                lr = lr_schedule(step, spe, cfg)
                if not math.isfinite(loss):
                    bad_streak += 1
                    if bad_streak >= 2:
                        raise NumericFault(f"non-finite loss twice in a row at epoch {epoch + 1} step {step}")
                    params.zero_grad()
                    step += 1
                    continue
                bad_streak = 0
                params.zero_grad()
                T.backward(terms.total)
                if cfg.grad_clip:
                    clip_grad_norm(params, cfg.grad_clip)
                sgd_step(params, buffers, lr, cfg.momentum, cfg.weight_decay)
                sums["loss"] += loss
                sums["cls"] += terms.cls.item()
                sums["box"] += terms.box.item()
                npos += terms.num_positive
                n_batches += 1
                step += 1
                if stop_after_steps is not None and step >= stop_after_steps:
                    break
            rec = {"epoch": epoch + 1, "lr": lr_schedule(max(step - 1, 0), spe, cfg),
                   **{k: v / max(n_batches, 1) for k, v in sums.items()},
                   "num_positive": npos, "seconds": round(time.perf_counter() - t0, 3)}
            last = epoch + 1 == cfg.epochs
            if (cfg.eval_interval and (epoch + 1) % cfg.eval_interval == 0) or last:
                report = evaluate_samples(model, val_samples, num_classes, cfg.eval_score_thr,
                                          cfg.nms_iou_thr, cfg.max_det, cfg.batch_size)
                rec.update(map50=report.map50, map5095=report.map5095)
            history.append(rec)
            line = json.dumps(rec, sort_keys=True)
            if log_file is not None:
                log_file.write(line + "\n")
                log_file.flush()
            if echo:
                print(line, flush=True)
            if stop_after_steps is not None and step >= stop_after_steps:
                break
            if cfg.target_map50 is not None and "map50" in rec and rec["map50"] >= cfg.target_map50:
                break
            if out is not None and cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0 and not last:
                _snapshot(cfg, model, buffers, epoch + 1, step, rng, num_classes,
                          dataset.label_set).save(out / f"epoch{epoch + 1:04d}.ckpt")
    finally:
        if log_file is not None:
            log_file.close()
    done = history[-1]["epoch"] if history else start_epoch
    ck = _snapshot(cfg, model, buffers, done, step, rng, num_classes, dataset.label_set)
    path = None
    if out is not None:
        path = out / "last.ckpt"
        ck.save(path)
    return TrainResult(model, history, ck, path, report, step_losses)
