"""Pyramid neck, anchor-free heads, decoding, NMS, target assignment and the training loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import PyramidFeatures
from .boxes import Detection, iou_matrix
from .errors import ContractError
from .nn import Conv, Module, Sequential
from .tensor import Tensor

STRIDES = (8, 16, 32)
# (lo, hi] bounds on max(l, t, r, b) in pixels per level
SCALE_RANGES = ((0.0, 64.0), (64.0, 128.0), (128.0, math.inf))


class Fuse(Module):
    def __init__(self, width: int, rng=None):
        self.cv1 = Conv(2 * width, width, 3, act=True, rng=rng)
        self.cv2 = Conv(width, width, 3, act=True, rng=rng)

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        return self.cv2(self.cv1(T.concat([a, b], axis=1)))


class Neck(Module):
    """Top-down then bottom-up fusion at a single width."""

    def __init__(self, in_channels: Sequence[int], width: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        c3, c4, c5 = in_channels
        self.width = width
        self.lat3 = Conv(c3, width, 1, act=True, rng=rng)
        self.lat4 = Conv(c4, width, 1, act=True, rng=rng)
        self.lat5 = Conv(c5, width, 1, act=True, rng=rng)
        self.td4 = Fuse(width, rng)
        self.td3 = Fuse(width, rng)
        self.down3 = Conv(width, width, 3, stride=2, padding=1, act=True, rng=rng)
        self.bu4 = Fuse(width, rng)
        self.down4 = Conv(width, width, 3, stride=2, padding=1, act=True, rng=rng)
        self.bu5 = Fuse(width, rng)

    def forward(self, pyr: PyramidFeatures) -> PyramidFeatures:
        c3, c4, c5 = pyr
        for hi, lo, name in ((c3, c4, "C3/C4"), (c4, c5, "C4/C5")):
            if hi.shape[2] != 2 * lo.shape[2] or hi.shape[3] != 2 * lo.shape[3]:
                raise ContractError(f"neck: {name} spatial sizes {hi.shape[2:]} vs {lo.shape[2:]} are not a 2× stride step")
        p5 = self.lat5(c5)
        p4 = self.td4(self.lat4(c4), T.upsample_nearest(p5, 2))
        p3 = self.td3(self.lat3(c3), T.upsample_nearest(p4, 2))
        p4 = self.bu4(p4, self.down3(p3))
        p5 = self.bu5(p5, self.down4(p4))
        return PyramidFeatures(p3, p4, p5)


@dataclass
class RawLevel:
    cls_logits: Tensor  # N×K×H×W
    box_ltrb: Tensor  # N×4×H×W, stride units, softplus-positive
    stride: int


class LevelHead(Module):
    def __init__(self, width: int, num_classes: int, prior: float = 0.01, rng=None):
        self.cls_stack = Sequential(Conv(width, width, 3, act=True, rng=rng), Conv(width, width, 3, act=True, rng=rng))
        self.reg_stack = Sequential(Conv(width, width, 3, act=True, rng=rng), Conv(width, width, 3, act=True, rng=rng))
        self.cls_out = Conv(width, num_classes, 1, rng=rng)
        self.reg_out = Conv(width, 4, 1, rng=rng)
        self.cls_out.bias.data[:] = -math.log((1 - prior) / prior)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return self.cls_out(self.cls_stack(x)), T.softplus(self.reg_out(self.reg_stack(x)))


class Head(Module):
    def __init__(self, width: int, num_classes: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.width, self.num_classes = width, num_classes
        self.p3 = LevelHead(width, num_classes, rng=rng)
        self.p4 = LevelHead(width, num_classes, rng=rng)
        self.p5 = LevelHead(width, num_classes, rng=rng)

    def forward(self, P: PyramidFeatures) -> list[RawLevel]:
        out = []
        for head, feat, s in zip((self.p3, self.p4, self.p5), P, STRIDES):
            if feat.shape[1] != self.width:
                raise ContractError(f"head: expected width {self.width}, got {feat.shape[1]}")
            cls, box = head(feat)
            out.append(RawLevel(cls, box, s))
        return out


# -- decoding ---------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return T._sigmoid_np(np.asarray(x, dtype=np.float64))


def decode(cls_logits: np.ndarray, box_ltrb: np.ndarray, stride: int, score_thr: float,
           image_size: tuple[int, int] | None = None, image_id: str = "") -> list[Detection]:
    """Decode one image's level outputs (K×H×W logits, 4×H×W ltrb) into detections.

    Emission order is cell-major (row, column) then class. ``image_size`` is
    ``(W, H)``; it defaults to the grid extent times the stride.
    """
    K, H, W = cls_logits.shape
    img_w, img_h = image_size or (W * stride, H * stride)
    scores = _sigmoid(cls_logits).transpose(1, 2, 0)  # H×W×K
    ii, jj, kk = np.nonzero(scores >= score_thr)
    if ii.size == 0:
        return []
    cx = (jj + 0.5) * stride
    cy = (ii + 0.5) * stride
    l, t, r, b = (np.asarray(box_ltrb[c], dtype=np.float64)[ii, jj] for c in range(4))
    x1 = np.clip(cx - l * stride, 0, img_w)
    y1 = np.clip(cy - t * stride, 0, img_h)
    x2 = np.clip(cx + r * stride, 0, img_w)
    y2 = np.clip(cy + b * stride, 0, img_h)
    sc = scores[ii, jj, kk]
    return [Detection((float(x1[n]), float(y1[n]), float(x2[n]), float(y2[n])), float(sc[n]), int(kk[n]), image_id)
            for n in range(ii.size)]


def decode_levels(levels: Sequence[RawLevel], index: int, score_thr: float,
                  image_size: tuple[int, int] | None = None, image_id: str = "") -> list[Detection]:
    if image_size is None:
        lv = levels[0]
        image_size = (lv.cls_logits.shape[3] * lv.stride, lv.cls_logits.shape[2] * lv.stride)
    dets: list[Detection] = []
    for lv in levels:
        dets.extend(decode(lv.cls_logits.data[index], lv.box_ltrb.data[index], lv.stride, score_thr, image_size, image_id))
    return dets


def nms(dets: Sequence[Detection], iou_thr: float = 0.45, class_aware: bool = True) -> list[Detection]:
    """Greedy suppression; order is score desc, then class id, then input position."""
    n = len(dets)
    if n == 0:
        return []
    scores = np.array([d.score for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets])
    order = np.lexsort((np.arange(n), classes, -scores))
    boxes = np.array([d.box for d in dets], dtype=np.float64)[order]
    cls_sorted = classes[order]
    alive = np.ones(n, dtype=bool)
    keep = []
    for i in range(n):
        if not alive[i]:
            continue
        keep.append(order[i])
        rest = np.flatnonzero(alive[i + 1 :]) + i + 1
        if rest.size == 0:
            break
        if class_aware:
            rest = rest[cls_sorted[rest] == cls_sorted[i]]
        ious = iou_matrix(boxes[i : i + 1], boxes[rest])[0]
        alive[rest[ious > iou_thr]] = False
    return [dets[k] for k in keep]


# -- target assignment -------------------------------------------------------

@dataclass
class LevelAssignment:
    positive: np.ndarray  # H×W bool
    gt_index: np.ndarray  # H×W int, -1 where negative
    ltrb: np.ndarray  # H×W×4 regression targets in stride units
    class_id: np.ndarray  # H×W int, -1 where negative
    stride: int

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def assign_targets(gt_boxes: np.ndarray, gt_classes: np.ndarray, level_shapes: Sequence[tuple[int, int]],
                   strides: Sequence[int] = STRIDES,
                   scale_ranges: Sequence[tuple[float, float]] = SCALE_RANGES) -> list[LevelAssignment]:
    """Center-inside plus scale-range assignment; contested cells go to the smallest box."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    areas = (gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1])
    out = []
    for (H, W), s, (lo, hi) in zip(level_shapes, strides, scale_ranges):
        gt_index = np.full((H, W), -1, dtype=np.int64)
        ltrb = np.zeros((H, W, 4))
        if len(gt_boxes):
            cy = (np.arange(H) + 0.5)[:, None, None] * s
            cx = (np.arange(W) + 0.5)[None, :, None] * s
            l = cx - gt_boxes[:, 0]
            t = cy - gt_boxes[:, 1]
            r = gt_boxes[:, 2] - cx
            b = gt_boxes[:, 3] - cy
            dist = np.stack(np.broadcast_arrays(l, t, r, b), axis=-1)  # H×W×G×4
            inside = dist.min(axis=-1) > 0
            reach = dist.max(axis=-1)
            ok = inside & (reach > lo) & (reach <= hi)
            cand = np.where(ok, areas[None, None, :], np.inf)
            best = cand.argmin(axis=-1)
            pos = np.isfinite(cand.min(axis=-1))
            gt_index[pos] = best[pos]
            hh, ww = np.nonzero(pos)
            ltrb[hh, ww] = dist[hh, ww, best[pos]] / s
        positive = gt_index >= 0
        cls = np.where(positive, gt_classes[np.clip(gt_index, 0, None)] if len(gt_classes) else -1, -1)
        out.append(LevelAssignment(positive, gt_index, ltrb, cls, s))
    return out


# -- loss --------------------------------------------------------------------

def ciou(pred: Tensor, target: Tensor, eps: float = 1e-7) -> Tensor:
    """Complete IoU between row-aligned (P, 4) xyxy boxes."""
    px1, py1, px2, py2 = (pred[:, i] for i in range(4))
    tx1, ty1, tx2, ty2 = (target[:, i] for i in range(4))
    pw, ph = px2 - px1, py2 - py1
    tw, th = tx2 - tx1, ty2 - ty1
    iw = T.clamp_min(T.minimum(px2, tx2) - T.maximum(px1, tx1), 0.0)
    ih = T.clamp_min(T.minimum(py2, ty2) - T.maximum(py1, ty1), 0.0)
    inter = iw * ih
    union = pw * ph + tw * th - inter + eps
    iou = inter / union
    cw = T.maximum(px2, tx2) - T.minimum(px1, tx1)
    ch = T.maximum(py2, ty2) - T.minimum(py1, ty1)
    c2 = cw * cw + ch * ch + eps
    rho2 = ((px1 + px2 - tx1 - tx2) ** 2 + (py1 + py2 - ty1 - ty2) ** 2) * 0.25
    v = (T.arctan(tw / (th + eps)) - T.arctan(pw / (ph + eps))) ** 2 * (4.0 / math.pi**2)
    alpha = v / (v - iou + (1.0 + eps))
    return iou - rho2 / c2 - alpha * v


@dataclass
class LossTerms:
    total: Tensor
    cls: Tensor
    box: Tensor
    num_positive: int


def detection_loss(levels: Sequence[RawLevel], assignments: Sequence[Sequence[LevelAssignment]],
                   gt_boxes: Sequence[np.ndarray], cls_weight: float = 1.0, box_weight: float = 5.0) -> LossTerms:
    """BCE over every cell and class plus ``1 - CIoU`` over positive cells.

    ``assignments[n][level]`` and ``gt_boxes[n]`` describe image ``n`` of the batch.
    Both terms are sums divided by ``max(1, #positives)``.
    """
    dtype = levels[0].cls_logits.dtype
    cls_sum = None
    box_parts = []
    npos = 0
    for li, lv in enumerate(levels):
        N, K, H, W = lv.cls_logits.shape
        target = np.zeros((N, K, H, W), dtype=dtype)
        n_idx, h_idx, w_idx, gt_rows = [], [], [], []
        for n in range(N):
            a = assignments[n][li]
            hh, ww = np.nonzero(a.positive)
            target[n, a.class_id[hh, ww], hh, ww] = 1.0
            n_idx.append(np.full(hh.size, n))
            h_idx.append(hh)
            w_idx.append(ww)
            gt_rows.append(np.asarray(gt_boxes[n], dtype=np.float64).reshape(-1, 4)[a.gt_index[hh, ww]])
        term = T.bce_with_logits(lv.cls_logits, target).sum()
        cls_sum = term if cls_sum is None else cls_sum + term
        n_idx = np.concatenate(n_idx)
        if n_idx.size == 0:
            continue
        npos += n_idx.size
        h_idx = np.concatenate(h_idx)
        w_idx = np.concatenate(w_idx)
        s = lv.stride
        ltrb = lv.box_ltrb.transpose(0, 2, 3, 1)[n_idx, h_idx, w_idx]  # P×4
        cx = ((w_idx + 0.5) * s)[:, None]
        cy = ((h_idx + 0.5) * s)[:, None]
        centers = np.concatenate([cx, cy, cx, cy], axis=1).astype(dtype)
        sign = np.array([-s, -s, s, s], dtype=dtype)
        pred = ltrb * sign + centers
        gt = T.Tensor(np.concatenate(gt_rows).astype(dtype))
        box_parts.append((1.0 - ciou(pred, gt)).sum())
    denom = float(max(1, npos))
    cls_term = cls_sum * (1.0 / denom)
    if box_parts:
        box_sum = box_parts[0]
        for p in box_parts[1:]:
            box_sum = box_sum + p
        box_term = box_sum * (1.0 / denom)
    else:
        box_term = T.Tensor(np.zeros((), dtype=dtype))
    total = cls_term * cls_weight + box_term * box_weight
    return LossTerms(total, cls_term, box_term, npos)
