"""Full detector assembly and the six ablation variants."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, full_config, tiny_config
from .boxes import Detection
from .detect import Head, Neck, RawLevel, decode_levels, nms
from .errors import ConfigurationError
from .nn import Module
from .tensor import Tensor

# variant -> (use_mamba, use_ddf, pre_tail)
VARIANTS = {
    "baseline": (False, False, "none"),
    "ema": (False, False, "ema"),
    "df": (False, False, "df"),
    "ddf": (False, True, "none"),
    "mamba": (True, False, "none"),
    "full": (True, True, "none"),
}


class Detector(Module):
    def __init__(self, cfg: BackboneConfig, num_classes: int, neck_width: int = 32,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.num_classes = num_classes
        self.backbone = Backbone(cfg, rng=rng)
        self.neck = Neck(self.backbone.out_channels, neck_width, rng=rng)
        self.head = Head(neck_width, num_classes, rng=rng)

    def forward(self, images: Tensor) -> list[RawLevel]:
        return self.head(self.neck(self.backbone(images)))

    def predict(self, images, score_thr: float = 0.25, iou_thr: float = 0.45,
                image_ids=None, max_det: int = 300) -> list[list[Detection]]:
        images = T.as_tensor(images, dtype=self.dtype)
        with T.no_grad():
            levels = self(images)
        out = []
        for n in range(images.shape[0]):
            iid = "" if image_ids is None else str(image_ids[n])
            dets = nms(decode_levels(levels, n, score_thr, image_id=iid), iou_thr)
            out.append(dets[:max_det])
        return out

    @property
    def dtype(self):
        return self.backbone.stem.conv1.weight.dtype

    def describe(self) -> dict:
        return {"backbone": self.cfg.to_dict(), "num_classes": self.num_classes, "neck_width": self.neck.width}


def variant_config(variant: str, base: BackboneConfig) -> BackboneConfig:
    try:
        use_mamba, use_ddf, pre_tail = VARIANTS[variant]
    except KeyError:
        raise ConfigurationError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}") from None
    return replace(base, use_mamba=use_mamba, use_ddf=use_ddf, pre_tail=pre_tail)


def build_variant(variant: str, base: BackboneConfig | str = "tiny", num_classes: int = 3,
                  neck_width: int = 32, seed: int = 0) -> Detector:
    if isinstance(base, str):
        base = {"tiny": tiny_config, "full": full_config}[base]()
    return Detector(variant_config(variant, base), num_classes, neck_width, rng=np.random.default_rng(seed))
