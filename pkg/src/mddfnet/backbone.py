"""State-space backbone: stem, VSS stages, clue-merge downsampling, fusion tail."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .ddf import DDF, DynamicFilter, EMAttention
from .errors import ConfigurationError, ContractError
from .nn import Conv, Module, Norm, Sequential
from .scan import selective_scan
from .tensor import Tensor

PRE_TAILS = ("none", "ema", "df")


@dataclass
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    stage_depths: list[int] = field(default_factory=lambda: [1, 2, 4, 2])
    ssm_state_size: int = 16
    ddf_out_channels: int = 256
    use_mamba: bool = True
    use_ddf: bool = True
    pre_tail: str = "none"
    ssm_expand: int = 2
    ema_groups: int = 8
    df_experts: int = 4

    def __post_init__(self):
        self.stage_channels = list(self.stage_channels)
        self.stage_depths = list(self.stage_depths)
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            raise ConfigurationError("backbone needs exactly 4 stage widths and 4 depths")
        for a, b in zip(self.stage_channels, self.stage_channels[1:]):
            if b != 2 * a:
                raise ConfigurationError(f"stage_channels must double across merges, got {self.stage_channels}")
        if min(self.stage_depths) < 1:
            raise ConfigurationError(f"stage depths must be ≥ 1, got {self.stage_depths}")
        if self.pre_tail not in PRE_TAILS:
            raise ConfigurationError(f"pre_tail must be one of {PRE_TAILS}, got {self.pre_tail!r}")
        if self.ddf_out_channels % 4:
            raise ConfigurationError("ddf_out_channels must be divisible by 4")

    def to_dict(self) -> dict:
        return asdict(self)


def tiny_config(**overrides) -> BackboneConfig:
    base = dict(stem_channels=8, stage_channels=[8, 16, 32, 64], stage_depths=[1, 1, 1, 1],
                ssm_state_size=4, ddf_out_channels=64, ema_groups=2)
    base.update(overrides)
    return BackboneConfig(**base)


def full_config(**overrides) -> BackboneConfig:
    return BackboneConfig(**overrides)


class PyramidFeatures(NamedTuple):
    C3: Tensor
    C4: Tensor
    C5: Tensor


def traversal_orders(H: int, W: int) -> np.ndarray:
    """Row-major, reversed row-major, column-major, reversed column-major.

    Row ``k`` lists, for each sequence position, the row-major flat index
    ``h*W + w`` of the pixel visited there.
    """
    rows = np.arange(H * W)
    cols = rows.reshape(H, W).T.reshape(-1)
    return np.stack([rows, rows[::-1], cols, cols[::-1]])


DELTA_FLOOR = 1e-6


class SS2D(Module):
    """Four-direction selective scan over a d×H×W map.

    ``A_log`` and ``D`` are shared; each direction has its own projection of
    the input to a low-rank step size, ``B`` and ``C``.
    """

    n_dirs = 4

    def __init__(self, d: int, state_size: int, dt_rank: int | None = None,
                 dt_init: float = 0.01, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        K = self.n_dirs
        self.d, self.N = d, state_size
        self.dt_rank = dt_rank or max(1, math.ceil(d / 16))
        r = self.dt_rank
        self.x_proj = Conv(d, K * (r + 2 * state_size), 1, bias=False, rng=rng)
        self.dt_proj = Conv(K * r, K * d, 1, groups=K, rng=rng)
        self.dt_proj.bias.data[:] = math.log(math.expm1(dt_init))
        self.A_log = T.parameter(np.log(np.tile(np.arange(1, state_size + 1, dtype=np.float64), (d, 1))))
        self.D = T.parameter(np.ones(d))

    def ssm_inputs(self, x: Tensor):
        """Per-direction ``(delta, B, C)`` in image layout: (N, K, d|N, L)."""
        n, d, H, W = x.shape
        K, r, Ns, L = self.n_dirs, self.dt_rank, self.N, H * W
        proj = self.x_proj(x).reshape(n, K, r + 2 * Ns, L)
        dt_low, B, C = T.split(proj, [r, Ns, Ns], axis=2)
        dt = self.dt_proj(dt_low.reshape(n, K * r, H, W))
        # floor keeps delta > 0 where f32 softplus underflows
        delta = T.clamp_min(T.softplus(dt), DELTA_FLOOR).reshape(n, K, d, L)
        return delta, B, C

    def forward(self, x: Tensor) -> Tensor:
        n, d, H, W = x.shape
        if d != self.d:
            raise ContractError(f"SS2D: expected {self.d} channels, got {d}")
        K, L = self.n_dirs, H * W
        perms = traversal_orders(H, W)
        inv = np.argsort(perms, axis=1)
        delta, B, C = self.ssm_inputs(x)
        flat = x.reshape(n, 1, d, L)
        u = T.concat([flat] * K, axis=1)

        def seq(t):
            return T.take_sequences(t, perms).transpose(0, 1, 3, 2)

        A = -T.exp(self.A_log)
        y = selective_scan(seq(u), seq(delta), A, seq(B), seq(C), self.D)
        y = T.take_sequences(y.transpose(0, 1, 3, 2), inv)
        return y.sum(axis=1).reshape(n, d, H, W)


class VSSBlock(Module):
    """``x + out_proj(post_norm(ss2d(silu(dw_conv(main)))) * silu(gate))``."""

    def __init__(self, channels: int, state_size: int, expand: int = 2, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        d = expand * channels
        self.channels, self.d = channels, d
        self.pre_norm = Norm(channels)
        self.in_proj = Conv(channels, 2 * d, 1, rng=rng)
        self.dw_conv = Conv(d, d, 3, groups=d, rng=rng)
        self.ssm = SS2D(d, state_size, rng=rng)
        self.post_norm = Norm(d)
        self.out_proj = Conv(d, channels, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ContractError(f"VSSBlock: expected {self.channels} channels, got {x.shape[1]}")
        main, gate = T.split(self.in_proj(self.pre_norm(x)), [self.d, self.d], axis=1)
        z = self.post_norm(self.ssm(T.silu(self.dw_conv(main))))
        return x + self.out_proj(z * T.silu(gate))


class ConvResBlock(Module):
    """Baseline stand-in for a VSS block: two 3×3 conv+SiLU with a residual."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        self.cv1 = Conv(channels, channels, 3, act=True, rng=rng)
        self.cv2 = Conv(channels, channels, 3, act=True, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.cv2(self.cv1(x))


class SimpleStem(Module):
    def __init__(self, c_mid: int, c_out: int, rng: np.random.Generator | None = None):
        self.conv1 = Conv(3, c_mid, 3, stride=2, padding=1, act=True, rng=rng)
        self.conv2 = Conv(c_mid, c_out, 3, stride=2, padding=1, rng=rng)

    def forward(self, image: Tensor) -> Tensor:
        H, W = image.shape[-2:]
        if H % 4 or W % 4:
            raise ContractError(f"SimpleStem: input {H}×{W} not divisible by 4")
        return self.conv2(self.conv1(image))


def space_to_depth(x: Tensor) -> Tensor:
    """Pixel (2i+di, 2j+dj) of channel c moves to channel (2*di+dj)*C + c at (i, j)."""
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ContractError(f"space_to_depth: spatial dims {H}×{W} must be even")
    y = x.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 3, 5, 1, 2, 4)
    return y.reshape(N, 4 * C, H // 2, W // 2)


class VisionClueMerge(Module):
    def __init__(self, c_in: int, c_out: int | None = None, rng: np.random.Generator | None = None):
        self.proj = Conv(4 * c_in, c_out or 2 * c_in, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(space_to_depth(x))


class SPPF(Module):
    """Spatial pyramid pooling tail (three chained 5×5 max pools)."""

    def __init__(self, c_in: int, c_out: int, k: int = 5, rng: np.random.Generator | None = None):
        hidden = c_in // 2
        self.k = k
        self.cv1 = Conv(c_in, hidden, 1, act=True, rng=rng)
        self.cv2 = Conv(4 * hidden, c_out, 1, act=True, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = [self.cv1(x)]
        for _ in range(3):
            y.append(T.max_pool2d(y[-1], self.k, 1, self.k // 2))
        return self.cv2(T.concat(y, axis=1))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.stage_channels

        def stage(c, depth):
            if cfg.use_mamba:
                return Sequential(*[VSSBlock(c, cfg.ssm_state_size, cfg.ssm_expand, rng=rng) for _ in range(depth)])
            return Sequential(*[ConvResBlock(c, rng=rng) for _ in range(depth)])

        self.stem = SimpleStem(cfg.stem_channels, c1, rng=rng)
        self.stage1 = stage(c1, cfg.stage_depths[0])
        self.merge1 = VisionClueMerge(c1, c2, rng=rng)
        self.stage2 = stage(c2, cfg.stage_depths[1])
        self.merge2 = VisionClueMerge(c2, c3, rng=rng)
        self.stage3 = stage(c3, cfg.stage_depths[2])
        self.merge3 = VisionClueMerge(c3, c4, rng=rng)
        self.stage4 = stage(c4, cfg.stage_depths[3])
        if cfg.pre_tail == "ema":
            self.pre_tail = EMAttention(c4, cfg.ema_groups, rng=rng)
        elif cfg.pre_tail == "df":
            self.pre_tail = DynamicFilter(c4, cfg.df_experts, rng=rng)
        else:
            self.pre_tail = None
        if cfg.use_ddf:
            self.tail = DDF(c4, cfg.ddf_out_channels, ema_groups=cfg.ema_groups, n_experts=cfg.df_experts, rng=rng)
        else:
            self.tail = SPPF(c4, cfg.ddf_out_channels, rng=rng)

    @property
    def out_channels(self) -> tuple[int, int, int]:
        return self.cfg.stage_channels[1], self.cfg.stage_channels[2], self.cfg.ddf_out_channels

    def forward(self, image: Tensor) -> PyramidFeatures:
        H, W = image.shape[-2:]
        if image.ndim != 4 or image.shape[1] != 3:
            raise ContractError(f"backbone expects N×3×H×W images, got {image.shape}")
        if H % 32 or W % 32:
            raise ContractError(f"backbone input {H}×{W} must be divisible by 32")
        x = self.stage1(self.stem(image))
        c3 = self.stage2(self.merge1(x))
        c4 = self.stage3(self.merge2(c3))
        x = self.stage4(self.merge3(c4))
        if self.pre_tail is not None:
            x = self.pre_tail(x)
        return PyramidFeatures(c3, c4, self.tail(x))
