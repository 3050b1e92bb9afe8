"""Dynamic Dual Fusion: EMA attention on one projected path, a dynamic filter on the other."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .nn import Conv, Module, Norm, kaiming_uniform
from .tensor import Tensor


class EMAttention(Module):
    """Efficient multi-scale attention over ``groups`` channel groups.

    Each group is gated along H and W by a shared 1×1 conv over the two
    directional pooling strips, and a 3×3 branch runs in parallel. The two
    branches weight each other through softmax-normalized channel
    descriptors, and the summed map gates the group input.
    """

    def __init__(self, channels: int, groups: int, rng: np.random.Generator | None = None):
        if groups < 1 or channels % groups:
            raise ConfigurationError(f"EMA: groups={groups} must divide channels={channels}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels, self.groups = channels, groups
        c = channels // groups
        self.conv1x1 = Conv(c, c, 1, rng=rng)
        self.conv3x3 = Conv(c, c, 3, rng=rng)
        self.norm = Norm(c, kind="group", groups=c)

    def forward(self, x: Tensor, return_gate: bool = False):
        N, C, H, W = x.shape
        if C != self.channels:
            raise ContractError(f"EMA: expected {self.channels} channels, got {C}")
        G, c = self.groups, C // self.groups
        g = x.reshape(N * G, c, H, W)

        along_h = T.pool(g, "avg_w")  # NG×c×H×1
        along_w = T.pool(g, "avg_h").transpose(0, 1, 3, 2)  # NG×c×W×1
        hw = self.conv1x1(T.concat([along_h, along_w], axis=2))
        gh, gw = T.split(hw, [H, W], axis=2)
        x1 = self.norm(g * T.sigmoid(gh) * T.sigmoid(gw.transpose(0, 1, 3, 2)))
        x2 = self.conv3x3(g)

        w1 = T.softmax(T.pool(x1, "global_avg").reshape(N * G, 1, c), axis=-1)
        w2 = T.softmax(T.pool(x2, "global_avg").reshape(N * G, 1, c), axis=-1)
        cross = w1 @ x2.reshape(N * G, c, H * W) + w2 @ x1.reshape(N * G, c, H * W)
        gate = T.sigmoid(cross.reshape(N * G, 1, H, W))
        out = (g * gate).reshape(N, C, H, W)
        return (out, gate) if return_gate else out


class DynamicFilter(Module):
    """Depthwise 3×3 conv whose kernel is a per-image softmax blend of ``n_experts`` kernels."""

    def __init__(self, channels: int, n_experts: int = 4, rng: np.random.Generator | None = None):
        if n_experts < 2:
            raise ConfigurationError(f"DynamicFilter needs at least 2 experts, got {n_experts}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels, self.n_experts = channels, n_experts
        self.experts = T.parameter(kaiming_uniform(rng, (n_experts, channels, 1, 3, 3), 9))
        self.predictor = Conv(channels, n_experts, 1, rng=rng)
        self.pointwise = Conv(channels, channels, 1, rng=rng)

    def mixing_weights(self, x: Tensor) -> Tensor:
        logits = self.predictor(T.pool(x, "global_avg"))
        return T.softmax(logits.reshape(x.shape[0], self.n_experts), axis=1)

    def blended_kernels(self, x: Tensor) -> Tensor:
        alpha = self.mixing_weights(x)
        K, C = self.n_experts, self.channels
        return (alpha @ self.experts.reshape(K, C * 9)).reshape(x.shape[0], C, 1, 3, 3)

    def forward(self, x: Tensor) -> Tensor:
        N, C = x.shape[:2]
        if C != self.channels:
            raise ContractError(f"DynamicFilter: expected {self.channels} channels, got {C}")
        kernels = self.blended_kernels(x)
        per_image = [T.conv2d(x[n : n + 1], kernels[n], padding=1, groups=C) for n in range(N)]
        y = per_image[0] if N == 1 else T.concat(per_image, axis=0)
        return self.pointwise(T.silu(y))


class DDF(Module):
    """``phi(concat(psi3(F1), psi5(F1), psi3(F2), psi5(F2)))`` with F1 = EMA(proj1 F), F2 = DF(proj2 F)."""

    def __init__(self, c_in: int, c_out: int, c_mid: int | None = None, ema_groups: int = 8,
                 n_experts: int = 4, rng: np.random.Generator | None = None):
        if c_out % 4:
            raise ConfigurationError(f"DDF: c_out={c_out} must be divisible by 4")
        rng = rng if rng is not None else np.random.default_rng(0)
        c_mid = c_mid or c_in // 2
        q = c_out // 4
        self.c_in, self.c_mid, self.c_out = c_in, c_mid, c_out
        self.proj1 = Conv(c_in, c_mid, 1, rng=rng)
        self.proj2 = Conv(c_in, c_mid, 1, rng=rng)
        self.ema = EMAttention(c_mid, ema_groups, rng=rng)
        self.df = DynamicFilter(c_mid, n_experts, rng=rng)
        self.psi3_1 = Conv(c_mid, q, 3, act=True, rng=rng)
        self.psi5_1 = Conv(c_mid, q, 5, act=True, rng=rng)
        self.psi3_2 = Conv(c_mid, q, 3, act=True, rng=rng)
        self.psi5_2 = Conv(c_mid, q, 5, act=True, rng=rng)
        widths = [m.c_out for m in (self.psi3_1, self.psi5_1, self.psi3_2, self.psi5_2)]
        if sum(widths) != c_out:
            raise ConfigurationError(f"DDF: branch widths {widths} do not sum to {c_out}")
        self.phi = Conv(c_out, c_out, 1, act=True, rng=rng)

    def forward(self, F: Tensor) -> Tensor:
        if F.shape[1] != self.c_in:
            raise ContractError(f"DDF: expected {self.c_in} input channels, got {F.shape[1]}")
        f1 = self.ema(self.proj1(F))
        f2 = self.df(self.proj2(F))
        parts = [self.psi3_1(f1), self.psi5_1(f1), self.psi3_2(f2), self.psi5_2(f2)]
        return self.phi(T.concat(parts, axis=1))
