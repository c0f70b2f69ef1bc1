"""Residual (ResNet-18/50) and inverted-bottleneck (MobileNetV2) feature extractors.

Every backbone returns two maps per forward pass: a low-level tap taken from an
early stage and the high-level output of the final stage. The final stages are
dilated rather than strided once the configured output stride is reached.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .layers import (
    Activation,
    ConvSpec,
    Layer,
    MaxPool2d,
    Sequential,
    conv_bn_act,
)

KINDS = ("resnet18", "resnet50", "mobilenetv2")


def scale_channels(channels: int, multiplier: float) -> int:
    """Width-multiplier scaling: round to nearest, never below one channel."""
    return max(1, int(round(channels * multiplier)))


def dsc_cost_estimate(width_mult: float, res_mult: float, d_in: int, d_out: int, d_f: int) -> float:
    """Cost of one depthwise-separable convolution under width/resolution multipliers.

    ``width*D_I * (res*D_F)^2 + width*D_I * width*D_O * (res*D_F)^2``.

    The depthwise term carries no kernel-area factor ``D_K^2``; the classic
    MobileNet count would multiply the first term by it.
    """
    for name, v in (("width_mult", width_mult), ("res_mult", res_mult)):
        if not 0.0 < v <= 1.0:
            raise ConfigurationError(f"{name} must lie in (0, 1], got {v}")
    if min(d_in, d_out, d_f) <= 0:
        raise ConfigurationError("channel counts and spatial extent must be positive")
    area = (res_mult * d_f) * (res_mult * d_f)
    return width_mult * d_in * area + width_mult * d_in * width_mult * d_out * area


# ---------------------------------------------------------------------------
# residual blocks


class ResidualBlock(Layer):
    """``relu(inner(x) + shortcut(x))``.

    ``inner`` is any layer producing the residual branch; ``shortcut`` is
    ``None`` for identity or a projection layer.
    """

    def __init__(self, inner: Layer, shortcut: Layer | None = None):
        self.inner = inner
        self.shortcut = shortcut
        self.relu = Activation("relu")

    def children(self):
        kids = [("inner", self.inner)]
        if self.shortcut is not None:
            kids.append(("shortcut", self.shortcut))
        return kids + [("relu", self.relu)]

    def forward(self, x, train=False):
        h = self.inner.forward(x, train)
        s = x if self.shortcut is None else self.shortcut.forward(x, train)
        if h.shape != s.shape:
            raise ConfigurationError(f"residual branch {h.shape} does not match shortcut {s.shape}")
        return self.relu.forward(h + s, train)

    def backward(self, dout):
        d = self.relu.backward(dout)
        dx = self.inner.backward(d)
        if self.shortcut is None:
            return dx + d
        return dx + self.shortcut.backward(d)


def _projection(c_in: int, c_out: int, stride: int, rng) -> Sequential:
    return conv_bn_act(ConvSpec(c_in, c_out, 1, stride=stride), rng, act=None)


def basic_block(c_in: int, c_out: int, stride: int, dilation: int, rng) -> ResidualBlock:
    """Two 3x3 conv-BN layers (ResNet-18 style)."""
    inner = Sequential(
        conv_bn_act(ConvSpec(c_in, c_out, 3, stride=stride, dilation=dilation), rng),
        conv_bn_act(ConvSpec(c_out, c_out, 3, dilation=dilation), rng, act=None),
        names=["conv1", "conv2"],
    )
    shortcut = _projection(c_in, c_out, stride, rng) if stride > 1 or c_in != c_out else None
    return ResidualBlock(inner, shortcut)


def bottleneck_block(c_in: int, c_mid: int, stride: int, dilation: int, rng, expansion: int = 4) -> ResidualBlock:
    """1x1 reduce, 3x3, 1x1 expand (ResNet-50 style)."""
    c_out = c_mid * expansion
    inner = Sequential(
        conv_bn_act(ConvSpec(c_in, c_mid, 1), rng),
        conv_bn_act(ConvSpec(c_mid, c_mid, 3, stride=stride, dilation=dilation), rng),
        conv_bn_act(ConvSpec(c_mid, c_out, 1), rng, act=None),
        names=["conv1", "conv2", "conv3"],
    )
    shortcut = _projection(c_in, c_out, stride, rng) if stride > 1 or c_in != c_out else None
    return ResidualBlock(inner, shortcut)


class InvertedBottleneck(Layer):
    """Expand 1x1 + ReLU6 -> depthwise 3x3 + ReLU6 -> linear 1x1 projection.

    The input is added to the projection output only when the block keeps both
    the spatial extent (stride 1) and the channel count.
    """

    def __init__(self, c_in: int, c_out: int, stride: int, expansion: int, rng,
                 dilation: int = 1, residual_add: bool | None = None):
        if expansion < 1:
            raise ConfigurationError(f"expansion ratio must be >= 1, got {expansion}")
        hidden = c_in * expansion
        can_add = stride == 1 and c_in == c_out
        if residual_add is None:
            residual_add = can_add
        elif residual_add and not can_add:
            raise ConfigurationError("residual_add requires stride 1 and equal channel counts")
        self.residual_add = residual_add
        self.path = Sequential(
            conv_bn_act(ConvSpec(c_in, hidden, 1), rng, act="relu6"),
            conv_bn_act(ConvSpec(hidden, hidden, 3, stride=stride, dilation=dilation, groups=hidden), rng, act="relu6"),
            conv_bn_act(ConvSpec(hidden, c_out, 1), rng, act=None),
            names=["expand", "depthwise", "project"],
        )

    def children(self):
        return [("path", self.path)]

    def forward(self, x, train=False):
        out = self.path.forward(x, train)
        if self.residual_add:
            if out.shape != x.shape:
                raise ConfigurationError(f"cannot add input {x.shape} to output {out.shape}")
            out = out + x
        return out

    def backward(self, dout):
        dx = self.path.backward(dout)
        if self.residual_add:
            dx = dx + dout
        return dx


# ---------------------------------------------------------------------------
# full extractors


@dataclass
class BackboneConfig:
    kind: str = "resnet18"
    width_multiplier: float = 1.0
    resolution_multiplier: float = 1.0
    low_level_tap: int | str | None = None   # stage index or name; None = first stride-4 stage
    reduced_depth: bool = False
    output_stride: int = 16
    in_channels: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown backbone kind {self.kind!r}; choose from {KINDS}")
        for name in ("width_multiplier", "resolution_multiplier"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1], got {v}")
        if self.output_stride not in (8, 16, 32):
            raise ConfigurationError(f"output_stride must be 8, 16 or 32, got {self.output_stride}")


@dataclass
class StageInfo:
    name: str
    stride: int      # cumulative stride at the stage output
    channels: int


class FeatureExtractor(Layer):
    """A chain of named stages (the first is the stem); emits ``(low, high)``.

    ``low`` is the output of the stage selected by ``tap``, ``high`` the output
    of the last stage.
    """

    def __init__(self, cfg: BackboneConfig, stages: list[Layer], info: list[StageInfo], tap: int | str | None):
        self.cfg = cfg
        self.stages = stages
        self.info = info
        self.tap = self._resolve_tap(tap)

    def _resolve_tap(self, tap: int | str | None) -> int:
        names = [i.name for i in self.info]
        if tap is None:
            return next(i for i, s in enumerate(self.info) if s.stride == 4)
        if isinstance(tap, str):
            if tap not in names:
                raise ConfigurationError(f"low_level_tap {tap!r} is not one of {names}")
            return names.index(tap)
        if not 0 <= tap < len(self.stages) - 1:
            raise ConfigurationError(f"low_level_tap {tap} outside 0..{len(self.stages) - 2}")
        return tap

    @property
    def low_channels(self) -> int:
        return self.info[self.tap].channels

    @property
    def high_channels(self) -> int:
        return self.info[-1].channels

    @property
    def low_stride(self) -> int:
        return self.info[self.tap].stride

    @property
    def high_stride(self) -> int:
        return self.info[-1].stride

    def children(self):
        return [(i.name, s) for i, s in zip(self.info, self.stages)]

    def forward(self, x, train=False):
        h = x
        low = None
        for i, stage in enumerate(self.stages):
            h = stage.forward(h, train)
            if i == self.tap:
                low = h
        return low, h

    def backward(self, dlow, dhigh):
        d = dhigh
        for i in range(len(self.stages) - 1, -1, -1):
            if i == self.tap:
                d = d + dlow
            d = self.stages[i].backward(d)
        return d


def _stage_strides(strides: list[int], base: int, output_stride: int) -> list[tuple[int, int]]:
    """Convert nominal stage strides to (stride, dilation) honoring the output stride."""
    out = []
    current, dilation = base, 1
    for s in strides:
        if current * s > output_stride:
            out.append((1, dilation * s))
            dilation *= s
        else:
            out.append((s, dilation))
            current *= s
    return out


def _build_resnet(cfg: BackboneConfig, rng) -> FeatureExtractor:
    w = cfg.width_multiplier
    if cfg.kind == "resnet18":
        repeats, block, expansion = [2, 2, 2, 2], "basic", 1
    else:
        repeats, block, expansion = [3, 4, 6, 3], "bottleneck", 4
    if cfg.reduced_depth:
        repeats = [max(1, r // 2) for r in repeats]
    widths = [scale_channels(c, w) for c in (64, 128, 256, 512)]
    stem_c = scale_channels(64, w)
    stages = [conv_bn_act(ConvSpec(cfg.in_channels, stem_c, 7, stride=2), rng)]
    info = [StageInfo("conv1", 2, stem_c)]
    geometry = _stage_strides([1, 2, 2, 2], 4, cfg.output_stride)
    c_in, cum = stem_c, 4
    for idx, (c, n, (stride, dil)) in enumerate(zip(widths, repeats, geometry)):
        # the stride-2 max pool opens the first residual stage
        blocks: list[Layer] = [MaxPool2d(3, 2, 1)] if idx == 0 else []
        for b in range(n):
            s = stride if b == 0 else 1
            if block == "basic":
                blocks.append(basic_block(c_in, c, s, dil, rng))
                c_in = c
            else:
                blocks.append(bottleneck_block(c_in, c, s, dil, rng, expansion))
                c_in = c * expansion
        cum *= stride
        stages.append(Sequential(*blocks))
        info.append(StageInfo(f"layer{idx + 1}", cum, c_in))
    return FeatureExtractor(cfg, stages, info, cfg.low_level_tap)


# (expansion t, channels c, repeats n, stride s)
MOBILENETV2_SETTINGS = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
]


def _build_mobilenet(cfg: BackboneConfig, rng) -> FeatureExtractor:
    w = cfg.width_multiplier
    settings = MOBILENETV2_SETTINGS
    if cfg.reduced_depth:
        settings = [(t, c, max(1, n // 2), s) for t, c, n, s in settings]
    stem_c = scale_channels(32, w)
    stages: list[Layer] = [conv_bn_act(ConvSpec(cfg.in_channels, stem_c, 3, stride=2), rng, act="relu6")]
    info = [StageInfo("conv1", 2, stem_c)]
    geometry = _stage_strides([s for *_, s in settings], 2, cfg.output_stride)
    c_in, cum = stem_c, 2
    for idx, ((t, c, n, _), (stride, dil)) in enumerate(zip(settings, geometry)):
        c_out = scale_channels(c, w)
        blocks = []
        for b in range(n):
            s = stride if b == 0 else 1
            blocks.append(InvertedBottleneck(c_in, c_out, s, t, rng, dilation=dil))
            c_in = c_out
        cum *= stride
        stages.append(Sequential(*blocks))
        info.append(StageInfo(f"block{idx + 1}", cum, c_out))
    return FeatureExtractor(cfg, stages, info, cfg.low_level_tap)


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> FeatureExtractor:
    """Build a feature extractor with fan-in-scaled Gaussian conv weights."""
    rng = np.random.default_rng(seed)
    if cfg.kind in ("resnet18", "resnet50"):
        return _build_resnet(cfg, rng)
    if cfg.kind == "mobilenetv2":
        return _build_mobilenet(cfg, rng)
    raise ConfigurationError(f"unknown backbone kind {cfg.kind!r}")
