"""Atrous spatial pyramid pooling, low/high-level fusion and the full segmentation model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels as K
from .backbones import BackboneConfig, FeatureExtractor, build_backbone, scale_channels
from .errors import ConfigurationError
from .layers import Conv2d, ConvSpec, Layer, Sequential, conv_bn_act

CLASS_NAMES = ("background", "blood", "muscle", "scar")
NUM_CLASSES = len(CLASS_NAMES)


@dataclass
class AsppConfig:
    base_rate: int = 6
    branch_channels: int = 256

    def __post_init__(self):
        if self.base_rate < 1 or self.branch_channels < 1:
            raise ConfigurationError(f"invalid ASPP config {self}")

    @property
    def rates(self) -> tuple[int, int, int]:
        k = self.base_rate
        return (k, 2 * k, 3 * k)


class ASPP(Layer):
    """Four parallel branches (1x1, and 3x3 atrous at rates k, 2k, 3k), concatenated
    along channels and mixed by a 1x1 projection.

    The projection is linear; the decoder that follows supplies the nonlinearity.
    """

    def __init__(self, in_channels: int, cfg: AsppConfig, rng):
        self.cfg = cfg
        c = cfg.branch_channels
        self.branches = [conv_bn_act(ConvSpec(in_channels, c, 1), rng)]
        for rate in cfg.rates:
            self.branches.append(conv_bn_act(ConvSpec(in_channels, c, 3, dilation=rate), rng))
        self.projection = Conv2d(ConvSpec(4 * c, c, 1), rng)

    @property
    def dilations(self) -> tuple[int, ...]:
        return tuple(b[0].spec.dilation for b in self.branches)

    def children(self):
        names = ["branch1x1"] + [f"branch_rate{r}" for r in self.cfg.rates]
        return list(zip(names, self.branches)) + [("projection", self.projection)]

    def forward(self, x, train=False):
        outs = [b.forward(x, train) for b in self.branches]
        shapes = {o.shape for o in outs}
        if len(shapes) != 1:
            raise AssertionError(f"ASPP branch shapes diverged: {shapes}")
        return self.projection.forward(np.concatenate(outs, axis=1), train)

    def backward(self, dout):
        d = self.projection.backward(dout)
        parts = np.split(d, len(self.branches), axis=1)
        dx = self.branches[0].backward(parts[0])
        for b, p in zip(self.branches[1:], parts[1:]):
            dx = dx + b.backward(p)
        return dx


class Decoder(Layer):
    """Upsample ASPP output to the low-level extents, concatenate with projected
    low-level features, refine with two 3x3 conv-BN-ReLU layers and classify."""

    def __init__(self, low_channels: int, aspp_channels: int, low_proj_channels: int,
                 decoder_channels: int, num_classes: int, rng):
        self.low_projection = conv_bn_act(ConvSpec(low_channels, low_proj_channels, 1), rng)
        self.refine = Sequential(
            conv_bn_act(ConvSpec(aspp_channels + low_proj_channels, decoder_channels, 3), rng),
            conv_bn_act(ConvSpec(decoder_channels, decoder_channels, 3), rng),
            names=["conv1", "conv2"],
        )
        self.classifier = Conv2d(ConvSpec(decoder_channels, num_classes, 1), rng)
        self.aspp_channels = aspp_channels
        self._aspp_hw = None

    def children(self):
        return [("low_projection", self.low_projection), ("refine", self.refine),
                ("classifier", self.classifier)]

    def fuse(self, low, aspp_out, train=False):
        self._aspp_hw = aspp_out.shape[2:]
        up = K.bilinear_upsample(aspp_out, low.shape[2], low.shape[3])
        lp = self.low_projection.forward(low, train)
        return self.refine.forward(np.concatenate([up, lp], axis=1), train)

    def forward_pair(self, low, aspp_out, train=False):
        return self.classifier.forward(self.fuse(low, aspp_out, train), train)

    def backward_pair(self, dout):
        d = self.refine.backward(self.classifier.backward(dout))
        dup, dlp = d[:, :self.aspp_channels], d[:, self.aspp_channels:]
        dlow = self.low_projection.backward(dlp)
        daspp = K.bilinear_upsample_backward(dup, *self._aspp_hw)
        return dlow, daspp


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    aspp: AsppConfig = field(default_factory=AsppConfig)
    low_proj_channels: int = 48
    decoder_channels: int = 256
    num_classes: int = NUM_CLASSES
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d["backbone"])
        d["aspp"] = AsppConfig(**d["aspp"])
        return cls(**d)


class SegmentationModel(Layer):
    """Backbone -> ASPP -> fusion with low-level features -> decoder -> full-resolution scores."""

    def __init__(self, cfg: ModelConfig):
        if cfg.num_classes != NUM_CLASSES:
            raise ConfigurationError(f"classifier must emit {NUM_CLASSES} classes, got {cfg.num_classes}")
        self.cfg = cfg
        self.backbone: FeatureExtractor = build_backbone(cfg.backbone, cfg.seed)
        rng = np.random.default_rng([cfg.seed, 1])
        self.aspp = ASPP(self.backbone.high_channels, cfg.aspp, rng)
        self.decoder = Decoder(
            self.backbone.low_channels, cfg.aspp.branch_channels, cfg.low_proj_channels,
            cfg.decoder_channels, cfg.num_classes, rng,
        )
        self._in_hw = None
        self._model_hw = None
        self._padded_hw = None

    def children(self):
        return [("backbone", self.backbone), ("aspp", self.aspp), ("decoder", self.decoder)]

    def aligned_extent(self, size: int) -> int:
        """Smallest ``k * high_stride + 1`` not below ``size``.

        At such extents every strided "same" convolution keeps the first and
        last pixel on its sampling grid, so corner-aligned bilinear upsampling
        puts each feature back exactly where it was computed.
        """
        s = self.backbone.high_stride
        return -(-(size - 1) // s) * s + 1

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.cfg.backbone.in_channels:
            raise ConfigurationError(
                f"expected N x {self.cfg.backbone.in_channels} x H x W input, got {x.shape}"
            )
        self._in_hw = x.shape[2:]
        delta = self.cfg.backbone.resolution_multiplier
        if delta < 1.0:
            x = K.bilinear_upsample(x, max(1, round(delta * x.shape[2])), max(1, round(delta * x.shape[3])))
        self._model_hw = h, w = x.shape[2:]
        self._padded_hw = ph, pw = self.aligned_extent(h), self.aligned_extent(w)
        x = np.pad(x, ((0, 0), (0, 0), (0, ph - h), (0, pw - w)), mode="edge")
        low, high = self.backbone.forward(x, train)
        a = self.aspp.forward(high, train)
        logits = self.decoder.forward_pair(low, a, train)
        scores = K.bilinear_upsample(logits, ph, pw)[:, :, :h, :w]
        if (h, w) != tuple(self._in_hw):
            scores = K.bilinear_upsample(scores, *self._in_hw)
        return scores

    def backward(self, dout):
        h, w = self._model_hw
        ph, pw = self._padded_hw
        if (h, w) != tuple(self._in_hw):
            dout = K.bilinear_upsample_backward(dout, h, w)
        d = np.zeros(dout.shape[:2] + (ph, pw))
        d[:, :, :h, :w] = dout
        d = K.bilinear_upsample_backward(d, *self.decoder_out_hw)
        dlow, daspp = self.decoder.backward_pair(d)
        dhigh = self.aspp.backward(daspp)
        dx = self.backbone.backward(dlow, dhigh)
        # undo the edge padding: replicated pixels pass their gradient to the border
        dx[:, :, h - 1, :] += dx[:, :, h:, :].sum(axis=2)
        dx[:, :, :, w - 1] += dx[:, :, :, w:].sum(axis=3)
        dx = np.ascontiguousarray(dx[:, :, :h, :w])
        if (h, w) != tuple(self._in_hw):
            dx = K.bilinear_upsample_backward(dx, *self._in_hw)
        return dx

    @property
    def decoder_out_hw(self):
        return self.decoder.classifier._x.shape[2:]

    def segment(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Inference: returns ``(scores N x 4 x H x W, labels N x H x W)``.

        Labels are the per-pixel argmax; ties go to the lowest class index.
        """
        scores = self.forward(np.asarray(image, dtype=np.float64), train=False)
        return scores, np.argmax(scores, axis=1).astype(np.uint8)


def desk_model_config(kind: str = "resnet18", seed: int = 0, width: float = 0.25,
                      reduced_depth: bool = True, low_level_tap: int | str | None = "conv1") -> ModelConfig:
    """Small configuration that trains on 64x64 inputs in minutes on a CPU.

    The low-level tap defaults to the stride-2 stem: at 64x64 the automatic
    boundary tolerance is below one pixel, and a stride-4 decoder grid cannot
    place boundaries that precisely.
    """
    return ModelConfig(
        backbone=BackboneConfig(kind=kind, width_multiplier=width, reduced_depth=reduced_depth,
                                low_level_tap=low_level_tap),
        aspp=AsppConfig(base_rate=6, branch_channels=scale_channels(256, width / 2)),
        low_proj_channels=scale_channels(48, width / 2),
        decoder_channels=scale_channels(256, width / 2),
        seed=seed,
    )


def segment(model: SegmentationModel, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return model.segment(image)


def fuse_features(low: np.ndarray, aspp_out: np.ndarray, model: SegmentationModel,
                  train: bool = False) -> np.ndarray:
    """Upsample ``aspp_out`` to ``low``'s extents, concatenate with the projected
    low-level features and apply the decoder convolutions (before the classifier)."""
    return model.decoder.fuse(low, aspp_out, train)
