"""Feature extractors for both views and the descriptor projectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Conv, Dense, Module
from .tensor import ShapeError, Tensor, ops


@dataclass
class BackboneConfig:
    channels: tuple[int, ...] = (16, 32, 64, 96)
    strides: tuple[int, ...] = (2, 2, 2, 2)
    convs_per_stage: int = 2
    pad_mode: str = "zero"

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))


class Backbone(Module):
    """Stack of conv stages; the first conv of each stage carries the stride."""

    def __init__(self, rng, cfg: BackboneConfig, cin: int = 3):
        super().__init__()
        self.cfg = cfg
        self.convs: list[Conv] = []
        self.stage_end: list[int] = []
        c = cin
        for cout, s in zip(cfg.channels, cfg.strides):
            for k in range(cfg.convs_per_stage):
                self.convs.append(Conv(rng, c, cout, 3, stride=s if k == 0 else 1))
                c = cout
            self.stage_end.append(len(self.convs) - 1)

    @property
    def out_channels(self) -> int:
        return self.cfg.channels[-1]

    def __call__(self, x: Tensor, pad_mode: str | None = None) -> list[Tensor]:
        """Returns the output of every stage, shallow to deep."""
        mode = pad_mode or self.cfg.pad_mode
        h, w = x.shape[-3], x.shape[-2]
        if min(h, w) < self.cfg.total_stride:
            raise ShapeError(f"image {h}x{w} smaller than the total stride {self.cfg.total_stride}")
        feats = []
        for i, conv in enumerate(self.convs):
            x = conv(x, mode)
            if i in self.stage_end:
                feats.append(x)
        return feats


def encode_ground(backbone: Backbone, ground: Tensor, fov: float = 360.0) -> Tensor:
    """Ground feature map ``B x H' x W' x C'``; panoramas wrap horizontally."""
    mode = "circular_horizontal" if fov >= 360.0 else "zero"
    return backbone(ground, mode)[-1]


class GroundProjector(Module):
    """1x1 conv C' -> C'_k, a per-column dense squeeze over (H', C'_k), then flatten.

    Block ``b`` of the descriptor (``C'_k`` values) depends only on feature column ``b``.
    No bias terms, so a zero feature maps to a zero descriptor.
    """

    def __init__(self, rng, c_in: int, c_k: int, height: int):
        super().__init__()
        self.c_k, self.height = c_k, height
        self.reduce = Conv(rng, c_in, c_k, k=1, bias=False, relu=False)
        self.squeeze = Dense(rng, height * c_k, c_k)

    def __call__(self, feat: Tensor) -> Tensor:
        b, h, w, _ = feat.shape
        if h != self.height:
            raise ShapeError(f"ground feature height {h} != projector height {self.height}")
        x = self.reduce(feat)
        x = ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, w, h * self.c_k))
        x = self.squeeze(x)
        return ops.reshape(x, (b, w * self.c_k))


def project_ground(projector: GroundProjector, feat: Tensor) -> Tensor:
    return projector(feat)


class AerialProjector(Module):
    """Shared dense layer over each of the ``N1 x N1`` feature sub-volumes."""

    def __init__(self, rng, feat_size: int, c_in: int, n1: int, c_out: int):
        super().__init__()
        if feat_size % n1:
            raise ShapeError(f"aerial feature size {feat_size} not divisible by N1={n1}")
        self.n1, self.cell = n1, feat_size // n1
        self.fc = Dense(rng, self.cell * self.cell * c_in, c_out)

    def __call__(self, feat: Tensor) -> Tensor:
        b, h, w, c = feat.shape
        n, s = self.n1, self.cell
        if h != n * s or w != n * s:
            raise ShapeError(f"aerial feature {h}x{w} does not split into {n}x{n} cells of {s}")
        x = ops.reshape(feat, (b, n, s, n, s, c))
        x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
        x = ops.reshape(x, (b, n, n, s * s * c))
        return self.fc(x)


def project_aerial(projector: AerialProjector, feat: Tensor) -> Tensor:
    return projector(feat)
