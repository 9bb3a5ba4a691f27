"""Coarse-to-fine localization decoder, orientation decoder and MAP pose read-out."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, normalize_heading
from .layers import Conv, Deconv, Module
from .matching import LMU, OMU, OrientationPrior
from .tensor import ShapeError, Tensor, ops


class LocalizationDecoder(Module):
    """K LMU levels; after each but the last, fuse an encoder skip and build the next descriptors."""

    def __init__(self, rng, c_a: list[int], skip_channels: list[int], R: int,
                 lmu_levels: set[int] | None = None, normalize: bool = True):
        super().__init__()
        K = len(c_a)
        if len(skip_channels) != K - 1:
            raise ShapeError(f"need {K - 1} skip features for {K} levels, got {len(skip_channels)}")
        self.K = K
        self.lmu_levels = set(range(1, K + 1)) if lmu_levels is None else set(lmu_levels)
        self.lmus: list[LMU] = []
        self.fuse: list[Conv] = []
        for k in range(1, K + 1):
            c_up = c_a[k] if k < K else max(c_a[-1] // 2, 4)
            self.lmus.append(LMU(rng, c_a[k - 1], c_up, R, k in self.lmu_levels, normalize))
            if k < K:
                self.fuse.append(Conv(rng, c_up + skip_channels[k - 1], c_a[k], relu=False))
        self.head = Conv(rng, c_up, 1, relu=False)

    def __call__(self, volumes, a1: Tensor, skips: list[Tensor], build_volume, prior: OrientationPrior | None = None):
        """Returns (D, aerial descriptor maps, matching volumes, max maps).

        ``build_volume(k, A_k)`` computes the level-k matching volume; volumes for
        levels already computed can be passed in ``volumes``.
        """
        a = a1
        aerials, vols, maxmaps = [], [], []
        for k in range(1, self.K + 1):
            aerials.append(a)
            vol = volumes.get(k) if volumes else None
            if vol is None:
                vol = build_volume(k, a)
            vols.append(vol)
            up, score = self.lmus[k - 1](vol, a, prior)
            maxmaps.append(score)
            if k < self.K:
                skip = skips[k - 1]
                if skip.shape[1:3] != up.shape[1:3]:
                    raise ShapeError(f"skip feature {skip.shape[1:3]} does not match level resolution {up.shape[1:3]}")
                a = self.fuse[k - 1](ops.concat([up, skip]))
            else:
                logits = self.head(up)
        b, h, w, _ = logits.shape
        d = ops.softmax_pixels(ops.reshape(logits, (b, h, w)))
        return d, aerials, vols, maxmaps


class OrientationDecoder(Module):
    """OMU at level 1, then deconvs up to full resolution with one encoder skip at 4*N1."""

    def __init__(self, rng, c_a1: int, R: int, n1: int, L: int, skip_channels: int,
                 use_omu: bool = True, normalize: bool = True, widths: tuple[int, ...] = (64, 32, 16, 16)):
        super().__init__()
        steps = int(round(math.log2(L / (2 * n1))))
        if 2 * n1 * 2**steps != L:
            raise ShapeError(f"L={L} is not 2*N1*2^m for N1={n1}")
        widths = tuple(widths) + (widths[-1],) * max(0, steps + 1 - len(widths))
        self.omu = OMU(rng, c_a1, widths[0], R, use_omu, normalize)
        self.ups: list[Deconv] = []
        self.convs: list[Conv] = []
        c = widths[0]
        for s in range(steps):
            self.ups.append(Deconv(rng, c, widths[s + 1]))
            c = widths[s + 1]
            extra = skip_channels if s == 0 else 0
            self.convs.append(Conv(rng, c + extra, c))
        self.head = Conv(rng, c, 2, relu=False)

    def __call__(self, volume: Tensor | None, a1: Tensor, skip: Tensor) -> Tensor:
        x = self.omu(volume, a1)
        for s, (up, conv) in enumerate(zip(self.ups, self.convs)):
            x = up(x)
            if s == 0:
                if skip.shape[1:3] != x.shape[1:3]:
                    raise ShapeError(f"orientation skip {skip.shape[1:3]} != {x.shape[1:3]}")
                x = ops.concat([x, skip])
            x = conv(x)
        return ops.l2_normalize(self.head(x))


@dataclass
class PoseEstimate:
    pose: Pose
    confidence: float
    pixel: tuple[int, int]
    distribution: np.ndarray | None = None
    field: np.ndarray | None = None


def field_heading(y: np.ndarray) -> float:
    """Heading in degrees from a (cos, sin) vector."""
    return normalize_heading(math.degrees(math.atan2(float(y[1]), float(y[0]))))


def extract_pose(D: np.ndarray, Y: np.ndarray, keep_maps: bool = False) -> PoseEstimate:
    """MAP pixel of ``D`` (lowest row-major index on ties) and the heading of ``Y`` there."""
    D = np.asarray(D)
    flat = int(np.argmax(D))
    i, j = divmod(flat, D.shape[1])
    heading = field_heading(np.asarray(Y)[i, j])
    return PoseEstimate(
        Pose(i + 0.5, j + 0.5, heading),
        float(D[i, j]),
        (i, j),
        D if keep_maps else None,
        Y if keep_maps else None,
    )
