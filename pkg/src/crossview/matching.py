"""Rolling & matching of orientation-aware descriptors, and the two matching-upsampling blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import angle_diff
from .layers import Deconv, Module
from .tensor import ShapeError, Tensor, ops


@dataclass(frozen=True)
class OrientationPrior:
    """Heading known to lie within ``center +- half_width`` degrees; 180 means no prior."""

    center: float = 0.0
    half_width: float = 180.0

    def __post_init__(self):
        if not 0 <= self.half_width <= 180:
            raise ValueError(f"half_width must be in [0, 180], got {self.half_width}")

    def keep(self, R: int) -> np.ndarray:
        """Bins r with angle_diff(r * 360 / R, center) <= half_width + 180 / R."""
        slack = self.half_width + 180.0 / R
        return np.array([angle_diff(r * 360.0 / R, self.center) <= slack for r in range(R)])


def prior_mask(prior, R: int) -> np.ndarray | None:
    """Channel mask for one prior or a per-item list of priors; None when nothing is excluded."""
    if prior is None:
        return None
    if isinstance(prior, OrientationPrior):
        return prior.keep(R) if prior.half_width < 180 else None
    priors = list(prior)
    if all(p is None or p.half_width >= 180 for p in priors):
        return None
    return np.stack([np.ones(R, bool) if p is None else p.keep(R) for p in priors])


def check_roll(c_a: int, c_block: int, R: int) -> int:
    """Roll step in elements; rejects R that does not step by whole blocks."""
    if c_a % R or (c_a // R) % c_block:
        raise ShapeError(f"R={R} does not roll {c_a}-long descriptors by whole {c_block}-element blocks")
    return c_a // R


def roll_index(c_a: int, R: int, c_g: int | None = None) -> np.ndarray:
    """``R x C^G`` gather index: row r is the middle ``c_g`` crop of the descriptor rolled by r."""
    c_g = c_a if c_g is None else c_g
    if c_g > c_a:
        raise ShapeError(f"ground descriptor ({c_g}) longer than aerial descriptor ({c_a})")
    step = c_a // R
    start = (c_a - c_g) // 2
    return (start + np.arange(c_g)[None, :] + step * np.arange(R)[:, None]) % c_a


def roll_descriptor(a: np.ndarray, r: int, R: int) -> np.ndarray:
    """Shift elements toward the front by ``r * len / R`` with wraparound."""
    a = np.asarray(a)
    c = a.shape[-1]
    if c % R:
        raise ShapeError(f"R={R} does not divide descriptor length {c}")
    return np.roll(a, -(r % R) * (c // R), axis=-1)


def match(ground: Tensor, aerial: Tensor, R: int) -> Tensor:
    """Matching volume ``B x N x N x R`` of cosine scores.

    ``ground`` is ``B x C^G``, ``aerial`` is ``B x N x N x C^A``. For limited FoV
    (C^G < C^A) the centered C^G elements of each rolled aerial descriptor are used.
    """
    b, c_g = ground.shape
    c_a = aerial.shape[-1]
    if aerial.shape[0] != b:
        raise ShapeError("ground and aerial batch sizes differ")
    idx = roll_index(c_a, R, c_g)
    rolled = ops.gather_last(aerial, idx)  # B x N x N x R x C^G
    g = ops.reshape(ground, (b, 1, 1, 1, c_g))
    return ops.cosine_similarity(g, rolled)


class LMU(Module):
    """Max over (retained) orientations, concat with normalized aerial descriptors, upsample.

    ``use_matching=False`` drops the score channel (ablation: plain aerial upsampling).
    """

    def __init__(self, rng, c_a: int, c_out: int, R: int, use_matching: bool = True, normalize: bool = True):
        super().__init__()
        self.R, self.use_matching, self.normalize = R, use_matching, normalize
        self.up = Deconv(rng, c_a + (1 if use_matching else 0), c_out)

    def __call__(self, volume: Tensor | None, aerial: Tensor, prior: OrientationPrior | None = None):
        a = ops.l2_normalize(aerial) if self.normalize else aerial
        if not self.use_matching:
            return self.up(a), None
        keep = prior_mask(prior, self.R)
        score, _ = ops.max_channels(volume, keep)
        return self.up(ops.concat([score, a])), score


class OMU(Module):
    """Full R-channel matching volume concatenated with normalized aerial descriptors, upsampled."""

    def __init__(self, rng, c_a: int, c_out: int, R: int, use_matching: bool = True, normalize: bool = True):
        super().__init__()
        self.R, self.use_matching, self.normalize = R, use_matching, normalize
        self.up = Deconv(rng, c_a + (R if use_matching else 0), c_out)

    def features(self, volume: Tensor | None, aerial: Tensor) -> Tensor:
        a = ops.l2_normalize(aerial) if self.normalize else aerial
        if not self.use_matching:
            return a
        return ops.concat([volume, a])

    def __call__(self, volume: Tensor | None, aerial: Tensor) -> Tensor:
        return self.up(self.features(volume, aerial))


def lmu(ground: Tensor, aerial: Tensor, prior: OrientationPrior | None, block: LMU):
    """Match descriptors and run one LMU block. Returns (upsampled features, max map)."""
    return block(match(ground, aerial, block.R), aerial, prior)


def omu(ground: Tensor, aerial: Tensor, block: OMU) -> Tensor:
    """Match level-1 descriptors and run the OMU block (all R channels kept)."""
    return block(match(ground, aerial, block.R), aerial)
