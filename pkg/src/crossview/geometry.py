"""Pose conventions, angle arithmetic, labels and panorama manipulation.

Coordinates live in aerial-image pixels. A map ``D`` is indexed ``D[i, j]`` with
``i`` the row (growing South) and ``j`` the column (growing East); the pose
coordinates are ``u`` along rows and ``v`` along columns, so pixel ``(i, j)``
spans ``[i, i+1) x [j, j+1)`` and has its center at ``(i + 0.5, j + 0.5)``.
Headings are degrees, 0 = North (up), increasing clockwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def normalize_heading(deg: float) -> float:
    h = math.fmod(float(deg), 360.0)
    if h < 0:
        h += 360.0
    return 0.0 if h >= 360.0 else h


@dataclass(frozen=True)
class Pose:
    u: float
    v: float
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", normalize_heading(self.heading))

    def pixel(self) -> tuple[int, int]:
        """Index of the pixel containing the continuous location."""
        return int(math.floor(self.u)), int(math.floor(self.v))


@dataclass(frozen=True)
class MetersPerPixel:
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def angle_diff(a: float, b: float) -> float:
    """Smallest absolute angular difference in degrees, in [0, 180]."""
    d = math.fmod(abs(float(a) - float(b)), 360.0)
    return min(d, 360.0 - d)


def angle_diff_array(a, b) -> np.ndarray:
    d = np.mod(np.abs(np.asarray(a, float) - np.asarray(b, float)), 360.0)
    return np.minimum(d, 360.0 - d)


def heading_unit(heading: float) -> tuple[float, float]:
    """Unit vector of a heading in (u, v) pixel axes: North is -u, East is +v."""
    r = math.radians(heading)
    return -math.cos(r), math.sin(r)


@dataclass
class GaussianLabel:
    map: np.ndarray
    sigma: float
    gt_pixel: tuple[int, int]


def make_label(gt: Pose, L: int, sigma: float = 2.5) -> GaussianLabel:
    """Normalized 2-D Gaussian centered on the pixel containing ``gt``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not (0 <= gt.u < L and 0 <= gt.v < L):
        raise ValueError(f"ground truth ({gt.u}, {gt.v}) outside the {L}x{L} map")
    gi, gj = gt.pixel()
    ii = np.arange(L)[:, None] - gi
    jj = np.arange(L)[None, :] - gj
    g = np.exp(-(ii**2 + jj**2) / (2.0 * sigma**2))
    return GaussianLabel((g / g.sum()).astype(np.float32), float(sigma), (gi, gj))


@dataclass
class GroundImage:
    """A cylindrical ground image plus its horizontal field of view in degrees."""

    pixels: np.ndarray
    fov: float = 360.0
    extra: dict = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def _pixels(ground) -> tuple[np.ndarray, float]:
    if isinstance(ground, GroundImage):
        return ground.pixels, ground.fov
    return np.asarray(ground), 360.0


def shift_panorama(ground, delta: float):
    """Rotate a 360-degree panorama so it shows the view after turning ``delta`` clockwise.

    Column ``c`` of the result is column ``(c + m) mod W`` of the input, with
    ``m = round(W * delta / 360)``.
    """
    pix, fov = _pixels(ground)
    if fov < 360.0:
        raise ValueError(f"shift_panorama needs a 360-degree panorama, got fov={fov}")
    w = pix.shape[1]
    m = int(round(w * float(delta) / 360.0)) % w
    out = np.roll(pix, -m, axis=1)
    return GroundImage(out, 360.0) if isinstance(ground, GroundImage) else out


def crop_width(width: int, fov: float) -> int:
    return int(round(width * float(fov) / 360.0))


def crop_fov(ground, fov: float) -> GroundImage:
    """Keep the ``fov`` degrees centered on the forward (center) column."""
    pix, src_fov = _pixels(ground)
    if not 0 < fov <= src_fov:
        raise ValueError(f"fov {fov} must lie in (0, {src_fov}]")
    if fov == src_fov:
        return GroundImage(pix, float(src_fov))
    w = pix.shape[1]
    wc = max(1, int(round(w * float(fov) / src_fov)))
    start = w // 2 - wc // 2
    return GroundImage(pix[:, start : start + wc], float(fov))


def decompose_error(pred: Pose, gt: Pose, scale: MetersPerPixel | float) -> tuple[float, float]:
    """(lateral, longitudinal) absolute error in meters w.r.t. the ground-truth heading."""
    s = scale.scale if isinstance(scale, MetersPerPixel) else float(scale)
    du, dv = (pred.u - gt.u) * s, (pred.v - gt.v) * s
    fu, fv = heading_unit(gt.heading)
    longitudinal = du * fu + dv * fv
    lateral = du * fv - dv * fu
    return abs(lateral), abs(longitudinal)
