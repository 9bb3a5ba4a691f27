"""Training objectives: weighted infoNCE over matching volumes, CE / Wasserstein
localization losses, orientation regression and their weighted total.

Every loss accepts a single item or a leading batch axis and returns the batch mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import GaussianLabel, normalize_heading
from .tensor import Tensor, ops
from .tensor.core import make_node

LOG_CLAMP = -30.0


@dataclass
class LossWeights:
    alpha: float = 10.0
    beta: float = 1e4
    tau: float = 0.1

    def __post_init__(self):
        if min(self.alpha, self.beta, self.tau) <= 0:
            raise ValueError("loss weights must be positive")


@dataclass
class PoseWeights:
    spatial: np.ndarray  # N x N, sums to 1
    orientation: np.ndarray  # R, two bracketing bins

    @property
    def joint(self) -> np.ndarray:
        return self.spatial[:, :, None] * self.orientation[None, None, :]


def orientation_bin_weights(o_gt: float, R: int) -> np.ndarray:
    """Linear split between the two bins bracketing ``o_gt`` (weights 1 - d / bin_width)."""
    width = 360.0 / R
    o = normalize_heading(o_gt)
    pos = o / width
    r1 = int(math.floor(pos)) % R
    frac = pos - math.floor(pos)
    w = np.zeros(R)
    w[r1] += 1.0 - frac
    w[(r1 + 1) % R] += frac
    return w


def pose_weights(label: GaussianLabel | np.ndarray, o_gt: float, n: int, R: int) -> PoseWeights:
    """Spatial weights by max-pooling the label to ``n x n`` (renormalized), angular by bin split."""
    m = label.map if isinstance(label, GaussianLabel) else np.asarray(label)
    L = m.shape[0]
    if L % n:
        raise ValueError(f"N={n} does not divide L={L}")
    s = L // n
    pooled = m.reshape(n, s, n, s).max(axis=(1, 3)).astype(np.float64)
    return PoseWeights(pooled / pooled.sum(), orientation_bin_weights(o_gt, R))


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    return (x[None], False) if x.ndim == ndim else (x, True)


def infonce_level(M: Tensor, weights, tau: float = 0.1) -> Tensor:
    """sum_{i,j,r} w * -log softmax(M / tau)[i,j,r], softmax over the whole volume."""
    batched = M.ndim == 4
    m = M.data if batched else M.data[None]
    w, _ = _as_batch(weights.joint if isinstance(weights, PoseWeights) else weights, 3)
    b = m.shape[0]
    z = m.astype(np.float64) / tau
    flat = z.reshape(b, -1)
    zmax = flat.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(flat - zmax).sum(axis=1, keepdims=True))
    logp = (flat - lse).reshape(m.shape)
    per_item = -(w * logp).reshape(b, -1).sum(axis=1)
    out = np.asarray(per_item.mean(), dtype=M.dtype)
    p = np.exp(logp)

    def backward(g):
        wsum = w.reshape(b, -1).sum(axis=1).reshape((b,) + (1,) * 3)
        gm = (wsum * p - w) / tau * (float(g) / b)
        return (gm.astype(M.dtype) if batched else gm[0].astype(M.dtype),)

    return make_node(out, (M,), "infonce", backward)


def contrastive_loss(volumes: dict[int, Tensor], labels: list[np.ndarray], o_gt: list[float], R: int,
                     tau: float = 0.1) -> Tensor:
    """Mean over matching levels of the batch-averaged infoNCE loss."""
    terms = []
    for k in sorted(volumes):
        vol = volumes[k]
        n = vol.shape[1]
        w = np.stack([pose_weights(lab, o, n, R).joint for lab, o in zip(labels, o_gt)])
        terms.append(infonce_level(vol, w, tau))
    return ops.weighted_sum(terms, [1.0 / len(terms)] * len(terms))


def ce_loss(D: Tensor, D_gt) -> Tensor:
    """-sum D_gt log D with log clamped at -30."""
    batched = D.ndim == 3
    d = D.data if batched else D.data[None]
    q, _ = _as_batch(D_gt, 2)
    b = d.shape[0]
    floor = math.exp(LOG_CLAMP)
    live = d > floor
    logd = np.where(live, np.log(np.where(live, d, 1.0)), LOG_CLAMP)
    out = np.asarray(-(q * logd).reshape(b, -1).sum(axis=1).mean(), dtype=D.dtype)

    def backward(g):
        gd = np.where(live, -q / np.where(live, d, 1.0), 0.0) * (float(g) / b)
        gd = gd.astype(D.dtype)
        return (gd if batched else gd[0],)

    return make_node(out, (D,), "ce_loss", backward)


def distance_map(L: int, gt_pixel) -> np.ndarray:
    gi, gj = gt_pixel
    ii = np.arange(L)[:, None] - gi
    jj = np.arange(L)[None, :] - gj
    return np.sqrt(ii**2 + jj**2)


def wasserstein_loss(D: Tensor, gt_pixel) -> Tensor:
    """Expected pixel distance of the predicted mass to the ground-truth pixel."""
    batched = D.ndim == 3
    d = D.data if batched else D.data[None]
    pix = list(gt_pixel) if batched else [gt_pixel]
    dist = np.stack([distance_map(d.shape[1], p) for p in pix])
    b = d.shape[0]
    out = np.asarray((dist * d).reshape(b, -1).sum(axis=1).mean(), dtype=D.dtype)

    def backward(g):
        gd = (dist * (float(g) / b)).astype(D.dtype)
        return (gd if batched else gd[0],)

    return make_node(out, (D,), "wasserstein_loss", backward)


def orientation_loss(Y: Tensor, D_gt, o_gt) -> Tensor:
    """sum D_gt * ((cos o - Y_1)^2 + (sin o - Y_2)^2)."""
    batched = Y.ndim == 4
    y = Y.data if batched else Y.data[None]
    q, _ = _as_batch(D_gt, 2)
    o = np.radians(np.atleast_1d(np.asarray(o_gt, dtype=np.float64)))
    target = np.stack([np.cos(o), np.sin(o)], axis=-1)[:, None, None, :]
    b = y.shape[0]
    diff = y - target
    out = np.asarray((q[..., None] * diff**2).reshape(b, -1).sum(axis=1).mean(), dtype=Y.dtype)

    def backward(g):
        gy = (2.0 * q[..., None] * diff * (float(g) / b)).astype(Y.dtype)
        return (gy if batched else gy[0],)

    return make_node(out, (Y,), "orientation_loss", backward)


def total_loss(loc: Tensor, ori: Tensor, con: Tensor | None, weights: LossWeights) -> Tensor:
    """loc + alpha * ori + beta * con."""
    if con is None:
        return ops.weighted_sum([loc, ori], [1.0, weights.alpha])
    return ops.weighted_sum([loc, ori, con], [1.0, weights.alpha, weights.beta])


def loss_suite() -> dict[str, dict]:
    """grad_check entries for every loss."""

    def positive(rng, shape):
        # keep entries well above the finite-difference step so log stays resolvable
        return rng.uniform(0.2, 1.0, size=shape)

    def cosines(rng, shape):
        return rng.uniform(-1.0, 1.0, size=shape)

    def label(shape):
        q = np.random.default_rng(7).random(shape)
        return q / q.sum(axis=(-2, -1), keepdims=True)

    lab = label((2, 6, 6))
    w = np.random.default_rng(8).random((2, 3, 3, 4))
    w /= w.sum(axis=(1, 2, 3), keepdims=True)
    return {
        "infonce": dict(fn=lambda m: infonce_level(m, w, 0.1), sampler=lambda rng: [cosines(rng, (2, 3, 3, 4))]),
        "ce_loss": dict(fn=lambda d: ce_loss(d, lab), sampler=lambda rng: [positive(rng, (2, 6, 6))]),
        "ce_softmax": dict(fn=lambda x: ce_loss(ops.softmax_pixels(x), lab), shapes=[(2, 6, 6)]),
        "wasserstein_loss": dict(fn=lambda d: wasserstein_loss(d, [(1, 2), (4, 0)]), shapes=[(2, 6, 6)]),
        "orientation_loss": dict(fn=lambda y: orientation_loss(y, lab, [30.0, 250.0]), shapes=[(2, 6, 6, 2)]),
        "orientation_loss_normalized": dict(
            fn=lambda y: orientation_loss(ops.l2_normalize(y), lab, [30.0, 250.0]), shapes=[(2, 6, 6, 2)]
        ),
        "total_loss": dict(
            fn=lambda d, y, m: total_loss(d, y, m, LossWeights()), shapes=[(), (), ()]
        ),
    }
