"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .core import Tensor, backprop, no_grad


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def _normal(shapes, rng):
    return [rng.standard_normal(s) for s in shapes]


def grad_check(
    fn: Callable[..., Tensor],
    shapes: Sequence[tuple[int, ...]] | None = None,
    trials: int = 100,
    step: float = 1e-3,
    seed: int = 0,
    sampler: Callable | None = None,
    name: str = "op",
) -> GradCheckResult:
    """Max over trials of |analytic - central difference| / max(1, |central difference|).

    Each trial draws fresh float64 inputs (N(0,1) unless ``sampler`` is given),
    contracts a non-scalar output with a random projection and compares one
    random coordinate of every input.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        arrays = sampler(rng) if sampler is not None else _normal(shapes, rng)
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        with no_grad():
            probe = fn(*[Tensor(a) for a in arrays])
        proj = rng.standard_normal(probe.shape) if probe.data.size > 1 else np.ones(probe.shape)

        def scalar(arrs):
            with no_grad():
                return float((fn(*[Tensor(a) for a in arrs]).data * proj).sum())

        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*leaves)
        loss = ops.sum_all(ops.mul(out, Tensor(proj)))
        analytic = backprop(loss, leaves)
        for ai, a in enumerate(arrays):
            if a.size == 0:
                continue
            idx = np.unravel_index(rng.integers(a.size), a.shape)
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[ai][idx] += step
            minus[ai][idx] -= step
            numeric = (scalar(plus) - scalar(minus)) / (2 * step)
            err = abs(analytic[ai][idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, float(err))
    return GradCheckResult(name, worst, trials)


# samplers that keep inputs away from points of non-differentiability


def _away_from_zero(shape, rng, margin=1e-2):
    x = rng.standard_normal(shape)
    bad = np.abs(x) < margin
    while bad.any():
        x[bad] = rng.standard_normal(bad.sum())
        bad = np.abs(x) < margin
    return x


def _separated_max(shape, rng, margin=1e-2):
    while True:
        x = rng.standard_normal(shape)
        top = np.sort(x, axis=-1)
        if (top[..., -1] - top[..., -2] > margin).all():
            return x


def _parallel_pair(rng):
    a = rng.standard_normal((3, 6))
    a /= np.linalg.norm(a, axis=-1, keepdims=True)
    return [a, a * rng.uniform(0.5, 2.0, size=(3, 1))]


def primitive_suite() -> dict[str, dict]:
    """Name -> grad_check keyword arguments for every tensor primitive."""
    return {
        "conv2d": dict(fn=lambda x, k: ops.conv2d(x, k), shapes=[(5, 6, 2), (3, 3, 2, 3)]),
        "conv2d_stride2_bias": dict(
            fn=lambda x, k, b: ops.conv2d(x, k, b, stride=2), shapes=[(2, 6, 5, 2), (3, 3, 2, 3), (3,)]
        ),
        "conv2d_circular": dict(
            fn=lambda x, k: ops.conv2d(x, k, pad_mode="circular_horizontal", stride=2),
            shapes=[(4, 8, 2), (3, 3, 2, 2)],
        ),
        "deconv2d": dict(fn=lambda y, k, b: ops.deconv2d(y, k, b), shapes=[(2, 3, 3, 2), (3, 3, 4, 2), (4,)]),
        "dense": dict(fn=lambda x, w, b: ops.dense(x, w, b), shapes=[(3, 4, 5), (5, 6), (6,)]),
        "relu": dict(fn=ops.relu, sampler=lambda rng: [_away_from_zero((4, 5, 3), rng)]),
        "softmax_pixels": dict(fn=ops.softmax_pixels, shapes=[(2, 4, 5)]),
        "l2_normalize": dict(fn=ops.l2_normalize, shapes=[(3, 4, 6)]),
        "max_channels": dict(
            fn=lambda x: ops.max_channels(x)[0], sampler=lambda rng: [_separated_max((3, 4, 5), rng)]
        ),
        "concat": dict(fn=lambda a, b: ops.concat([a, b]), shapes=[(3, 3, 2), (3, 3, 4)]),
        "roll_vector": dict(fn=lambda x: ops.roll_vector(x, 3), shapes=[(4, 8)]),
        "gather": dict(fn=lambda x: ops.gather_last(x, np.array([[1, 2, 3], [3, 0, 1]])), shapes=[(2, 4)]),
        "cosine_similarity": dict(fn=ops.cosine_similarity, shapes=[(2, 3, 8), (3, 8)]),
        "cosine_similarity_parallel": dict(fn=ops.cosine_similarity, sampler=_parallel_pair),
        "reshape": dict(fn=lambda x: ops.reshape(x, (6, 4)), shapes=[(2, 3, 4)]),
        "transpose": dict(fn=lambda x: ops.transpose(x, (2, 0, 1)), shapes=[(2, 3, 4)]),
        "weighted_sum": dict(
            fn=lambda a, b, c: ops.weighted_sum([a, b, c], [1.0, 10.0, 1e4]), shapes=[(3,), (3,), (3,)]
        ),
        "mul_add": dict(fn=lambda a, b: ops.add(ops.mul(a, b), b), shapes=[(3, 4), (4,)]),
    }
