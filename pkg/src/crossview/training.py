"""Adam, gradient clipping, augmentation and the epoch loop with resumable checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgio
from .geometry import GroundImage, Pose, crop_fov, make_label, normalize_heading, shift_panorama
from .losses import LossWeights, ce_loss, contrastive_loss, orientation_loss, total_loss, wasserstein_loss
from .model import CrossViewModel, ModelConfig
from .synthdata import Dataset
from .tensor import ShapeError, Tensor, backprop, io

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "epoch", "loss", "loss_loc", "loss_ori", "loss_con", "grad_norm")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    loc_loss: str = "ce"  # "ce" or "wasserstein"
    label_sigma: float = 2.5
    # orientation augmentation: headings shifted uniformly within +-range/2 (whole columns)
    orientation_range: float = 360.0
    # FoV augmentation: one FoV per batch drawn from this set
    fovs: tuple[float, ...] = (360.0,)
    # rotate each aerial patch by a random multiple of 90 degrees (labels follow exactly)
    aerial_rot90: bool = False
    clip_norm: float = 10.0
    lr_schedule: str = "constant"  # or "cosine": decays to 0 over the planned steps
    weight_decay: float = 0.0  # decoupled, scaled by the current lr
    checkpoint_every: int = 1  # epochs
    max_steps: int = 0  # 0 = no limit

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loc_loss not in ("ce", "wasserstein"):
            raise ValueError(f"loc_loss must be 'ce' or 'wasserstein', got {self.loc_loss!r}")
        if not 0 <= self.orientation_range <= 360:
            raise ValueError("orientation_range must lie in [0, 360]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not self.fovs or any(not 0 < f <= 360 for f in self.fovs):
            raise ValueError("fovs must be a non-empty set of values in (0, 360]")


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


class NonFiniteGradient(FloatingPointError):
    pass


def learning_rate(tcfg: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate for the 0-based ``step`` of a run planned for ``total_steps``."""
    if tcfg.lr_schedule == "cosine" and total_steps > 0:
        return tcfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    return tcfg.lr


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam update in place. Non-finite gradients abort the step untouched.

    ``weight_decay`` shrinks parameters by ``lr * weight_decay`` independently of the
    gradient moments.
    """
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ShapeError(f"{k}: gradient shape {g.shape} != parameter shape {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, g in grads.items():
        m = state.m[k] = beta1 * state.m[k] + (1 - beta1) * g
        v = state.v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        p = params[k]
        new = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            new = new - lr * weight_decay * p.data
        p.data = new.astype(p.data.dtype)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = (grads[k] * s).astype(grads[k].dtype)
    return norm


# --------------------------------------------------------------------------
# augmentation and batches
# --------------------------------------------------------------------------


def draw_shift_columns(rng: np.random.Generator, width: int, range_deg: float, size=None):
    """Whole-column shifts uniform over the configured heading range (centered on 0)."""
    half = int(math.floor(width * range_deg / 360.0 / 2))
    if range_deg >= 360:
        return rng.integers(0, width, size=size)
    return rng.integers(-half, half + 1, size=size)


@dataclass
class Batch:
    ground: np.ndarray
    aerial: np.ndarray
    poses: list[Pose]
    fov: float
    ids: list[str]


def make_batch(data: Dataset, idx, rng: np.random.Generator, cfg: TrainConfig) -> Batch:
    w = data.ground.shape[2]
    shifts = draw_shift_columns(rng, w, cfg.orientation_range, size=len(idx))
    fov = float(cfg.fovs[int(rng.integers(len(cfg.fovs)))])
    grounds, poses = [], []
    for i, m in zip(idx, shifts):
        rec = data.records[i]
        delta = float(m) * 360.0 / w
        g = shift_panorama(data.ground[i], delta) if m else data.ground[i]
        grounds.append(crop_fov(GroundImage(g), fov).pixels)
        poses.append(Pose(rec["u"], rec["v"], normalize_heading(rec["heading"] + delta)))
    aerials = data.aerial[list(idx)]
    if cfg.aerial_rot90:
        turns = rng.integers(0, 4, size=len(idx))
        aerials = np.stack([rotate_aerial(a, int(k)) for a, k in zip(aerials, turns)])
        poses = [rotate_pose(p, int(k), aerials.shape[1]) for p, k in zip(poses, turns)]
    return Batch(np.stack(grounds), aerials, poses, fov, [data.records[i]["id"] for i in idx])


def rotate_aerial(aerial: np.ndarray, turns: int) -> np.ndarray:
    """Rotate an L x L x C patch clockwise by ``turns`` quarter turns."""
    return np.ascontiguousarray(np.rot90(aerial, k=-turns, axes=(0, 1)))


def rotate_pose(pose: Pose, turns: int, L: int) -> Pose:
    """The pose as seen in the patch rotated by :func:`rotate_aerial`."""
    u, v = pose.u, pose.v
    for _ in range(turns % 4):
        u, v = v, L - u
    return Pose(u, v, normalize_heading(pose.heading + 90.0 * turns))


@dataclass
class StepLosses:
    total: float
    loc: float
    ori: float
    con: float


def batch_loss(model: CrossViewModel, batch: Batch, cfg: TrainConfig):
    """Forward pass plus the weighted objective. Returns (loss tensor, StepLosses)."""
    L = model.cfg.L
    out = model.forward(batch.ground, batch.aerial, batch.fov)
    labels = [make_label(p, L, cfg.label_sigma) for p in batch.poses]
    d_gt = np.stack([lab.map for lab in labels])
    headings = np.array([p.heading for p in batch.poses])
    if cfg.loc_loss == "ce":
        loc = ce_loss(out.D, d_gt)
    else:
        loc = wasserstein_loss(out.D, [lab.gt_pixel for lab in labels])
    ori = orientation_loss(out.Y, d_gt, headings)
    con = None
    if out.volumes:
        con = contrastive_loss(out.volumes, [lab.map for lab in labels], list(headings), model.cfg.R,
                               cfg.loss.tau)
    total = total_loss(loc, ori, con, cfg.loss)
    parts = StepLosses(float(total.data), float(loc.data), float(ori.data),
                       float(con.data) if con is not None else 0.0)
    return total, parts


def check_compatible(data: Dataset, mcfg: ModelConfig) -> None:
    if data.aerial.shape[1:3] != (mcfg.L, mcfg.L):
        raise ShapeError(f"dataset aerial size {data.aerial.shape[1:3]} != model L={mcfg.L}")
    if data.ground.shape[1:3] != (mcfg.ground_h, mcfg.ground_w):
        raise ShapeError(
            f"dataset ground size {data.ground.shape[1:3]} != model {(mcfg.ground_h, mcfg.ground_w)}"
        )


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(directory, model: CrossViewModel, opt: OptimizerState, epoch: int, step: int,
                    tcfg: TrainConfig) -> Path:
    d = Path(directory)
    model.save(d)
    od = d / "optimizer"
    od.mkdir(exist_ok=True)
    names = sorted(opt.m)
    for i, k in enumerate(names):
        io.save(od / f"m_{i:04d}.cvt", opt.m[k])
        io.save(od / f"v_{i:04d}.cvt", opt.v[k])
    (od / "names.txt").write_text("\n".join(names) + "\n")
    # all batch randomness derives from (seed, step), so the step counter is the RNG state
    state = {"epoch": epoch, "step": step, "adam_step": opt.step, "rng": {"seed": tcfg.seed, "step": step}}
    (d / "state.json").write_text(json.dumps(state, sort_keys=True) + "\n")
    cfgio.save(tcfg, d / "train.cfg")
    return d


def load_checkpoint(directory) -> tuple[CrossViewModel, OptimizerState, dict]:
    d = Path(directory)
    model = CrossViewModel.load(d)
    od = d / "optimizer"
    names = [n for n in (od / "names.txt").read_text().splitlines() if n]
    params = model.parameters()
    if set(names) != set(params):
        raise KeyError("optimizer state does not match model parameters")
    m = {k: io.load(od / f"m_{i:04d}.cvt") for i, k in enumerate(names)}
    v = {k: io.load(od / f"v_{i:04d}.cvt") for i, k in enumerate(names)}
    state = json.loads((d / "state.json").read_text())
    return model, OptimizerState(m, v, int(state["adam_step"])), state


def latest_checkpoint(run_dir) -> Path | None:
    ckpts = sorted(Path(run_dir).glob("ckpt_epoch_*"))
    return ckpts[-1] if ckpts else None


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: CrossViewModel
    losses: list[dict]
    checkpoints: list[Path]
    skipped: list[str]
    seconds: float

    def epoch_means(self, key: str = "loss") -> list[float]:
        return epoch_means(self.losses, key)


def epoch_means(rows: list[dict], key: str = "loss") -> list[float]:
    """Per-epoch mean of a logged loss column (the smoothed curve used by the trend check)."""
    by: dict[int, list[float]] = {}
    for r in rows:
        by.setdefault(int(r["epoch"]), []).append(float(r[key]))
    return [float(np.mean(by[e])) for e in sorted(by)]


def loss_decreased(rows: list[dict], first: int = 1, later: int = 5, key: str = "loss") -> bool:
    """Trend hook: smoothed loss at epoch ``later`` below that at epoch ``first`` (1-based)."""
    means = epoch_means(rows, key)
    return len(means) >= later and means[later - 1] < means[first - 1]


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 0xE90C, epoch]).permutation(n)


def steps_per_epoch(n: int, batch: int) -> int:
    return max(1, n // batch)


def _read_loss_rows(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with path.open() as f:
        return [dict(r) for r in csv.DictReader(f)]


def train(data: Dataset, mcfg: ModelConfig, tcfg: TrainConfig, out=None, resume: bool = False,
          model: CrossViewModel | None = None, progress=None) -> TrainResult:
    """Train on ``data``; with ``out`` set, write checkpoints, ``losses.csv`` and ``config.resolved``.

    With ``resume`` the latest checkpoint under ``out`` is restored and training
    continues from its step; the result is bit-identical to an uninterrupted run.
    """
    tcfg.validate()
    mcfg.validate()
    check_compatible(data, mcfg)
    out = Path(out) if out is not None else None
    start_step = 0
    opt = None
    if resume:
        if out is None:
            raise ValueError("resume needs an output directory")
        ck = latest_checkpoint(out)
        if ck is not None:
            model, opt, state = load_checkpoint(ck)
            start_step = int(state["step"])
    if model is None:
        model = CrossViewModel(mcfg)
    params = model.parameters()
    if opt is None:
        opt = OptimizerState.zeros(params)
    names = sorted(params)

    rows: list[dict] = []
    loss_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(
            "".join(f"model.{k} = {json.dumps(v)}\n" for k, v in cfgio.to_items(mcfg))
            + "".join(f"train.{k} = {json.dumps(v)}\n" for k, v in cfgio.to_items(tcfg))
        )
        if start_step:
            rows = [r for r in _read_loss_rows(out / "losses.csv") if int(r["step"]) < start_step]
        with (out / "losses.csv").open("w", newline="") as f:
            w = csv.DictWriter(f, LOSS_COLUMNS)
            w.writeheader()
            w.writerows(rows)
        loss_file = (out / "losses.csv").open("a", newline="")
    writer = csv.DictWriter(loss_file, LOSS_COLUMNS) if loss_file else None

    n = len(data)
    spe = steps_per_epoch(n, tcfg.batch_size)
    total_steps = spe * tcfg.epochs
    if tcfg.max_steps:
        total_steps = min(total_steps, tcfg.max_steps)
    checkpoints: list[Path] = []
    skipped: list[str] = []
    t0 = time.perf_counter()
    try:
        for step in range(start_step, total_steps):
            epoch, k = divmod(step, spe)
            order = _epoch_order(tcfg.seed, epoch, n)
            idx = order[k * tcfg.batch_size : (k + 1) * tcfg.batch_size]
            rng = np.random.default_rng([tcfg.seed, 0x57E9, step])
            batch = make_batch(data, idx, rng, tcfg)
            for p in params.values():
                p.grad = None
            loss, parts = batch_loss(model, batch, tcfg)
            backprop(loss)
            grads = {k2: (params[k2].grad if params[k2].grad is not None else np.zeros_like(params[k2].data))
                     for k2 in names}
            norm = clip_by_global_norm(grads, tcfg.clip_norm)
            try:
                adam_step(params, grads, opt, learning_rate(tcfg, step, spe * tcfg.epochs),
                          weight_decay=tcfg.weight_decay)
            except NonFiniteGradient as e:
                log.warning("step %d aborted (%s); samples %s", step, e, ",".join(batch.ids))
                skipped.extend(batch.ids)
            row = {"step": step, "epoch": epoch + 1, "loss": parts.total, "loss_loc": parts.loc,
                   "loss_ori": parts.ori, "loss_con": parts.con, "grad_norm": norm}
            rows.append(row)
            if writer:
                writer.writerow(row)
                loss_file.flush()
            if progress:
                progress(row)
            end_of_epoch = k == spe - 1
            if out is not None and (end_of_epoch and (epoch + 1) % tcfg.checkpoint_every == 0
                                    or step == total_steps - 1):
                checkpoints.append(save_checkpoint(out / f"ckpt_epoch_{epoch + 1:03d}", model, opt, epoch + 1,
                                                   step + 1, tcfg))
    finally:
        if loss_file:
            loss_file.close()
    return TrainResult(model, rows, checkpoints, skipped, time.perf_counter() - t0)
