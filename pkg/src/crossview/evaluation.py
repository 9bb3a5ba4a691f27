"""Localization and orientation metrics, confidence-ranked curves and inference-time sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decoders import PoseEstimate
from .geometry import GroundImage, MetersPerPixel, Pose, angle_diff, crop_fov, decompose_error
from .matching import OrientationPrior

DISTANCE_THRESHOLDS = (1.0, 3.0, 5.0)
ANGLE_THRESHOLDS = (1.0, 3.0, 5.0)
FRACTIONS = tuple(round(0.1 * k, 1) for k in range(1, 11))


def lower_median(x) -> float:
    """Median that picks the lower middle element on even counts."""
    a = np.sort(np.asarray(x, dtype=np.float64))
    if a.size == 0:
        return math.nan
    return float(a[(a.size - 1) // 2])


@dataclass
class SampleErrors:
    loc: np.ndarray  # meters
    ori: np.ndarray  # degrees
    lateral: np.ndarray
    longitudinal: np.ndarray
    p_gt: np.ndarray
    confidence: np.ndarray


@dataclass
class MetricsReport:
    count: int
    mean_loc: float
    median_loc: float
    mean_ori: float
    median_ori: float
    recall_loc: dict[float, float]  # percent
    recall_ori: dict[float, float]
    mean_lateral: float
    median_lateral: float
    mean_longitudinal: float
    median_longitudinal: float
    mean_p_gt: float
    median_p_gt: float
    deciles: list[tuple[float, float, float]] = field(default_factory=list)

    def rows(self) -> list[tuple[str, float]]:
        out = [
            ("count", float(self.count)),
            ("mean_loc_m", self.mean_loc),
            ("median_loc_m", self.median_loc),
            ("mean_ori_deg", self.mean_ori),
            ("median_ori_deg", self.median_ori),
        ]
        out += [(f"recall_loc_{t:g}m_pct", v) for t, v in self.recall_loc.items()]
        out += [(f"recall_ori_{t:g}deg_pct", v) for t, v in self.recall_ori.items()]
        out += [
            ("mean_lateral_m", self.mean_lateral),
            ("median_lateral_m", self.median_lateral),
            ("mean_longitudinal_m", self.mean_longitudinal),
            ("median_longitudinal_m", self.median_longitudinal),
            ("mean_p_gt", self.mean_p_gt),
            ("median_p_gt", self.median_p_gt),
        ]
        for frac, loc, ori in self.deciles:
            out.append((f"top{int(round(frac * 100))}_median_loc_m", loc))
            out.append((f"top{int(round(frac * 100))}_median_ori_deg", ori))
        return out

    def as_dict(self) -> dict[str, float]:
        return dict(self.rows())


def _scale(scale) -> float:
    return scale.scale if isinstance(scale, MetersPerPixel) else float(scale)


def sample_errors(predictions: list[PoseEstimate], gts: list[Pose], scale) -> SampleErrors:
    if len(predictions) != len(gts):
        raise ValueError(f"{len(predictions)} predictions but {len(gts)} ground truths")
    s = _scale(scale)
    loc, ori, lat, lon, pgt, conf = [], [], [], [], [], []
    for est, gt in zip(predictions, gts):
        p = est.pose
        loc.append(math.hypot(p.u - gt.u, p.v - gt.v) * s)
        ori.append(angle_diff(p.heading, gt.heading))
        la, lo = decompose_error(p, gt, s)
        lat.append(la)
        lon.append(lo)
        if est.distribution is not None:
            gi, gj = gt.pixel()
            pgt.append(float(est.distribution[gi, gj]))
        else:
            pgt.append(math.nan)
        conf.append(est.confidence)
    return SampleErrors(*(np.asarray(x, dtype=np.float64) for x in (loc, ori, lat, lon, pgt, conf)))


def _recall(err: np.ndarray, thresholds) -> dict[float, float]:
    return {float(t): 100.0 * float(np.mean(err <= t)) for t in thresholds}


def curve_from_errors(loc, ori, confidence, fractions=FRACTIONS) -> list[tuple[float, float, float]]:
    """Median errors over the most confident fraction ``p`` of samples for each ``p``."""
    loc, ori, confidence = (np.asarray(x, dtype=np.float64) for x in (loc, ori, confidence))
    # stable sort keeps input order among equal confidences
    order = np.argsort(-confidence, kind="stable")
    n = len(order)
    out = []
    for p in fractions:
        k = max(1, int(math.ceil(round(p * n, 9))))
        sel = order[:k]
        out.append((float(p), lower_median(loc[sel]), lower_median(ori[sel])))
    return out


def confidence_curve(predictions: list[PoseEstimate], gts: list[Pose], scale=1.0):
    """Per-decile median (localization m, orientation deg) for the top-p confident samples."""
    if len(predictions) < 10:
        raise ValueError("confidence curve needs at least 10 samples")
    e = sample_errors(predictions, gts, scale)
    return curve_from_errors(e.loc, e.ori, e.confidence)


def report_from_errors(e: SampleErrors) -> MetricsReport:
    n = len(e.loc)
    if n == 0:
        raise ValueError("no samples to evaluate")
    pg = e.p_gt[np.isfinite(e.p_gt)]
    return MetricsReport(
        count=n,
        mean_loc=float(e.loc.mean()),
        median_loc=lower_median(e.loc),
        mean_ori=float(e.ori.mean()),
        median_ori=lower_median(e.ori),
        recall_loc=_recall(e.loc, DISTANCE_THRESHOLDS),
        recall_ori=_recall(e.ori, ANGLE_THRESHOLDS),
        mean_lateral=float(e.lateral.mean()),
        median_lateral=lower_median(e.lateral),
        mean_longitudinal=float(e.longitudinal.mean()),
        median_longitudinal=lower_median(e.longitudinal),
        mean_p_gt=float(pg.mean()) if pg.size else math.nan,
        median_p_gt=lower_median(pg),
        deciles=curve_from_errors(e.loc, e.ori, e.confidence) if n >= 10 else [],
    )


def evaluate(predictions: list[PoseEstimate], gts: list[Pose], scale) -> MetricsReport:
    return report_from_errors(sample_errors(predictions, gts, scale))


# --------------------------------------------------------------------------
# running a model over a dataset
# --------------------------------------------------------------------------


def predict_dataset(model, data, fov: float = 360.0, prior_delta: float | None = None,
                    batch_size: int = 25, prior_centers=None) -> list[PoseEstimate]:
    """Predict every sample; the FoV crop and orientation prior are applied at inference only.

    The prior is centered on each sample's ground-truth heading unless
    ``prior_centers`` gives explicit centers.
    """
    grounds = data.ground
    if fov < 360.0:
        grounds = np.stack([crop_fov(GroundImage(g), fov).pixels for g in grounds])
    headings = [r["heading"] for r in data.records] if prior_centers is None else list(prior_centers)
    out: list[PoseEstimate] = []
    for s in range(0, len(data), batch_size):
        sl = slice(s, s + batch_size)
        prior = None
        if prior_delta is not None:
            prior = [OrientationPrior(h, prior_delta) for h in headings[sl]]
        out.extend(model.predict(grounds[sl], data.aerial[sl], fov, prior, keep_maps=True))
    return out


def evaluate_model(model, data, fov: float = 360.0, prior_delta: float | None = None) -> MetricsReport:
    preds = predict_dataset(model, data, fov, prior_delta)
    return evaluate(preds, data.poses, data.scale)


@dataclass
class SweepPoint:
    axis: str
    value: float
    report: MetricsReport

    @property
    def median_loc(self) -> float:
        return self.report.median_loc

    @property
    def median_ori(self) -> float:
        return self.report.median_ori


def sweep(model, data, axis: str, values) -> list[SweepPoint]:
    """Evaluate one test set at every axis value without retraining."""
    if axis not in ("prior_delta", "fov"):
        raise ValueError(f"axis must be 'prior_delta' or 'fov', got {axis!r}")
    points = []
    for v in values:
        v = float(v)
        if axis == "prior_delta":
            rep = evaluate_model(model, data, prior_delta=v)
        else:
            rep = evaluate_model(model, data, fov=v)
        points.append(SweepPoint(axis, v, rep))
    return points


def non_increasing(values, slack: float = 0.10) -> bool:
    """Each value is at most (1 + slack) times the previous one."""
    v = list(values)
    return all(b <= a * (1.0 + slack) + 1e-12 for a, b in zip(v, v[1:]))


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------

CURVE_COLUMNS = ("axis", "value", "median_loc_m", "median_ori_deg")


def write_report(report: MetricsReport, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("metric", "value"))
        for k, v in report.rows():
            w.writerow((k, repr(float(v))))
    return path


def curve_rows(report: MetricsReport | None = None, sweeps: list[SweepPoint] = ()) -> list[tuple]:
    rows = []
    if report is not None:
        rows += [("confidence_top_fraction", p, loc, ori) for p, loc, ori in report.deciles]
    rows += [(pt.axis, pt.value, pt.median_loc, pt.median_ori) for pt in sweeps]
    return rows


def write_curves(rows: list[tuple], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CURVE_COLUMNS)
        for axis, value, loc, ori in rows:
            w.writerow((axis, repr(float(value)), repr(float(loc)), repr(float(ori))))
    return path


def read_curves(path) -> list[tuple[str, float, float, float]]:
    with Path(path).open() as f:
        r = csv.DictReader(f)
        return [(row["axis"], float(row["value"]), float(row["median_loc_m"]), float(row["median_ori_deg"]))
                for row in r]
