import math

import numpy as np
import pytest

from crossview.decoders import PoseEstimate
from crossview.evaluation import (
    confidence_curve,
    curve_from_errors,
    evaluate,
    lower_median,
    non_increasing,
    read_curves,
    write_curves,
    write_report,
)
from crossview.geometry import Pose


def _est(u, v, h, conf=0.5, D=None):
    return PoseEstimate(Pose(u, v, h), conf, (int(u), int(v)), D)


def test_lower_median():
    assert lower_median([3, 1, 2]) == 2
    assert lower_median([4, 1, 3, 2]) == 2
    assert math.isnan(lower_median([]))


def test_perfect_predictions():
    gts = [Pose(10.5, 20.5, 30), Pose(5.5, 5.5, 300)]
    D = np.zeros((64, 64))
    D[10, 20] = 1
    preds = [_est(g.u, g.v, g.heading, D=D) for g in gts]
    rep = evaluate(preds, gts, 1.1)
    assert rep.median_loc == 0 and rep.mean_ori == 0
    assert all(v == 100.0 for v in rep.recall_loc.values())
    assert all(v == 100.0 for v in rep.recall_ori.values())
    assert rep.mean_p_gt == pytest.approx(0.5)  # second gt pixel has no mass


def test_recall_and_median_arithmetic():
    gts = [Pose(0, 0, 0)] * 3
    preds = [_est(1, 0, 0), _est(2, 0, 0), _est(10, 0, 0)]
    rep = evaluate(preds, gts, 1.0)
    assert rep.recall_loc[3.0] == pytest.approx(200 / 3)
    assert rep.median_loc == 2.0
    assert rep.mean_loc == pytest.approx(13 / 3)


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        evaluate([_est(0, 0, 0)], [], 1.0)


def test_recomputation_oracle_on_random_records():
    rng = np.random.default_rng(0)
    n, s = 50, 70 / 64
    gts = [Pose(*rng.uniform(0, 64, 2), rng.uniform(0, 360)) for _ in range(n)]
    preds = []
    for g in gts:
        D = rng.random((64, 64))
        D /= D.sum()
        preds.append(_est(*rng.uniform(0, 64, 2), rng.uniform(0, 360), rng.random(), D))
    rep = evaluate(preds, gts, s)
    # row-by-row recomputation, the way a spreadsheet would do it
    loc, ori, lat, lon, pg = [], [], [], [], []
    for p, g in zip(preds, gts):
        du, dv = (p.pose.u - g.u) * s, (p.pose.v - g.v) * s
        loc.append(math.sqrt(du * du + dv * dv))
        d = abs(p.pose.heading - g.heading) % 360
        ori.append(min(d, 360 - d))
        t = math.radians(g.heading)
        fu, fv = -math.cos(t), math.sin(t)
        lon.append(abs(du * fu + dv * fv))
        lat.append(abs(du * fv - dv * fu))
        pg.append(p.distribution[int(g.u), int(g.v)])
    srt = sorted(loc)
    assert rep.median_loc == pytest.approx(srt[(n - 1) // 2])
    assert rep.mean_loc == pytest.approx(sum(loc) / n)
    assert rep.mean_ori == pytest.approx(sum(ori) / n)
    assert rep.median_ori == pytest.approx(sorted(ori)[(n - 1) // 2])
    assert rep.mean_lateral == pytest.approx(sum(lat) / n)
    assert rep.median_longitudinal == pytest.approx(sorted(lon)[(n - 1) // 2])
    assert rep.mean_p_gt == pytest.approx(sum(pg) / n)
    for t in (1, 3, 5):
        assert rep.recall_loc[t] == pytest.approx(100 * sum(x <= t for x in loc) / n)
        assert rep.recall_ori[t] == pytest.approx(100 * sum(x <= t for x in ori) / n)
    r = list(rep.recall_loc.values())
    assert r == sorted(r)
    # shuffling never changes the report
    perm = rng.permutation(n)
    rep2 = evaluate([preds[i] for i in perm], [gts[i] for i in perm], s)
    assert rep2.median_loc == rep.median_loc and rep2.mean_p_gt == pytest.approx(rep.mean_p_gt)
    assert all(0 <= x <= 1 for x in pg)


def test_confidence_curve_constant_confidence():
    rng = np.random.default_rng(1)
    loc, ori = rng.random(40), rng.random(40) * 180
    curve = curve_from_errors(loc, ori, np.ones(40))
    assert [p for p, _, _ in curve] == pytest.approx([0.1 * k for k in range(1, 11)])
    assert curve[-1][1] == lower_median(loc)
    # ties keep input order, so the top-p set is the first p*n samples
    assert curve[0][1] == lower_median(loc[:4])


def test_confidence_curve_adversarial_ranking_is_increasing():
    rng = np.random.default_rng(2)
    err = rng.random(100) * 10
    # most confident = largest error: the curve rises as p goes from 1.0 down to 0.1
    meds = [m for _, m, _ in curve_from_errors(err, err, err)]
    assert meds == sorted(meds, reverse=True)
    # honest ranking: the curve falls as p shrinks
    honest = [m for _, m, _ in curve_from_errors(err, err, -err)]
    assert honest == sorted(honest)


def test_confidence_curve_needs_ten():
    with pytest.raises(ValueError):
        confidence_curve([_est(0, 0, 0)] * 9, [Pose(0, 0, 0)] * 9)


def test_non_increasing_slack():
    assert non_increasing([10, 9, 9.5, 8])
    assert not non_increasing([10, 12])
    assert non_increasing([10, 10.9])


def test_csv_outputs(tmp_path):
    gts = [Pose(3, 3, 0)] * 10
    preds = [_est(3 + k, 3, 5 * k, conf=1 - k / 10) for k in range(10)]
    rep = evaluate(preds, gts, 1.0)
    p = write_report(rep, tmp_path / "report.csv")
    lines = p.read_text().splitlines()
    assert lines[0] == "metric,value" and any(l.startswith("median_loc_m,") for l in lines)
    rows = [("prior_delta", 45.0, 1.0, 2.0), ("fov", 360.0, 0.5, 1.5)]
    write_curves(rows, tmp_path / "curves.csv")
    assert read_curves(tmp_path / "curves.csv") == rows
