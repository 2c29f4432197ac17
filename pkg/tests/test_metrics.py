import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from depthpose.errors import AllMasked, LengthMismatch
from depthpose.geometry import PoseAngles
from depthpose.metrics import (
    emit_report,
    pose_report,
    read_report,
    recon_metrics,
    report_rows,
    to_intensity,
)


def naive_recon(pred, gt, eps=1e-6):
    """Per-pixel loop oracle."""
    vals = [(float(p), float(g)) for p, g in zip(np.ravel(pred), np.ravel(gt)) if g > 0]
    n = len(vals)
    l1 = sq = ar = sr = lg = dsum = 0.0
    t = [0, 0, 0]
    for p, g in vals:
        pc = max(p, eps)
        l1 += abs(p - g)
        sq += (p - g) ** 2
        ar += abs(p - g) / g
        sr += (p - g) ** 2 / g
        d = math.log(pc) - math.log(g)
        lg += d * d
        dsum += d
        r = max(pc / g, g / pc)
        for k, delta in enumerate((1.25, 2.5, 3.75)):
            t[k] += r < delta
    dmean = dsum / n
    centered = sum((math.log(max(p, eps)) - math.log(g) - dmean) ** 2 for p, g in vals)
    return {"l1_norm": l1, "l2_norm": math.sqrt(sq), "abs_rel": ar / n, "sq_rel": sr / n,
            "rmse_linear": math.sqrt(sq / n), "rmse_log": math.sqrt(lg / n),
            "rmse_scale_inv": math.sqrt(centered / n),
            "thresh_1_25": t[0] / n, "thresh_2_5": t[1] / n, "thresh_3_75": t[2] / n}


def naive_pose(preds, gts, thr=15.0):
    n = len(preds)
    errs = [[abs(p[i] - g[i]) for i in range(3)] for p, g in zip(preds, gts)]
    mean = [sum(e[i] for e in errs) / n for i in range(3)]
    std = [math.sqrt(sum((e[i] - mean[i]) ** 2 for e in errs) / n) for i in range(3)]
    hits = sum(1 for e in errs for v in e if v < thr)
    return mean, std, hits / (3 * n)


def test_identical_images():
    g = np.random.default_rng(0).uniform(1, 5, (8, 8))
    m = recon_metrics(g, g)
    for k, v in m.as_dict().items():
        assert v == (1.0 if k.startswith("thresh") else 0.0)


def test_doubled_prediction():
    g = np.full((6, 6), 3.0)
    m = recon_metrics(2 * g, g)
    assert m.abs_rel == pytest.approx(1.0)
    assert m.thresh_1_25 == 0.0 and m.thresh_2_5 == 1.0
    assert m.rmse_log == pytest.approx(math.log(2))
    assert m.as_dict() == pytest.approx(naive_recon(2 * g, g), rel=1e-12)


def test_single_pixel():
    m = recon_metrics(np.array([[3.0]]), np.array([[1.0]]))
    assert (m.l1_norm, m.rmse_linear, m.sq_rel, m.thresh_3_75) == (2.0, 2.0, 4.0, 1.0)


def test_all_masked():
    with pytest.raises(AllMasked):
        recon_metrics(np.ones((3, 3)), np.zeros((3, 3)))


def test_matches_loop_oracle_random():
    rng = np.random.default_rng(42)
    for _ in range(100):
        shape = tuple(rng.integers(1, 9, 2))
        g = rng.uniform(-0.5, 4, shape)
        g[0, 0] = abs(g[0, 0]) + 0.1
        p = rng.uniform(-0.2, 5, shape)
        got, want = recon_metrics(p, g).as_dict(), naive_recon(p, g)
        for k in want:
            assert got[k] == pytest.approx(want[k], rel=1e-12, abs=1e-12), k


pos = st.floats(0.01, 1000, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 12, elements=pos), arrays(np.float64, 12, elements=pos), st.floats(0.01, 100))
def test_threshold_monotone_and_scale_invariant(p, g, c):
    m = recon_metrics(p, g)
    assert 0 <= m.thresh_1_25 <= m.thresh_2_5 <= m.thresh_3_75 <= 1
    assert recon_metrics(p * c, g).rmse_scale_inv == pytest.approx(m.rmse_scale_inv, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 10, elements=pos), arrays(np.float64, 10, elements=pos), st.randoms())
def test_permutation_invariance(p, g, rnd):
    perm = list(range(10))
    rnd.shuffle(perm)
    a, b = recon_metrics(p, g).as_dict(), recon_metrics(p[perm], g[perm]).as_dict()
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_to_intensity():
    assert to_intensity(np.array([-1.0, 0.0, 1.0])).tolist() == [0.0, 127.5, 255.0]


def test_pose_identical():
    poses = [PoseAngles(1, 2, 3), PoseAngles(-4, 5, 6)]
    rep = pose_report(poses, poses)
    assert rep.accuracy == 1.0 and rep.mean_error == (0, 0, 0)


def test_pose_two_thirds():
    rep = pose_report([PoseAngles(5, 20, 10)], [PoseAngles(0, 0, 0)])
    assert rep.accuracy == pytest.approx(2 / 3)


def test_pose_length_mismatch():
    with pytest.raises(LengthMismatch):
        pose_report([PoseAngles(0, 0, 0)], [])
    with pytest.raises(LengthMismatch):
        pose_report([], [])


def test_pose_matches_loop_oracle():
    rng = np.random.default_rng(7)
    preds = rng.uniform(-90, 90, (1000, 3))
    gts = preds + rng.normal(0, 15, (1000, 3))
    rep = pose_report(list(preds), list(gts))
    mean, std, acc = naive_pose(preds.tolist(), gts.tolist())
    assert rep.accuracy == acc
    assert rep.mean_error == pytest.approx(mean, rel=1e-12)
    assert rep.std_error == pytest.approx(std, rel=1e-9)


def test_report_empty_header_only(tmp_path):
    csv_path, json_path = emit_report([], tmp_path / "r")
    assert csv_path.read_text() == "dataset,split,model,metric,value\n"
    assert json.loads(json_path.read_text())["rows"] == []


def test_report_round_trip_and_bytes(tmp_path):
    rows = report_rows("ds", "fold0", "head", {"accuracy": 0.1 + 0.2, "mean_error": (1.5, 2.0, 1 / 3)})
    c1, j1 = emit_report(rows, tmp_path / "a" / "report")
    c2, j2 = emit_report(rows, tmp_path / "b" / "report")
    assert read_report(c1) == rows
    doc = json.loads(j1.read_text())
    assert doc["schema_version"] == 1 and doc["rows"] == rows
    assert c1.read_bytes() == c2.read_bytes() and j1.read_bytes() == j2.read_bytes()
