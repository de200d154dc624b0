import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamvid import metrics as Mx
from streamvid.errors import ContractError

SCORES = Path(__file__).parent / "data" / "temporal_modules_scores.json"


def load_scores():
    return Mx.MetricTable.from_json(SCORES.read_text())


# --- top-1 ------------------------------------------------------------------------

def test_top1_examples():
    assert Mx.top1(np.eye(3), [0, 1, 2]) == 100.0
    assert Mx.top1([[1.0, 0.0], [1.0, 0.0]], [0, 1]) == 50.0
    assert Mx.top1([[1.0, 1.0]], [0]) == 100.0
    assert Mx.top1([[1.0, 1.0]], [1]) == 0.0
    with pytest.raises(ContractError):
        Mx.top1(np.zeros((0, 3)), [])
    with pytest.raises(ContractError):
        Mx.top1(np.zeros((2, 3)), [0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50, allow_nan=False))
def test_top1_invariant_to_logit_shift(seed, c):
    r = np.random.default_rng(seed)
    logits = r.integers(-3, 3, size=(20, 4)).astype(float)
    labels = r.integers(0, 4, 20)
    assert Mx.top1(logits + c, labels) == Mx.top1(logits, labels)


# --- boxes ------------------------------------------------------------------------

def iou_brute(a, b, grid=None):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def test_miou_examples():
    box = np.array([0.5, 0.5, 1.0, 1.0])
    assert Mx.miou(box[None], box[None]) == 1.0
    assert Mx.miou([[0, 0, 1, 1]], [[5, 5, 1, 1]]) == 0.0
    assert Mx.miou([[0, 0, 1, 1]], [[0.5, 0, 1, 1]]) == pytest.approx(1 / 3, abs=1e-15)


def test_miou_matches_brute_force():
    r = np.random.default_rng(0)
    for _ in range(50):
        k = r.integers(1, 6)
        # dyadic coordinates keep every intermediate exactly representable
        p = r.integers(0, 64, size=(k, 4)) / 64 + [0, 0, 1 / 64, 1 / 64]
        g = r.integers(0, 64, size=(k, 4)) / 64 + [0, 0, 1 / 64, 1 / 64]
        ref = sum(iou_brute(a, b) for a, b in zip(p, g)) / k
        assert Mx.miou(p, g) == ref


# --- average jaccard ----------------------------------------------------------------

def jaccard_brute(pxy, pvis, gxy, gvis, res, thr):
    tp = fp = fn = 0
    for idx in np.ndindex(*gvis.shape):
        dx = (pxy[idx][0] - gxy[idx][0]) * res
        dy = (pxy[idx][1] - gxy[idx][1]) * res
        close = math.sqrt(dx * dx + dy * dy) < thr
        if gvis[idx] and pvis[idx] and close:
            tp += 1
        else:
            fp += bool(pvis[idx])
            fn += bool(gvis[idx])
    return 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)


def test_aj_examples():
    gxy = np.random.default_rng(1).uniform(size=(2, 3, 2))
    vis = np.ones((2, 3), bool)
    assert Mx.average_jaccard(gxy, vis, gxy, vis, 64) == 1.0
    assert Mx.average_jaccard(gxy, ~vis, gxy, vis, 64) == 0.0


def test_aj_three_pixel_error():
    res = 32
    gxy = np.array([[[4, 4], [10, 20], [30, 2]], [[5, 5], [12, 20], [28, 3]]]) / res
    pxy = gxy.copy()
    pxy[1, 2, 0] += 3 / res
    vis = np.ones((2, 3), bool)
    per = Mx.jaccard_per_threshold(pxy, vis, gxy, vis, res)
    # 5 of 6 correct; the bad point is both a false positive and a false negative
    np.testing.assert_allclose(per, [5 / 7, 5 / 7, 1, 1, 1], rtol=0, atol=1e-15)
    for thr, v in zip(Mx.AJ_THRESHOLDS, per):
        assert v == jaccard_brute(pxy, vis, gxy, vis, res, thr)


def test_aj_matches_brute_force():
    r = np.random.default_rng(2)
    for _ in range(50):
        shape = (r.integers(1, 4), r.integers(1, 5))
        res = int(r.choice([16, 32, 64]))
        gxy = r.integers(0, res, size=(*shape, 2)) / res
        pxy = np.clip(gxy + r.integers(-12, 13, size=(*shape, 2)) / res, 0, 1)
        gvis, pvis = r.uniform(size=shape) < 0.7, r.uniform(size=shape) < 0.7
        per = Mx.jaccard_per_threshold(pxy, pvis, gxy, gvis, res)
        ref = [jaccard_brute(pxy, pvis, gxy, gvis, res, t) for t in Mx.AJ_THRESHOLDS]
        assert list(per) == ref
        assert np.all(np.diff(per) >= 0)


# --- depth --------------------------------------------------------------------------

def test_absrel_examples():
    gt = np.full((4, 4), 2.0)
    assert Mx.absrel(gt, gt) == 0.0
    assert Mx.absrel(np.ones((4, 4)), gt) == 0.5
    valid = np.ones((4, 4), bool)
    valid[0, 0] = False
    pred = np.ones((4, 4))
    a = Mx.absrel(pred, gt, valid)
    pred[0, 0] = 1e6
    assert Mx.absrel(pred, gt, valid) == a
    with pytest.raises(ContractError):
        Mx.absrel(pred, gt, np.zeros((4, 4), bool))


def test_absrel_matches_brute_force():
    r = np.random.default_rng(3)
    for _ in range(50):
        gt = r.uniform(0.5, 10, size=(r.integers(1, 6), r.integers(1, 6)))
        pred = gt * r.uniform(0.5, 1.5, size=gt.shape)
        valid = r.uniform(size=gt.shape) < 0.8
        valid.flat[0] = True
        terms = [abs(gt[i] - pred[i]) / gt[i] for i in np.ndindex(*gt.shape) if valid[i]]
        assert abs(Mx.absrel(pred, gt, valid) - sum(terms) / len(terms)) < 1e-12


# --- pose ---------------------------------------------------------------------------

IDENT6 = np.array([1.0, 0, 0, 0, 1, 0])


def test_rpe_examples():
    gt = np.concatenate([np.zeros(3), IDENT6])[None]
    assert Mx.rpe(gt, gt) == (0.0, 0.0)
    off = gt.copy()
    off[0, :3] = [3, 4, 0]
    assert Mx.rpe(off, gt) == (5.0, 0.0)
    rot = gt.copy()
    rot[0, 3:] = [0, 1, 0, -1, 0, 0]  # 90 degrees about z
    assert Mx.rpe(rot, gt)[1] == pytest.approx(90.0, abs=1e-12)
    assert Mx.rpe(off, gt, to_mm=1000.0)[0] == pytest.approx(5000.0, abs=1e-9)


def axis_angle_matrix(axis, angle):
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def test_rpe_matches_brute_force():
    r = np.random.default_rng(4)
    for _ in range(50):
        k = r.integers(1, 5)
        preds, gts, angles, trans = [], [], [], []
        for _ in range(k):
            Rg = axis_angle_matrix(r.normal(size=3), r.uniform(0, math.pi))
            angle = r.uniform(0.01, 3.0)
            Rp = Rg @ axis_angle_matrix(r.normal(size=3), angle)
            tg, tp = r.normal(size=3), r.normal(size=3)
            preds.append(np.concatenate([tp, Rp[:, 0], Rp[:, 1]]))
            gts.append(np.concatenate([tg, Rg[:, 0], Rg[:, 1]]))
            angles.append(math.degrees(angle))
            trans.append(math.sqrt(sum((a - b) ** 2 for a, b in zip(tp, tg))))
        t_mm, r_deg = Mx.rpe(np.array(preds), np.array(gts))
        assert abs(t_mm - sum(trans) / k) < 1e-12
        assert abs(r_deg - sum(angles) / k) < 1e-9 * 180


# --- normalized average -------------------------------------------------------------

@pytest.mark.parametrize("row,expected", [
    ("RVM-L", 77.7), ("DINOv3-L + M", 95.3), ("DINOv3-L + GMMix", 99.4),
    ("DINOv3-L + RVM_RNN", 96.8), ("DINOv3-L + MMix", 98.8),
])
def test_normalized_average_reproduces_published_column(row, expected):
    assert round(Mx.normalized_average(load_scores(), row), 1) == pytest.approx(expected, abs=0.05)


def test_best_row_scores_100_and_best_column_is_one():
    table = Mx.MetricTable({"a": Mx.HIGHER, "b": Mx.LOWER})
    table.add_row("best", {"a": 10.0, "b": 1.0})
    table.add_row("worse", {"a": 5.0, "b": 2.0})
    assert Mx.normalized_average(table, "best") == 100.0
    assert Mx.normalized_average(table, "worse") == 50.0
    assert Mx.normalized_average(table, "worse", ["a"]) == 50.0


def test_normalized_average_errors():
    table = Mx.MetricTable({"a": Mx.HIGHER, "b": Mx.LOWER})
    table.add_row("r", {"a": 0.0, "b": 0.0})
    with pytest.raises(ContractError):
        Mx.normalized_average(table, "r", ["a"])
    with pytest.raises(ContractError):
        Mx.normalized_average(table, "r", ["b"])
    with pytest.raises(ContractError):
        Mx.normalized_average(table, "missing")
    with pytest.raises(ContractError):
        Mx.normalized_average(table, "r", ["c"])
    with pytest.raises(ContractError):
        Mx.MetricTable({"a": "up"})
    with pytest.raises(ContractError):
        table.add_row("x", {"z": 1.0})


def test_missing_entries_only_matter_when_requested():
    table = load_scores()
    table.directions["Extra"] = Mx.HIGHER
    table.add_row("partial", {"SSv2": 50.0, "Waymo": 70.0, "PT": None, "Extra": 1.0})
    base = ["SSv2", "Waymo"]
    assert Mx.normalized_average(table, "partial", base) > 0
    with pytest.raises(ContractError):
        Mx.normalized_average(table, "partial", base + ["PT"])


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 1e3), st.sampled_from(["SSv2", "Waymo", "PT"]))
def test_normalized_average_is_scale_invariant(c, column):
    table = load_scores()
    before = Mx.normalized_averages(table)
    for scores in table.rows.values():
        scores[column] *= c
    after = Mx.normalized_averages(table)
    for name in before:
        assert after[name] == pytest.approx(before[name], rel=1e-12)


def test_table_json_and_text_round_trip(tmp_path):
    table = load_scores()
    again = Mx.MetricTable.from_json(table.to_json())
    assert again.rows == table.rows and again.directions == table.directions
    text = table.format_text({"norm_avg": Mx.normalized_averages(table)})
    lines = text.splitlines()
    assert len(lines) == 2 + len(table.rows)
    assert len({len(line) for line in lines}) == 1
    assert "77.7" in lines[2]


def test_records_round_trip(tmp_path):
    recs = [{"frame": 0, "box": [0.1, 0.2, 0.3, 0.4]}, {"frame": 1, "box": [0.2, 0.2, 0.3, 0.4]}]
    path = tmp_path / "preds.jsonl"
    Mx.write_records(path, recs)
    assert Mx.read_records(path) == recs
