import json

import numpy as np
import pytest

from fmwiss.errors import IdOutOfRange
from fmwiss.eval_protocol import ConfusionMatrix, confusion_update, format_report, miou, save_report
from oracles import miou_sets


def test_update_diagonal_counts():
    cm = ConfusionMatrix([1, 2])
    gt = np.full((2, 2), 1)
    confusion_update(cm, gt, gt)
    assert cm.counts[cm.index_of(1), cm.index_of(1)] == 4
    assert cm.counts.sum() == 4


def test_update_ignores_ignore_id():
    cm = ConfusionMatrix([1])
    gt = np.full((3, 3), 255)
    pred = np.ones((3, 3), dtype=int)
    confusion_update(cm, gt, pred, ignore_id=255)
    assert cm.counts.sum() == 0


def test_update_matches_counting_oracle():
    rng = np.random.default_rng(0)
    cm = ConfusionMatrix([1, 2, 3])
    gt = rng.integers(0, 4, size=(3, 3))
    pred = rng.integers(0, 4, size=(3, 3))
    confusion_update(cm, gt, pred)
    for a in range(4):
        for b in range(4):
            expect = int(((gt == a) & (pred == b)).sum())
            assert cm.counts[cm.index_of(a), cm.index_of(b)] == expect


def test_update_rejects_unknown_ids():
    cm = ConfusionMatrix([1])
    with pytest.raises(IdOutOfRange):
        confusion_update(cm, np.full((2, 2), 9), np.zeros((2, 2), dtype=int))


def test_update_additivity():
    rng = np.random.default_rng(1)
    a_gt, a_pred = rng.integers(0, 3, size=(2, 4, 4))
    b_gt, b_pred = rng.integers(0, 3, size=(2, 4, 4))
    cm1 = ConfusionMatrix([1, 2])
    confusion_update(cm1, a_gt, a_pred)
    cm2 = ConfusionMatrix([1, 2])
    confusion_update(cm2, b_gt, b_pred)
    joint = ConfusionMatrix([1, 2])
    confusion_update(joint, np.concatenate([a_gt, b_gt]), np.concatenate([a_pred, b_pred]))
    assert np.array_equal((cm1 + cm2).counts, joint.counts)


def test_miou_perfect_and_disjoint():
    cm = ConfusionMatrix([1, 2])
    gt = np.array([[1, 1], [2, 2]])
    confusion_update(cm, gt, gt)
    report = miou(cm, {"all": {1, 2}})
    assert report["all"]["mean"] == pytest.approx(1.0)
    cm2 = ConfusionMatrix([1, 2])
    confusion_update(cm2, np.array([[1, 1]]), np.array([[2, 2]]))
    report2 = miou(cm2, {"all": {1, 2}})
    assert report2["all"]["per_class"][1] == 0.0
    assert report2["all"]["per_class"][2] == 0.0


def test_miou_hand_built_matrix():
    cm = ConfusionMatrix([1, 2, 3])
    cm.counts[:] = [
        [10, 1, 0, 0],   # bg
        [2, 7, 1, 0],    # class 1
        [5, 0, 5, 0],    # class 2
        [0, 0, 0, 0],    # class 3: absent in truth and predictions
    ]
    report = miou(cm, {"fg": {1, 2, 3}, "bg": {0}})
    assert report["fg"]["per_class"][1] == pytest.approx(7 / (10 + 8 - 7), abs=1e-9)
    assert report["fg"]["per_class"][2] == pytest.approx(5 / (10 + 6 - 5), abs=1e-9)
    assert 3 not in report["fg"]["per_class"]  # zero union excluded
    assert report["fg"]["mean"] == pytest.approx((7 / 11 + 5 / 11) / 2, abs=1e-9)
    assert report["bg"]["per_class"][0] == pytest.approx(10 / (11 + 17 - 10), abs=1e-9)


def test_miou_permutation_invariance():
    rng = np.random.default_rng(2)
    gt = rng.integers(0, 4, size=(8, 8))
    pred = rng.integers(0, 4, size=(8, 8))
    cm = ConfusionMatrix([1, 2, 3])
    confusion_update(cm, gt, pred)
    base = miou(cm, {"all": {1, 2, 3}})
    remap = {0: 0, 1: 3, 2: 1, 3: 2}
    lut = np.vectorize(remap.get)
    cm2 = ConfusionMatrix([1, 2, 3])
    confusion_update(cm2, lut(gt), lut(pred))
    other = miou(cm2, {"all": {1, 2, 3}})
    assert sorted(base["all"]["per_class"].values()) == pytest.approx(sorted(other["all"]["per_class"].values()), abs=1e-12)
    assert base["all"]["mean"] == pytest.approx(other["all"]["mean"], abs=1e-12)


def test_miou_ranges_and_groups():
    rng = np.random.default_rng(3)
    cm = ConfusionMatrix(range(1, 6))
    gt = rng.integers(0, 6, size=(8, 8))
    pred = rng.integers(0, 6, size=(8, 8))
    confusion_update(cm, gt, pred)
    report = miou(cm, {"base": set(range(1, 4)), "new": {4, 5}, "all": set(range(1, 6))})
    for group in report.values():
        for iou in group["per_class"].values():
            assert 0.0 <= iou <= 1.0


def test_report_formatting_and_save(tmp_path):
    cm = ConfusionMatrix([1, 2])
    gt = np.array([[1, 2], [1, 2]])
    confusion_update(cm, gt, gt)
    report = miou(cm, {"base": {1}, "new": {2}, "all": {1, 2}})
    text = format_report(report, order=["base", "new", "all"])
    lines = text.splitlines()
    assert "base" in lines[0] and "new" in lines[0] and "all" in lines[0]
    assert "100.00" in lines[1]
    jpath, tpath = tmp_path / "r.json", tmp_path / "r.txt"
    save_report(report, jpath, tpath)
    blob = json.loads(jpath.read_text())
    assert blob["all"]["mean"] == 1.0
    assert blob["all"]["per_class"]["1"] == 1.0
    assert tpath.read_text().strip() == text.strip()
