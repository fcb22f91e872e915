import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from keysg.errors import EmptyGT
from keysg.evalharness import (
    Candidate,
    class_rank,
    classify_objects,
    format_table,
    grounding_accuracy,
    iou3d,
    recall_at_k,
    semantic_seg_metrics,
    transfer_labels,
)
from keysg.ingest import PointCloud
from metric_fixtures import (
    RECALL_EXPECTED,
    RECALL_GTS,
    RECALL_PREDS,
    SEG_EXPECTED,
    SEG_GT,
    SEG_PRED,
    cube,
    grounding_fixture,
)


def test_iou_examples():
    a = cube((0, 0, 0))
    assert iou3d(a, a) == 1.0
    assert iou3d(a, cube((1, 1, 1))) == 0.0
    assert iou3d(PointCloud.empty(), PointCloud.empty()) == 0.0
    half = PointCloud(a.points[a.points[:, 0] < 0.1])  # 2 of 4 x-layers
    assert iou3d(half, a) == 0.5
    with pytest.raises(ValueError):
        iou3d(a, a, voxel=0)


def test_classify_examples(mock):
    mug = mock.embed_text("mug").vector
    assert classify_objects([mug], ["table", "mug", "chair"], mock) == ["mug"]
    assert classify_objects([mug], ["sofa"], mock) == ["sofa"]
    # a vector orthogonal to every class prompt ties at 0 -> first class
    e = np.zeros_like(mug)
    used = np.zeros(len(mug), bool)
    for c in ("table", "chair"):
        used |= mock.embed_text(f"an image of {c}").vector != 0
    e[np.flatnonzero(~used)[0]] = 1.0
    assert classify_objects([e], ["table", "chair"], mock) == ["table"]
    with pytest.raises(ValueError):
        classify_objects([mug], [], mock)


def test_class_rank(mock):
    mug = mock.embed_text("mug").vector
    assert class_rank(mug, "mug", ["table", "mug"], mock) == 1
    assert class_rank(mug, "table", ["table", "mug"], mock) == 2


def test_seg_examples():
    assert semantic_seg_metrics(["a", "b"], ["a", "b"]) == {"mAcc": 1.0, "f_mIoU": 1.0}
    m = semantic_seg_metrics(["a"] * 4, ["a", "a", "b", "b"])
    assert m == {"mAcc": 0.5, "f_mIoU": 0.25}
    assert semantic_seg_metrics(["z"] * 3, ["a", "b", "c"])["mAcc"] == 0.0
    with pytest.raises(EmptyGT):
        semantic_seg_metrics([], [])


def test_seg_three_class_fixture():
    m = semantic_seg_metrics(SEG_PRED, SEG_GT)
    assert m["mAcc"] == pytest.approx(SEG_EXPECTED["mAcc"], abs=1e-12)
    assert m["f_mIoU"] == pytest.approx(SEG_EXPECTED["f_mIoU"], abs=1e-12)


def test_macc_ignores_class_frequency():
    # doubling every point of one class leaves each per-class recall unchanged
    gt2 = SEG_GT + ["a"] * 4
    pred2 = SEG_PRED + SEG_PRED[:4]
    assert semantic_seg_metrics(pred2, gt2)["mAcc"] == pytest.approx(SEG_EXPECTED["mAcc"], abs=1e-12)


def test_transfer_labels():
    pred = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    gt = np.array([[0.01, 0, 0], [0.98, 0, 0], [0.5, 0, 0]])
    assert transfer_labels(pred, ["a", "b"], gt, 0.05) == ["a", "b", None]
    assert transfer_labels(np.zeros((0, 3)), [], gt) == [None] * 3


def test_recall_fixture():
    for (k, t), want in RECALL_EXPECTED.items():
        assert recall_at_k(RECALL_PREDS, RECALL_GTS, k, t) == want, (k, t)
    # threshold 0 reduces to the class-rank condition alone
    assert recall_at_k(RECALL_PREDS, RECALL_GTS, 1, 0.0) == 0.5
    assert recall_at_k(RECALL_PREDS, RECALL_GTS, 3, 0.0) == 1.0


def test_recall_uses_clouds_when_no_iou():
    g = cube((0, 0, 0))
    assert recall_at_k([[Candidate(1, cloud=g)]], [g], 1, 0.99) == 1.0
    with pytest.raises(EmptyGT):
        recall_at_k([], [], 1, 0.1)
    with pytest.raises(ValueError):
        recall_at_k([[]], [g], 0, 0.1)


cand_lists = st.lists(
    st.lists(st.builds(Candidate, st.integers(1, 12), iou=st.floats(0, 1)), max_size=5), min_size=1, max_size=8
)


@settings(max_examples=100, deadline=None)
@given(cand_lists, st.integers(1, 10), st.integers(1, 10), st.floats(0, 1), st.floats(0, 1))
def test_recall_monotone(preds, k1, k2, t1, t2):
    gts = [None] * len(preds)
    lo_k, hi_k = sorted((k1, k2))
    lo_t, hi_t = sorted((t1, t2))
    r = recall_at_k(preds, gts, lo_k, lo_t)
    assert 0.0 <= r <= 1.0
    assert r <= recall_at_k(preds, gts, hi_k, lo_t)
    assert r >= recall_at_k(preds, gts, lo_k, hi_t)


def test_grounding_fixture():
    preds, gts, flags, want = grounding_fixture()
    acc = grounding_accuracy(preds, gts, 0.1, flags)
    assert acc["overall"] == want["overall"] and acc["n"] == 10
    for flag in ("spatial", "color"):
        split = acc["by_category"][flag]
        assert split["with"] == pytest.approx(want[flag]["with"], abs=1e-12)
        assert split["without"] == pytest.approx(want[flag]["without"], abs=1e-12)
        weighted = (split["with"] * split["with_n"] + split["without"] * split["without_n"]) / 10
        assert weighted == pytest.approx(acc["overall"], abs=1e-12)


def test_grounding_all_correct_and_empty():
    g = [cube((0, 0, 0)), cube((1, 0, 0))]
    acc = grounding_accuracy(g, g, 0.1, [{"spatial": True}, {"spatial": False}])
    assert acc["overall"] == 1.0 and acc["by_category"]["spatial"]["with"] == 1.0
    with pytest.raises(EmptyGT):
        grounding_accuracy([], [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abc"), st.sampled_from(["a", "b", "c", None])), min_size=1, max_size=40))
def test_seg_metrics_in_unit_interval(pairs):
    gt, pred = zip(*pairs)
    m = semantic_seg_metrics(list(pred), list(gt))
    assert 0.0 <= m["mAcc"] <= 1.0 and 0.0 <= m["f_mIoU"] <= 1.0


def test_format_table():
    t = format_table("T", ["Method", "mAcc"], [["keysg", 0.5], ["x", None]])
    lines = t.splitlines()
    assert lines[0] == "T" and lines[1].split() == ["Method", "mAcc"]
    assert lines[3].split() == ["keysg", "50.00"] and lines[4].split() == ["x", "-"]
