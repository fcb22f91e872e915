"""Small hand-checked fixtures for the metric functions, shared with the acceptance suite."""

import numpy as np

from keysg.evalharness import Candidate
from keysg.ingest import PointCloud

# 3 classes over 10 points. Confusion (rows gt, cols pred):
#        a  b  c  none
#   a    3  1  0  0
#   b    0  2  1  0
#   c    0  0  2  1
# recall a=3/4 b=2/3 c=2/3 -> mAcc = 25/36
# IoU    a=3/4 b=2/4 c=2/4 -> f_mIoU = .4*.75 + .3*.5 + .3*.5 = 0.6
SEG_GT = ["a"] * 4 + ["b"] * 3 + ["c"] * 3
SEG_PRED = ["a", "a", "a", "b", "b", "b", "c", "c", "c", None]
SEG_EXPECTED = {"mAcc": 25 / 36, "f_mIoU": 0.6}


def cube(origin, n=4, voxel=0.05):
    """n^3 voxel centres starting at ``origin`` (one point per voxel)."""
    g = np.stack(np.meshgrid(*[np.arange(n)] * 3, indexing="ij"), -1).reshape(-1, 3)
    return PointCloud((g + 0.5) * voxel + np.asarray(origin, float))


# 2 gt items: item 0 matched at class rank 1 with IoU 0.6; item 1 at class rank 3 with IoU 0.4.
RECALL_PREDS = [[Candidate(1, iou=0.6), Candidate(7, iou=0.9)], [Candidate(3, iou=0.4)]]
RECALL_GTS = [cube((0, 0, 0)), cube((1, 0, 0))]
RECALL_EXPECTED = {(1, 0.25): 0.5, (5, 0.25): 1.0, (3, 0.25): 1.0, (5, 0.5): 0.5, (10, 0.7): 0.5, (10, 0.95): 0.0}


def grounding_fixture():
    """10 queries, 3 correct. Returns predicted clouds, gt clouds, flags and the expected table."""
    gts = [cube((2.0 * i, 0, 0)) for i in range(10)]
    correct = {0, 4, 7}
    preds = [gts[i] if i in correct else (None if i % 2 else cube((2.0 * i, 5, 0))) for i in range(10)]
    spatial = {0, 1, 2, 3}  # 1 of 4 correct
    color = {4, 7, 8}  # 2 of 3 correct
    flags = [{"spatial": i in spatial, "color": i in color} for i in range(10)]
    expected = {
        "overall": 0.3,
        "spatial": {"with": 1 / 4, "without": 2 / 6},
        "color": {"with": 2 / 3, "without": 1 / 7},
    }
    return preds, gts, flags, expected
