"""Evaluation protocols: 3D IoU, open-vocabulary classification, semantic
segmentation metrics, recall@k and grounding accuracy, plus table output."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyGT
from .ingest import PointCloud, to_voxels
from .providers.base import Provider

CLASS_PROMPT = "an image of {}"


def iou3d(a: PointCloud, b: PointCloud, voxel: float = 0.05) -> float:
    if voxel <= 0:
        raise ValueError("voxel must be positive")
    va, vb = to_voxels(a, voxel), to_voxels(b, voxel)
    inter = va.intersection_size(vb)
    union = len(va) + len(vb) - inter
    return 0.0 if union == 0 else inter / union


def class_embeddings(class_names: Sequence[str], provider: Provider) -> np.ndarray:
    return np.array([provider.embed_text(CLASS_PROMPT.format(c)).vector for c in class_names])


def classify_objects(embeddings: Sequence[np.ndarray], class_names: Sequence[str], provider: Provider) -> list[str]:
    """Class with the highest cosine to "an image of {class}"; first class on ties."""
    if not class_names:
        raise ValueError("need at least one class")
    C = class_embeddings(class_names, provider)
    out = []
    for e in embeddings:
        e = np.asarray(e, dtype=np.float64)
        s = C @ (e / np.linalg.norm(e))
        out.append(class_names[int(np.argmax(s))])  # argmax returns the first maximum
    return out


def semantic_seg_metrics(pred: Sequence, gt: Sequence) -> dict[str, float]:
    """mAcc (class-mean recall over gt classes) and frequency-weighted mIoU.

    ``pred`` entries of None count as wrong for every class.
    """
    if len(gt) == 0:
        raise EmptyGT("no ground-truth points")
    if len(pred) != len(gt):
        raise ValueError("pred and gt must be aligned")
    gt_arr = np.asarray(gt, dtype=object)
    pred_arr = np.asarray(pred, dtype=object)
    classes = sorted(set(gt_arr.tolist()), key=str)
    n = len(gt_arr)
    accs, fiou = [], 0.0
    for c in classes:
        g = gt_arr == c
        p = pred_arr == c
        tp = np.count_nonzero(g & p)
        accs.append(tp / np.count_nonzero(g))
        union = np.count_nonzero(g | p)
        fiou += (np.count_nonzero(g) / n) * (tp / union)
    return {"mAcc": float(np.mean(accs)), "f_mIoU": float(fiou)}


def transfer_labels(pred_points: np.ndarray, pred_labels: Sequence, gt_points: np.ndarray, voxel: float = 0.05) -> list:
    """Give each gt point the label of the nearest predicted point within one voxel (else None)."""
    if len(pred_points) == 0:
        return [None] * len(gt_points)
    d, i = cKDTree(pred_points).query(gt_points, k=1)
    return [pred_labels[j] if dist <= voxel else None for dist, j in zip(d, i)]


@dataclass
class Candidate:
    """A predicted segment for one gt item: its rank under the class-embedding test and its cloud."""

    class_rank: int  # 1-based rank of the gt class among all labels for this candidate
    cloud: PointCloud | None = None
    iou: float | None = None  # precomputed IoU (overrides cloud)


def recall_at_k(
    predictions: Sequence[Sequence[Candidate]],
    gt_clouds: Sequence[PointCloud | None],
    k: int,
    iou_threshold: float,
    voxel: float = 0.05,
) -> float:
    """Share of gt items with a candidate whose class rank is <= k and IoU >= threshold."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(gt_clouds) == 0:
        raise EmptyGT("no ground-truth items")
    if len(predictions) != len(gt_clouds):
        raise ValueError("one candidate list per gt item")
    hits = 0
    for cands, g in zip(predictions, gt_clouds):
        for c in cands:
            if c.class_rank > k:
                continue
            iou = c.iou if c.iou is not None else iou3d(c.cloud, g, voxel)
            if iou >= iou_threshold:
                hits += 1
                break
    return hits / len(gt_clouds)


def class_rank(pred_embedding: np.ndarray, gt_class: str, labels: Sequence[str], provider: Provider) -> int:
    """1-based rank of ``gt_class`` among ``labels`` by cosine to the predicted embedding (ties by list order)."""
    C = class_embeddings(labels, provider)
    e = np.asarray(pred_embedding, dtype=np.float64)
    s = C @ (e / np.linalg.norm(e))
    order = sorted(range(len(labels)), key=lambda i: (-s[i], i))
    return order.index(list(labels).index(gt_class)) + 1


def grounding_accuracy(
    predicted: Sequence[PointCloud | None],
    gt_clouds: Sequence[PointCloud],
    iou_threshold: float = 0.1,
    categories: Sequence[Mapping[str, bool]] | None = None,
    voxel: float = 0.05,
    ious: Sequence[float] | None = None,
) -> dict:
    """Overall accuracy and, per category flag, accuracy with and without the flag."""
    if len(gt_clouds) == 0:
        raise EmptyGT("no queries")
    if ious is None:
        ious = [0.0 if p is None else iou3d(p, g, voxel) for p, g in zip(predicted, gt_clouds)]
    correct = np.array([i >= iou_threshold for i in ious], dtype=bool)
    out: dict = {"overall": float(correct.mean()), "n": int(len(correct)), "by_category": {}}
    if categories:
        flags = sorted({f for c in categories for f in c})
        for f in flags:
            on = np.array([bool(c.get(f, False)) for c in categories])
            out["by_category"][f] = {
                "with": float(correct[on].mean()) if on.any() else None,
                "with_n": int(on.sum()),
                "without": float(correct[~on].mean()) if (~on).any() else None,
                "without_n": int((~on).sum()),
            }
    return out


def format_table(title: str, header: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Aligned plain-text table; floats printed as percentages with two decimals."""

    def cell(x):
        if isinstance(x, float):
            return f"{100 * x:.2f}"
        return "-" if x is None else str(x)

    body = [[cell(x) for x in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(header)]
    line = "  ".join(h.ljust(w) for h, w in zip(header, widths))
    out = [title, line, "-" * len(line)]
    out += ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in body]
    return "\n".join(out)
