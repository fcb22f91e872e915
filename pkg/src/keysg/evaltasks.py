"""Run the four evaluation protocols against a built graph and a ground-truth file.

Ground truth is a JSON list (or ``{"items": [...]}``) of entries::

    {"class": "mug", "cloud": "gt/003.npy", "query": "...", "flags": {"spatial": true}}

``cloud`` is a ``.npy`` (float N x 3) or ``.kpc`` sidecar, relative to the
gt file. ``query`` is required for the retrieval and grounding tasks.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .evalharness import (
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
from .graph import SceneGraph, decode_cloud
from .ingest import PointCloud
from .providers.base import Provider
from .ragindex import ChunkIndex, answer, retrieve_hierarchical

TASKS = ("seg", "func", "retrieval", "grounding")
FUNC_K, FUNC_IOU = (1, 5, 10), (0.0, 0.10, 0.25)
RET_K, RET_IOU = (1, 5, 10), (0.0, 0.10, 0.50)
GROUNDING_IOU = 0.1
EVAL_VOXEL = 0.05


def _read_cloud(path: Path) -> PointCloud:
    if not path.is_file():
        raise SchemaError(f"gt cloud not found: {path}")
    if path.suffix == ".kpc":
        return decode_cloud(path.read_bytes())
    pts = np.load(path)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise SchemaError(f"{path}: expected an N x 3 array, got {pts.shape}")
    return PointCloud(pts.astype(np.float64))


def load_gt(path: str | Path, task: str) -> list[dict]:
    """Validate and load a gt file; each item gains a ``_cloud`` PointCloud."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise SchemaError(f"cannot read gt file {path}: {exc}") from exc
    items = doc.get("items") if isinstance(doc, dict) else doc
    if not isinstance(items, list) or not items:
        raise SchemaError("gt must be a non-empty list of items")
    need = ("class", "cloud") + (("query",) if task in ("retrieval", "grounding") else ())
    for n, it in enumerate(items):
        if not isinstance(it, dict):
            raise SchemaError(f"item {n} is not an object")
        missing = [k for k in need if not isinstance(it.get(k), str)]
        if missing:
            raise SchemaError(f"item {n} lacks string field(s) {missing} required by task {task!r}")
        flags = it.get("flags", {})
        if not isinstance(flags, dict) or not all(isinstance(v, bool) for v in flags.values()):
            raise SchemaError(f"item {n}: flags must map names to booleans")
        it["_cloud"] = _read_cloud(path.parent / it["cloud"])
    return items


def _labels(items) -> list[str]:
    return list(dict.fromkeys(it["class"] for it in items))


def eval_seg(graph: SceneGraph, provider: Provider, items) -> tuple[dict, str]:
    classes = _labels(items)
    objs = [o for o in graph.objects() if o.embedding is not None and len(o.cloud)]
    pred_cls = classify_objects([o.embedding for o in objs], classes, provider) if objs else []
    if objs:
        pred_pts = np.concatenate([o.cloud.points for o in objs])
        pred_lab = [c for o, c in zip(objs, pred_cls) for _ in range(len(o.cloud))]
    else:
        pred_pts, pred_lab = np.zeros((0, 3)), []
    gt_pts = np.concatenate([it["_cloud"].points for it in items])
    gt_lab = [it["class"] for it in items for _ in range(len(it["_cloud"]))]
    m = semantic_seg_metrics(transfer_labels(pred_pts, pred_lab, gt_pts, EVAL_VOXEL), gt_lab)
    res = {"task": "seg", **m, "objects": {o.id: c for o, c in zip(objs, pred_cls)}}
    return res, format_table("Open-vocabulary 3D semantic segmentation", ["Method", "mAcc", "F-mIoU"],
                             [["keysg", m["mAcc"], m["f_mIoU"]]])


def _recall_grid(preds, gts, ks, ious) -> dict[str, float]:
    return {f"R@{k}/IoU>={t:.2f}": recall_at_k(preds, gts, k, t, EVAL_VOXEL) for k in ks for t in ious}


def eval_func(graph: SceneGraph, provider: Provider, items) -> tuple[dict, str]:
    labels = _labels(items)
    elems = [f for o in graph.objects() for f in o.functional]
    vecs = {f.id: provider.embed_text(f.label).vector for f in elems}
    preds = []
    for it in items:
        cands = [Candidate(class_rank(vecs[f.id], it["class"], labels, provider), iou=iou3d(f.cloud, it["_cloud"], EVAL_VOXEL))
                 for f in elems]
        preds.append(cands)
    grid = _recall_grid(preds, [it["_cloud"] for it in items], FUNC_K, FUNC_IOU)
    header = ["Method"] + list(grid)
    return {"task": "func", "recall": grid, "n": len(items)}, format_table(
        "3D functional element segmentation", header, [["keysg", *grid.values()]]
    )


def eval_retrieval(graph: SceneGraph, index: ChunkIndex, provider: Provider, items) -> tuple[dict, str]:
    gts = [it["_cloud"] for it in items]
    out, rows = {"task": "retrieval", "n": len(items)}, []
    for mode in ("parsed", "raw"):
        preds = []
        for it in items:
            res = retrieve_hierarchical(it["query"], graph, index, provider, mode, 1, max(RET_K))
            preds.append([
                Candidate(rank, iou=iou3d(graph.lookup(cid.split(":", 1)[1]).cloud, it["_cloud"], EVAL_VOXEL))
                for rank, (cid, _) in enumerate(res.ranked, start=1)
            ])
        out[mode] = _recall_grid(preds, gts, RET_K, RET_IOU)
        rows.append(["keysg", mode, *out[mode].values()])
    header = ["Method", "Query Type"] + list(out["parsed"])
    return out, format_table("Hierarchical 3D object retrieval", header, rows)


def eval_grounding(graph: SceneGraph, index: ChunkIndex, provider: Provider, items) -> tuple[dict, str]:
    predicted, answers = [], []
    for it in items:
        res = answer(it["query"], graph, index, provider)
        node = res["node_ids"][0] if res["node_ids"] else None
        answers.append({"query": it["query"], "node": node, "warning": res.get("warning")})
        predicted.append(graph.lookup(node).cloud if node else None)
    acc = grounding_accuracy(predicted, [it["_cloud"] for it in items], GROUNDING_IOU,
                             [it.get("flags", {}) for it in items], EVAL_VOXEL)
    header, row = ["Method", "Overall"], ["keysg", acc["overall"]]
    for flag, split in acc["by_category"].items():
        header += [f"w/ {flag}", f"w/o {flag}"]
        row += [split["with"], split["without"]]
    return {"task": "grounding", **acc, "answers": answers}, format_table(
        f"3D object grounding (accuracy at IoU>={GROUNDING_IOU})", header, [row]
    )


def run_task(task: str, graph: SceneGraph, index: ChunkIndex, provider: Provider, gt_path) -> tuple[dict, str]:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    items = load_gt(gt_path, task)
    if task == "seg":
        return eval_seg(graph, provider, items)
    if task == "func":
        return eval_func(graph, provider, items)
    if task == "retrieval":
        return eval_retrieval(graph, index, provider, items)
    return eval_grounding(graph, index, provider, items)
