"""Recall@K under the three relationship task settings, IoU sweeps,
predicate entropy/perplexity diagnostics, and scene graphs."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, ImageRecord
from .numkit import LOG_EPS
from .pipeline import TripletPrediction
from .relmodel import entropy
from .spatial import BoundingBox, union_box


class TaskSetting(str, Enum):
    PREDICATE = "predicate_recognition"
    UNION_BOX = "union_box_detection"
    TWO_BOXES = "two_boxes_detection"

    @classmethod
    def parse(cls, value) -> "TaskSetting":
        if isinstance(value, cls):
            return value
        aliases = {"predicate": cls.PREDICATE, "union_box": cls.UNION_BOX, "union": cls.UNION_BOX,
                   "two_boxes": cls.TWO_BOXES, "two": cls.TWO_BOXES}
        if value in aliases:
            return aliases[value]
        return cls(value)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class GroundTruthInstance:
    s: int
    r: int
    o: int
    subject_box: BoundingBox
    object_box: BoundingBox
    subject_ref: Optional[int] = None
    object_ref: Optional[int] = None

    @property
    def union_box(self) -> BoundingBox:
        return union_box(self.subject_box, self.object_box)


def ground_truth_of(record: ImageRecord) -> List[GroundTruthInstance]:
    dets = record.detections
    return [GroundTruthInstance(g.subject_category, g.predicate, g.object_category,
                                dets[g.subject_ref].box, dets[g.object_ref].box,
                                g.subject_ref, g.object_ref)
            for g in record.ground_truth]


def match_quality(pred: TripletPrediction, gt: GroundTruthInstance, setting: TaskSetting,
                  iou_threshold: float) -> Optional[float]:
    """How well ``pred`` hits ``gt`` under ``setting``; None if it does not."""
    if setting is TaskSetting.PREDICATE:
        if pred.r != gt.r:
            return None
        if pred.subject_ref is not None and gt.subject_ref is not None:
            same = pred.subject_ref == gt.subject_ref and pred.object_ref == gt.object_ref
            return 1.0 if same else None
        q = min(iou(pred.subject_box, gt.subject_box), iou(pred.object_box, gt.object_box))
        return q if q >= iou_threshold else None
    if (pred.s, pred.r, pred.o) != (gt.s, gt.r, gt.o):
        return None
    if setting is TaskSetting.UNION_BOX:
        q = iou(pred.union_box, gt.union_box)
    else:
        q = min(iou(pred.subject_box, gt.subject_box), iou(pred.object_box, gt.object_box))
    return q if q >= iou_threshold else None


def greedy_match(preds: Sequence[TripletPrediction], gts: Sequence[GroundTruthInstance],
                 setting, iou_threshold: float = 0.5) -> List[Optional[int]]:
    """For each prediction in rank order, the index of the ground truth it
    claims (best quality among unclaimed, lowest index on ties) or None."""
    setting = TaskSetting.parse(setting)
    taken = [False] * len(gts)
    out = []
    for p in preds:
        best, best_q = None, -1.0
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            q = match_quality(p, g, setting, iou_threshold)
            if q is not None and q > best_q:
                best, best_q = j, q
        if best is not None:
            taken[best] = True
        out.append(best)
    return out


def recall_counts(predictions: Mapping[str, Sequence[TripletPrediction]],
                  ground_truth: Mapping[str, Sequence[GroundTruthInstance]], k: int,
                  setting, iou_threshold: float = 0.5) -> Dict[str, Tuple[int, int]]:
    """Per image (recalled, total ground truth)."""
    setting = TaskSetting.parse(setting)
    out = {}
    for image_id, gts in ground_truth.items():
        preds = list(predictions.get(image_id, []))[:k]
        matched = greedy_match(preds, gts, setting, iou_threshold)
        out[image_id] = (sum(m is not None for m in matched), len(gts))
    return out


def recall_at_k(predictions: Mapping[str, Sequence[TripletPrediction]],
                ground_truth: Mapping[str, Sequence[GroundTruthInstance]], k: int,
                setting, iou_threshold: float = 0.5) -> float:
    """Recalled ground-truth instances over all ground-truth instances."""
    counts = recall_counts(predictions, ground_truth, k, setting, iou_threshold)
    total = sum(t for _, t in counts.values())
    if total == 0:
        return 0.0
    return sum(h for h, _ in counts.values()) / total


def iou_sweep(predictions, ground_truth, thresholds: Sequence[float], k: int = 50,
              setting=TaskSetting.UNION_BOX) -> List[float]:
    for t in thresholds:
        if not 0 < t <= 1:
            raise ValueError(f"IoU threshold {t} outside (0, 1]")
    return [recall_at_k(predictions, ground_truth, k, setting, t) for t in thresholds]


def recall_report(predictions, ground_truth, k: int, setting, iou_threshold: float = 0.5,
                  per_image: bool = False) -> dict:
    setting = TaskSetting.parse(setting)
    counts = recall_counts(predictions, ground_truth, k, setting, iou_threshold)
    total = sum(t for _, t in counts.values())
    hits = sum(h for h, _ in counts.values())
    report = {"setting": setting.value, "K": k, "threshold": iou_threshold,
              "recall": hits / total if total else 0.0, "recalled": hits, "total": total}
    if per_image:
        report["per_image"] = {i: {"recalled": h, "total": t} for i, (h, t) in counts.items()}
    return report


# --------------------------------------------------------------------------
# entropy and perplexity


def triplets_of(dataset) -> np.ndarray:
    if isinstance(dataset, Dataset):
        rows = [(g.subject_category, g.predicate, g.object_category)
                for rec in dataset.records for g in rec.ground_truth]
        return np.array(rows, dtype=np.int64).reshape(-1, 3)
    return np.asarray(dataset, dtype=np.int64).reshape(-1, 3)


def predicate_entropy_stats(dataset) -> Dict[str, float]:
    """Plug-in H(r) and sum over observed (s, o) of p(s, o) H(r | s, o), in nats.

    ``dataset`` is a :class:`Dataset` or an array of (s, r, o) rows.
    """
    trip = triplets_of(dataset)
    n = len(trip)
    if n == 0:
        raise ValueError("predicate entropy needs at least one instance")
    marginal = entropy(np.array(list(Counter(trip[:, 1].tolist()).values())) / n)
    groups = defaultdict(Counter)
    for s, r, o in trip.tolist():
        groups[(s, o)][r] += 1
    conditional = 0.0
    for (s, o), counts in sorted(groups.items()):
        c = np.array(list(counts.values()), dtype=np.float64)
        conditional += c.sum() / n * entropy(c / c.sum())
    return {"marginal_entropy": float(marginal), "conditional_entropy": float(conditional), "instances": n}


def prediction_perplexity(predicate_beliefs: Sequence[np.ndarray], truths: Sequence[int]) -> float:
    """exp of the mean predicate cross entropy (natural log)."""
    q = np.asarray(predicate_beliefs, dtype=np.float64)
    r = np.asarray(truths, dtype=np.int64)
    if q.ndim != 2 or len(q) != len(r) or len(r) == 0:
        raise ValueError("need one predicate belief vector per ground-truth instance")
    ce = -np.log(q[np.arange(len(r)), r] + LOG_EPS)
    return float(math.exp(ce.mean()))


# --------------------------------------------------------------------------
# scene graphs


@dataclass
class SceneGraph:
    nodes: List[Tuple[int, BoundingBox]] = field(default_factory=list)
    edges: List[Tuple[int, int, int]] = field(default_factory=list)

    def validate(self) -> None:
        n = len(self.nodes)
        for a, _, b in self.edges:
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"edge ({a}, {b}) refers to a missing node")
            if a == b:
                raise ValueError("self-loop edge")

    def to_dict(self) -> dict:
        return {"nodes": [{"category": c, "box": list(b)} for c, b in self.nodes],
                "edges": [{"subject": a, "predicate": r, "object": b} for a, r, b in self.edges]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGraph":
        return cls([(n["category"], BoundingBox(*n["box"])) for n in d["nodes"]],
                   [(e["subject"], e["predicate"], e["object"]) for e in d["edges"]])


def generate_scene_graph(predictions: Sequence[TripletPrediction], score_floor: float = 0.0) -> SceneGraph:
    """Edges are predictions scoring at least ``score_floor``; nodes are their
    endpoints, merged when box and category coincide."""
    graph = SceneGraph()
    index: Dict[Tuple[int, BoundingBox], int] = {}

    def node(cat: int, box: BoundingBox) -> int:
        key = (cat, BoundingBox(*box))
        if key not in index:
            index[key] = len(graph.nodes)
            graph.nodes.append(key)
        return index[key]

    for p in predictions:
        if p.score < score_floor:
            continue
        a, b = node(p.s, p.subject_box), node(p.o, p.object_box)
        if a != b:
            graph.edges.append((a, p.r, b))
    return graph


def truth_scene_graph(record: ImageRecord) -> SceneGraph:
    graph = SceneGraph()
    index: Dict[int, int] = {}
    dets = record.detections

    def node(ref: int, cat: int) -> int:
        if ref not in index:
            index[ref] = len(graph.nodes)
            graph.nodes.append((cat, dets[ref].box))
        return index[ref]

    for g in record.ground_truth:
        graph.edges.append((node(g.subject_ref, g.subject_category), g.predicate,
                            node(g.object_ref, g.object_category)))
    return graph


def _f1(matched: int, a: int, b: int) -> float:
    if a == 0 and b == 0:
        return 1.0
    return 2.0 * matched / (a + b)


def match_nodes(a: SceneGraph, b: SceneGraph, iou_threshold: float = 0.5) -> Dict[int, int]:
    """Greedy one-to-one node matching (same category, IoU >= threshold),
    highest IoU first, ties to lower indices."""
    cands = []
    for i, (ca, ba) in enumerate(a.nodes):
        for j, (cb, bb) in enumerate(b.nodes):
            if ca == cb:
                v = iou(ba, bb)
                if v >= iou_threshold:
                    cands.append((-v, i, j))
    cands.sort()
    used_a, used_b, mapping = set(), set(), {}
    for _, i, j in cands:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            mapping[i] = j
    return mapping


def scene_graph_similarity(predicted: SceneGraph, truth: SceneGraph, iou_threshold: float = 0.5) -> float:
    """Harmonic mean of node F1 and edge F1 under greedy node matching."""
    mapping = match_nodes(predicted, truth, iou_threshold)
    node_f1 = _f1(len(mapping), len(predicted.nodes), len(truth.nodes))
    truth_edges = Counter(truth.edges)
    edge_hits = 0
    for a, r, b in predicted.edges:
        if a in mapping and b in mapping:
            key = (mapping[a], r, mapping[b])
            if truth_edges[key] > 0:
                truth_edges[key] -= 1
                edge_hits += 1
    edge_f1 = _f1(edge_hits, len(predicted.edges), len(truth.edges))
    if node_f1 + edge_f1 == 0:
        return 0.0
    return 2 * node_f1 * edge_f1 / (node_f1 + edge_f1)
