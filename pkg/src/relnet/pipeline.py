"""Detection pipeline after object detection: pair enumeration, the cheap
pair filter, joint recognition with the relation network, and decoding of
ranked triplets."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import numkit as nk
from .data import Dataset, DetectedObject, ImageRecord
from .drnet import FORMAT_VERSION, InstanceBatch, RelationNet
from .numkit import ParamStore, softmax
from .relmodel import BeliefTriple
from .spatial import SPATIAL_DIM, BoundingBox, SpatialEncoder, pair_masks, union_box


class CandidatePair(NamedTuple):
    subject_ref: int
    object_ref: int


def enumerate_pairs(detections: Sequence) -> List[CandidatePair]:
    """All n(n-1) ordered pairs, subject index major."""
    n = len(detections)
    return [CandidatePair(i, j) for i in range(n) for j in range(n) if i != j]


@dataclass
class TripletPrediction:
    s: int
    r: int
    o: int
    score: float
    subject_box: BoundingBox
    object_box: BoundingBox
    union_box: BoundingBox
    subject_ref: Optional[int] = None
    object_ref: Optional[int] = None

    def to_dict(self) -> dict:
        return {"s": self.s, "r": self.r, "o": self.o, "score": self.score,
                "subject_box": list(self.subject_box), "object_box": list(self.object_box),
                "union_box": list(self.union_box),
                "subject_ref": self.subject_ref, "object_ref": self.object_ref}

    @classmethod
    def from_dict(cls, d: dict) -> "TripletPrediction":
        return cls(d["s"], d["r"], d["o"], d["score"], BoundingBox(*d["subject_box"]),
                   BoundingBox(*d["object_box"]), BoundingBox(*d["union_box"]),
                   d.get("subject_ref"), d.get("object_ref"))


@dataclass
class PairBeliefs:
    pair: CandidatePair
    beliefs: BeliefTriple
    subject_box: BoundingBox
    object_box: BoundingBox


# --------------------------------------------------------------------------
# batching helpers


def pair_arrays(record: ImageRecord, pairs: Sequence[CandidatePair], mask_size: int,
                margin_fraction: float) -> InstanceBatch:
    """Model inputs for the given pairs of one image (labels set to -1)."""
    dets = record.detections
    n = len(pairs)
    D_a = dets[0].appearance.shape[0] if dets else 0
    if n == 0:
        return InstanceBatch(np.zeros((0, D_a)), np.zeros((0, D_a)), np.zeros((0, 0)),
                             np.zeros((0, 2, mask_size, mask_size), np.uint8),
                             *(np.zeros(0, np.int64) for _ in range(3)))
    masks = np.empty((n, 2, mask_size, mask_size), np.uint8)
    for k, (i, j) in enumerate(pairs):
        m = pair_masks(dets[i].box, dets[j].box, record.size, mask_size, margin_fraction)
        masks[k, 0], masks[k, 1] = m.subject_mask, m.object_mask
    neg = -np.ones(n, np.int64)
    return InstanceBatch(
        np.array([dets[i].appearance for i, _ in pairs]),
        np.array([dets[j].appearance for _, j in pairs]),
        np.array([record.union_features[(i, j)] for i, j in pairs]),
        masks, neg, neg.copy(), neg.copy())


# --------------------------------------------------------------------------
# pair filter


class PairFilter:
    """Logistic classifier over [spatial feature, subject beliefs, object beliefs].

    The filter owns its spatial encoder. Category beliefs come from a frozen
    copy of a recognizer's first-unit unary weights.
    """

    def __init__(self, n_categories: int, appearance_dim: int, mask_size: int = 32,
                 margin_fraction: float = 0.05, threshold: float = 0.5,
                 store: Optional[ParamStore] = None, schedule=None):
        self.N = n_categories
        self.appearance_dim = appearance_dim
        self.mask_size = mask_size
        self.margin_fraction = margin_fraction
        self.threshold = threshold
        self.store = store if store is not None else ParamStore()
        self.encoder = SpatialEncoder(self.store, "filter.spatial.", mask_size, schedule)

    def init_params(self, model: RelationNet, seed: int = 0) -> "PairFilter":
        rng = np.random.default_rng(seed)
        self.encoder.init_params(rng)
        in_dim = SPATIAL_DIM + 2 * self.N
        self.store.add("filter.W", nk.glorot_uniform(rng, 1, in_dim))
        self.store.add("filter.b", np.zeros(1))
        self.store.add("filter.unary_W", model.store["unit0.W_a"].copy(), frozen=True)
        self.store.add("filter.unary_b", model.store["unit0.b_a"].copy(), frozen=True)
        return self

    @classmethod
    def for_model(cls, model: RelationNet, threshold: float = 0.5, seed: int = 0) -> "PairFilter":
        cfg = model.config
        return cls(cfg.n_categories, cfg.appearance_dim, cfg.mask_size, cfg.margin_fraction,
                   threshold, schedule=cfg.spatial_schedule).init_params(model, seed)

    def _features(self, batch: InstanceBatch):
        p = self.store.params
        sp, cache = self.encoder.forward(batch.masks)
        qs = softmax(nk.affine(batch.xs, p["filter.unary_W"], p["filter.unary_b"]))
        qo = softmax(nk.affine(batch.xo, p["filter.unary_W"], p["filter.unary_b"]))
        return np.concatenate([sp, qs, qo], axis=1), cache

    def logits(self, batch: InstanceBatch) -> np.ndarray:
        feats, _ = self._features(batch)
        return nk.affine(feats, self.store["filter.W"], self.store["filter.b"])[:, 0]

    def probabilities(self, batch: InstanceBatch) -> np.ndarray:
        return nk.logistic(self.logits(batch))

    def loss_and_backward(self, batch: InstanceBatch, labels: np.ndarray, pos_weight: float) -> float:
        """Weighted logistic loss, mean over the batch."""
        feats, cache = self._features(batch)
        z = nk.affine(feats, self.store["filter.W"], self.store["filter.b"])[:, 0]
        p = nk.logistic(z)
        y = labels.astype(np.float64)
        w = np.where(y > 0, pos_weight, 1.0)
        B = len(y)
        # log(1 + exp(-|z|)) form keeps the loss finite for large |z|
        softplus_neg = np.logaddexp(0.0, -z)
        softplus_pos = np.logaddexp(0.0, z)
        loss = float(np.sum(w * (y * softplus_neg + (1 - y) * softplus_pos)) / B)
        dz = w * (p - y) / B
        dfeats, dW, db = nk.affine_backward(feats, self.store["filter.W"], dz[:, None])
        self.store.accumulate("filter.W", dW)
        self.store.accumulate("filter.b", db)
        self.encoder.backward(cache, dfeats[:, :SPATIAL_DIM])
        return loss

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "n_categories": self.N,
                "appearance_dim": self.appearance_dim, "mask_size": self.mask_size,
                "margin_fraction": self.margin_fraction,
                "schedule": [list(l) for l in self.encoder.schedule],
                "params": {k: v.tolist() for k, v in self.store.params.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "PairFilter":
        store = ParamStore()
        for k, v in d["params"].items():
            store.add(k, np.asarray(v, dtype=np.float64), frozen=k.startswith("filter.unary_"))
        return cls(d["n_categories"], d["appearance_dim"], d["mask_size"], d["margin_fraction"],
                   d["threshold"], store, tuple(tuple(l) for l in d["schedule"]))


def pair_filter(pair: CandidatePair, record: ImageRecord, params: PairFilter) -> Tuple[bool, float]:
    """Keep/drop decision and keep-probability for one candidate pair."""
    batch = pair_arrays(record, [pair], params.mask_size, params.margin_fraction)
    prob = float(params.probabilities(batch)[0])
    return prob >= params.threshold, prob


def filter_pairs(record: ImageRecord, pairs: Sequence[CandidatePair],
                 params: PairFilter) -> Tuple[List[CandidatePair], np.ndarray]:
    if not pairs:
        return [], np.zeros(0)
    probs = params.probabilities(pair_arrays(record, pairs, params.mask_size, params.margin_fraction))
    return [p for p, pr in zip(pairs, probs) if pr >= params.threshold], probs


def pair_labels(record: ImageRecord, pairs: Sequence[CandidatePair]) -> np.ndarray:
    related = {(g.subject_ref, g.object_ref) for g in record.ground_truth}
    return np.array([(p.subject_ref, p.object_ref) in related for p in pairs], dtype=bool)


def planted_negative_mask(record: ImageRecord, pairs: Sequence[CandidatePair]) -> np.ndarray:
    """Pairs touching an object that takes part in no relationship."""
    involved = {g.subject_ref for g in record.ground_truth} | {g.object_ref for g in record.ground_truth}
    return np.array([p.subject_ref not in involved or p.object_ref not in involved for p in pairs],
                    dtype=bool)


def filter_training_batch(ds: Dataset, mask_size: int = 32, margin_fraction: float = 0.05):
    """All ordered pairs of every image, with related/unrelated labels."""
    parts, labels = [], []
    for rec in ds.records:
        pairs = enumerate_pairs(rec.detections)
        if pairs:
            parts.append(pair_arrays(rec, pairs, mask_size, margin_fraction))
            labels.append(pair_labels(rec, pairs))
    if not parts:
        raise ValueError("no candidate pairs in dataset")
    batch = InstanceBatch(*(np.concatenate([getattr(p, k) for p in parts])
                            for k in ("xs", "xo", "union", "masks", "s", "r", "o")))
    return batch, np.concatenate(labels)


def train_pair_filter(ds: Dataset, model: RelationNet, lr: float = 0.1, epochs: int = 5,
                      batch_size: int = 32, seed: int = 0, pos_weight: float = 4.0,
                      threshold: float = 0.5) -> PairFilter:
    """Fit the filter on related (positive) vs all other ordered pairs.

    Positives are up-weighted by ``pos_weight``: the filter is a recall-first
    pre-screen, and a reversed related pair looks spatially the same as the
    true one.
    """
    flt = PairFilter.for_model(model, threshold, seed)
    batch, labels = filter_training_batch(ds, flt.mask_size, flt.margin_fraction)
    rng = np.random.default_rng(seed + 1)
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss = flt.loss_and_backward(batch.take(idx), labels[idx], pos_weight)
            if not np.isfinite(loss):
                raise nk.ConfigurationError("pair filter training diverged")
            nk.sgd_step(flt.store, lr)
    return flt


# --------------------------------------------------------------------------
# recognition


def build_pair_feature(pair: CandidatePair, record: ImageRecord, model: RelationNet) -> np.ndarray:
    """Compressed pair feature x_r for one candidate pair."""
    cfg = model.config
    batch = pair_arrays(record, [pair], cfg.mask_size, cfg.margin_fraction)
    x_r, _ = model.pair_feature(batch.union, batch.masks)
    return x_r[0]


def recognize_pairs(record: ImageRecord, pairs: Sequence[CandidatePair],
                    model: RelationNet) -> List[PairBeliefs]:
    if not pairs:
        return []
    cfg = model.config
    Qs, Qr, Qo = model.predict(pair_arrays(record, pairs, cfg.mask_size, cfg.margin_fraction))
    dets = record.detections
    return [PairBeliefs(p, BeliefTriple(Qs[k], Qr[k], Qo[k]),
                        dets[p.subject_ref].box, dets[p.object_ref].box)
            for k, p in enumerate(pairs)]


def recognize_pair(pair: CandidatePair, record: ImageRecord, model: RelationNet) -> BeliefTriple:
    return recognize_pairs(record, [pair], model)[0].beliefs


def decode_and_rank(items: Sequence[PairBeliefs], top_k: Optional[int] = None) -> List[TripletPrediction]:
    """Most probable (s, r, o) per pair, globally sorted by the product of the
    three maxima. Ties go to the earlier pair, then lower indices."""
    rows = []
    for order, item in enumerate(items):
        q = item.beliefs
        s, r, o = int(np.argmax(q.q_s)), int(np.argmax(q.q_r)), int(np.argmax(q.q_o))
        score = float(q.q_s[s] * q.q_r[r] * q.q_o[o])
        rows.append((-score, order, s, r, o, item))
    rows.sort(key=lambda t: t[:5])
    out = []
    for neg, _, s, r, o, item in rows[:top_k] if top_k is not None else rows:
        out.append(TripletPrediction(
            s, r, o, -neg, item.subject_box, item.object_box,
            union_box(item.subject_box, item.object_box),
            item.pair.subject_ref, item.pair.object_ref))
    return out


def detect_image(record: ImageRecord, model: RelationNet, top_k: Optional[int] = 100,
                 pair_filter_params: Optional[PairFilter] = None) -> List[TripletPrediction]:
    """Ranked triplets over all (optionally filtered) pairs of one image."""
    pairs = enumerate_pairs(record.detections)
    if pair_filter_params is not None:
        pairs, _ = filter_pairs(record, pairs, pair_filter_params)
    return decode_and_rank(recognize_pairs(record, pairs, model), top_k)


def predict_given_pairs(record: ImageRecord, model: RelationNet,
                        top_k: Optional[int] = None) -> List[TripletPrediction]:
    """Predictions on the ground-truth pairs only (predicate recognition)."""
    pairs = list(dict.fromkeys(CandidatePair(g.subject_ref, g.object_ref) for g in record.ground_truth))
    return decode_and_rank(recognize_pairs(record, pairs, model), top_k)


# --------------------------------------------------------------------------
# prediction files


def save_predictions(path, predictions: Dict[str, List[TripletPrediction]], config: dict) -> None:
    lines = [json.dumps({"format_version": FORMAT_VERSION, "kind": "predictions", "config": config},
                        sort_keys=True)]
    for image_id, preds in predictions.items():
        lines.append(json.dumps({"image_id": image_id, "predictions": [p.to_dict() for p in preds]}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_predictions(path) -> Dict[str, List[TripletPrediction]]:
    from .data import ParseError, VersionError
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0]) if lines else {}
    if header.get("kind") != "predictions":
        raise ParseError("not a prediction file", 1)
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"unsupported prediction file version {header.get('format_version')}")
    out = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
        out[doc["image_id"]] = [TripletPrediction.from_dict(p) for p in doc["predictions"]]
    return out
