"""Image records, the synthetic CRF-driven generator, JSONL persistence and
deterministic splits.

Dataset files are JSON lines. The first line is a header::

    {"format_version": 1, "kind": "dataset", "label_space": {...},
     "dims": {"appearance": D_a, "union": D_e}, "rng": "numpy.PCG64", ...}

followed by one image record per line. Floats are written with Python's
shortest round-trip representation, so a load/save cycle is bit exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .drnet import InstanceBatch
from .numkit import ConfigurationError
from .relmodel import CrfPotentials, FeatureTriple, LabelSpace, exact_joint_posterior, sample_triplets
from .spatial import DEFAULT_MARGIN, DEFAULT_MASK_SIZE, BoundingBox, pair_masks

FORMAT_VERSION = 1
RNG_ALGORITHM = "numpy.PCG64"


class ParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class VersionError(ValueError):
    pass


@dataclass
class DetectedObject:
    box: BoundingBox
    appearance: np.ndarray
    detector_score: float = 1.0
    category_hint: Optional[int] = None

    def to_dict(self) -> dict:
        return {"box": list(self.box), "appearance": self.appearance.tolist(),
                "score": self.detector_score, "category_hint": self.category_hint}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectedObject":
        return cls(BoundingBox(*d["box"]), np.asarray(d["appearance"], dtype=np.float64),
                   d["score"], d.get("category_hint"))


@dataclass(frozen=True)
class Relationship:
    subject_ref: int
    predicate: int
    object_ref: int
    subject_category: int
    object_category: int


@dataclass
class ImageRecord:
    image_id: str
    width: float
    height: float
    detections: List[DetectedObject]
    union_features: Dict[Tuple[int, int], np.ndarray]
    ground_truth: List[Relationship]

    @property
    def size(self) -> Tuple[float, float]:
        return (self.width, self.height)

    def validate(self, label_space: Optional[LabelSpace] = None) -> None:
        n = len(self.detections)
        for det in self.detections:
            b = det.box
            if not (b.is_valid() and 0 <= b.x_min and b.x_max <= self.width
                    and 0 <= b.y_min and b.y_max <= self.height):
                raise ValueError(f"{self.image_id}: box {b} outside image or degenerate")
        for (i, j) in self.union_features:
            if not (0 <= i < n and 0 <= j < n and i != j):
                raise ValueError(f"{self.image_id}: bad union-feature pair {(i, j)}")
        for rel in self.ground_truth:
            if not (0 <= rel.subject_ref < n and 0 <= rel.object_ref < n):
                raise ValueError(f"{self.image_id}: relationship refers to a missing detection")
            if label_space is not None and not (
                    0 <= rel.predicate < label_space.K
                    and 0 <= rel.subject_category < label_space.N
                    and 0 <= rel.object_category < label_space.N):
                raise ValueError(f"{self.image_id}: relationship label outside label space")

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "detections": [d.to_dict() for d in self.detections],
            "union_features": [{"subject": i, "object": j, "feature": v.tolist()}
                               for (i, j), v in self.union_features.items()],
            "ground_truth": [asdict(r) for r in self.ground_truth],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImageRecord":
        return cls(
            d["image_id"], d["width"], d["height"],
            [DetectedObject.from_dict(x) for x in d["detections"]],
            {(u["subject"], u["object"]): np.asarray(u["feature"], dtype=np.float64)
             for u in d["union_features"]},
            [Relationship(**r) for r in d["ground_truth"]],
        )


@dataclass
class Dataset:
    label_space: LabelSpace
    appearance_dim: int
    union_dim: int
    records: List[ImageRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def n_instances(self) -> int:
        return sum(len(r.ground_truth) for r in self.records)

    def subset(self, records: List[ImageRecord]) -> "Dataset":
        return Dataset(self.label_space, self.appearance_dim, self.union_dim, records, dict(self.meta))

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "dataset",
            "label_space": self.label_space.to_dict(),
            "dims": {"appearance": self.appearance_dim, "union": self.union_dim},
            "rng": RNG_ALGORITHM,
            "meta": self.meta,
        }


# --------------------------------------------------------------------------
# persistence


def dumps_dataset(ds: Dataset) -> str:
    lines = [json.dumps(ds.header(), sort_keys=True)]
    lines += [json.dumps(rec.to_dict()) for rec in ds.records]
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dumps_dataset(ds), encoding="utf-8")


def _parse(line: str, lineno: int) -> dict:
    try:
        return json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None


def loads_dataset(text: str) -> Dataset:
    lines = text.split("\n")
    if not lines or not lines[0].strip():
        raise ParseError("missing header", 1)
    header = _parse(lines[0], 1)
    if header.get("kind") != "dataset":
        raise ParseError(f"expected a dataset header, got kind={header.get('kind')!r}", 1)
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"unsupported dataset format version {header.get('format_version')}")
    ds = Dataset(LabelSpace.from_dict(header["label_space"]), header["dims"]["appearance"],
                 header["dims"]["union"], [], header.get("meta", {}))
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            ds.records.append(ImageRecord.from_dict(_parse(line, lineno)))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"invalid image record ({exc})", lineno) from None
    return ds


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_text(encoding="utf-8"))


def split_dataset(ds: Dataset, fractions: Sequence[float], seed: int = 0) -> List[Dataset]:
    """Shuffle images with ``seed`` and cut consecutive blocks of the given sizes."""
    fractions = list(fractions)
    if not fractions or any(f <= 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise ConfigurationError(f"bad split fractions {fractions}")
    order = np.random.default_rng(seed).permutation(len(ds))
    out, start = [], 0
    for k, frac in enumerate(fractions):
        count = int(round(frac * len(ds)))
        stop = min(start + count, len(ds))
        if k == len(fractions) - 1 and abs(sum(fractions) - 1) < 1e-12:
            stop = len(ds)
        out.append(ds.subset([ds.records[i] for i in order[start:stop]]))
        start = stop
    return out


def instance_batch(ds: Dataset, mask_size: int = DEFAULT_MASK_SIZE,
                   margin_fraction: float = DEFAULT_MARGIN) -> InstanceBatch:
    """Stack every ground-truth relationship of ``ds`` into training arrays."""
    xs, xo, un, masks, s, r, o = [], [], [], [], [], [], []
    for rec in ds.records:
        for rel in rec.ground_truth:
            sub, obj = rec.detections[rel.subject_ref], rec.detections[rel.object_ref]
            xs.append(sub.appearance)
            xo.append(obj.appearance)
            un.append(rec.union_features[(rel.subject_ref, rel.object_ref)])
            m = pair_masks(sub.box, obj.box, rec.size, mask_size, margin_fraction)
            masks.append(np.stack([m.subject_mask, m.object_mask]))
            s.append(rel.subject_category)
            r.append(rel.predicate)
            o.append(rel.object_category)
    if not xs:
        D_a, D_e = ds.appearance_dim, ds.union_dim
        return InstanceBatch(np.zeros((0, D_a)), np.zeros((0, D_a)), np.zeros((0, D_e)),
                             np.zeros((0, 2, mask_size, mask_size), np.uint8),
                             *(np.zeros(0, np.int64) for _ in range(3)))
    return InstanceBatch(np.array(xs), np.array(xo), np.array(un),
                         np.array(masks, dtype=np.uint8),
                         np.array(s), np.array(r), np.array(o))


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    n_categories: int = 6
    n_predicates: int = 8
    appearance_dim: int = 16
    union_dim: int = 16
    class_separation: float = 3.0
    # signal strength of the enclosing-box feature for the predicate
    predicate_separation: float = 1.0
    potential_scale: float = 3.0
    images: int = 500
    objects_per_image: Tuple[int, int] = (2, 3)
    image_size: Tuple[float, float] = (640.0, 480.0)
    seed: int = 0

    def validate(self) -> None:
        counts = (self.n_categories, self.n_predicates, self.appearance_dim, self.union_dim, self.images)
        if any(int(c) != c or c < 1 for c in counts):
            raise ConfigurationError("label sizes, feature dims and image count must be positive integers")
        lo, hi = self.objects_per_image
        if not 2 <= lo <= hi:
            raise ConfigurationError("objects_per_image must satisfy 2 <= min <= max")
        if not self.class_separation > 0:
            raise ConfigurationError("class_separation must be positive")
        if self.predicate_separation < 0 or self.potential_scale < 0:
            raise ConfigurationError("separations and potential scale must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects_per_image"] = list(self.objects_per_image)
        d["image_size"] = list(self.image_size)
        return d


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generating_potentials(spec: SyntheticSpec, rng: np.random.Generator) -> CrfPotentials:
    """Random CRF whose posterior is exactly the Bayes posterior of the generator.

    Unary weights are the class means and biases are -|mean|^2 / 2, which is
    the log-likelihood of a unit-variance Gaussian up to a constant. Binary
    entries are uniform on [-scale, scale]; Gaussian entries put most of the
    label table on a single triplet for some seeds.
    """
    N, K = spec.n_categories, spec.n_predicates
    W_rs = rng.uniform(-1.0, 1.0, (K, N)) * spec.potential_scale
    W_ro = rng.uniform(-1.0, 1.0, (K, N)) * spec.potential_scale
    W_so = rng.uniform(-1.0, 1.0, (N, N)) * spec.potential_scale
    mu = _unit_rows(rng, N, spec.appearance_dim) * spec.class_separation
    nu = _unit_rows(rng, K, spec.union_dim) * spec.predicate_separation
    return CrfPotentials(mu, -0.5 * np.sum(mu ** 2, axis=1), nu, -0.5 * np.sum(nu ** 2, axis=1),
                         W_rs, W_ro, W_so)


def label_table(theta: CrfPotentials) -> np.ndarray:
    """p(s, r, o) from the binary potentials alone (features marginalized)."""
    zero = CrfPotentials(np.zeros((theta.N, 1)), np.zeros(theta.N), np.zeros((theta.K, 1)),
                         np.zeros(theta.K), theta.W_rs, theta.W_ro, theta.W_so)
    z = np.zeros(1)
    return exact_joint_posterior(FeatureTriple(z, z, z), zero)


def _random_box(rng, W, H, cx, cy, lo=0.08, hi=0.2) -> BoundingBox:
    w = rng.uniform(lo, hi) * W
    h = rng.uniform(lo, hi) * H
    box = BoundingBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    return box.clamp(W, H)


def _far_center(rng, W, H, anchors: List[Tuple[float, float]], min_dist: float):
    best, best_d = None, -1.0
    for _ in range(50):
        c = (rng.uniform(0.05, 0.95) * W, rng.uniform(0.05, 0.95) * H)
        d = min((np.hypot(c[0] - a[0], c[1] - a[1]) for a in anchors), default=np.inf)
        if d >= min_dist:
            return c
        if d > best_d:
            best, best_d = c, d
    return best


def synth_generate(spec: SyntheticSpec):
    """Sample a dataset whose triplets follow a random ground-truth CRF.

    Per image, objects come in related pairs (one relationship each); an odd
    object out is a distractor placed far from the others. Triplets are drawn
    from the binary-potential Gibbs table, then appearance and enclosing-box
    features are drawn from unit-variance Gaussians around class means.
    Unrelated ordered pairs get pure-noise enclosing-box features.

    Returns ``(dataset, potentials)``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    theta = generating_potentials(spec, rng)
    table = label_table(theta)
    W, H = spec.image_size
    N = spec.n_categories
    labels = LabelSpace.generic(N, spec.n_predicates)
    records = []
    lo, hi = spec.objects_per_image
    for img in range(spec.images):
        n_obj = int(rng.integers(lo, hi + 1))
        n_pairs = n_obj // 2
        triplets = sample_triplets(table, n_pairs, rng)
        dets: List[DetectedObject] = []
        cats: List[int] = []
        rels: List[Relationship] = []
        anchors: List[Tuple[float, float]] = []
        for (s, r, o) in triplets:
            cx, cy = _far_center(rng, W, H, anchors, 0.35 * min(W, H)) if anchors else (
                rng.uniform(0.25, 0.75) * W, rng.uniform(0.25, 0.75) * H)
            sub = _random_box(rng, W, H, cx, cy)
            dx = rng.uniform(-0.7, 0.7) * sub.width
            dy = rng.uniform(-0.7, 0.7) * sub.height
            obj = _random_box(rng, W, H, cx + dx, cy + dy)
            anchors.append((cx, cy))
            base = len(dets)
            for box, c in ((sub, s), (obj, o)):
                feat = theta.W_a[c] + rng.normal(size=spec.appearance_dim)
                dets.append(DetectedObject(box, feat, 1.0))
                cats.append(int(c))
            rels.append(Relationship(base, int(r), base + 1, int(s), int(o)))
        for _ in range(n_obj - 2 * n_pairs):
            c = int(rng.integers(N))
            cx, cy = _far_center(rng, W, H, anchors, 0.45 * min(W, H))
            box = _random_box(rng, W, H, cx, cy, 0.05, 0.12)
            dets.append(DetectedObject(box, theta.W_a[c] + rng.normal(size=spec.appearance_dim), 1.0))
            cats.append(c)
            anchors.append((cx, cy))
        related = {(rel.subject_ref, rel.object_ref): rel.predicate for rel in rels}
        union = {}
        for i in range(len(dets)):
            for j in range(len(dets)):
                if i == j:
                    continue
                noise = rng.normal(size=spec.union_dim)
                union[(i, j)] = theta.W_r[related[(i, j)]] + noise if (i, j) in related else noise
        records.append(ImageRecord(f"synth-{img:06d}", W, H, dets, union, rels))
    meta = {"generator": "synthetic-crf", "spec": spec.to_dict()}
    ds = Dataset(labels, spec.appearance_dim, spec.union_dim, records, meta)
    return ds, theta


def save_potentials(theta: CrfPotentials, path, spec: Optional[SyntheticSpec] = None) -> None:
    doc = {"format_version": FORMAT_VERSION, "kind": "potentials", "potentials": theta.to_dict()}
    if spec is not None:
        doc["spec"] = spec.to_dict()
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_potentials(path) -> CrfPotentials:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"unsupported potentials version {doc.get('format_version')}")
    return CrfPotentials.from_dict(doc["potentials"])
