"""Self-checks behind ``relnet verify``: brute-force oracles for the CRF and
the unrolled network, finite-difference gradient checks, and hand-computed
metric fixtures."""

from __future__ import annotations

import itertools
import time
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import numkit as nk
from .drnet import (
    DrNetConfig,
    InferenceUnitParams,
    InstanceBatch,
    ModelConfig,
    RelationNet,
    drnet_forward,
)
from .evaluation import (
    GroundTruthInstance,
    TaskSetting,
    greedy_match,
    iou_sweep,
    match_quality,
    recall_at_k,
)
from .pipeline import TripletPrediction
from .relmodel import (
    BeliefTriple,
    CrfPotentials,
    FeatureTriple,
    exact_conditional_predicate,
    exact_joint_posterior,
    initial_beliefs,
    meanfield_fixed_point,
    meanfield_step,
)
from .spatial import BoundingBox, union_box

SUITES = ("oracle", "gradient", "metrics")


@dataclass
class CheckResult:
    name: str
    suite: str
    passed: bool
    value: float
    tolerance: float
    seconds: float
    detail: str = ""


def random_instance(rng: np.random.Generator, N=4, K=5, D_a=8, D_r=8, scale=1.0):
    theta = CrfPotentials.random(rng, N, K, D_a, D_r, scale)
    f = FeatureTriple(rng.normal(size=D_a), rng.normal(size=D_r), rng.normal(size=D_a))
    return f, theta


def enumerated_conditional(s: int, o: int, f: FeatureTriple, theta: CrfPotentials) -> np.ndarray:
    table = exact_joint_posterior(f, theta)
    sl = table[s, :, o]
    return sl / sl.sum()


# --------------------------------------------------------------------------
# oracle suite


def check_exact_conditional(n: int = 100, seed: int = 0, perturb: float = 0.0) -> float:
    """Worst L-inf gap between the closed-form conditional and enumeration."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        f, theta = random_instance(rng)
        s, o = int(rng.integers(theta.N)), int(rng.integers(theta.N))
        closed = exact_conditional_predicate(s, o, f, theta)
        closed[0] += perturb
        worst = max(worst, float(np.max(np.abs(closed - enumerated_conditional(s, o, f, theta)))))
    return worst


def check_meanfield_sequence(n: int = 20, T: int = 10, seed: int = 1, perturb: float = 0.0) -> float:
    """Worst per-step gap between a shared symmetric DR-Net tied to a CRF and
    Jacobi mean-field steps from the same start."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        f, theta = random_instance(rng)
        unit = InferenceUnitParams.from_crf(theta)
        _, trace = drnet_forward(f, DrNetConfig(units=T, share_weights=True, enforce_symmetry=True), [unit])
        q = initial_beliefs(f, theta)
        for t in range(1, T + 1):
            q = meanfield_step(q, f, theta)
            worst = max(worst, q.max_change(trace[t]))
    return worst + perturb


def check_fixed_point(n: int = 20, T: int = 50, seed: int = 2, perturb: float = 0.0) -> float:
    """Worst gap between a 50-unit tied DR-Net and the damped oracle fixed
    point, over instances where the undamped iteration converges."""
    rng = np.random.default_rng(seed)
    worst, used = 0.0, 0
    while used < n:
        f, theta = random_instance(rng, scale=0.5)
        undamped = meanfield_fixed_point(f, theta, max_iters=T, tol=1e-12, damping=1.0)
        if not undamped.converged:
            continue
        used += 1
        oracle = meanfield_fixed_point(f, theta, max_iters=2000, tol=1e-13, damping=0.5)
        q, _ = drnet_forward(f, DrNetConfig(units=T, share_weights=True, enforce_symmetry=True),
                             [InferenceUnitParams.from_crf(theta)])
        worst = max(worst, q.max_change(oracle.beliefs))
    return worst + perturb


# --------------------------------------------------------------------------
# gradient suite

TINY_SCHEDULE = ((2, 3, 2), (3, 2, 1), (2, 2, 1))


def tiny_model(drnet_cfg: DrNetConfig, seed: int, N=3, K=4, D_a=5, D_e=4) -> RelationNet:
    cfg = ModelConfig(N, K, D_a, D_e, pair_dim=6, hidden_dim=7, mask_size=8,
                      spatial_schedule=TINY_SCHEDULE, drnet=drnet_cfg)
    model = RelationNet(cfg).init_params(seed)
    rng = np.random.default_rng(seed + 1000)
    for name, value in model.store.params.items():
        value += rng.normal(0.0, 0.2, value.shape)
    return model


def tiny_batch(rng: np.random.Generator, model: RelationNet, B: int = 3) -> InstanceBatch:
    cfg = model.config
    M = cfg.mask_size
    masks = np.zeros((B, 2, M, M), np.uint8)
    for b in range(B):
        for c in range(2):
            x0, y0 = rng.integers(0, M - 2, size=2)
            x1, y1 = x0 + rng.integers(2, M - x0 + 1), y0 + rng.integers(2, M - y0 + 1)
            masks[b, c, y0:y1, x0:x1] = 1
    N, K = cfg.n_categories, cfg.n_predicates
    return InstanceBatch(rng.normal(size=(B, cfg.appearance_dim)), rng.normal(size=(B, cfg.appearance_dim)),
                         rng.normal(size=(B, cfg.union_dim)), masks,
                         rng.integers(N, size=B), rng.integers(K, size=B), rng.integers(N, size=B))


GRADIENT_VARIANTS = {
    "unshared-free": DrNetConfig(units=3, share_weights=False, enforce_symmetry=False),
    "unshared-symmetric": DrNetConfig(units=3, share_weights=False, enforce_symmetry=True),
    "shared-free": DrNetConfig(units=3, share_weights=True, enforce_symmetry=False),
    "shared-symmetric-all-units": DrNetConfig(units=3, share_weights=True, enforce_symmetry=True,
                                              loss_mode="all-units"),
    "unary-baseline": DrNetConfig(units=1, relational=False),
}


def gradient_check(drnet_cfg: DrNetConfig, instances: int = 10, seed: int = 0,
                   max_entries: Optional[int] = 12, perturb: float = 0.0) -> Dict[str, float]:
    """Worst relative error per parameter over ``instances`` random tiny models."""
    worst: Dict[str, float] = {}
    for i in range(instances):
        rng = np.random.default_rng(seed * 1000 + i)
        model = tiny_model(drnet_cfg, seed * 1000 + i)
        batch = tiny_batch(rng, model)
        # aim at the least likely labels: saturated correct predictions leave
        # gradients near the finite-difference roundoff floor
        Qs, Qr, Qo = model.predict(batch)
        batch.s, batch.r, batch.o = Qs.argmin(1), Qr.argmin(1), Qo.argmin(1)
        model.store.zero_grad()
        model.loss_and_backward(batch)
        if perturb:
            model.store.grads["pair.fc1.W"] += perturb
        report = nk.finite_diff_check(lambda _s: model.loss(batch), model.store, h=1e-5, tol=1e-4,
                                      max_entries=max_entries, rng=rng)
        for name, res in report.items():
            worst[name] = max(worst.get(name, 0.0), res.max_rel_error)
    return worst


# --------------------------------------------------------------------------
# metric fixtures


def _box(x0, y0, x1, y1) -> BoundingBox:
    return BoundingBox(float(x0), float(y0), float(x1), float(y1))


def _pred(s, r, o, score, sb, ob, sref=None, oref=None) -> TripletPrediction:
    return TripletPrediction(s, r, o, score, sb, ob, union_box(sb, ob), sref, oref)


@dataclass
class MetricFixture:
    name: str
    predictions: Dict[str, List[TripletPrediction]]
    ground_truth: Dict[str, List[GroundTruthInstance]]
    k: int
    setting: TaskSetting
    threshold: float
    expected: float


def metric_fixtures() -> List[MetricFixture]:
    """Hand-computed Recall@K cases covering all three settings."""
    A, B = _box(0, 0, 10, 10), _box(10, 0, 20, 10)
    C, D = _box(40, 40, 50, 50), _box(50, 40, 60, 50)
    gt1 = GroundTruthInstance(1, 2, 3, A, B, 0, 1)
    gt2 = GroundTruthInstance(0, 1, 2, C, D, 2, 3)
    # union of (A, B) is 20 wide; shifting both boxes by dx gives union IoU
    # (20 - dx) / (20 + dx), which is 0.4 at dx = 60/7
    dx = 20 * (1 - 0.4) / (1 + 0.4)
    A_s, B_s = _box(dx, 0, 10 + dx, 10), _box(10 + dx, 0, 20 + dx, 10)
    fx = []
    perfect = {"img": [_pred(1, 2, 3, 0.9, A, B, 0, 1), _pred(0, 1, 2, 0.8, C, D, 2, 3)]}
    gts = {"img": [gt1, gt2]}
    for setting in TaskSetting:
        fx.append(MetricFixture(f"perfect-{setting.value}", perfect, gts, 50, setting, 0.5, 1.0))
    shifted = {"img": [_pred(1, 2, 3, 0.9, A_s, B_s, 0, 1)]}
    one_gt = {"img": [gt1]}
    fx.append(MetricFixture("shifted-union-iou-0.4", shifted, one_gt, 50, TaskSetting.UNION_BOX, 0.5, 0.0))
    fx.append(MetricFixture("shifted-predicate", shifted, one_gt, 50, TaskSetting.PREDICATE, 0.5, 1.0))
    fx.append(MetricFixture("shifted-union-relaxed", shifted, one_gt, 50, TaskSetting.UNION_BOX, 0.35, 1.0))
    half = {"img": [_pred(1, 2, 3, 0.9, A, B, 0, 1), _pred(0, 4, 2, 0.8, C, D, 2, 3)]}
    fx.append(MetricFixture("one-of-two", half, gts, 50, TaskSetting.TWO_BOXES, 0.5, 0.5))
    # subject box exact, object box moved onto C: one of the two boxes misses
    off = {"img": [_pred(1, 2, 3, 0.9, A, C, 0, 1)]}
    fx.append(MetricFixture("two-boxes-object-off", off, one_gt, 50, TaskSetting.TWO_BOXES, 0.5, 0.0))
    # the right triplet ranked second is cut off at K=1
    ranked = {"img": [_pred(0, 0, 0, 0.95, A, B, 0, 1), _pred(1, 2, 3, 0.9, A, B, 0, 1)]}
    fx.append(MetricFixture("cut-by-k", ranked, one_gt, 1, TaskSetting.UNION_BOX, 0.5, 0.0))
    # two identical predictions may claim only one ground truth
    dup = {"img": [_pred(1, 2, 3, 0.9, A, B, 0, 1), _pred(1, 2, 3, 0.85, A, B, 0, 1)],
           "img2": [_pred(0, 1, 2, 0.7, C, D, 2, 3)]}
    gts_dup = {"img": [gt1, GroundTruthInstance(5, 5, 5, C, D, 2, 3)], "img2": [gt2]}
    fx.append(MetricFixture("one-to-one-two-images", dup, gts_dup, 50, TaskSetting.TWO_BOXES, 0.5, 2 / 3))
    return fx


def exhaustive_match_count(preds: Sequence[TripletPrediction], gts: Sequence[GroundTruthInstance],
                           setting: TaskSetting, threshold: float) -> int:
    """Maximum one-to-one matching by enumerating injective assignments."""
    best = 0
    options = [[j for j, g in enumerate(gts) if match_quality(p, g, setting, threshold) is not None]
               + [None] for p in preds]
    for combo in itertools.product(*options):
        chosen = [c for c in combo if c is not None]
        if len(chosen) == len(set(chosen)):
            best = max(best, len(chosen))
    return best


def exhaustive_recall(fx: MetricFixture) -> float:
    hits = total = 0
    for image_id, gts in fx.ground_truth.items():
        preds = fx.predictions.get(image_id, [])[:fx.k]
        hits += exhaustive_match_count(preds, gts, fx.setting, fx.threshold)
        total += len(gts)
    return hits / total


# --------------------------------------------------------------------------
# driver


def run_suite(suite: str, inject: Sequence[str] = ()) -> List[CheckResult]:
    """Run one suite; names in ``inject`` are deliberately broken (used to test
    that failures surface)."""
    if suite == "all":
        return [r for s in SUITES for r in run_suite(s, inject)]
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}")
    bad = set(inject)
    results = []

    def record(name, fn, tol, compare=lambda v, t: v < t):
        t0 = time.perf_counter()
        value = fn(1.0 if name in bad else 0.0)
        results.append(CheckResult(name, suite, bool(compare(value, tol)), float(value), tol,
                                   time.perf_counter() - t0))

    if suite == "oracle":
        record("exact-conditional", lambda p: check_exact_conditional(perturb=p), 1e-12)
        record("meanfield-sequence", lambda p: check_meanfield_sequence(perturb=p), 1e-15)
        record("meanfield-fixed-point", lambda p: check_fixed_point(perturb=p), 1e-6)
    elif suite == "gradient":
        for label, cfg in GRADIENT_VARIANTS.items():
            record(f"gradient-{label}",
                   lambda p, cfg=cfg: max(gradient_check(cfg, instances=10, perturb=p).values()), 1e-4)
    else:
        for fx in metric_fixtures():
            def fixture_gap(p, fx=fx):
                got = recall_at_k(fx.predictions, fx.ground_truth, fx.k, fx.setting, fx.threshold)
                return abs(got - fx.expected) + abs(got - exhaustive_recall(fx)) + p
            record(f"fixture-{fx.name}", fixture_gap, 1e-12)

        def sweep_violation(p):
            worst = 0.0
            for fx in metric_fixtures():
                values = iou_sweep(fx.predictions, fx.ground_truth, [0.1, 0.3, 0.5, 0.7, 0.9], fx.k, fx.setting)
                worst = max([worst] + [b - a for a, b in zip(values, values[1:])])
            return worst + p
        record("iou-sweep-monotone", sweep_violation, 1e-12, lambda v, t: v <= t)
    return results


def summary(results: List[CheckResult]) -> dict:
    return {"passed": all(r.passed for r in results),
            "failed": [r.name for r in results if not r.passed],
            "checks": [asdict(r) for r in results]}
