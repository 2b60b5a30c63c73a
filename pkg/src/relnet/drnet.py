"""Deep Relational Network: mean-field updates unrolled into a stack of
inference units, plus the end-to-end model (spatial encoder, pair-feature
compressor, units), its loss, SGD training and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numkit as nk
from .numkit import ConfigurationError, ParamStore, softmax, softmax_backward
from .relmodel import BeliefTriple, CrfPotentials, FeatureTriple, LabelSpace
from .spatial import DEFAULT_MARGIN, DEFAULT_MASK_SIZE, SPATIAL_DIM, SpatialEncoder

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOSS_MODES = ("final-unit", "all-units")


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


@dataclass
class DrNetConfig:
    units: int = 8
    share_weights: bool = False
    enforce_symmetry: bool = False
    loss_mode: str = "final-unit"
    # False gives the unary-only baseline: units carry no relational matrices.
    relational: bool = True

    def __post_init__(self):
        if self.units < 1:
            raise ConfigurationError("a DR-Net needs at least one inference unit")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationError(f"loss_mode must be one of {LOSS_MODES}")

    @property
    def n_param_sets(self) -> int:
        return 1 if self.share_weights else self.units


RELATIONAL_FREE = ("W_sr", "W_so", "W_rs", "W_ro", "W_os", "W_or")
RELATIONAL_TIED = ("W_rs", "W_ro", "W_so")


@dataclass
class InferenceUnitParams:
    """Weights of one inference unit.

    With ``symmetric`` set only W_rs, W_ro, W_so are stored and the other three
    relational matrices are their transposes. Arrays are usually views into a
    ParamStore; ``names`` maps each stored field to its store key.
    """

    W_a: np.ndarray
    b_a: np.ndarray
    W_r: np.ndarray
    b_r: np.ndarray
    W_rs: Optional[np.ndarray] = None
    W_ro: Optional[np.ndarray] = None
    W_so: Optional[np.ndarray] = None
    W_sr_free: Optional[np.ndarray] = None
    W_os_free: Optional[np.ndarray] = None
    W_or_free: Optional[np.ndarray] = None
    symmetric: bool = True
    names: Dict[str, str] = field(default_factory=dict)

    @property
    def relational(self) -> bool:
        return self.W_rs is not None

    @property
    def W_sr(self):
        return self.W_rs.T if self.symmetric else self.W_sr_free

    @property
    def W_os(self):
        return self.W_so.T if self.symmetric else self.W_os_free

    @property
    def W_or(self):
        return self.W_ro.T if self.symmetric else self.W_or_free

    @classmethod
    def from_crf(cls, theta: CrfPotentials) -> "InferenceUnitParams":
        return cls(theta.W_a, theta.b_a, theta.W_r, theta.b_r,
                   theta.W_rs, theta.W_ro, theta.W_so, symmetric=True)

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str, symmetric: bool) -> "InferenceUnitParams":
        p = store.params
        names = {k: prefix + k for k in ("W_a", "b_a", "W_r", "b_r")}
        kw = {k: p[v] for k, v in names.items()}
        if prefix + "W_rs" in p:
            rel = RELATIONAL_TIED if symmetric else RELATIONAL_FREE
            for k in rel:
                field_name = k if k in RELATIONAL_TIED else k + "_free"
                names[field_name] = prefix + k
                kw[field_name] = p[prefix + k]
        return cls(symmetric=symmetric, names=names, **kw)


def _unit_logits(Qs, Qr, Qo, Xs, Xr, Xo, u: InferenceUnitParams):
    zs = Xs @ u.W_a.T + u.b_a
    zr = Xr @ u.W_r.T + u.b_r
    zo = Xo @ u.W_a.T + u.b_a
    if u.relational:
        zs = zs + Qr @ u.W_sr.T + Qo @ u.W_so.T
        zr = zr + Qs @ u.W_rs.T + Qo @ u.W_ro.T
        zo = zo + Qs @ u.W_os.T + Qr @ u.W_or.T
    return zs, zr, zo


def unit_forward_batch(Qs, Qr, Qo, Xs, Xr, Xo, u: InferenceUnitParams):
    """Batched inference unit; every argument has a leading batch axis."""
    zs, zr, zo = _unit_logits(Qs, Qr, Qo, Xs, Xr, Xo, u)
    return softmax(zs), softmax(zr), softmax(zo)


def _check_unit_shapes(q: BeliefTriple, f: FeatureTriple, u: InferenceUnitParams) -> None:
    N, K = u.W_a.shape[0], u.W_r.shape[0]
    ok = (q.q_s.shape == (N,) and q.q_o.shape == (N,) and q.q_r.shape == (K,)
          and f.x_s.shape == (u.W_a.shape[1],) and f.x_o.shape == (u.W_a.shape[1],)
          and f.x_r.shape == (u.W_r.shape[1],))
    if not ok:
        raise ConfigurationError("belief/feature shapes do not match the inference unit")


def inference_unit_forward(q: BeliefTriple, f: FeatureTriple, u: InferenceUnitParams) -> BeliefTriple:
    """Apply one inference unit to a single instance."""
    _check_unit_shapes(q, f, u)
    q_s = softmax(u.W_a @ f.x_s + u.b_a + u.W_sr @ q.q_r + u.W_so @ q.q_o) if u.relational \
        else softmax(u.W_a @ f.x_s + u.b_a)
    q_r = softmax(u.W_r @ f.x_r + u.b_r + u.W_rs @ q.q_s + u.W_ro @ q.q_o) if u.relational \
        else softmax(u.W_r @ f.x_r + u.b_r)
    q_o = softmax(u.W_a @ f.x_o + u.b_a + u.W_os @ q.q_s + u.W_or @ q.q_r) if u.relational \
        else softmax(u.W_a @ f.x_o + u.b_a)
    return BeliefTriple(q_s, q_r, q_o)


def unary_beliefs(f: FeatureTriple, u: InferenceUnitParams) -> BeliefTriple:
    return BeliefTriple(softmax(u.W_a @ f.x_s + u.b_a), softmax(u.W_r @ f.x_r + u.b_r),
                        softmax(u.W_a @ f.x_o + u.b_a))


def _resolve_units(cfg: DrNetConfig, params: Sequence[InferenceUnitParams]) -> List[InferenceUnitParams]:
    if len(params) == 1:
        return list(params) * cfg.units
    if len(params) != cfg.units:
        raise ConfigurationError(
            f"expected 1 (shared) or {cfg.units} parameter sets, got {len(params)}")
    return list(params)


def drnet_forward(f: FeatureTriple, cfg: DrNetConfig,
                  params: Sequence[InferenceUnitParams]) -> Tuple[BeliefTriple, List[BeliefTriple]]:
    """Unrolled forward pass for one instance.

    Returns the final beliefs and the full sequence q^0 .. q^T, where q^0 are
    the unary softmaxes of the first unit.
    """
    units = _resolve_units(cfg, params)
    q = unary_beliefs(f, units[0])
    trace = [q]
    for u in units:
        q = inference_unit_forward(q, f, u)
        trace.append(q)
    return q, trace


def drnet_loss(beliefs, truth: Tuple[int, int, int], loss_mode: str = "final-unit") -> float:
    """Sum of the three cross entropies.

    ``beliefs`` is either one BeliefTriple or the list q^0 .. q^T returned by
    :func:`drnet_forward`; in "all-units" mode the loss is averaged over
    q^1 .. q^T.
    """
    s, r, o = truth
    if isinstance(beliefs, BeliefTriple):
        layers = [beliefs]
    elif loss_mode == "final-unit":
        layers = [beliefs[-1]]
    else:
        layers = list(beliefs[1:]) or [beliefs[-1]]
    total = 0.0
    for q in layers:
        total += nk.cross_entropy(q.q_s, s) + nk.cross_entropy(q.q_r, r) + nk.cross_entropy(q.q_o, o)
    return total / len(layers)


# --------------------------------------------------------------------------
# End-to-end model


@dataclass
class ModelConfig:
    n_categories: int
    n_predicates: int
    appearance_dim: int
    union_dim: int
    pair_dim: int = 32
    hidden_dim: int = 64
    mask_size: int = DEFAULT_MASK_SIZE
    margin_fraction: float = DEFAULT_MARGIN
    spatial_schedule: Optional[Tuple[Tuple[int, int, int], ...]] = None
    use_spatial: bool = True
    drnet: DrNetConfig = field(default_factory=DrNetConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["spatial_schedule"] is not None:
            d["spatial_schedule"] = [list(l) for l in d["spatial_schedule"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["drnet"] = DrNetConfig(**d["drnet"])
        if d.get("spatial_schedule") is not None:
            d["spatial_schedule"] = tuple(tuple(l) for l in d["spatial_schedule"])
        return cls(**d)


@dataclass
class InstanceBatch:
    """Arrays for a set of relationship instances (one row each)."""

    xs: np.ndarray       # (B, D_a) subject appearance
    xo: np.ndarray       # (B, D_a) object appearance
    union: np.ndarray    # (B, D_e) enclosing-box appearance
    masks: np.ndarray    # (B, 2, M, M) uint8 dual masks
    s: np.ndarray
    r: np.ndarray
    o: np.ndarray

    def __len__(self) -> int:
        return self.xs.shape[0]

    def take(self, idx) -> "InstanceBatch":
        return InstanceBatch(*(getattr(self, k)[idx] for k in
                               ("xs", "xo", "union", "masks", "s", "r", "o")))

    def targets(self) -> np.ndarray:
        return np.stack([self.s, self.r, self.o], axis=1)


class RelationNet:
    """Spatial encoder + two-layer pair compressor + unrolled DR-Net."""

    def __init__(self, config: ModelConfig, label_space: Optional[LabelSpace] = None,
                 store: Optional[ParamStore] = None):
        self.config = config
        self.label_space = label_space or LabelSpace.generic(config.n_categories, config.n_predicates)
        if (self.label_space.N, self.label_space.K) != (config.n_categories, config.n_predicates):
            raise ConfigurationError("label space does not match the model dimensions")
        self.store = store if store is not None else ParamStore()
        self.encoder = SpatialEncoder(self.store, "spatial.", config.mask_size, config.spatial_schedule)

    # parameter layout -----------------------------------------------------

    def unit_prefix(self, t: int) -> str:
        return "unit0." if self.config.drnet.share_weights else f"unit{t}."

    def init_params(self, seed: int = 0) -> "RelationNet":
        cfg = self.config
        rng = np.random.default_rng(seed)
        N, K = cfg.n_categories, cfg.n_predicates
        if cfg.use_spatial:
            self.encoder.init_params(rng)
        in_dim = cfg.union_dim + (SPATIAL_DIM if cfg.use_spatial else 0)
        self.store.add("pair.fc1.W", nk.glorot_uniform(rng, cfg.hidden_dim, in_dim))
        self.store.add("pair.fc1.b", np.zeros(cfg.hidden_dim))
        self.store.add("pair.fc2.W", nk.glorot_uniform(rng, cfg.pair_dim, cfg.hidden_dim))
        self.store.add("pair.fc2.b", np.zeros(cfg.pair_dim))
        rel = RELATIONAL_TIED if cfg.drnet.enforce_symmetry else RELATIONAL_FREE
        shapes = {"W_sr": (N, K), "W_so": (N, N), "W_rs": (K, N),
                  "W_ro": (K, N), "W_os": (N, N), "W_or": (N, K)}
        # every unit starts from the same unary draw, so an unshared stack
        # initially computes exactly what the shared one does
        W_a = nk.glorot_uniform(rng, N, cfg.appearance_dim)
        W_r = nk.glorot_uniform(rng, K, cfg.pair_dim)
        for t in range(cfg.drnet.n_param_sets):
            pre = f"unit{t}."
            self.store.add(pre + "W_a", W_a.copy())
            self.store.add(pre + "b_a", np.zeros(N))
            self.store.add(pre + "W_r", W_r.copy())
            self.store.add(pre + "b_r", np.zeros(K))
            if cfg.drnet.relational:
                for k in rel:
                    self.store.add(pre + k, np.zeros(shapes[k]))
        return self

    def units(self) -> List[InferenceUnitParams]:
        sym = self.config.drnet.enforce_symmetry
        return [InferenceUnitParams.from_store(self.store, self.unit_prefix(t), sym)
                for t in range(self.config.drnet.units)]

    def relational_names(self) -> List[str]:
        return [n for n in self.store if n.startswith("unit") and n.split(".")[1] in RELATIONAL_FREE]

    def copy(self) -> "RelationNet":
        return RelationNet(self.config, self.label_space, self.store.copy())

    def untied(self, units: Optional[int] = None) -> "RelationNet":
        """Unshared copy of a shared network: every unit starts from the
        shared parameter set."""
        net = replace(self.config.drnet, share_weights=False, units=units or self.config.drnet.units)
        out = RelationNet(replace(self.config, drnet=net), self.label_space)
        for name, value in self.store.params.items():
            if name.startswith("unit0."):
                for t in range(net.units):
                    out.store.add(f"unit{t}." + name.split(".", 1)[1], value.copy())
            else:
                out.store.add(name, value.copy(), frozen=name in self.store.frozen)
        return out

    def with_relational_zeroed(self) -> "RelationNet":
        out = self.copy()
        for name in out.relational_names():
            out.store.params[name][...] = 0.0
        return out

    def tie_to_crf(self, theta: CrfPotentials) -> None:
        """Copy CRF potentials into every unit (requires D_r == pair_dim)."""
        for t in range(self.config.drnet.n_param_sets):
            pre = f"unit{t}."
            p = self.store.params
            p[pre + "W_a"][...] = theta.W_a
            p[pre + "b_a"][...] = theta.b_a
            p[pre + "W_r"][...] = theta.W_r
            p[pre + "b_r"][...] = theta.b_r
            p[pre + "W_rs"][...] = theta.W_rs
            p[pre + "W_ro"][...] = theta.W_ro
            p[pre + "W_so"][...] = theta.W_so
            if not self.config.drnet.enforce_symmetry:
                p[pre + "W_sr"][...] = theta.W_rs.T
                p[pre + "W_os"][...] = theta.W_so.T
                p[pre + "W_or"][...] = theta.W_ro.T

    # forward / backward ---------------------------------------------------

    def pair_feature(self, union: np.ndarray, masks: np.ndarray):
        """Compressed pair feature x_r for a batch. Returns ``(x_r, cache)``."""
        p = self.store.params
        if self.config.use_spatial:
            sp, sp_cache = self.encoder.forward(masks)
            h_in = np.concatenate([union, sp], axis=1)
        else:
            sp_cache, h_in = None, np.asarray(union, dtype=np.float64)
        pre = nk.affine(h_in, p["pair.fc1.W"], p["pair.fc1.b"])
        h = nk.relu(pre)
        x_r = nk.affine(h, p["pair.fc2.W"], p["pair.fc2.b"])
        return x_r, (sp_cache, h_in, pre, h)

    def pair_feature_backward(self, cache, dx_r: np.ndarray) -> None:
        sp_cache, h_in, pre, h = cache
        p = self.store.params
        dh, dW2, db2 = nk.affine_backward(h, p["pair.fc2.W"], dx_r)
        self.store.accumulate("pair.fc2.W", dW2)
        self.store.accumulate("pair.fc2.b", db2)
        dpre = nk.relu_backward(pre, dh)
        dh_in, dW1, db1 = nk.affine_backward(h_in, p["pair.fc1.W"], dpre)
        self.store.accumulate("pair.fc1.W", dW1)
        self.store.accumulate("pair.fc1.b", db1)
        if self.config.use_spatial:
            self.encoder.backward(sp_cache, dh_in[:, self.config.union_dim:])

    def forward(self, batch: InstanceBatch):
        """Return the belief sequence [(Qs, Qr, Qo) for q^0..q^T] and a cache."""
        xs = np.asarray(batch.xs, dtype=np.float64)
        xo = np.asarray(batch.xo, dtype=np.float64)
        x_r, pf_cache = self.pair_feature(batch.union, batch.masks)
        units = self.units()
        u0 = units[0]
        layers = [(softmax(xs @ u0.W_a.T + u0.b_a), softmax(x_r @ u0.W_r.T + u0.b_r),
                   softmax(xo @ u0.W_a.T + u0.b_a))]
        for u in units:
            layers.append(unit_forward_batch(*layers[-1], xs, x_r, xo, u))
        return layers, (xs, xo, x_r, pf_cache, units)

    def predict(self, batch: InstanceBatch) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        layers, _ = self.forward(batch)
        return layers[-1]

    def loss_from_layers(self, layers, targets: np.ndarray) -> float:
        s, r, o = targets[:, 0], targets[:, 1], targets[:, 2]
        used = layers[-1:] if self.config.drnet.loss_mode == "final-unit" else layers[1:]
        total = 0.0
        for Qs, Qr, Qo in used:
            total += np.sum(nk.batch_cross_entropy(Qs, s) + nk.batch_cross_entropy(Qr, r)
                            + nk.batch_cross_entropy(Qo, o))
        return float(total / (len(used) * len(targets)))

    def loss(self, batch: InstanceBatch) -> float:
        layers, _ = self.forward(batch)
        return self.loss_from_layers(layers, batch.targets())

    def loss_and_backward(self, batch: InstanceBatch) -> float:
        """Mean loss over the batch; accumulates its gradient into the store."""
        layers, cache = self.forward(batch)
        targets = batch.targets()
        loss = self.loss_from_layers(layers, targets)
        self._backward(layers, cache, targets)
        return loss

    def _backward(self, layers, cache, targets) -> None:
        xs, xo, x_r, pf_cache, units = cache
        store = self.store
        T = len(units)
        B = len(targets)
        s, r, o = targets[:, 0], targets[:, 1], targets[:, 2]
        loss_layers = [T] if self.config.drnet.loss_mode == "final-unit" else list(range(1, T + 1))
        scale = 1.0 / (len(loss_layers) * B)
        dQ = [[np.zeros_like(a) for a in layer] for layer in layers]
        for t in loss_layers:
            Qs, Qr, Qo = layers[t]
            dQ[t][0] += nk.batch_cross_entropy_backward(Qs, s, scale)
            dQ[t][1] += nk.batch_cross_entropy_backward(Qr, r, scale)
            dQ[t][2] += nk.batch_cross_entropy_backward(Qo, o, scale)
        dx_r = np.zeros_like(x_r)
        for t in range(T, 0, -1):
            u = units[t - 1]
            Qs_in, Qr_in, Qo_in = layers[t - 1]
            dzs = softmax_backward(layers[t][0], dQ[t][0])
            dzr = softmax_backward(layers[t][1], dQ[t][1])
            dzo = softmax_backward(layers[t][2], dQ[t][2])
            store.accumulate(u.names["W_a"], dzs.T @ xs + dzo.T @ xo)
            store.accumulate(u.names["b_a"], dzs.sum(axis=0) + dzo.sum(axis=0))
            store.accumulate(u.names["W_r"], dzr.T @ x_r)
            store.accumulate(u.names["b_r"], dzr.sum(axis=0))
            dx_r += dzr @ u.W_r
            if u.relational:
                g_sr, g_so = dzs.T @ Qr_in, dzs.T @ Qo_in
                g_rs, g_ro = dzr.T @ Qs_in, dzr.T @ Qo_in
                g_os, g_or = dzo.T @ Qs_in, dzo.T @ Qr_in
                if u.symmetric:
                    store.accumulate(u.names["W_rs"], g_rs + g_sr.T)
                    store.accumulate(u.names["W_so"], g_so + g_os.T)
                    store.accumulate(u.names["W_ro"], g_ro + g_or.T)
                else:
                    for key, g in (("W_sr_free", g_sr), ("W_so", g_so), ("W_rs", g_rs),
                                   ("W_ro", g_ro), ("W_os_free", g_os), ("W_or_free", g_or)):
                        store.accumulate(u.names[key], g)
                dQ[t - 1][0] += dzr @ u.W_rs + dzo @ u.W_os
                dQ[t - 1][1] += dzs @ u.W_sr + dzo @ u.W_or
                dQ[t - 1][2] += dzs @ u.W_so + dzr @ u.W_ro
        # q^0: unary softmaxes of the first unit
        u0 = units[0]
        dzs = softmax_backward(layers[0][0], dQ[0][0])
        dzr = softmax_backward(layers[0][1], dQ[0][1])
        dzo = softmax_backward(layers[0][2], dQ[0][2])
        store.accumulate(u0.names["W_a"], dzs.T @ xs + dzo.T @ xo)
        store.accumulate(u0.names["b_a"], dzs.sum(axis=0) + dzo.sum(axis=0))
        store.accumulate(u0.names["W_r"], dzr.T @ x_r)
        store.accumulate(u0.names["b_r"], dzr.sum(axis=0))
        dx_r += dzr @ u0.W_r
        self.pair_feature_backward(pf_cache, dx_r)


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    lr: float = 0.1
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.0
    weight_decay: float = 0.0
    # unshared stacks only: train this many epochs with the units tied, then
    # give every unit its own copy and continue
    tied_epochs: int = 0


@dataclass
class EpochStats:
    epoch: int
    loss: float
    predicate_recall: float

    def to_dict(self) -> dict:
        return asdict(self)


def predicate_recall(model: RelationNet, batch: InstanceBatch, chunk: int = 1024) -> float:
    """Fraction of instances whose top-1 predicate is correct."""
    if len(batch) == 0:
        return 0.0
    hits = 0
    for start in range(0, len(batch), chunk):
        part = batch.take(slice(start, start + chunk))
        _, Qr, _ = model.predict(part)
        hits += int(np.sum(np.argmax(Qr, axis=1) == part.r))
    return hits / len(batch)


def drnet_train(data: InstanceBatch, config: ModelConfig, hp: TrainConfig,
                label_space: Optional[LabelSpace] = None,
                model: Optional[RelationNet] = None,
                eval_data: Optional[InstanceBatch] = None):
    """Minibatch SGD on the mean triplet cross entropy.

    Gradients run through every unit into the pair compressor and the
    spatial encoder. Returns ``(model, trace)``; the trace holds one
    :class:`EpochStats` per epoch with the recall measured on ``eval_data``
    (training data when absent).
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if hp.lr < 0:
        raise ConfigurationError("learning rate must be non-negative")
    if hp.tied_epochs < 0:
        raise ConfigurationError("tied_epochs must be non-negative")
    tied = hp.tied_epochs if model is None and not config.drnet.share_weights else 0
    if model is None:
        start_cfg = replace(config, drnet=replace(config.drnet, share_weights=True)) if tied else config
        model = RelationNet(start_cfg, label_space).init_params(hp.seed)
    rng = np.random.default_rng(hp.seed + 1)
    monitor = eval_data if eval_data is not None else data
    trace = []
    for epoch in range(1, hp.epochs + 1):
        if tied and epoch == tied + 1:
            model = model.untied()
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(data), hp.batch_size):
            batch = data.take(order[start:start + hp.batch_size])
            loss = model.loss_and_backward(batch)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged ({loss}) in epoch {epoch}", epoch)
            if hp.lr > 0:
                nk.sgd_step(model.store, hp.lr, hp.momentum, hp.weight_decay)
            else:
                model.store.zero_grad()
            total += loss * len(batch)
            count += len(batch)
        stats = EpochStats(epoch, total / count, predicate_recall(model, monitor))
        log.info("epoch %d loss %.4f predicate recall %.4f", epoch, stats.loss, stats.predicate_recall)
        trace.append(stats)
    if tied and model.config.drnet.share_weights:
        model = model.untied()
    return model, trace


# --------------------------------------------------------------------------
# Checkpoints


def checkpoint_dict(model: RelationNet, extra: Optional[dict] = None) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "config": model.config.to_dict(),
        "label_space": model.label_space.to_dict(),
        "params": {k: v.tolist() for k, v in model.store.params.items()},
    }
    if extra:
        doc.update(extra)
    return doc


def save_checkpoint(model: RelationNet, path, extra: Optional[dict] = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, extra)) + "\n", encoding="utf-8")


def model_from_dict(doc: dict) -> RelationNet:
    if doc.get("format_version") != FORMAT_VERSION:
        from .data import VersionError
        raise VersionError(f"unsupported checkpoint version {doc.get('format_version')}")
    config = ModelConfig.from_dict(doc["config"])
    model = RelationNet(config, LabelSpace.from_dict(doc["label_space"]))
    for name, value in doc["params"].items():
        model.store.add(name, np.asarray(value, dtype=np.float64))
    return model


def load_checkpoint(path) -> RelationNet:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
