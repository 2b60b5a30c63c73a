"""Conditional random field over a (subject, predicate, object) triplet.

This is the reference model the unrolled network is checked against: the
joint potential, brute-force posteriors, the closed-form predicate
conditional, and damped mean-field iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .numkit import softmax

MAX_ENUMERATION = 10 ** 6


class CapacityError(RuntimeError):
    pass


@dataclass(frozen=True)
class LabelSpace:
    object_categories: tuple
    predicates: tuple

    def __post_init__(self):
        object.__setattr__(self, "object_categories", tuple(self.object_categories))
        object.__setattr__(self, "predicates", tuple(self.predicates))
        for name, items in (("object_categories", self.object_categories),
                            ("predicates", self.predicates)):
            if not items:
                raise ValueError(f"{name} must not be empty")
            if len(set(items)) != len(items):
                raise ValueError(f"{name} contains duplicate names")

    @property
    def N(self) -> int:
        return len(self.object_categories)

    @property
    def K(self) -> int:
        return len(self.predicates)

    @classmethod
    def generic(cls, N: int, K: int) -> "LabelSpace":
        return cls(tuple(f"obj{i}" for i in range(N)), tuple(f"pred{i}" for i in range(K)))

    def to_dict(self) -> dict:
        return {"object_categories": list(self.object_categories), "predicates": list(self.predicates)}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSpace":
        return cls(tuple(d["object_categories"]), tuple(d["predicates"]))


@dataclass
class FeatureTriple:
    x_s: np.ndarray
    x_r: np.ndarray
    x_o: np.ndarray


@dataclass
class CrfPotentials:
    W_a: np.ndarray   # N x D_a, shared by subject and object
    b_a: np.ndarray   # N
    W_r: np.ndarray   # K x D_r
    b_r: np.ndarray   # K
    W_rs: np.ndarray  # K x N
    W_ro: np.ndarray  # K x N
    W_so: np.ndarray  # N x N

    @property
    def N(self) -> int:
        return self.W_a.shape[0]

    @property
    def K(self) -> int:
        return self.W_r.shape[0]

    @classmethod
    def zeros(cls, N: int, K: int, D_a: int, D_r: int) -> "CrfPotentials":
        return cls(np.zeros((N, D_a)), np.zeros(N), np.zeros((K, D_r)), np.zeros(K),
                   np.zeros((K, N)), np.zeros((K, N)), np.zeros((N, N)))

    @classmethod
    def random(cls, rng: np.random.Generator, N: int, K: int, D_a: int, D_r: int,
               scale: float = 1.0, relational_scale: Optional[float] = None) -> "CrfPotentials":
        rs = scale if relational_scale is None else relational_scale
        return cls(rng.normal(0, scale, (N, D_a)), rng.normal(0, scale, N),
                   rng.normal(0, scale, (K, D_r)), rng.normal(0, scale, K),
                   rng.normal(0, rs, (K, N)), rng.normal(0, rs, (K, N)),
                   rng.normal(0, rs, (N, N)))

    def to_dict(self) -> Dict[str, list]:
        return {k: getattr(self, k).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "CrfPotentials":
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in cls.__dataclass_fields__})


def _check_indices(theta: CrfPotentials, s=None, r=None, o=None) -> None:
    for name, v, n in (("s", s, theta.N), ("r", r, theta.K), ("o", o, theta.N)):
        if v is not None and not 0 <= v < n:
            raise IndexError(f"{name}={v} out of range [0, {n})")


def unary_logits(f: FeatureTriple, theta: CrfPotentials):
    return (theta.W_a @ f.x_s + theta.b_a,
            theta.W_r @ f.x_r + theta.b_r,
            theta.W_a @ f.x_o + theta.b_a)


def joint_potential(s: int, r: int, o: int, f: FeatureTriple, theta: CrfPotentials) -> float:
    _check_indices(theta, s, r, o)
    u_s, u_r, u_o = unary_logits(f, theta)
    return float(u_s[s] + u_o[o] + u_r[r] + theta.W_rs[r, s] + theta.W_ro[r, o] + theta.W_so[s, o])


def potential_table(f: FeatureTriple, theta: CrfPotentials) -> np.ndarray:
    """Joint potential for every (s, r, o), shape (N, K, N)."""
    u_s, u_r, u_o = unary_logits(f, theta)
    return (u_s[:, None, None] + u_r[None, :, None] + u_o[None, None, :]
            + theta.W_rs.T[:, :, None] + theta.W_ro[None, :, :] + theta.W_so[:, None, :])


def exact_joint_posterior(f: FeatureTriple, theta: CrfPotentials) -> np.ndarray:
    """Normalized Gibbs table p(s, r, o | x) by full enumeration."""
    N, K = theta.N, theta.K
    if N * K * N > MAX_ENUMERATION:
        raise CapacityError(f"N*K*N = {N * K * N} exceeds enumeration guard {MAX_ENUMERATION}")
    phi = potential_table(f, theta)
    p = np.exp(phi - phi.max())
    return p / p.sum()


def exact_conditional_predicate(s: int, o: int, f: FeatureTriple, theta: CrfPotentials) -> np.ndarray:
    """Closed-form p(r | s, o, x_r)."""
    _check_indices(theta, s=s, o=o)
    onehot_s = np.zeros(theta.N)
    onehot_s[s] = 1.0
    onehot_o = np.zeros(theta.N)
    onehot_o[o] = 1.0
    return softmax(theta.W_r @ f.x_r + theta.b_r + theta.W_rs @ onehot_s + theta.W_ro @ onehot_o)


@dataclass
class BeliefTriple:
    q_s: np.ndarray
    q_r: np.ndarray
    q_o: np.ndarray

    def max_change(self, other: "BeliefTriple") -> float:
        return float(max(np.max(np.abs(self.q_s - other.q_s)),
                         np.max(np.abs(self.q_r - other.q_r)),
                         np.max(np.abs(self.q_o - other.q_o))))

    def mix(self, other: "BeliefTriple", weight: float) -> "BeliefTriple":
        """``weight * self + (1 - weight) * other``."""
        return BeliefTriple(weight * self.q_s + (1 - weight) * other.q_s,
                            weight * self.q_r + (1 - weight) * other.q_r,
                            weight * self.q_o + (1 - weight) * other.q_o)


def initial_beliefs(f: FeatureTriple, theta: CrfPotentials) -> BeliefTriple:
    u_s, u_r, u_o = unary_logits(f, theta)
    return BeliefTriple(softmax(u_s), softmax(u_r), softmax(u_o))


def meanfield_step(q: BeliefTriple, f: FeatureTriple, theta: CrfPotentials) -> BeliefTriple:
    """One simultaneous update of all three beliefs from the input beliefs."""
    q_s = softmax(theta.W_a @ f.x_s + theta.b_a + theta.W_rs.T @ q.q_r + theta.W_so @ q.q_o)
    q_r = softmax(theta.W_r @ f.x_r + theta.b_r + theta.W_rs @ q.q_s + theta.W_ro @ q.q_o)
    q_o = softmax(theta.W_a @ f.x_o + theta.b_a + theta.W_so.T @ q.q_s + theta.W_ro.T @ q.q_r)
    return BeliefTriple(q_s, q_r, q_o)


def entropy(p) -> float:
    """Shannon entropy in nats; 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64).ravel()
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def free_energy(q: BeliefTriple, f: FeatureTriple, theta: CrfPotentials) -> float:
    """Mean-field objective E_q[Phi] + H(q) for a factorized belief."""
    u_s, u_r, u_o = unary_logits(f, theta)
    expected = (q.q_s @ u_s + q.q_r @ u_r + q.q_o @ u_o
                + q.q_r @ theta.W_rs @ q.q_s + q.q_r @ theta.W_ro @ q.q_o
                + q.q_s @ theta.W_so @ q.q_o)
    return float(expected + entropy(q.q_s) + entropy(q.q_r) + entropy(q.q_o))


@dataclass
class FixedPointResult:
    beliefs: BeliefTriple
    iterations: int
    converged: bool
    monotone: bool = True
    energies: List[float] = field(default_factory=list)


def meanfield_fixed_point(f: FeatureTriple, theta: CrfPotentials, max_iters: int = 500,
                          tol: float = 1e-10, damping: float = 0.5,
                          init: Optional[BeliefTriple] = None,
                          monitor: bool = False) -> FixedPointResult:
    """Damped mean-field iteration from the unary softmaxes.

    ``monotone`` is False when, with ``monitor`` on, some step lowered the
    free energy by more than 1e-9 (the damped Jacobi update oscillated).
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    q = init if init is not None else initial_beliefs(f, theta)
    energies = [free_energy(q, f, theta)] if monitor else []
    monotone = True
    for it in range(1, max_iters + 1):
        q_new = meanfield_step(q, f, theta)
        if damping != 1.0:
            q_new = q_new.mix(q, damping)
        change = q_new.max_change(q)
        q = q_new
        if monitor:
            energies.append(free_energy(q, f, theta))
            if energies[-1] < energies[-2] - 1e-9:
                monotone = False
        if change < tol:
            return FixedPointResult(q, it, True, monotone, energies)
    return FixedPointResult(q, max_iters, False, monotone, energies)


def predicate_marginal_and_conditional_entropy(table: np.ndarray):
    """(H(r), E_{s,o} H(r | s, o)) for a normalized (N, K, N) table."""
    p_r = table.sum(axis=(0, 2))
    p_so = table.sum(axis=1)
    cond = 0.0
    for s in range(table.shape[0]):
        for o in range(table.shape[2]):
            if p_so[s, o] > 0:
                cond += p_so[s, o] * entropy(table[s, :, o] / p_so[s, o])
    return entropy(p_r), cond


def sample_triplets(table: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` (s, r, o) index rows from a normalized (N, K, N) table."""
    flat = table.ravel()
    idx = rng.choice(flat.size, size=n, p=flat / flat.sum())
    s, r, o = np.unravel_index(idx, table.shape)
    return np.stack([s, r, o], axis=1)
