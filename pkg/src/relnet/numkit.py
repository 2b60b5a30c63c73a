"""Small differentiable compute core.

Everything here works on float64 numpy arrays. Gradients are written out by
hand for each operation and chained by explicit ``*_backward`` calls; there is
no tape. Most functions accept either a single vector or a batch with a
leading axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional

import numpy as np

LOG_EPS = 1e-12


class DimensionError(ValueError):
    """Raised when array shapes are incompatible."""


class ConfigurationError(ValueError):
    """Raised for invalid hyperparameters or model configuration."""


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, stable for large logits."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise DimensionError("softmax of an empty vector")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(q: np.ndarray, dq: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given the softmax output ``q`` and upstream ``dq``."""
    return q * (dq - np.sum(dq * q, axis=-1, keepdims=True))


def cross_entropy(q: np.ndarray, target) -> float:
    """Negative log-probability of ``target`` under ``q`` (with a 1e-12 floor)."""
    q = np.asarray(q, dtype=np.float64)
    target = int(target)
    if not 0 <= target < q.shape[-1]:
        raise IndexError(f"target {target} out of range for {q.shape[-1]} classes")
    return float(-np.log(q[target] + LOG_EPS))


def batch_cross_entropy(q: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-row cross entropy for a batch of distributions ``q`` (B, C)."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= q.shape[-1]):
        raise IndexError("target index out of range")
    rows = np.arange(q.shape[0])
    return -np.log(q[rows, targets] + LOG_EPS)


def batch_cross_entropy_backward(q: np.ndarray, targets: np.ndarray, scale) -> np.ndarray:
    """d/dq of ``scale * sum(batch_cross_entropy(q, targets))``."""
    rows = np.arange(q.shape[0])
    dq = np.zeros_like(q)
    dq[rows, targets] = -np.asarray(scale) / (q[rows, targets] + LOG_EPS)
    return dq


def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``W x + b``; ``x`` may be a vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise DimensionError(
            f"affine: W {W.shape}, x {x.shape}, b {b.shape} are incompatible"
        )
    if x.ndim == 1:
        return W @ x + b
    return x @ W.T + b


def affine_backward(x: np.ndarray, W: np.ndarray, dy: np.ndarray):
    """Return ``(dx, dW, db)`` for a batched ``affine``."""
    if x.ndim == 1:
        return W.T @ dy, np.outer(dy, x), dy.copy()
    return dy @ W, dy.T @ x, dy.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


_BELOW_ONE = np.nextafter(1.0, 0.0)


def logistic(x):
    """Numerically stable sigmoid, capped just below 1 so a threshold of 1
    is never reached even for saturated inputs."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.minimum(out, _BELOW_ONE)


def _conv_out(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    """(B, C, H, W) -> patch matrix (B*Ho*Wo, C*kh*kw) plus (Ho, Wo)."""
    B, C, H, W = x.shape
    Ho, Wo = _conv_out(H, kh, stride), _conv_out(W, kw, stride)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    return cols, Ho, Wo


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: Optional[np.ndarray] = None,
           stride: int = 1, return_cols: bool = False):
    """Valid cross-correlation.

    ``x`` is (C, H, W) or (B, C, H, W); ``kernels`` is (F, C, kh, kw). The
    output spatial size is ``(in - k) // stride + 1`` per axis. With
    ``return_cols`` the patch matrix is returned too, for reuse in
    :func:`conv2d_backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError("conv2d expects (B,C,H,W) input and (F,C,kh,kw) kernels")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    B, C, H, W = x.shape
    F, Ck, kh, kw = kernels.shape
    if Ck != C:
        raise DimensionError(f"kernel channels {Ck} != input channels {C}")
    if kh > H or kw > W:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {H}x{W}")
    cols, Ho, Wo = _im2col(x, kh, kw, stride)
    out = cols @ kernels.reshape(F, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)
    out = out[0] if single else out
    return (out, cols) if return_cols else out


def conv2d_backward(x: np.ndarray, kernels: np.ndarray, dy: np.ndarray, stride: int = 1,
                    need_dx: bool = True, cols: Optional[np.ndarray] = None):
    """Return ``(dx, dkernels, dbias)`` for ``conv2d``; ``dx`` is None when
    ``need_dx`` is False."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x, dy = x[None], dy[None]
    B, C, H, W = x.shape
    F, _, kh, kw = kernels.shape
    Ho, Wo = dy.shape[2], dy.shape[3]
    if cols is None:
        cols, _, _ = _im2col(x, kh, kw, stride)
    dy2 = dy.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
    dk = (dy2.T @ cols).reshape(kernels.shape)
    db = dy2.sum(axis=0)
    if not need_dx:
        return None, dk, db
    dcols = (dy2 @ kernels.reshape(F, -1)).reshape(B, Ho, Wo, C, kh, kw)
    dx = np.zeros_like(x)
    hspan, wspan = (Ho - 1) * stride + 1, (Wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + hspan:stride, j:j + wspan:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return (dx[0] if single else dx), dk, db


@dataclass
class ParamStore:
    """Named parameter arrays with paired gradient accumulators."""

    params: Dict[str, np.ndarray] = field(default_factory=dict)
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    frozen: set = field(default_factory=set)
    _velocity: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def add(self, name: str, value: np.ndarray, frozen: bool = False) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        if frozen:
            self.frozen.add(name)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self.params.items():
            out.add(name, value.copy(), frozen=name in self.frozen)
        return out

    def num_values(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def sgd_step(store: ParamStore, learning_rate: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> ParamStore:
    """In-place SGD update followed by a gradient reset.

    ``weight_decay`` adds an L2 pull ``weight_decay * w`` to every gradient.
    Parameters in ``store.frozen`` are never touched.
    """
    if not learning_rate > 0:
        raise ConfigurationError(f"learning rate must be positive, got {learning_rate}")
    if not 0.0 <= momentum < 1.0:
        raise ConfigurationError(f"momentum must lie in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise ConfigurationError(f"weight decay must be non-negative, got {weight_decay}")
    for name, value in store.params.items():
        if name in store.frozen:
            continue
        g = store.grads[name]
        if weight_decay:
            g = g + weight_decay * value
        if momentum:
            v = store._velocity.get(name)
            if v is None:
                v = store._velocity[name] = np.zeros_like(value)
            v *= momentum
            v += g
            g = v
        value -= learning_rate * g
    store.zero_grad()
    return store


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    worst_index: tuple
    passed: bool


def finite_diff_check(loss_fn: Callable[[ParamStore], float], store: ParamStore,
                      h: float = 1e-5, tol: float = 1e-4,
                      names: Optional[List[str]] = None,
                      max_entries: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None,
                      abs_floor: float = 1e-6) -> Dict[str, GradCheckResult]:
    """Compare ``store.grads`` against central differences of ``loss_fn``.

    The analytic gradients must already be in ``store.grads``. ``loss_fn``
    is forward-only. With ``max_entries`` set, a random subset of each
    parameter's entries is checked.

    The error is ``|a - n| / max(abs_floor, |a| + |n|)``. Central differences
    carry roundoff of order eps * |loss| / h (about 1e-10 at h = 1e-5), so
    entries far below ``abs_floor`` are effectively judged on absolute error.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ConfigurationError(f"finite-difference step {h} outside [1e-7, 1e-3]")
    rng = rng if rng is not None else np.random.default_rng(0)
    report = {}
    for name in names if names is not None else list(store.params):
        value = store.params[name]
        analytic = store.grads[name].copy()
        flat_idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat_idx = np.sort(rng.choice(value.size, size=max_entries, replace=False))
        worst, worst_at = 0.0, ()
        for k in flat_idx:
            idx = np.unravel_index(k, value.shape)
            orig = value[idx]
            value[idx] = orig + h
            f_plus = loss_fn(store)
            value[idx] = orig - h
            f_minus = loss_fn(store)
            value[idx] = orig
            num = (f_plus - f_minus) / (2 * h)
            a = analytic[idx]
            rel = abs(a - num) / max(abs_floor, abs(a) + abs(num))
            if rel > worst:
                worst, worst_at = rel, tuple(int(i) for i in idx)
        report[name] = GradCheckResult(name, worst, len(flat_idx), worst_at, worst < tol)
    return report


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_out, fan_in))
