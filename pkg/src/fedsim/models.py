"""Differentiable models: multinomial logistic regression and a one-hidden-layer MLP.

Parameters live in flat float64 vectors. The per-sample loss is softmax
cross-entropy plus a ridge term (l2/2)*||w||^2; the ridge term is counted once
per gradient average, so the full-set gradient is mean(CE grads) + l2*w.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

LOGISTIC = "logistic"
MLP = "mlp"


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    d_feat: int
    n_classes: int
    hidden: int = 0
    l2: float = 0.0

    def __post_init__(self):
        if self.kind not in (LOGISTIC, MLP):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == MLP and self.hidden < 1:
            raise ValueError("mlp requires hidden >= 1")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")

    def n_params(self) -> int:
        if self.kind == LOGISTIC:
            return self.n_classes * (self.d_feat + 1)
        return self.hidden * (self.d_feat + 1) + self.n_classes * (self.hidden + 1)


@dataclass
class ParamVector:
    values: np.ndarray
    spec: ModelSpec

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.spec)


@dataclass(frozen=True)
class WeightedView:
    """Sample indices into a client dataset with positive per-sample weights."""

    indices: np.ndarray  # (k,) int64
    weights: np.ndarray  # (k,) float64

    @classmethod
    def full(cls, m: int) -> "WeightedView":
        return cls(np.arange(m, dtype=np.int64), np.ones(m, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.indices)


def init_params(spec: ModelSpec, seed: int = 0) -> ParamVector:
    """Zeros for logistic; per-layer scaled uniform init for the MLP."""
    if spec.kind == LOGISTIC:
        return ParamVector(np.zeros(spec.n_params()), spec)
    from .rng import stream

    rng = stream(seed, "init")
    h, d, c = spec.hidden, spec.d_feat, spec.n_classes
    lim1 = math.sqrt(6.0 / (d + h))
    lim2 = math.sqrt(6.0 / (h + c))
    w = np.zeros(spec.n_params())
    w[: h * d] = rng.uniform(-lim1, lim1, size=h * d)
    off = h * d + h
    w[off : off + c * h] = rng.uniform(-lim2, lim2, size=c * h)
    return ParamVector(w, spec)


def _unpack_logistic(spec: ModelSpec, w: np.ndarray):
    c, d = spec.n_classes, spec.d_feat
    return w[: c * d].reshape(c, d), w[c * d :]


def _unpack_mlp(spec: ModelSpec, w: np.ndarray):
    h, d, c = spec.hidden, spec.d_feat, spec.n_classes
    o1 = h * d
    o2 = o1 + h
    o3 = o2 + c * h
    return (
        w[:o1].reshape(h, d),
        w[o1:o2],
        w[o2:o3].reshape(c, h),
        w[o3:],
    )


def _forward(params: ParamVector, x: np.ndarray):
    """Return (logits, hidden activations or None) for a batch."""
    spec = params.spec
    if spec.kind == LOGISTIC:
        wmat, b = _unpack_logistic(spec, params.values)
        return x @ wmat.T + b, None
    w1, b1, w2, b2 = _unpack_mlp(spec, params.values)
    hidden = np.tanh(x @ w1.T + b1)
    return hidden @ w2.T + b2, hidden


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def batch_losses(params: ParamVector, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample losses: cross-entropy plus the shared ridge term."""
    z, _ = _forward(params, x)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    ce = lse - shifted[np.arange(len(y)), y]
    reg = 0.5 * params.spec.l2 * float(params.values @ params.values)
    return ce + reg


def per_sample_loss(params: ParamVector, x: np.ndarray, y: int) -> float:
    return float(batch_losses(params, x[None, :], np.asarray([y]))[0])


def _dz(params: ParamVector, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    z, hidden = _forward(params, x)
    p = softmax(z)
    p[np.arange(len(y)), y] -= 1.0
    return p, hidden


def batch_grads(params: ParamVector, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample gradients, one row per sample (each row includes l2*w)."""
    spec = params.spec
    dz, hidden = _dz(params, x, y)
    n = len(y)
    if spec.kind == LOGISTIC:
        gw = np.einsum("nc,nd->ncd", dz, x).reshape(n, -1)
        grads = np.concatenate([gw, dz], axis=1)
    else:
        w1, b1, w2, b2 = _unpack_mlp(spec, params.values)
        dh = dz @ w2
        da = dh * (1.0 - hidden**2)
        g1 = np.einsum("nh,nd->nhd", da, x).reshape(n, -1)
        g2 = np.einsum("nc,nh->nch", dz, hidden).reshape(n, -1)
        grads = np.concatenate([g1, da, g2, dz], axis=1)
    if spec.l2:
        grads = grads + spec.l2 * params.values
    return grads


def per_sample_grad(params: ParamVector, x: np.ndarray, y: int) -> np.ndarray:
    return batch_grads(params, x[None, :], np.asarray([y]))[0]


def last_layer_grads(params: ParamVector, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """softmax(logits) - onehot(y) per sample; rows sum to zero."""
    dz, _ = _dz(params, x, y)
    return dz


def last_layer_input_grad(params: ParamVector, x: np.ndarray, y: int) -> np.ndarray:
    return last_layer_grads(params, x[None, :], np.asarray([y]))[0]


def grad_sum(
    params: ParamVector, x: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None
) -> np.ndarray:
    """Weighted sum of per-sample gradients without materializing them."""
    spec = params.spec
    dz, hidden = _dz(params, x, y)
    if weights is not None:
        dz = dz * weights[:, None]
        total = float(weights.sum())
    else:
        total = float(len(y))
    if spec.kind == LOGISTIC:
        g = np.concatenate([(dz.T @ x).ravel(), dz.sum(axis=0)])
    else:
        w1, b1, w2, b2 = _unpack_mlp(spec, params.values)
        dh = dz @ w2
        da = dh * (1.0 - hidden**2)
        g = np.concatenate(
            [(da.T @ x).ravel(), da.sum(axis=0), (dz.T @ hidden).ravel(), dz.sum(axis=0)]
        )
    if spec.l2:
        g = g + total * spec.l2 * params.values
    return g


def mean_grad(
    params: ParamVector, x: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None
) -> np.ndarray:
    """Weighted mean gradient; equals mean CE gradient + l2*w."""
    total = float(weights.sum()) if weights is not None else float(len(y))
    return grad_sum(params, x, y, weights) / total


@njit(cache=True)
def _logistic_epoch_kernel(w, x, y, idx, wts, order, batch_size, lr, l2, mu_prox, anchor, c, d):
    n = order.shape[0]
    gw = np.zeros((c, d))
    gb = np.zeros(c)
    logits = np.zeros(c)
    start = 0
    while start < n:
        stop = min(n, start + batch_size)
        for cc in range(c):
            gb[cc] = 0.0
            for dd in range(d):
                gw[cc, dd] = 0.0
        total = 0.0
        for t in range(start, stop):
            pos = order[t]
            j = idx[pos]
            delta = wts[pos]
            total += delta
            mx = -1e300
            for cc in range(c):
                s = w[c * d + cc]
                base = cc * d
                for dd in range(d):
                    s += w[base + dd] * x[j, dd]
                logits[cc] = s
                if s > mx:
                    mx = s
            tot = 0.0
            for cc in range(c):
                logits[cc] = math.exp(logits[cc] - mx)
                tot += logits[cc]
            for cc in range(c):
                p = logits[cc] / tot
                if cc == y[j]:
                    p -= 1.0
                p *= delta
                gb[cc] += p
                base = cc * d
                for dd in range(d):
                    gw[cc, dd] += p * x[j, dd]
        inv = 1.0 / total
        for cc in range(c):
            base = cc * d
            for dd in range(d):
                k = base + dd
                w[k] -= lr * (gw[cc, dd] * inv + l2 * w[k] + mu_prox * (w[k] - anchor[k]))
            k = c * d + cc
            w[k] -= lr * (gb[cc] * inv + l2 * w[k] + mu_prox * (w[k] - anchor[k]))
        start = stop


@njit(cache=True)
def _mlp_epoch_kernel(w, x, y, idx, wts, order, batch_size, lr, l2, mu_prox, anchor, h, c, d):
    n = order.shape[0]
    o1 = h * d
    o2 = o1 + h
    o3 = o2 + c * h
    g1 = np.zeros((h, d))
    gb1 = np.zeros(h)
    g2 = np.zeros((c, h))
    gb2 = np.zeros(c)
    act = np.zeros(h)
    logits = np.zeros(c)
    dz = np.zeros(c)
    start = 0
    while start < n:
        stop = min(n, start + batch_size)
        g1[:, :] = 0.0
        gb1[:] = 0.0
        g2[:, :] = 0.0
        gb2[:] = 0.0
        total = 0.0
        for t in range(start, stop):
            pos = order[t]
            j = idx[pos]
            delta = wts[pos]
            total += delta
            for hh in range(h):
                s = w[o1 + hh]
                base = hh * d
                for dd in range(d):
                    s += w[base + dd] * x[j, dd]
                act[hh] = math.tanh(s)
            mx = -1e300
            for cc in range(c):
                s = w[o3 + cc]
                base = o2 + cc * h
                for hh in range(h):
                    s += w[base + hh] * act[hh]
                logits[cc] = s
                if s > mx:
                    mx = s
            tot = 0.0
            for cc in range(c):
                logits[cc] = math.exp(logits[cc] - mx)
                tot += logits[cc]
            for cc in range(c):
                p = logits[cc] / tot
                if cc == y[j]:
                    p -= 1.0
                dz[cc] = p * delta
                gb2[cc] += dz[cc]
                base = o2 + cc * h
                for hh in range(h):
                    g2[cc, hh] += dz[cc] * act[hh]
            for hh in range(h):
                s = 0.0
                for cc in range(c):
                    s += w[o2 + cc * h + hh] * dz[cc]
                da = s * (1.0 - act[hh] * act[hh])
                gb1[hh] += da
                base = hh * d
                for dd in range(d):
                    g1[hh, dd] += da * x[j, dd]
        inv = 1.0 / total
        for hh in range(h):
            base = hh * d
            for dd in range(d):
                k = base + dd
                w[k] -= lr * (g1[hh, dd] * inv + l2 * w[k] + mu_prox * (w[k] - anchor[k]))
            k = o1 + hh
            w[k] -= lr * (gb1[hh] * inv + l2 * w[k] + mu_prox * (w[k] - anchor[k]))
        for cc in range(c):
            base = o2 + cc * h
            for hh in range(h):
                k = base + hh
                w[k] -= lr * (g2[cc, hh] * inv + l2 * w[k] + mu_prox * (w[k] - anchor[k]))
            k = o3 + cc
            w[k] -= lr * (gb2[cc] * inv + l2 * w[k] + mu_prox * (w[k] - anchor[k]))
        start = stop


def sgd_epoch(
    params: ParamVector,
    x: np.ndarray,
    y: np.ndarray,
    view: WeightedView | None,
    lr: float,
    batch_size: int,
    rng: np.random.Generator | None = None,
    prox: tuple[float, ParamVector] | None = None,
) -> ParamVector:
    """One epoch over a seeded permutation of the view in mini-batches.

    Each batch steps by the weight-averaged per-sample gradient (ridge counted
    once); ``prox=(mu, anchor)`` adds mu*(w - anchor) to every batch gradient.
    ``batch_size <= 0`` or >= the view size takes a single full-batch step.
    """
    if view is None:
        view = WeightedView.full(len(y))
    size = len(view)
    if size == 0:
        raise ValueError("view must be nonempty")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    mu_prox, anchor = (prox[0], prox[1].values) if prox else (0.0, None)

    if batch_size <= 0 or batch_size >= size:
        g = mean_grad(params, x[view.indices], y[view.indices], view.weights)
        if mu_prox:
            g = g + mu_prox * (params.values - anchor)
        return ParamVector(params.values - lr * g, params.spec)

    if rng is None:
        raise ValueError("mini-batch epochs require an rng stream")
    order = rng.permutation(size).astype(np.int64)
    w = params.values.copy()
    anchor_arr = anchor if anchor is not None else np.zeros_like(w)
    spec = params.spec
    if spec.kind == LOGISTIC:
        _logistic_epoch_kernel(
            w, x, y, view.indices, view.weights, order, batch_size,
            lr, spec.l2, mu_prox, anchor_arr, spec.n_classes, spec.d_feat,
        )
    else:
        _mlp_epoch_kernel(
            w, x, y, view.indices, view.weights, order, batch_size,
            lr, spec.l2, mu_prox, anchor_arr, spec.hidden, spec.n_classes, spec.d_feat,
        )
    return ParamVector(w, spec)


def evaluate(params: ParamVector, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Mean loss and top-1 accuracy over a sample set."""
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty sample set")
    z, _ = _forward(params, x)
    acc = float(np.mean(np.argmax(z, axis=1) == y))
    return float(np.mean(batch_losses(params, x, y))), acc


def save_params(params: ParamVector, stem) -> None:
    """Checkpoint: little-endian float64 array plus a JSON spec sidecar."""
    stem = Path(stem)
    params.values.astype("<f8").tofile(stem.with_suffix(".f64"))
    spec = params.spec
    sidecar = {
        "kind": spec.kind,
        "d_feat": spec.d_feat,
        "n_classes": spec.n_classes,
        "hidden": spec.hidden,
        "l2": spec.l2,
    }
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_params(stem) -> ParamVector:
    stem = Path(stem)
    sidecar = json.loads(stem.with_suffix(".json").read_text())
    spec = ModelSpec(**sidecar)
    values = np.fromfile(stem.with_suffix(".f64"), dtype="<f8")
    if len(values) != spec.n_params():
        raise ValueError(
            f"checkpoint length {len(values)} does not match spec ({spec.n_params()})"
        )
    return ParamVector(values.astype(np.float64), spec)
