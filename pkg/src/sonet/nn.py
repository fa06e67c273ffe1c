"""Optimizer, learning-rate schedule, Chamfer loss and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, _record, _t
from .errors import EmptySourceError, ShapeMismatchError


@dataclass
class AdamState:
    base_lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float | None = None) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params[name].data``.

    Parameters missing from ``grads`` (or with a None gradient) are treated as
    having zero gradient.
    """
    lr = state.base_lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(data)
        if g.shape != data.shape:
            raise ShapeMismatchError(f"gradient for {name} has shape {g.shape}, parameter {data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(data.dtype)
    return state


@dataclass
class LrSchedule:
    """Step decay: ``base_lr * factor ** (epoch // decay_every)``."""

    base_lr: float = 0.001
    decay_every: int = 20
    factor: float = 0.5

    def __post_init__(self):
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")

    def __call__(self, epoch: int) -> float:
        return self.base_lr * self.factor ** (epoch // self.decay_every)

    @classmethod
    def for_cloud_size(cls, n_points: int, base_lr: float = 0.001) -> "LrSchedule":
        return cls(base_lr, 20 if n_points >= 5000 else 40)


def _dist_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))


def chamfer(ps, pt) -> Tensor:
    """Symmetric mean nearest-neighbour distance between two point sets.

    Either argument may be a Tensor (differentiated) or a plain array. Both
    directional sums are correctly rounded, so the value does not depend on
    point order. Nearest-neighbour ties resolve to the lowest index.
    """
    ps, pt = _t(ps), _t(pt)
    if ps.data.ndim != 2 or pt.data.ndim != 2 or ps.shape[1] != pt.shape[1]:
        raise ShapeMismatchError(f"chamfer: {ps.shape} vs {pt.shape}")
    A, B = len(ps.data), len(pt.data)
    if A == 0 or B == 0:
        raise EmptySourceError("chamfer distance needs non-empty clouds")
    d = _dist_matrix(ps.data, pt.data)
    nn_t = d.argmin(axis=1)  # for each source point, nearest target
    nn_s = d.argmin(axis=0)
    to_t = d[np.arange(A), nn_t]
    to_s = d[nn_s, np.arange(B)]
    value = math.fsum(to_t.tolist()) / A + math.fsum(to_s.tolist()) / B

    def backward(g):
        g = float(g)
        gs = np.zeros_like(ps.data)
        gt = np.zeros_like(pt.data)
        diff = ps.data - pt.data[nn_t]
        unit = np.divide(diff, to_t[:, None], out=np.zeros_like(diff), where=to_t[:, None] > 0)
        gs += unit * (g / A)
        np.add.at(gt, nn_t, -unit * (g / A))
        diff = pt.data - ps.data[nn_s]
        unit = np.divide(diff, to_s[:, None], out=np.zeros_like(diff), where=to_s[:, None] > 0)
        gt += unit * (g / B)
        np.add.at(gs, nn_s, -unit * (g / B))
        return gs, gt

    return _record(np.asarray(value, dtype=ps.dtype), (ps, pt), backward)


def chamfer_value(ps, pt) -> float:
    return float(chamfer(np.asarray(ps, dtype=np.float64), np.asarray(pt, dtype=np.float64)).data)


# --- metrics ------------------------------------------------------------------------


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeMismatchError("prediction and truth must align")
    if pred.size == 0:
        return float("nan")
    return float((pred == truth).mean())


def part_ious(pred, truth, parts) -> np.ndarray:
    """IoU of every part of the category; parts absent from both sides score 1."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    parts = np.asarray(parts)
    if pred.shape != truth.shape:
        raise ShapeMismatchError("prediction and truth must align")
    for name, arr in (("prediction", pred), ("truth", truth)):
        bad = ~np.isin(arr, parts)
        if bad.any():
            raise ValueError(f"{name} label {arr[bad][0]} is not a part of this category")
    ious = np.empty(len(parts))
    for i, part in enumerate(parts):
        p, t = pred == part, truth == part
        union = np.count_nonzero(p | t)
        ious[i] = 1.0 if union == 0 else np.count_nonzero(p & t) / union
    return ious


def instance_iou(pred, truth, parts) -> float:
    return float(part_ious(pred, truth, parts).mean())


def mean_iou(instances) -> tuple[float, dict]:
    """Instance-averaged IoU plus per-category averages.

    ``instances`` is an iterable of ``(pred, truth, parts, category)``.
    """
    per_cat: dict = {}
    all_ious = []
    for pred, truth, parts, cat in instances:
        iou = instance_iou(pred, truth, parts)
        all_ious.append(iou)
        per_cat.setdefault(cat, []).append(iou)
    overall = float(np.mean(all_ious)) if all_ious else float("nan")
    return overall, {c: float(np.mean(v)) for c, v in per_cat.items()}
