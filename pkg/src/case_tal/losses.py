"""Training losses.

Every loss returns ``(value, grad)`` where ``grad`` is the derivative with
respect to the prediction argument; pseudo-labels are constants.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import InputError, ShapeError

PROB_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    l_v: float
    l_a: float
    l_s: float
    l_c: float
    total: float
    lambda_s: float
    lambda_c: float

    def as_dict(self) -> dict:
        return asdict(self)


def _check_same(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def loss_video(p_bar, y) -> tuple[float, np.ndarray]:
    """Cross-entropy against the label vector normalised to a distribution.

    ``p_bar`` and ``y`` may be single vectors or B x G batches; the loss is
    averaged over the batch.
    """
    P = np.atleast_2d(np.asarray(p_bar, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    _check_same(P, Y)
    counts = Y.sum(axis=1, keepdims=True)
    if np.any(counts <= 0):
        raise InputError("every video needs at least one positive label")
    Yn = Y / counts
    Pc = np.maximum(P, PROB_FLOOR)
    B = P.shape[0]
    value = float(-(Yn * np.log(Pc)).sum() / B)
    grad = np.where(P > PROB_FLOOR, -Yn / Pc, 0.0) / B
    return value, grad.reshape(np.shape(p_bar))


def video_logit_grad(p_bar, y) -> np.ndarray:
    """Gradient of :func:`loss_video` w.r.t. the pre-softmax pooled scores."""
    P = np.atleast_2d(np.asarray(p_bar, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    Yn = Y / Y.sum(axis=1, keepdims=True)
    return (P - Yn) / P.shape[0]


def loss_attention_gce(pa, qa, gamma: float = 0.7) -> tuple[float, np.ndarray]:
    """Generalised binary cross-entropy, each side normalised by its count.

    A side with no snippets contributes nothing.
    """
    if not 0.0 < gamma < 1.0:
        raise InputError(f"gamma must lie in (0, 1), got {gamma!r}")
    p = np.asarray(pa, dtype=np.float64)
    q = np.asarray(getattr(qa, "qa", qa), dtype=np.float64)
    _check_same(p, q)
    n_pos = q.sum()
    n_neg = q.size - n_pos
    p_safe = np.clip(p, 1e-300, 1.0)
    r_safe = np.clip(1.0 - p, 1e-300, 1.0)
    value = 0.0
    grad = np.zeros_like(p)
    if n_pos > 0:
        value += float((q * (1.0 - p_safe**gamma) / gamma).sum() / n_pos)
        grad -= q * p_safe ** (gamma - 1.0) / n_pos
    if n_neg > 0:
        value += float(((1.0 - q) * (1.0 - r_safe**gamma) / gamma).sum() / n_neg)
        grad += (1.0 - q) * r_safe ** (gamma - 1.0) / n_neg
    return value, grad


def _soft_ce(p, q):
    P = np.asarray(p, dtype=np.float64)
    Q = np.asarray(q, dtype=np.float64)
    _check_same(P, Q)
    Pc = np.maximum(P, PROB_FLOOR)
    n = P.shape[0]
    value = float(-(Q * np.log(Pc)).sum() / n)
    grad = np.where(P > PROB_FLOOR, -Q / Pc, 0.0) / n
    return value, grad


def loss_scc(ps, qs) -> tuple[float, np.ndarray]:
    """Mean soft cross-entropy between cluster labels and cluster probabilities."""
    return _soft_ce(ps, qs)


def loss_ccc(pc, qc) -> tuple[float, np.ndarray]:
    """Mean soft cross-entropy over clusters for the foreground/background head."""
    return _soft_ce(pc, qc)


def softmax_ce_logit_grad(p, q) -> np.ndarray:
    """Gradient of mean soft CE w.r.t. logits when ``p = softmax(logits)``.

    Exact for label rows of any total mass: ``(p * sum(q) - q) / n``.
    """
    P = np.asarray(p, dtype=np.float64)
    Q = np.asarray(q, dtype=np.float64)
    return (P * Q.sum(axis=1, keepdims=True) - Q) / P.shape[0]


def total_loss(components, lambda_s: float = 1.0, lambda_c: float = 0.3) -> LossBreakdown:
    """Sum over streams of ``(l_v + l_a) + lambda_s * l_s + lambda_c * l_c``.

    ``components`` is one mapping (keys l_v, l_a, l_s, l_c) or a sequence of
    them, one per stream.
    """
    if isinstance(components, dict):
        components = [components]
    sums = {key: 0.0 for key in ("l_v", "l_a", "l_s", "l_c")}
    total = 0.0
    for comp in components:
        vals = {key: float(comp.get(key, 0.0)) for key in sums}
        if not all(np.isfinite(v) for v in vals.values()):
            raise InputError(f"non-finite loss component: {vals}")
        total += (vals["l_v"] + vals["l_a"]) + lambda_s * vals["l_s"] + lambda_c * vals["l_c"]
        for key in sums:
            sums[key] += vals[key]
    return LossBreakdown(total=total, lambda_s=lambda_s, lambda_c=lambda_c, **sums)
