"""Pseudo-label generation: MIL top-k selection, foreground labels, cluster
labels (snippet clustering) and cluster foreground/background labels.

All functions are pure.  Labels produced here are treated as constants by
the losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ot_core
from .errors import DegenerateError, InputError, ShapeError
from .network import cosine_matrix, softmax


@dataclass
class ForegroundLabels:
    qa: np.ndarray  # length N, entries in {0, 1}

    @property
    def n_pos(self) -> int:
        return int(self.qa.sum())

    @property
    def n_neg(self) -> int:
        return int(self.qa.size - self.qa.sum())


@dataclass
class Prototypes:
    cluster: np.ndarray  # K x H
    fb: np.ndarray  # 2 x H; row 0 foreground, row 1 background
    cluster_weights: np.ndarray  # N x K normalised weights (for backprop)
    fb_weights: np.ndarray  # N x 2 normalised weights


def calibrate_tcas(pv, pa, omega: float) -> np.ndarray:
    """``omega * pv + (1 - omega) * pa`` with attention broadcast over classes."""
    if not 0.0 <= omega <= 1.0:
        raise InputError(f"omega must lie in [0, 1], got {omega!r}")
    pv = np.asarray(pv, dtype=np.float64)
    pa = np.asarray(pa, dtype=np.float64)
    if pv.shape[0] != pa.shape[0]:
        raise ShapeError(f"{pv.shape[0]} snippets in pv but {pa.shape[0]} in pa")
    return omega * pv + (1.0 - omega) * pa[:, None]


def topk_select(pv_hat, k: int) -> list[np.ndarray]:
    """Indices of the ``k`` highest scores per class; ties go to lower indices."""
    pv_hat = np.asarray(pv_hat, dtype=np.float64)
    T = pv_hat.shape[0]
    if k < 1 or k > T:
        raise InputError(f"k must lie in [1, {T}], got {k}")
    # stable sort on the negated column keeps lower indices first among ties
    order = np.argsort(-pv_hat, axis=0, kind="stable")
    return [np.sort(order[:k, c]) for c in range(pv_hat.shape[1])]


def video_score(pv, gamma_sets) -> np.ndarray:
    """Softmax over classes of the mean of ``pv`` over each class's top-k set."""
    pv = np.asarray(pv, dtype=np.float64)
    means = np.empty(pv.shape[1])
    for c, idx in enumerate(gamma_sets):
        if len(idx) == 0:
            raise InputError(f"empty top-k set for class {c}")
        means[c] = pv[idx, c].mean()
    return softmax(means)


def make_qa(gamma_sets_per_video, labels_per_video, lengths) -> ForegroundLabels:
    """Snippets in the top-k set of any ground-truth class are positive.

    Built per video and concatenated in batch order.
    """
    parts = []
    for gsets, y, T in zip(gamma_sets_per_video, labels_per_video, lengths):
        qa = np.zeros(T)
        for c in np.flatnonzero(np.asarray(y) > 0):
            qa[gsets[c]] = 1.0
        parts.append(qa)
    return ForegroundLabels(np.concatenate(parts))


def rank_snippets(pa) -> np.ndarray:
    """Ascending stable ranks in 1..N (smallest foreground probability -> 1)."""
    pa = np.asarray(pa, dtype=np.float64)
    order = np.argsort(pa, kind="stable")
    rank = np.empty(pa.size, dtype=np.int64)
    rank[order] = np.arange(1, pa.size + 1)
    return rank


def gaussian_prior(rank, qc_fg, sigma: float, n: int | None = None) -> np.ndarray:
    """Gaussian affinity between normalised snippet rank and cluster foreground
    probability: ``N(rank_n / n - qc_fg_k; 0, sigma^2)``."""
    if not sigma > 0:
        raise InputError(f"sigma must be positive, got {sigma!r}")
    rank = np.asarray(rank, dtype=np.float64)
    qc_fg = np.asarray(qc_fg, dtype=np.float64)
    n = rank.size if n is None else n
    diff = rank[:, None] / n - qc_fg[None, :]
    out = np.exp(-diff**2 / (2.0 * sigma**2)) / (sigma * np.sqrt(2.0 * np.pi))
    # a very narrow kernel underflows; keep the prior strictly positive
    return np.maximum(out, np.finfo(np.float64).tiny)


def beta_ccc(qa: ForegroundLabels) -> np.ndarray:
    """Foreground/background column marginal estimated from snippet labels."""
    f = float(np.mean(qa.qa))
    return np.array([f, 1.0 - f])


def _weighted_means(emb, weights, what):
    mass = weights.sum(axis=0)
    if np.any(mass <= 0):
        bad = np.flatnonzero(mass <= 0).tolist()
        raise DegenerateError(f"zero total weight for {what} {bad}")
    w = weights / mass[None, :]
    return w.T @ emb, w


def prototypes(emb, qs, qa: ForegroundLabels) -> Prototypes:
    """Cluster prototypes weighted by ``qs`` and F&B prototypes weighted by
    ``qa`` / ``1 - qa``."""
    emb = np.asarray(emb, dtype=np.float64)
    qs = np.asarray(qs, dtype=np.float64)
    if qs.shape[0] != emb.shape[0] or qa.qa.size != emb.shape[0]:
        raise ShapeError("embeddings and label weights disagree on snippet count")
    cluster, cw = _weighted_means(emb, qs, "cluster")
    fb_w = np.stack([qa.qa, 1.0 - qa.qa], axis=1)
    fb, fw = _weighted_means(emb, fb_w, "foreground/background prototype")
    return Prototypes(cluster=cluster, fb=fb, cluster_weights=cw, fb_weights=fw)


def cluster_fb_logits(protos: Prototypes, rho: float = 10.0) -> np.ndarray:
    return rho * cosine_matrix(protos.cluster, protos.fb)


def cluster_fb_probs(protos: Prototypes, rho: float = 10.0) -> np.ndarray:
    """K x 2 softmax of ``rho * cos(cluster prototype, F&B prototype)``."""
    return softmax(cluster_fb_logits(protos, rho), axis=1)


def fuse_streams(p_rgb, p_flow) -> np.ndarray:
    p_rgb = np.asarray(p_rgb, dtype=np.float64)
    p_flow = np.asarray(p_flow, dtype=np.float64)
    if p_rgb.shape != p_flow.shape:
        raise ShapeError(f"stream shapes differ: {p_rgb.shape} vs {p_flow.shape}")
    return 0.5 * p_rgb + 0.5 * p_flow


def label_scc(scores, prior, eps_sharp: float = ot_core.DEFAULT_EPS,
              n_iter: int = ot_core.DEFAULT_ITERS, space: str = "prob") -> np.ndarray:
    """Equipartitioned soft cluster labels pulled toward ``prior``.

    ``scores`` are fused cluster probabilities (``space="prob"``, logged
    before solving) or solver-ready logits (``space="logit"``).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if space == "prob":
        logits = np.log(np.clip(scores, 1e-300, None))
    elif space == "logit":
        logits = scores
    else:
        raise InputError(f"unknown score space {space!r}")
    return ot_core.sinkhorn(logits, None, prior, eps_sharp, n_iter)


def label_ccc(pc_fused, beta_c, eps_sharp: float = ot_core.DEFAULT_EPS,
              n_iter: int = ot_core.DEFAULT_ITERS) -> np.ndarray:
    """Cluster foreground/background labels with marginal ``beta_c``."""
    pc = np.asarray(pc_fused, dtype=np.float64)
    logits = np.log(np.clip(pc, 1e-300, None))
    return ot_core.sinkhorn(logits, beta_c, None, eps_sharp, n_iter)


def scc_logits(ps_logits_rgb, ps_logits_flow, ps_rgb=None, ps_flow=None,
               space: str = "logit") -> np.ndarray:
    """Solver input for snippet clustering labels.

    ``space="logit"`` averages raw cosine logits across streams;
    ``space="prob"`` averages probabilities and takes the log.
    """
    if space == "logit":
        return fuse_streams(ps_logits_rgb, ps_logits_flow)
    if space == "prob":
        return np.log(np.clip(fuse_streams(ps_rgb, ps_flow), 1e-300, None))
    raise InputError(f"unknown fusion space {space!r}")
