"""Joint training of the baseline, snippet clustering and cluster classification.

One iteration:

1. forward both streams on a batch of ``B`` videos x ``T`` snippets;
2. build pseudo-labels from the stream-averaged predictions (top-k sets and
   foreground labels, snippet cluster labels with the rank prior, cluster
   foreground/background labels);
3. evaluate the weighted objective per stream with labels held fixed and
   back-propagate;
4. apply one Adam step.

The last cluster foreground/background labels are kept for inference.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from . import pseudo_labels as pl
from .errors import DegenerateError, InputError, NumericalError
from .network import STREAMS, ModelParams, backward, cosine_backward, forward, init_model
from .ot_core import entropy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    T: int = 750
    B: int = 16
    K: int = 16
    hidden: int = 512
    k_topk: int | None = None  # None -> max(1, T // 8)
    gamma: float = 0.7
    omega: float = 0.25
    eps: float = 20.0
    rho: float = 10.0
    rho_head: float = 10.0
    sigma: float = 10.0
    lambda_s: float = 1.0
    lambda_c: float = 0.3
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 1
    seed: int = 0
    sk_iters: int = 3
    scc_fusion: str = "logit"  # or "prob"
    # "cosine": solver sees cos(emb, head) (logits / rho_head); "tempered": rho_head * cos
    scc_input: str = "cosine"
    stream_reduction: str = "sum"  # or "mean"
    threads: int = 1

    @property
    def topk(self) -> int:
        return self.k_topk if self.k_topk else max(1, self.T // 8)

    def validate(self) -> None:
        positive = ("T", "B", "K", "hidden", "eps", "rho_head", "sigma", "lr",
                    "eps_adam", "epochs", "sk_iters", "threads")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not 0 < self.gamma < 1:
            raise InputError("gamma must lie in (0, 1)")
        if not 0 <= self.omega <= 1:
            raise InputError("omega must lie in [0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InputError("Adam betas must lie in [0, 1)")
        if self.lambda_s < 0 or self.lambda_c < 0 or self.rho < 0:
            raise InputError("loss weights and rho must be nonnegative")
        if self.k_topk is not None and not 1 <= self.k_topk <= self.T:
            raise InputError("k_topk must lie in [1, T]")
        if self.scc_fusion not in ("logit", "prob"):
            raise InputError("scc_fusion must be 'logit' or 'prob'")
        if self.scc_input not in ("cosine", "tempered"):
            raise InputError("scc_input must be 'cosine' or 'tempered'")
        if self.stream_reduction not in ("sum", "mean"):
            raise InputError("stream_reduction must be 'sum' or 'mean'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown training config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def sample_snippets(features: np.ndarray, T: int) -> np.ndarray:
    """Uniformly strided (``L >= T``) or cyclic (``L < T``) selection of T rows."""
    L = features.shape[0]
    i = np.arange(T)
    if L >= T:
        idx = np.minimum(np.floor(i * L / T + 0.5).astype(np.int64), L - 1)
    else:
        idx = i % L
    return features[idx]


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps_adam: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam; updates ``params`` and ``state`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps_adam)
    return params, state


@dataclass
class BatchLabels:
    gamma_sets: list[list[np.ndarray]]  # per video, per class
    qa: pl.ForegroundLabels
    qs: np.ndarray  # N x K
    qc: np.ndarray  # K x 2
    beta_c: np.ndarray
    Y: np.ndarray  # B x G
    lengths: list[int]
    ccc_ok: bool = True


def _slices(lengths):
    start = 0
    for n in lengths:
        yield slice(start, start + n)
        start += n


def make_labels(acts: dict, Y: np.ndarray, lengths: list[int], qc_prev: np.ndarray,
                cfg: TrainConfig) -> BatchLabels:
    """Co-labeled pseudo-labels for one batch (both streams share them)."""
    rgb, flow = acts["rgb"], acts["flow"]
    pv_hat = pl.fuse_streams(pl.calibrate_tcas(rgb.pv, rgb.pa, cfg.omega),
                             pl.calibrate_tcas(flow.pv, flow.pa, cfg.omega))
    k = cfg.topk
    gamma_sets = [pl.topk_select(pv_hat[sl], min(k, sl.stop - sl.start))
                  for sl in _slices(lengths)]
    qa = pl.make_qa(gamma_sets, Y, lengths)

    pa_fused = pl.fuse_streams(rgb.pa, flow.pa)
    N = pa_fused.size
    rank = pl.rank_snippets(pa_fused)
    prior = pl.gaussian_prior(rank, qc_prev[:, 0], cfg.sigma, N)
    scc_in = pl.scc_logits(rgb.ps_logits, flow.ps_logits, rgb.ps, flow.ps, cfg.scc_fusion)
    if cfg.scc_input == "cosine":
        scc_in = scc_in / cfg.rho_head
    qs = pl.label_scc(scc_in, prior, cfg.eps, cfg.sk_iters, space="logit")

    beta_c = pl.beta_ccc(qa)
    try:
        pcs = [pl.cluster_fb_probs(pl.prototypes(a.emb, qs, qa), cfg.rho) for a in (rgb, flow)]
    except DegenerateError as exc:
        log.warning("skipping cluster classification this iteration: %s", exc)
        return BatchLabels(gamma_sets, qa, qs, qc_prev.copy(), beta_c, Y, lengths, ccc_ok=False)
    qc = pl.label_ccc(pl.fuse_streams(*pcs), beta_c, cfg.eps, cfg.sk_iters)
    return BatchLabels(gamma_sets, qa, qs, qc, beta_c, Y, lengths)


def stream_objective(act, labels: BatchLabels, cfg: TrainConfig, scale: float = 1.0):
    """Loss components and upstream gradients for one stream.

    Gradients are of ``scale * ((l_v + l_a) + lambda_s l_s + lambda_c l_c)``.
    """
    N, G = act.pv.shape
    B = labels.Y.shape[0]

    # video classification through top-k pooling of the uncalibrated T-CAS
    p_bar = np.empty((B, G))
    for b, sl in enumerate(_slices(labels.lengths)):
        p_bar[b] = pl.video_score(act.pv[sl], labels.gamma_sets[b])
    l_v, _ = losses.loss_video(p_bar, labels.Y)
    d_means = losses.video_logit_grad(p_bar, labels.Y)
    d_pv = np.zeros_like(act.pv)
    for b, sl in enumerate(_slices(labels.lengths)):
        block = d_pv[sl]
        for c, idx in enumerate(labels.gamma_sets[b]):
            block[idx, c] += d_means[b, c] / len(idx)

    l_a, d_pa = losses.loss_attention_gce(act.pa, labels.qa, cfg.gamma)

    l_s, _ = losses.loss_scc(act.ps, labels.qs)
    d_ps_logits = cfg.lambda_s * losses.softmax_ce_logit_grad(act.ps, labels.qs)

    l_c = 0.0
    d_emb = np.zeros_like(act.emb)
    if labels.ccc_ok:
        protos = pl.prototypes(act.emb, labels.qs, labels.qa)
        pc = pl.cluster_fb_probs(protos, cfg.rho)
        l_c, _ = losses.loss_ccc(pc, labels.qc)
        d_logits = cfg.lambda_c * losses.softmax_ce_logit_grad(pc, labels.qc)
        g_cluster, g_fb = cosine_backward(protos.cluster, protos.fb, cfg.rho * d_logits)
        d_emb = protos.cluster_weights @ g_cluster + protos.fb_weights @ g_fb

    comps = {"l_v": l_v, "l_a": l_a, "l_s": l_s, "l_c": l_c}
    upstream = {"d_pv": scale * d_pv, "d_pa": scale * d_pa,
                "d_emb": scale * d_emb, "d_ps_logits": scale * d_ps_logits}
    return comps, upstream


def _stream_scale(cfg: TrainConfig) -> float:
    return 1.0 if cfg.stream_reduction == "sum" else 1.0 / len(STREAMS)


def loss_and_grads(params: ModelParams, X: dict, labels: BatchLabels, cfg: TrainConfig,
                   acts: dict | None = None):
    """Objective value and parameter gradients with pseudo-labels fixed.

    Returns ``(LossBreakdown, {stream: {tensor: grad}})``.
    """
    if acts is None:
        acts = {s: forward(X[s], sp) for s, sp in params.streams().items()}
    scale = _stream_scale(cfg)

    def one(s):
        comps, up = stream_objective(acts[s], labels, cfg, scale)
        return comps, backward(acts[s], **up)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=min(cfg.threads, len(STREAMS))) as pool:
            results = dict(zip(STREAMS, pool.map(one, STREAMS)))
    else:
        results = {s: one(s) for s in STREAMS}
    breakdown = losses.total_loss([results[s][0] for s in STREAMS], cfg.lambda_s, cfg.lambda_c)
    if cfg.stream_reduction == "mean":
        breakdown.total *= scale
    return breakdown, {s: results[s][1] for s in STREAMS}


@dataclass
class TrainResult:
    params: ModelParams
    qc: np.ndarray
    metrics: list[dict]


def _batch_arrays(videos, T):
    X = {s: np.concatenate([sample_snippets(getattr(v, s), T) for v in videos]) for s in STREAMS}
    return X


def initial_qc(K: int) -> np.ndarray:
    """Neutral cluster labels used before the first CCC step."""
    return np.full((K, 2), 0.5)


def train(cfg: TrainConfig, dataset, metrics_file=None, on_iteration=None,
          label_hook=None) -> TrainResult:
    """Run ``cfg.epochs`` passes over ``dataset`` (a :class:`data_io.Dataset`).

    ``on_iteration(row)`` receives each metrics row; ``label_hook(it, ids,
    labels)`` receives the pseudo-labels of each batch (for debugging).
    """
    cfg.validate()
    videos = dataset.videos
    if not videos:
        raise InputError("dataset is empty")
    G = dataset.num_classes
    D = videos[0].rgb.shape[1]
    params = init_model(D, cfg.hidden, G, cfg.K, seed=cfg.seed, temperature=cfg.rho_head)
    flat = {f"{s}.{t}": arr for s, sp in params.streams().items() for t, arr in sp.tensors().items()}
    state = AdamState()
    qc = initial_qc(cfg.K)
    order_rng = np.random.default_rng([cfg.seed, 7])
    metrics = []
    it = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(videos))
        for start in range(0, len(order), cfg.B):
            batch = [videos[i] for i in order[start:start + cfg.B]]
            X = _batch_arrays(batch, cfg.T)
            Y = np.stack([v.label_vector(G) for v in batch])
            lengths = [cfg.T] * len(batch)
            acts = {s: forward(X[s], sp) for s, sp in params.streams().items()}
            labels = make_labels(acts, Y, lengths, qc, cfg)
            if label_hook is not None:
                label_hook(it, [v.id for v in batch], labels)
            breakdown, grads = loss_and_grads(params, X, labels, cfg, acts=acts)
            if not np.isfinite(breakdown.total):
                raise NumericalError(f"non-finite loss at iteration {it}")
            qc = labels.qc
            flat_grads = {f"{s}.{t}": g for s in STREAMS for t, g in grads[s].items()}
            adam_step(flat, flat_grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
            ps_fused = pl.fuse_streams(acts["rgb"].ps, acts["flow"].ps)
            row = {
                "iteration": it,
                "epoch": epoch,
                **{k: breakdown.as_dict()[k] for k in ("l_v", "l_a", "l_s", "l_c", "total")},
                "H_qc": entropy(qc),
                "H_qs": entropy(labels.qs),
                "H_mean_ps": entropy(ps_fused.mean(axis=0)),
                "ccc_ok": labels.ccc_ok,
            }
            metrics.append(row)
            if metrics_file is not None:
                metrics_file.write(json.dumps(row) + "\n")
            if on_iteration is not None:
                on_iteration(row)
            it += 1
    return TrainResult(params=params, qc=qc, metrics=metrics)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
