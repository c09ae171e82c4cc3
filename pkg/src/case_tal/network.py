"""Two-stream, two-branch snippet model with a cosine clustering head.

Each stream maps snippet features ``X`` (N x D) through

* video branch: ``h = relu(X W_video + b_video)``, ``pv = softmax(h W_cls + b_cls)``
* attention branch: ``e = relu(X W_attn + b_attn)``, ``pa = sigmoid(e w_att + b_att)``
* clustering head: ``ps_logits = rho * cos(e_n, C_k)``, ``ps = softmax(ps_logits)``

Kernel-size-1 temporal convolutions are plain per-snippet linear maps, so
every layer here is a matrix product over the snippet axis.  Gradients are
derived by hand; see ``backward``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError, StateError

TENSOR_NAMES = (
    "W_video", "b_video", "W_attn", "b_attn",
    "W_cls", "b_cls", "w_att", "b_att", "cluster_head",
)
STREAMS = ("rgb", "flow")


@dataclass
class StreamParams:
    W_video: np.ndarray  # D x H
    b_video: np.ndarray  # H
    W_attn: np.ndarray  # D x H
    b_attn: np.ndarray  # H
    W_cls: np.ndarray  # H x G
    b_cls: np.ndarray  # G
    w_att: np.ndarray  # H x 1
    b_att: np.ndarray  # 1
    cluster_head: np.ndarray  # K x H, no bias
    temperature: float = 10.0

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(D, H, G, K)."""
        D, H = self.W_video.shape
        return D, H, self.W_cls.shape[1], self.cluster_head.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_NAMES}

    def copy(self) -> "StreamParams":
        return StreamParams(**{k: v.copy() for k, v in self.tensors().items()},
                            temperature=self.temperature)


@dataclass
class ModelParams:
    rgb: StreamParams
    flow: StreamParams

    def streams(self) -> dict[str, StreamParams]:
        return {"rgb": self.rgb, "flow": self.flow}

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for sname, sp in self.streams().items():
            for tname, arr in sp.tensors().items():
                out[f"{sname}.{tname}"] = arr
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.rgb.copy(), self.flow.copy())


def init_stream(D: int, H: int, G: int, K: int, rng: np.random.Generator,
                temperature: float = 10.0) -> StreamParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""

    def uni(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return StreamParams(
        W_video=uni(D, (D, H)), b_video=uni(D, (H,)),
        W_attn=uni(D, (D, H)), b_attn=uni(D, (H,)),
        W_cls=uni(H, (H, G)), b_cls=uni(H, (G,)),
        w_att=uni(H, (H, 1)), b_att=uni(H, (1,)),
        cluster_head=uni(H, (K, H)),
        temperature=temperature,
    )


def init_model(D: int, H: int, G: int, K: int, seed: int = 0,
               temperature: float = 10.0) -> ModelParams:
    rng = np.random.default_rng(seed)
    rgb = init_stream(D, H, G, K, rng, temperature)
    flow = init_stream(D, H, G, K, rng, temperature)
    return ModelParams(rgb, flow)


@dataclass
class Activations:
    pv: np.ndarray  # N x G
    pa: np.ndarray  # N
    emb: np.ndarray  # N x H
    ps: np.ndarray  # N x K
    ps_logits: np.ndarray  # N x K
    cache: dict | None = field(default=None, repr=False)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _unit_rows(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalise; zero rows stay zero so their cosines are 0."""
    norms = np.linalg.norm(M, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return M / safe[:, None], norms


def cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    Au, _ = _unit_rows(A)
    Bu, _ = _unit_rows(B)
    return Au @ Bu.T


def cosine_backward(A: np.ndarray, B: np.ndarray, d_cos: np.ndarray):
    """Gradients of ``sum(d_cos * cos(A_i, B_j))`` w.r.t. the rows of A and B."""
    Au, na = _unit_rows(A)
    Bu, nb = _unit_rows(B)
    cos = Au @ Bu.T
    gA_unit = d_cos @ Bu
    gB_unit = d_cos.T @ Au
    inv_a = np.where(na > 0, 1.0 / np.where(na > 0, na, 1.0), 0.0)
    inv_b = np.where(nb > 0, 1.0 / np.where(nb > 0, nb, 1.0), 0.0)
    gA = (gA_unit - (d_cos * cos).sum(axis=1)[:, None] * Au) * inv_a[:, None]
    gB = (gB_unit - (d_cos * cos).sum(axis=0)[:, None] * Bu) * inv_b[:, None]
    return gA, gB


def forward(features: np.ndarray, params: StreamParams, keep_cache: bool = True) -> Activations:
    X = np.asarray(features, dtype=np.float64)
    D, H, G, K = params.dims
    if X.ndim != 2 or X.shape[0] < 1:
        raise ShapeError(f"features must be a non-empty N x D matrix, got {X.shape}")
    if X.shape[1] != D:
        raise ShapeError(f"feature dim {X.shape[1]} does not match encoder input {D}")
    if not np.all(np.isfinite(X)):
        raise NumericalError("features contain non-finite values")

    a1 = X @ params.W_video + params.b_video
    h1 = np.maximum(a1, 0.0)
    zc = h1 @ params.W_cls + params.b_cls
    pv = softmax(zc, axis=1)

    a2 = X @ params.W_attn + params.b_attn
    emb = np.maximum(a2, 0.0)
    z = (emb @ params.w_att)[:, 0] + params.b_att[0]
    pa = sigmoid(z)

    ps_logits = params.temperature * cosine_matrix(emb, params.cluster_head)
    ps = softmax(ps_logits, axis=1)

    if not (np.all(np.isfinite(pv)) and np.all(np.isfinite(ps)) and np.all(np.isfinite(pa))):
        raise NumericalError("non-finite activations in forward pass")
    cache = None
    if keep_cache:
        cache = {"X": X, "a1": a1, "h1": h1, "a2": a2, "z": z, "params": params}
    return Activations(pv=pv, pa=pa, emb=emb, ps=ps, ps_logits=ps_logits, cache=cache)


def backward(acts: Activations, d_pv=None, d_pa=None, d_emb=None,
             d_ps_logits=None) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients on the forward outputs.

    ``d_emb`` carries any gradient that reaches the embeddings directly
    (e.g. through cluster or foreground/background prototypes).  Missing
    upstream terms count as zero.
    """
    if acts.cache is None:
        raise StateError("activations were produced without a cache")
    c = acts.cache
    p: StreamParams = c["params"]
    X = c["X"]
    N = X.shape[0]
    D, H, G, K = p.dims
    grads = {name: np.zeros_like(arr) for name, arr in p.tensors().items()}

    if d_pv is not None:
        d_pv = np.asarray(d_pv, dtype=np.float64)
        d_zc = acts.pv * (d_pv - (d_pv * acts.pv).sum(axis=1, keepdims=True))
        grads["W_cls"] = c["h1"].T @ d_zc
        grads["b_cls"] = d_zc.sum(axis=0)
        d_a1 = (d_zc @ p.W_cls.T) * (c["a1"] > 0)
        grads["W_video"] = X.T @ d_a1
        grads["b_video"] = d_a1.sum(axis=0)

    g_emb = np.zeros((N, H)) if d_emb is None else np.array(d_emb, dtype=np.float64)
    if d_pa is not None:
        d_z = np.asarray(d_pa, dtype=np.float64) * acts.pa * (1.0 - acts.pa)
        grads["w_att"] = acts.emb.T @ d_z[:, None]
        grads["b_att"] = np.array([d_z.sum()])
        g_emb += d_z[:, None] * p.w_att[:, 0][None, :]
    if d_ps_logits is not None:
        d_cos = p.temperature * np.asarray(d_ps_logits, dtype=np.float64)
        g_e, g_C = cosine_backward(acts.emb, p.cluster_head, d_cos)
        g_emb += g_e
        grads["cluster_head"] = g_C

    d_a2 = g_emb * (c["a2"] > 0)
    grads["W_attn"] = X.T @ d_a2
    grads["b_attn"] = d_a2.sum(axis=0)
    return grads


def count_params(params: ModelParams | StreamParams) -> int:
    """Number of trainable scalars (the cosine temperature is fixed)."""
    if isinstance(params, StreamParams):
        return int(sum(arr.size for arr in params.tensors().values()))
    return sum(count_params(sp) for sp in params.streams().values())


def count_macs(params: ModelParams | StreamParams, T: int) -> int:
    """Multiply-accumulates of one forward pass over ``T`` snippets.

    Counts the weight products of every layer; norms, biases and
    nonlinearities are not counted.
    """
    if isinstance(params, StreamParams):
        D, H, G, K = params.dims
        per_snippet = 2 * D * H + H * G + H + K * H
        return int(T) * per_snippet
    return sum(count_macs(sp, T) for sp in params.streams().values())
