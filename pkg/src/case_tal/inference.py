"""Cluster-informed foreground scoring and proposal generation.

The foreground track used for localisation fuses attention with the
cluster-derived foreground probability; class tracks are scored with the
outer-inner contrast and de-duplicated with greedy NMS.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import pseudo_labels as pl
from .errors import InputError, IoError, ShapeError
from .network import ModelParams, forward


def _default_thresholds() -> list[float]:
    return [round(0.1 + 0.05 * i, 10) for i in range(17)]


@dataclass
class Proposal:
    video_id: str
    class_index: int
    start_sec: float
    end_sec: float
    score: float
    # snippet indices of the run (inclusive); kept for tie-breaking and debugging
    start_idx: int = 0
    end_idx: int = 0


@dataclass
class InferenceConfig:
    video_class_threshold: float = 0.2
    thresholds: list[float] = field(default_factory=_default_thresholds)
    nms_tiou: float = 0.5
    oic_inflation: float = 0.25
    # weight of the class T-CAS in the class track (same role as in training)
    omega: float = 0.25
    fusion_weight: float = 0.5

    def validate(self) -> None:
        th = list(self.thresholds)
        if not th:
            raise InputError("thresholds must not be empty")
        if any(not 0.0 < t < 1.0 for t in th):
            raise InputError("thresholds must lie in (0, 1)")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise InputError("thresholds must be strictly increasing")
        if not 0.0 <= self.video_class_threshold <= 1.0:
            raise InputError("video_class_threshold must lie in [0, 1]")
        if not 0.0 < self.nms_tiou <= 1.0:
            raise InputError("nms_tiou must lie in (0, 1]")
        if self.oic_inflation < 0:
            raise InputError("oic_inflation must be non-negative")
        if not 0.0 <= self.omega <= 1.0:
            raise InputError("omega must lie in [0, 1]")
        if self.fusion_weight != 0.5:
            raise InputError("the P^M fusion weight is fixed at 0.5")

    @classmethod
    def from_dict(cls, d: dict) -> "InferenceConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown inference config keys: {sorted(unknown)}")
        return cls(**d)


def transform_pt(ps, qc_fg) -> np.ndarray:
    """Foreground probability by total probability over clusters."""
    ps = np.asarray(ps, dtype=np.float64)
    qc_fg = np.asarray(qc_fg, dtype=np.float64)
    if ps.ndim != 2 or qc_fg.ndim != 1 or ps.shape[1] != qc_fg.size:
        raise ShapeError(f"ps {ps.shape} incompatible with qc_fg {qc_fg.shape}")
    return np.clip(ps @ qc_fg, 0.0, 1.0)


def fuse_pm(pa, pt) -> np.ndarray:
    pa = np.asarray(pa, dtype=np.float64)
    pt = np.asarray(pt, dtype=np.float64)
    if pa.shape != pt.shape:
        raise ShapeError(f"pa {pa.shape} vs pt {pt.shape}")
    return 0.5 * pa + 0.5 * pt


def oic_score(track, start_idx: int, end_idx: int, inflation: float = 0.25) -> float:
    """Inner mean minus the mean over an inflated outer collar.

    The collar is ``ceil(inflation * length)`` snippets on each side, clipped
    to the track; an empty collar counts as outer mean 0.
    """
    track = np.asarray(track, dtype=np.float64)
    T = track.size
    if not (0 <= start_idx <= end_idx < T):
        raise InputError(f"invalid segment [{start_idx}, {end_idx}] for length {T}")
    if inflation < 0:
        raise InputError("inflation must be non-negative")
    length = end_idx - start_idx + 1
    width = math.ceil(inflation * length)
    lo = max(0, start_idx - width)
    hi = min(T - 1, end_idx + width)
    inner = track[start_idx:end_idx + 1].mean()
    outer_vals = np.concatenate([track[lo:start_idx], track[end_idx + 1:hi + 1]])
    outer = outer_vals.mean() if outer_vals.size else 0.0
    return float(inner - outer)


def extract_runs(mask) -> list[tuple[int, int]]:
    """Maximal runs of True as inclusive ``(start, end)`` index pairs."""
    m = np.asarray(mask, dtype=bool).astype(np.int8)
    edges = np.diff(np.concatenate([[0], m, [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return [(int(a), int(b)) for a, b in zip(starts, ends)]


def interval_tiou(a0, a1, b0, b1) -> float:
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0)
    return inter / union if union > 0 else 0.0


def nms(proposals: list[Proposal], tiou_threshold: float = 0.5) -> list[Proposal]:
    """Greedy NMS for proposals of one class (and one video)."""
    order = sorted(proposals, key=lambda p: (-p.score, p.start_sec))
    kept: list[Proposal] = []
    for p in order:
        if all(interval_tiou(p.start_sec, p.end_sec, k.start_sec, k.end_sec) < tiou_threshold
               for k in kept):
            kept.append(p)
    return kept


@dataclass
class VideoScores:
    """Stream-averaged per-snippet predictions for one video."""
    pv: np.ndarray  # T x G
    pa: np.ndarray  # T
    ps: np.ndarray  # T x K
    video_score: np.ndarray  # G


def video_scores(rgb, flow, params: ModelParams, k_topk: int, omega: float) -> VideoScores:
    """Forward both streams and average their outputs.

    The video score mirrors training: softmax of top-k means of each
    stream's class T-CAS, with top-k sets chosen on the fused calibrated
    T-CAS, then averaged over streams.
    """
    acts = {"rgb": forward(rgb, params.rgb, keep_cache=False),
            "flow": forward(flow, params.flow, keep_cache=False)}
    a, b = acts["rgb"], acts["flow"]
    pv_hat = pl.fuse_streams(pl.calibrate_tcas(a.pv, a.pa, omega),
                             pl.calibrate_tcas(b.pv, b.pa, omega))
    sets = pl.topk_select(pv_hat, max(1, min(k_topk, pv_hat.shape[0])))
    vscore = pl.fuse_streams(pl.video_score(a.pv, sets), pl.video_score(b.pv, sets))
    return VideoScores(pv=pl.fuse_streams(a.pv, b.pv), pa=pl.fuse_streams(a.pa, b.pa),
                       ps=pl.fuse_streams(a.ps, b.ps), video_score=vscore)


def detect_from_scores(video_id: str, scores: VideoScores, qc_fg, cfg: InferenceConfig,
                       snippet_seconds: float) -> list[Proposal]:
    """Proposals for one video from already fused predictions."""
    cfg.validate()
    pt = transform_pt(scores.ps, qc_fg)
    pm = fuse_pm(scores.pa, pt)
    classes = np.flatnonzero(np.asarray(scores.video_score) >= cfg.video_class_threshold)
    if classes.size == 0:
        return []
    runs = []
    for theta in cfg.thresholds:
        runs.extend(extract_runs(pm >= theta))
    out = []
    for c in classes:
        track = cfg.omega * scores.pv[:, c] + (1.0 - cfg.omega) * pm
        cands = [Proposal(video_id, int(c), s * snippet_seconds, (e + 1) * snippet_seconds,
                          oic_score(track, s, e, cfg.oic_inflation), s, e)
                 for s, e in runs]
        out.extend(nms(cands, cfg.nms_tiou))
    return out


def detect(video_id: str, rgb, flow, params: ModelParams, qc, cfg: InferenceConfig,
           snippet_seconds: float, k_topk: int) -> list[Proposal]:
    """Full per-video pipeline from features to NMS-filtered proposals."""
    qc = np.asarray(qc, dtype=np.float64)
    scores = video_scores(rgb, flow, params, k_topk, cfg.omega)
    return detect_from_scores(video_id, scores, qc[:, 0], cfg, snippet_seconds)


def detections_json(proposals_by_video: dict[str, list[Proposal]], class_names) -> dict:
    results = {}
    for vid in sorted(proposals_by_video):
        items = sorted(proposals_by_video[vid], key=lambda p: (-p.score, p.start_sec, p.class_index))
        results[vid] = [{"label": class_names[p.class_index],
                         "segment": [p.start_sec, p.end_sec],
                         "score": p.score} for p in items]
    return {"results": results}


def write_detections(path, proposals_by_video, class_names) -> None:
    try:
        with open(path, "w") as f:
            json.dump(detections_json(proposals_by_video, class_names), f, indent=1)
            f.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write detections {path}: {exc}") from exc


def read_detections(path, class_names) -> list[Proposal]:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as exc:
        raise IoError(f"cannot read detections {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(doc, dict) or "results" not in doc:
        raise InputError(f"{path}: missing 'results'")
    index = {name: i for i, name in enumerate(class_names)}
    out = []
    for vid, items in doc["results"].items():
        for it in items:
            label = it["label"]
            if label not in index:
                raise InputError(f"{path}: unknown label {label!r}")
            s, e = (float(x) for x in it["segment"])
            out.append(Proposal(vid, index[label], s, e, float(it["score"])))
    return out


def config_dict(cfg: InferenceConfig) -> dict:
    return asdict(cfg)
