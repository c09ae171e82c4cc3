"""Synthetic two-stream snippet features with known action segments.

A fixed set of archetype mean vectors plays the role of visual concepts.
Some archetypes belong to action classes, the rest are background.  A video
is a sequence of runs, each run repeating one archetype with Gaussian noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data_io import write_features
from .errors import InputError, IoError


@dataclass
class SyntheticSpec:
    n_videos: int = 40
    num_classes: int = 3
    n_archetypes: int = 8
    # class index per archetype, -1 marks background; derived when empty
    archetype_classes: list[int] = field(default_factory=list)
    D: int = 32
    T: int = 60
    fg_fraction: float = 0.4
    min_fg_segments: int = 1
    max_fg_segments: int = 3
    max_classes_per_video: int = 1
    mean_scale: float = 4.0
    noise_scale: float = 1.0
    snippet_seconds: float = 0.64
    seed: int = 0
    # archetype means come from this seed so train/test splits share them
    archetype_seed: int | None = None

    def resolved_classes(self) -> list[int]:
        if self.archetype_classes:
            return list(self.archetype_classes)
        n_bg = max(1, self.n_archetypes // 4)
        n_fg = self.n_archetypes - n_bg
        return [i % self.num_classes for i in range(n_fg)] + [-1] * n_bg

    def validate(self) -> None:
        cls = self.resolved_classes()
        if self.n_videos < 1 or self.num_classes < 1 or self.D < 1 or self.T < 2:
            raise InputError("n_videos, num_classes, D must be >= 1 and T >= 2")
        if self.n_archetypes < self.num_classes + 1:
            raise InputError("need at least one background archetype beyond one per class")
        if len(cls) != self.n_archetypes:
            raise InputError("archetype_classes must list one entry per archetype")
        if -1 not in cls:
            raise InputError("no background archetype")
        if set(range(self.num_classes)) - set(cls):
            raise InputError("every class needs at least one archetype")
        if any(c < -1 or c >= self.num_classes for c in cls):
            raise InputError("archetype class index out of range")
        if not 0.0 < self.fg_fraction < 1.0:
            raise InputError("fg_fraction must lie in (0, 1)")
        if not 1 <= self.min_fg_segments <= self.max_fg_segments:
            raise InputError("need 1 <= min_fg_segments <= max_fg_segments")
        if not 1 <= self.max_classes_per_video <= self.num_classes:
            raise InputError("max_classes_per_video out of range")
        n_fg = round(self.fg_fraction * self.T)
        if n_fg < self.max_fg_segments or self.T - n_fg < self.max_fg_segments - 1:
            raise InputError("T too short for the requested segment counts")
        if self.noise_scale < 0 or self.mean_scale <= 0 or self.snippet_seconds <= 0:
            raise InputError("scales must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


def _split(total: int, parts: int, minimum: int, rng) -> list[int]:
    """Random composition of ``total`` into ``parts`` pieces each >= minimum."""
    free = total - parts * minimum
    cuts = np.sort(rng.integers(0, free + 1, size=parts - 1))
    sizes = np.diff(np.concatenate([[0], cuts, [free]]))
    return [int(s) + minimum for s in sizes]


def generate_videos(spec: SyntheticSpec):
    """Yield ``(video_id, rgb, flow, labels, segments)`` for every video.

    ``segments`` holds ``(start_idx, end_idx_inclusive, class)`` triples.
    """
    spec.validate()
    cls = np.array(spec.resolved_classes())
    arch_seed = spec.seed if spec.archetype_seed is None else spec.archetype_seed
    means = np.random.default_rng(arch_seed).normal(size=(spec.n_archetypes, spec.D))
    means *= spec.mean_scale
    rng = np.random.default_rng([spec.seed, 1])
    rng_rgb = np.random.default_rng([spec.seed, 2])
    rng_flow = np.random.default_rng([spec.seed, 3])
    bg_arch = np.flatnonzero(cls == -1)
    T = spec.T
    n_fg = round(spec.fg_fraction * T)

    for v in range(spec.n_videos):
        n_cls = int(rng.integers(1, spec.max_classes_per_video + 1))
        classes = rng.choice(spec.num_classes, size=n_cls, replace=False)
        n_seg = int(rng.integers(max(spec.min_fg_segments, n_cls), spec.max_fg_segments + 1))
        seg_class = list(classes) + list(rng.choice(classes, size=n_seg - n_cls))
        rng.shuffle(seg_class)
        fg_len = _split(n_fg, n_seg, 1, rng)
        # background gaps before, between and after; inner gaps are >= 1
        gaps = _split(T - n_fg - (n_seg - 1), n_seg + 1, 0, rng)
        for i in range(1, n_seg):
            gaps[i] += 1
        arch_seq = np.empty(T, dtype=np.int64)
        segments = []
        pos = 0
        for i in range(n_seg + 1):
            if gaps[i]:
                arch_seq[pos:pos + gaps[i]] = rng.choice(bg_arch)
                pos += gaps[i]
            if i < n_seg:
                c = int(seg_class[i])
                arch_seq[pos:pos + fg_len[i]] = rng.choice(np.flatnonzero(cls == c))
                segments.append((pos, pos + fg_len[i] - 1, c))
                pos += fg_len[i]
        rgb = means[arch_seq] + spec.noise_scale * rng_rgb.normal(size=(T, spec.D))
        flow = means[arch_seq] + spec.noise_scale * rng_flow.normal(size=(T, spec.D))
        labels = sorted({c for _, _, c in segments})
        yield f"video_{v:04d}", rgb, flow, labels, segments


def generate_synthetic(spec: SyntheticSpec, out_dir) -> dict:
    """Write feature files and ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    try:
        (out / "features").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    s = spec.snippet_seconds
    entries = []
    for vid, rgb, flow, labels, segs in generate_videos(spec):
        rgb_rel = f"features/{vid}_rgb.casf"
        flow_rel = f"features/{vid}_flow.casf"
        write_features(out / rgb_rel, rgb)
        write_features(out / flow_rel, flow)
        entries.append({
            "id": vid,
            "rgb_path": rgb_rel,
            "flow_path": flow_rel,
            "labels": labels,
            "segments": [{"start_sec": round(a * s, 6), "end_sec": round((b + 1) * s, 6),
                          "class": c} for a, b, c in segs],
        })
    manifest = {
        "num_classes": spec.num_classes,
        "class_names": [f"action_{c}" for c in range(spec.num_classes)],
        "snippet_seconds": s,
        "generator": asdict(spec),
        "videos": entries,
    }
    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write manifest in {out}: {exc}") from exc
    return manifest
