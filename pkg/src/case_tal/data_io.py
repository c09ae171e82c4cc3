"""Feature files, dataset manifests and checkpoints.

Feature file (one per video per stream)::

    b"CASF" | version u32 (=1) | T u32 | D u32 | T*D float32, row-major

Checkpoint::

    b"CASE" | version u32 | records...
    record = name_len u32 | utf-8 name | rank u32 | dims u32[rank] | float64[prod(dims)]

All integers and floats are little-endian.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, InputError, IoError
from .network import STREAMS, TENSOR_NAMES, ModelParams, StreamParams

FEATURE_MAGIC = b"CASF"
FEATURE_VERSION = 1
CKPT_MAGIC = b"CASE"
CKPT_VERSION = 1
QC_TENSOR = "qc"


def write_features(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise InputError(f"features must be T x D, got shape {arr.shape}")
    T, D = arr.shape
    try:
        with open(path, "wb") as f:
            f.write(FEATURE_MAGIC)
            f.write(struct.pack("<III", FEATURE_VERSION, T, D))
            f.write(arr.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write feature file {path}: {exc}") from exc


def read_features(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read feature file {path}: {exc}") from exc
    if blob[:4] != FEATURE_MAGIC:
        raise InputError(f"{path}: not a feature file")
    version, T, D = struct.unpack_from("<III", blob, 4)
    if version != FEATURE_VERSION:
        raise InputError(f"{path}: unsupported feature version {version}")
    payload = np.frombuffer(blob, dtype="<f4", offset=16)
    if payload.size != T * D:
        raise InputError(f"{path}: expected {T * D} values, found {payload.size}")
    return payload.reshape(T, D).astype(np.float64)


@dataclass
class Segment:
    start_sec: float
    end_sec: float
    label: int


@dataclass
class Video:
    id: str
    rgb: np.ndarray
    flow: np.ndarray
    labels: list[int]
    segments: list[Segment] = field(default_factory=list)

    def label_vector(self, num_classes: int) -> np.ndarray:
        y = np.zeros(num_classes)
        y[self.labels] = 1.0
        return y


@dataclass
class Dataset:
    num_classes: int
    class_names: list[str]
    snippet_seconds: float
    videos: list[Video]


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: malformed JSON ({exc})") from exc
    for key in ("num_classes", "videos"):
        if key not in manifest:
            raise InputError(f"{path}: missing key {key!r}")
    return manifest


def load_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    G = int(manifest["num_classes"])
    videos = []
    for entry in manifest["videos"]:
        vid = str(entry["id"])
        streams = {}
        for s in STREAMS:
            p = data_dir / entry[f"{s}_path"]
            if not p.is_file():
                raise IoError(f"video {vid}: missing {s} stream file {p}")
            streams[s] = read_features(p)
        segs = [Segment(float(g["start_sec"]), float(g["end_sec"]), int(g["class"]))
                for g in entry.get("segments", [])]
        videos.append(Video(vid, streams["rgb"], streams["flow"],
                            [int(c) for c in entry["labels"]], segs))
    return Dataset(
        num_classes=G,
        class_names=list(manifest.get("class_names", [str(c) for c in range(G)])),
        snippet_seconds=float(manifest.get("snippet_seconds", 1.0)),
        videos=videos,
    )


def save_checkpoint(path, params: ModelParams, qc: np.ndarray | None = None) -> None:
    tensors = dict(params.named_tensors())
    for s, sp in params.streams().items():
        tensors[f"{s}.temperature"] = np.array(sp.temperature)
    if qc is not None:
        tensors[QC_TENSOR] = np.asarray(qc)
    save_tensors(path, tensors)


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() below is C order; keeps 0-d shape
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(b"".join(chunks))
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_tensors(path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != CKPT_MAGIC:
        raise InputError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
            out[name] = arr.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise InputError(f"{path}: truncated checkpoint") from exc
    return out


def load_checkpoint(path, require_qc: bool = False) -> tuple[ModelParams, np.ndarray | None]:
    tensors = load_tensors(path)
    streams = {}
    for s in STREAMS:
        try:
            kw = {t: tensors[f"{s}.{t}"] for t in TENSOR_NAMES}
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing tensor {exc.args[0]}") from exc
        temp = float(tensors.get(f"{s}.temperature", np.array(10.0)))
        streams[s] = StreamParams(**kw, temperature=temp)
    qc = tensors.get(QC_TENSOR)
    if require_qc and qc is None:
        raise CheckpointError("checkpoint predates CCC: no persisted cluster labels")
    return ModelParams(**streams), qc
