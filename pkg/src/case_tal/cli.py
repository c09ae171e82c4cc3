"""Command-line entry point: ``case-tal <command> [options]``.

Exit codes: 0 success, 2 invalid input, 3 IO failure, 4 incompatible
checkpoint.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation, inference, ot_core
from .data_io import load_checkpoint, load_dataset, save_checkpoint
from .errors import CaseError, CheckpointError, InputError, IoError
from .synthetic import SyntheticSpec, generate_synthetic
from .trainer import TrainConfig, config_dict, train

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_IO = 3
EXIT_CHECKPOINT = 4

log = logging.getLogger("case_tal")


@dataclass
class RunConfig:
    """Sectioned run configuration: ``{"train": {...}, "inference": {...},
    "synthetic": {...}}``.  Every section is optional."""

    train: TrainConfig = field(default_factory=TrainConfig)
    inference: inference.InferenceConfig = field(default_factory=inference.InferenceConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise InputError("config must be a JSON object")
        unknown = set(d) - {"train", "inference", "synthetic"}
        if unknown:
            raise InputError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(
            train=TrainConfig.from_dict(d.get("train", {})),
            inference=inference.InferenceConfig.from_dict(d.get("inference", {})),
            synthetic=SyntheticSpec.from_dict(d.get("synthetic", {})),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.train.validate()
        self.inference.validate()
        self.synthetic.validate()

    def to_dict(self) -> dict:
        return {"train": config_dict(self.train), "inference": asdict(self.inference),
                "synthetic": asdict(self.synthetic)}


def _read_json(path):
    try:
        text = sys.stdin.read() if str(path) == "-" else Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: malformed JSON ({exc})") from exc


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    raw = _read_json(path) if path else {}
    if not isinstance(raw, dict):
        raise InputError("config must be a JSON object")
    raw = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for section, values in (overrides or {}).items():
        sect = raw.setdefault(section, {})
        if not isinstance(sect, dict):
            raise InputError(f"config section {section!r} must be an object")
        sect.update({k: v for k, v in values.items() if v is not None})
    return RunConfig.from_dict(raw)


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec()
    if args.spec:
        raw = _read_json(args.spec)
        if not isinstance(raw, dict):
            raise InputError("spec must be a JSON object")
        # a full run config carries the spec in its "synthetic" section
        spec = SyntheticSpec.from_dict(raw["synthetic"] if "synthetic" in raw else raw)
    if args.seed is not None:
        spec.seed = args.seed
    spec.validate()
    manifest = generate_synthetic(spec, args.out)
    n_seg = sum(len(v["segments"]) for v in manifest["videos"])
    print(f"wrote {len(manifest['videos'])} videos, {n_seg} segments, "
          f"{manifest['num_classes']} classes to {args.out}")
    return EXIT_OK


def _train_overrides(args) -> dict:
    return {"train": {"lambda_s": args.lambda_s, "lambda_c": args.lambda_c,
                      "threads": args.threads, "seed": args.seed, "epochs": args.epochs,
                      "lr": args.lr}}


def _labels_to_json(it, ids, labels) -> dict:
    return {
        "iteration": it,
        "videos": ids,
        "topk_sets": [[s.tolist() for s in sets] for sets in labels.gamma_sets],
        "qa": labels.qa.qa.tolist(),
        "qs": labels.qs.tolist(),
        "qc": labels.qc.tolist(),
        "beta_c": labels.beta_c.tolist(),
        "ccc_ok": labels.ccc_ok,
    }


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _train_overrides(args))
    dataset = load_dataset(args.data)
    out = Path(args.out)
    metrics_path = Path(args.metrics) if args.metrics else out.with_name(out.name + ".metrics.jsonl")
    dump = None
    if args.dump_labels:
        dump_dir = Path(args.dump_labels)
        try:
            dump_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoError(f"cannot create {dump_dir}: {exc}") from exc

        def dump(it, ids, labels):
            (dump_dir / f"labels_{it:06d}.json").write_text(
                json.dumps(_labels_to_json(it, ids, labels)) + "\n")
    try:
        with open(metrics_path, "w") as mf:
            result = train(cfg.train, dataset, metrics_file=mf, label_hook=dump)
    except OSError as exc:
        raise IoError(f"cannot write metrics log {metrics_path}: {exc}") from exc
    save_checkpoint(out, result.params, result.qc)
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {len(result.metrics)} iterations; final total loss "
          f"{last.get('total', float('nan')):.4f}; checkpoint {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = load_run_config(args.config, {"inference": {"video_class_threshold": args.class_threshold}})
    params, qc = load_checkpoint(args.ckpt, require_qc=True)
    dataset = load_dataset(args.data)
    tcfg, icfg = cfg.train, cfg.inference
    icfg.omega = tcfg.omega
    results = {}
    for v in dataset.videos:
        k = tcfg.k_topk if tcfg.k_topk else max(1, v.rgb.shape[0] // 8)
        results[v.id] = inference.detect(v.id, v.rgb, v.flow, params, qc, icfg,
                                         dataset.snippet_seconds, k)
    inference.write_detections(args.out, results, dataset.class_names)
    n = sum(len(p) for p in results.values())
    print(f"wrote {n} proposals for {len(results)} videos to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    dets = inference.read_detections(args.dets, dataset.class_names)
    gts = evaluation.ground_truth_from_dataset(dataset)
    report = evaluation.map_report(dets, gts, args.grid, dataset.class_names, mode=args.ap_mode)
    out = Path(args.out) if args.out else Path(args.dets).with_suffix(".map.json")
    csv_path = out.with_suffix(".csv")
    report.write(out, csv_path)
    header = " ".join(f"{t:g}" for t in report.thresholds)
    print(f"tIoU: {header}")
    print("mAP:  " + " ".join(f"{m:.4f}" for m in report.map))
    for name, val in report.averages.items():
        print(f"{name}: {val:.4f}")
    return EXIT_OK


def cmd_sinkhorn(args) -> int:
    doc = _read_json(args.input)
    if not isinstance(doc, dict) or "logits" not in doc:
        raise InputError("sinkhorn input needs a 'logits' matrix")
    unknown = set(doc) - {"logits", "beta", "prior", "eps", "iters"}
    if unknown:
        raise InputError(f"unknown sinkhorn keys: {sorted(unknown)}")
    try:
        logits = np.asarray(doc["logits"], dtype=np.float64)
        beta = None if doc.get("beta") is None else np.asarray(doc["beta"], dtype=np.float64)
        prior = None if doc.get("prior") is None else np.asarray(doc["prior"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InputError(f"non-numeric sinkhorn input: {exc}") from exc
    eps = float(doc.get("eps", ot_core.DEFAULT_EPS))
    iters = doc.get("iters", ot_core.DEFAULT_ITERS)
    if not isinstance(iters, int) or isinstance(iters, bool):
        raise InputError("iters must be an integer")
    plan = ot_core.sinkhorn(logits, beta, prior, eps, iters)
    json.dump({"plan": plan.tolist()}, sys.stdout)
    sys.stdout.write("\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="case-tal",
        description="Weakly supervised temporal action localisation with snippet clustering.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    g = sub.add_parser("gen-data", help="write a synthetic dataset", formatter_class=fmt)
    g.add_argument("--spec", help="JSON generator spec, or a run config with a 'synthetic' section "
                   "(defaults used when omitted)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, help="override the spec seed")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model", formatter_class=fmt)
    t.add_argument("--config", help="JSON run config with optional train/inference/synthetic sections")
    t.add_argument("--data", required=True, help="dataset directory containing manifest.json")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="metrics JSONL path (default: <out>.metrics.jsonl)")
    t.add_argument("--lambda-s", type=float, help="snippet clustering loss weight (config default 1.0)")
    t.add_argument("--lambda-c", type=float, help="cluster classification loss weight (config default 0.3)")
    t.add_argument("--lr", type=float, help="Adam learning rate (config default 1e-4)")
    t.add_argument("--epochs", type=int, help="passes over the dataset (config default 1)")
    t.add_argument("--seed", type=int, help="initialisation and shuffling seed (config default 0)")
    t.add_argument("--threads", type=int, help="worker threads; 1 is bitwise deterministic (config default 1)")
    t.add_argument("--dump-labels", help="directory for per-iteration pseudo-label JSON dumps")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="detect action segments", formatter_class=fmt)
    i.add_argument("--ckpt", required=True, help="checkpoint written by train")
    i.add_argument("--data", required=True, help="dataset directory")
    i.add_argument("--out", required=True, help="detections JSON path")
    i.add_argument("--config", help="JSON run config (train and inference sections are used)")
    i.add_argument("--class-threshold", type=float,
                   help="video-level class score threshold (config default 0.2)")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="compute mAP of detections", formatter_class=fmt)
    e.add_argument("--dets", required=True, help="detections JSON")
    e.add_argument("--data", required=True, help="dataset directory with ground-truth segments")
    e.add_argument("--grid", default="thumos", choices=sorted(evaluation.GRIDS), help="tIoU grid")
    e.add_argument("--ap-mode", default="sum", choices=evaluation.AP_MODES, help="AP variant")
    e.add_argument("--out", help="report JSON path (default: <dets>.map.json); CSV written alongside")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sinkhorn", help="solve one entropic transport instance", formatter_class=fmt)
    s.add_argument("--in", dest="input", required=True,
                   help='JSON {"logits", "beta", "prior", "eps", "iters"}; "-" reads stdin')
    s.set_defaults(func=cmd_sinkhorn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CaseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
