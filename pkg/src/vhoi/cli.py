"""Command-line surface: synth, convert, train, eval, ablate, verify.

Exit codes: 0 success, 1 verification/run failure, 2 usage or input error.
Every command writes a manifest next to its outputs; reruns with identical
inputs and seeds produce byte-identical outputs (manifests differ only in
wall-clock).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, verify
from .data import (
    AnnotationError,
    AnnotationSet,
    KeyframeSample,
    RaritySplit,
    Taxonomy,
    build_sample,
    build_taxonomy,
    convert_labels,
    load_annotations,
    load_taxonomy,
    rarity_from_taxonomy,
    sample_keyframes,
    save_annotations,
    save_taxonomy,
)
from .evaluation import (
    EvalReport,
    build_gt_instances,
    evaluate,
    read_detections_jsonl,
    write_report_files,
)
from .model import VARIANTS, HOIDetector, TrainingDivergedError
from .synthetic import SyntheticSpec, default_taxonomy, generate_synthetic
from .video_io import read_video_frames, write_video_frames

USAGE_ERROR = 2
VERIFY_ERROR = 1


class InputError(Exception):
    pass


def _write_manifest(out_dir: Path, command: str, config: dict, inputs: list[str],
                    outputs: list[str], started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": sorted(inputs),
        "outputs": sorted(outputs),
        "tool_version": __version__,
        "wall_clock_sec": round(time.monotonic() - started, 3),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


# --------------------------------------------------------------------------
# synth


def _load_synth_specs(path: str | None, seed: int | None) -> tuple[SyntheticSpec, SyntheticSpec]:
    if path is None:
        doc: dict = {}
    else:
        doc = json.loads(Path(path).read_text())
    try:
        if "train" in doc or "val" in doc:
            train = SyntheticSpec.from_json(doc.get("train", {}))
            val = SyntheticSpec.from_json(doc.get("val", {}))
        else:
            train = SyntheticSpec.from_json(doc)
            val_doc = dict(doc)
            val_doc["seed"] = train.seed + 1
            val_doc["num_videos"] = max(train.num_videos // 4, 2)
            val = SyntheticSpec.from_json(val_doc)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid synthetic spec: {exc}") from exc
    if seed is not None:
        train = SyntheticSpec.from_json({**train.to_json(), "seed": seed})
        val = SyntheticSpec.from_json({**val.to_json(), "seed": seed + 1})
    return train, val


def cmd_synth(args: argparse.Namespace) -> int:
    started = time.monotonic()
    train_spec, val_spec = _load_synth_specs(args.spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    train_ann, train_frames = generate_synthetic(train_spec)
    val_ann, val_frames = generate_synthetic(val_spec)
    taxonomy = build_taxonomy(default_taxonomy(), train_ann, [val_ann])

    save_annotations(train_ann, out / "ann_train.json")
    save_annotations(val_ann, out / "ann_val.json")
    save_taxonomy(taxonomy, out / "taxonomy.json")
    write_video_frames(out / "frames", {**train_frames, **val_frames})
    (out / "synth_spec.json").write_text(
        json.dumps({"train": train_spec.to_json(), "val": val_spec.to_json()},
                   indent=2, sort_keys=True)
    )
    outputs = ["ann_train.json", "ann_val.json", "taxonomy.json", "frames/", "synth_spec.json"]
    _write_manifest(out, "synth",
                    {"train": train_spec.to_json(), "val": val_spec.to_json()},
                    [args.spec] if args.spec else [], outputs, started)
    print(f"wrote {len(train_ann.videos)} train + {len(val_ann.videos)} val videos to {out}")
    return 0


# --------------------------------------------------------------------------
# convert


def cmd_convert(args: argparse.Namespace) -> int:
    started = time.monotonic()
    ann = load_annotations(args.ann)
    taxonomy = load_taxonomy(args.taxonomy)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    keyframes = sample_keyframes(ann, mode=args.mode)
    records = []
    for video_id, frame in keyframes:
        video = ann.video(video_id)
        present, pairs, gt = convert_labels(video, frame, taxonomy.num_predicates)
        records.append(
            {
                "video_id": video_id,
                "keyframe_index": frame,
                "instances": present,
                "pairs": [list(p) for p in pairs],
                "gt": gt.astype(int).tolist(),
            }
        )
    index_name = f"keyframes_{args.mode}.json"
    (out / index_name).write_text(json.dumps(records, indent=2, sort_keys=True))
    outputs = [index_name]
    if args.mode == "train":
        rarity = rarity_from_taxonomy(build_taxonomy(taxonomy, ann))
        (out / "rarity.json").write_text(json.dumps(rarity.to_json(), indent=2, sort_keys=True))
        outputs.append("rarity.json")
    _write_manifest(out, "convert", {"ann": args.ann, "mode": args.mode},
                    [args.ann, args.taxonomy], outputs, started)
    print(f"{len(records)} keyframes ({args.mode} mode) -> {out / index_name}")
    return 0


# --------------------------------------------------------------------------
# dataset loading shared by train / eval / ablate


def _data_paths(data_dir: str) -> dict[str, Path]:
    root = Path(data_dir)
    paths = {
        "train": root / "ann_train.json",
        "val": root / "ann_val.json",
        "taxonomy": root / "taxonomy.json",
        "frames": root / "frames",
    }
    missing = [str(p) for key, p in paths.items() if not p.exists()]
    if missing:
        raise InputError(f"data directory {data_dir} is missing: {', '.join(missing)}")
    return paths


def _load_split_samples(
    ann: AnnotationSet, frames_dir: Path, taxonomy: Taxonomy, segment_len: int, mode: str
) -> list[KeyframeSample]:
    samples = []
    cache: dict[str, np.ndarray] = {}
    for video_id, frame in sample_keyframes(ann, mode=mode):
        if video_id not in cache:
            cache[video_id] = read_video_frames(frames_dir, video_id)
        samples.append(
            build_sample(ann.video(video_id), cache[video_id], frame, segment_len, taxonomy)
        )
    return samples


def _detector_from_args(args: argparse.Namespace, taxonomy: Taxonomy) -> HOIDetector:
    if args.variant not in VARIANTS:
        raise InputError(f"unknown variant {args.variant!r}; choose from {', '.join(VARIANTS)}")
    return HOIDetector(
        variant=args.variant,
        num_predicates=taxonomy.num_predicates,
        segment_len=args.segment_len,
        backbone_channels=tuple(args.backbone_channels),
        roi_size=(args.roi_size, args.roi_size),
        roi_samples=args.roi_samples,
        hidden_width=args.hidden_width,
        pose_mask_size=args.pose_mask_size,
        pose_channels=tuple(args.pose_channels),
        score_mode=args.score_mode,
        seed=args.seed,
        base_lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        augment=args.augment,
    )


def cmd_train(args: argparse.Namespace) -> int:
    started = time.monotonic()
    paths = _data_paths(args.data)
    taxonomy = load_taxonomy(paths["taxonomy"])
    detector = _detector_from_args(args, taxonomy)
    train_ann = load_annotations(paths["train"])
    samples = _load_split_samples(
        load_annotations(paths["train"]), paths["frames"], taxonomy,
        args.segment_len, "train",
    )
    del train_ann
    if not samples:
        raise InputError("no training keyframes after filtering")
    print(f"training {args.variant} on {len(samples)} keyframe samples")
    detector.fit(samples, log_fn=lambda e, l: print(f"epoch {e:3d}  loss {l:.5f}"))
    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    detector.save(ckpt)
    _write_manifest(
        ckpt.parent, "train",
        {"variant": args.variant, "seed": args.seed, "epochs": args.epochs,
         "detector": {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in detector.get_params().items()}},
        [args.data], [ckpt.name, ckpt.name + ".json"], started,
    )
    print(f"checkpoint -> {ckpt}")
    return 0


# --------------------------------------------------------------------------
# eval


def _evaluate_detector(
    detector: HOIDetector,
    ann: AnnotationSet,
    frames_dir: Path,
    taxonomy: Taxonomy,
    rarity: RaritySplit,
    mode: str,
    traj_ann: AnnotationSet | None,
) -> EvalReport:
    keyframes = sample_keyframes(ann, mode="eval")
    gts = build_gt_instances(ann, keyframes, taxonomy)
    dets = []
    cache: dict[str, np.ndarray] = {}
    source = ann if mode == "oracle" else traj_ann
    assert source is not None
    source_ids = {v.video_id for v in source.videos}
    for video_id, frame in keyframes:
        if video_id not in source_ids:
            continue
        if video_id not in cache:
            cache[video_id] = read_video_frames(frames_dir, video_id)
        sample = build_sample(
            source.video(video_id), cache[video_id], frame,
            detector.segment_len, taxonomy, oracle=(mode == "oracle"),
        )
        if sample.pairs:
            dets.extend(detector.predict_sample(sample))
    return evaluate(dets, gts, taxonomy, rarity, mode, set(keyframes))


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.monotonic()
    paths = _data_paths(args.data)
    taxonomy = load_taxonomy(paths["taxonomy"])
    rarity = rarity_from_taxonomy(taxonomy)
    val_ann = load_annotations(paths["val"])
    out = Path(args.out)

    if args.mode == "detection" and not (args.traj or args.dets):
        raise InputError("detection mode requires --traj (or --dets)")

    if args.dets:
        dets = read_detections_jsonl(args.dets)
        keyframes = sample_keyframes(val_ann, mode="eval")
        gts = build_gt_instances(val_ann, keyframes, taxonomy)
        report = evaluate(dets, gts, taxonomy, rarity, args.mode, set(keyframes))
        inputs = [args.dets]
    else:
        if not args.ckpt:
            raise InputError("--ckpt is required unless --dets is given")
        detector = HOIDetector.load(args.ckpt)
        traj_ann = load_annotations(args.traj) if args.traj else None
        report = _evaluate_detector(
            detector, val_ann, paths["frames"], taxonomy, rarity, args.mode, traj_ann
        )
        inputs = [args.ckpt] + ([args.traj] if args.traj else [])

    write_report_files(report, taxonomy, out, stem=f"report_{args.mode}")
    _write_manifest(out, "eval", {"mode": args.mode, "data": args.data},
                    inputs + [args.data],
                    [f"report_{args.mode}.json", f"report_{args.mode}_triplet_ap.csv",
                     f"report_{args.mode}_predicate_ap.csv"], started)
    print(
        f"mode={report.mode}  full={_fmt(report.map_full)}  "
        f"rare={_fmt(report.map_rare)}  nonrare={_fmt(report.map_nonrare)}  "
        f"temporal={_fmt(report.map_temporal)}  spatial={_fmt(report.map_spatial)}"
    )
    return 0


def _fmt(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.4f}"


# --------------------------------------------------------------------------
# ablate


def _pap(report: EvalReport, taxonomy: Taxonomy, name: str) -> float | None:
    pid = taxonomy.predicate_index(name)
    for p in report.predicates:
        if p.predicate_id == pid:
            return p.ap
    return None


def cmd_ablate(args: argparse.Namespace) -> int:
    started = time.monotonic()
    paths = _data_paths(args.data)
    taxonomy = load_taxonomy(paths["taxonomy"])
    rarity = rarity_from_taxonomy(taxonomy)
    train_ann = load_annotations(paths["train"])
    val_ann = load_annotations(paths["val"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    train_samples = _load_split_samples(
        train_ann, paths["frames"], taxonomy, args.segment_len, "train"
    )
    print(f"{len(train_samples)} training samples; ablating {len(VARIANTS)} variants")

    reports: dict[str, EvalReport] = {}
    for variant in VARIANTS:
        ns = argparse.Namespace(**{**vars(args), "variant": variant})
        detector = _detector_from_args(ns, taxonomy)
        detector.fit(train_samples)
        report = _evaluate_detector(
            detector, val_ann, paths["frames"], taxonomy, rarity, "oracle", None
        )
        reports[variant] = report
        write_report_files(report, taxonomy, out, stem=f"report_{variant.replace('+', '_')}")
        print(f"  {variant:10s} full={_fmt(report.map_full)}")

    base = reports["baseline2d"]
    with open(out / "table_map.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "full", "nonrare", "rare", "rel_pct_vs_2d"])
        for variant in VARIANTS:
            r = reports[variant]
            if variant == "baseline2d" or not r.map_full or not base.map_full:
                rel = "-"
            else:
                rel = f"{100.0 * (r.map_full - base.map_full) / base.map_full:.1f}"
            writer.writerow(
                [variant, _fmt(r.map_full), _fmt(r.map_nonrare), _fmt(r.map_rare), rel]
            )

    with open(out / "table_temporal_spatial.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "temporal", "t_rel_pct", "spatial", "s_rel_pct"])
        for variant in VARIANTS:
            r = reports[variant]

            def rel(cur: float | None, ref: float | None) -> str:
                if variant == "baseline2d" or cur is None or not ref:
                    return "-"
                return f"{100.0 * (cur - ref) / ref:.1f}"

            writer.writerow(
                [variant, _fmt(r.map_temporal), rel(r.map_temporal, base.map_temporal),
                 _fmt(r.map_spatial), rel(r.map_spatial, base.map_spatial)]
            )

    # temporal-discrimination check: trajectory variants must crack
    # towards/away while the keyframe-only baseline stays near chance
    check_ok = True
    for name in ("towards", "away"):
        strong = min(
            _pap(reports["T"], taxonomy, name) or 0.0,
            _pap(reports["T+V+P"], taxonomy, name) or 0.0,
        )
        weak = _pap(reports["baseline2d"], taxonomy, name) or 0.0
        line_ok = strong >= 0.90 and weak <= 0.60
        check_ok &= line_ok
        print(
            f"temporal-discrimination {name}: T/T+V+P pAP >= {strong:.3f}, "
            f"baseline2d pAP = {weak:.3f} -> {'PASS' if line_ok else 'FAIL'}"
        )

    _write_manifest(out, "ablate",
                    {"seed": args.seed, "epochs": args.epochs},
                    [args.data],
                    ["table_map.csv", "table_temporal_spatial.csv"], started)
    print(f"tables -> {out}")
    return 0 if check_ok else VERIFY_ERROR


# --------------------------------------------------------------------------
# verify


def cmd_verify(args: argparse.Namespace) -> int:
    results = verify.run_all(quick=args.quick)
    failed = False
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:20s} {r.checks:4d} checks  {status}")
        for msg in r.failures:
            failed = True
            print(f"    {msg}")
    return VERIFY_ERROR if failed else 0


# --------------------------------------------------------------------------
# parser


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", default="T+V+P")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--segment-len", type=int, default=8)
    p.add_argument("--backbone-channels", type=int, nargs=3, default=[16, 32, 64])
    p.add_argument("--roi-size", type=int, default=7)
    p.add_argument("--roi-samples", type=int, default=2)
    p.add_argument("--hidden-width", type=int, default=512)
    p.add_argument("--pose-mask-size", type=int, default=64)
    p.add_argument("--pose-channels", type=int, nargs=2, default=[16, 32])
    p.add_argument("--score-mode", default="sigmoid", choices=["sigmoid", "softmax"])
    p.add_argument("--augment", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vhoi",
        description="Video human-object interaction detection at desk scale",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    p.add_argument("--spec", help="synthetic spec JSON (flat, or {train:..., val:...})")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override spec seeds")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="convert clip annotations to keyframe labels")
    p.add_argument("--ann", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="train", choices=["train", "eval"])
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_model_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a detections file")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--mode", default="oracle", choices=["oracle", "detection"])
    p.add_argument("--traj", help="external trajectory annotation JSON (detection mode)")
    p.add_argument("--dets", help="detections JSONL to evaluate directly")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate all variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_model_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="run the built-in invariant suites")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, AnnotationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return VERIFY_ERROR


if __name__ == "__main__":
    sys.exit(main())
