"""Keyframe triplet-mAP evaluation.

A detection counts as a true positive only when (a) both its human and
object boxes overlap the ground truth with IoU over 0.5 — implemented as
min(iou_h, iou_o) > 0.5 — (b) the object category matches, and (c) the
predicate matches; (b) and (c) are enforced by grouping detections per
triplet before matching. Average precision uses all-point interpolation and
is computed in exact rational arithmetic (the PR curve over integer counts
is rational), so results carry no interpolation rounding.

Categories absent from the evaluation ground truth are undefined (``None``)
and excluded from mAP rather than scored 0. Predicate-wise AP pools
detections across object categories sharing a predicate and matches against
ground truth of any object category with that predicate.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data import (
    AnnotationSet,
    KeyframeSample,
    RaritySplit,
    Taxonomy,
    build_sample,
    convert_labels,
    sample_keyframes,
)
from .geometry import Box, iou
from .video_io import read_video_frames

IOU_THRESHOLD = 0.5
MAX_DETECTIONS_PER_KEYFRAME = 100


class EvaluationError(ValueError):
    pass


@dataclass
class Detection:
    video_id: str
    keyframe_index: int
    human_box: Box
    object_box: Box
    object_category: int
    predicate_id: int
    score: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.score) or self.score <= 0.0:
            raise EvaluationError(f"detection score must be finite and positive, got {self.score}")


@dataclass
class GtInstance:
    video_id: str
    keyframe_index: int
    human_box: Box
    object_box: Box
    object_category: int
    predicate_id: int
    matched: bool = False


def detection_sort_key(det: Detection):
    """Canonical total order: score desc, then spatial identity fields."""
    return (
        -det.score,
        det.video_id,
        det.keyframe_index,
        det.human_box.astuple(),
        det.object_box.astuple(),
        det.object_category,
        det.predicate_id,
    )


def match_category(dets: list[Detection], gts: list[GtInstance]) -> list[bool]:
    """Greedy TP/FP flags for one triplet's detections, in the given order.

    Each detection claims the unmatched same-keyframe ground truth that
    maximizes min(iou_h, iou_o); it is a TP iff that maximum exceeds 0.5.
    Callers pass detections already sorted by descending score.
    """
    flags = []
    for det in dets:
        best = None
        best_q = 0.0
        for gt in gts:
            if (
                gt.matched
                or gt.video_id != det.video_id
                or gt.keyframe_index != det.keyframe_index
            ):
                continue
            q = min(iou(det.human_box, gt.human_box), iou(det.object_box, gt.object_box))
            if q > best_q:
                best_q = q
                best = gt
        if best is not None and best_q > IOU_THRESHOLD:
            best.matched = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: list[bool], n_gt: int) -> float | None:
    """All-point interpolated AP; ``None`` (undefined) when there is no GT.

    Equals the mean over ground-truth instances of the best precision at or
    after the rank recalling them; computed exactly over rationals.
    """
    if n_gt < 0:
        raise EvaluationError("n_gt must be non-negative")
    if n_gt == 0:
        return None
    tp_total = sum(flags)
    if tp_total > n_gt:
        raise EvaluationError(f"{tp_total} true positives exceed {n_gt} ground truths")
    if not flags:
        return 0.0
    precisions: list[Fraction] = []
    tp = 0
    for rank, flag in enumerate(flags, start=1):
        if flag:
            tp += 1
        precisions.append(Fraction(tp, rank))
    # non-increasing precision envelope, right to left
    best = Fraction(0)
    envelope = [Fraction(0)] * len(flags)
    for i in range(len(flags) - 1, -1, -1):
        if precisions[i] > best:
            best = precisions[i]
        envelope[i] = best
    total = Fraction(0)
    for i, flag in enumerate(flags):
        if flag:
            total += envelope[i]
    return float(total / n_gt)


@dataclass
class TripletResult:
    triplet_id: int
    predicate_id: int
    object_category: int
    n_gt: int
    ap: float | None
    split: str  # "rare" | "nonrare"


@dataclass
class PredicateResult:
    predicate_id: int
    temporal: bool
    n_gt: int
    ap: float | None


@dataclass
class EvalReport:
    mode: str
    map_full: float | None
    map_rare: float | None
    map_nonrare: float | None
    map_temporal: float | None
    map_spatial: float | None
    triplets: list[TripletResult]
    predicates: list[PredicateResult]
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "map_full": self.map_full,
            "map_rare": self.map_rare,
            "map_nonrare": self.map_nonrare,
            "map_temporal": self.map_temporal,
            "map_spatial": self.map_spatial,
            "triplets": [
                {
                    "triplet_id": t.triplet_id,
                    "predicate_id": t.predicate_id,
                    "object_category": t.object_category,
                    "n_gt": t.n_gt,
                    "ap": t.ap,
                    "split": t.split,
                }
                for t in self.triplets
            ],
            "predicates": [
                {
                    "predicate_id": p.predicate_id,
                    "temporal": p.temporal,
                    "n_gt": p.n_gt,
                    "ap": p.ap,
                }
                for p in self.predicates
            ],
            "metadata": self.metadata,
        }


def _mean(values: list[float]) -> float | None:
    if not values:
        return None
    return float(sum(values) / len(values))


def _enforce_keyframe_budget(dets: list[Detection]) -> list[Detection]:
    by_keyframe: dict[tuple[str, int], list[Detection]] = {}
    for det in dets:
        by_keyframe.setdefault((det.video_id, det.keyframe_index), []).append(det)
    kept: list[Detection] = []
    for key in sorted(by_keyframe):
        group = sorted(by_keyframe[key], key=detection_sort_key)
        kept.extend(group[:MAX_DETECTIONS_PER_KEYFRAME])
    return kept


def evaluate(
    dets: list[Detection],
    gts: list[GtInstance],
    taxonomy: Taxonomy,
    rarity: RaritySplit,
    mode: str,
    keyframes: set[tuple[str, int]] | None = None,
) -> EvalReport:
    """Full report: per-triplet AP, the three mAP splits, pAP, temporal/spatial."""
    if mode not in ("oracle", "detection"):
        raise EvaluationError(f"unknown evaluation mode {mode!r}")
    if keyframes is not None:
        for det in dets:
            if (det.video_id, det.keyframe_index) not in keyframes:
                raise EvaluationError(
                    f"detection references unknown keyframe "
                    f"({det.video_id!r}, {det.keyframe_index})"
                )
    dets = _enforce_keyframe_budget(dets)
    dets = sorted(dets, key=detection_sort_key)

    gt_triplets: dict[tuple[int, int], list[GtInstance]] = {}
    for gt in gts:
        gt_triplets.setdefault((gt.predicate_id, gt.object_category), []).append(gt)
    for key in gt_triplets:
        if taxonomy.triplet_id(*key) is None:
            pred, ocat = key
            raise EvaluationError(
                f"ground truth triplet (person, {taxonomy.predicates[pred]}, "
                f"{taxonomy.object_categories[ocat]}) missing from the taxonomy table"
            )

    triplet_results: list[TripletResult] = []
    for key in sorted(gt_triplets):
        pred, ocat = key
        tid = taxonomy.triplet_id(pred, ocat)
        group_gts = [
            GtInstance(g.video_id, g.keyframe_index, g.human_box, g.object_box,
                       g.object_category, g.predicate_id)
            for g in gt_triplets[key]
        ]
        group_dets = [
            d for d in dets if d.predicate_id == pred and d.object_category == ocat
        ]
        flags = match_category(group_dets, group_gts)
        ap = average_precision(flags, len(group_gts))
        split = "rare" if tid in rarity.rare else "nonrare"
        triplet_results.append(
            TripletResult(tid, pred, ocat, len(group_gts), ap, split)
        )

    defined = [t for t in triplet_results if t.ap is not None]
    rare_aps = [t.ap for t in defined if t.split == "rare"]
    nonrare_aps = [t.ap for t in defined if t.split == "nonrare"]
    temporal_aps = [t.ap for t in defined if taxonomy.temporal[t.predicate_id]]
    spatial_aps = [t.ap for t in defined if not taxonomy.temporal[t.predicate_id]]
    map_full = _mean([t.ap for t in defined])
    assert map_full == _mean(rare_aps + nonrare_aps), "rare/nonrare must partition Full"

    gt_predicates: dict[int, list[GtInstance]] = {}
    for gt in gts:
        gt_predicates.setdefault(gt.predicate_id, []).append(gt)
    predicate_results: list[PredicateResult] = []
    for pred in sorted(gt_predicates):
        group_gts = [
            GtInstance(g.video_id, g.keyframe_index, g.human_box, g.object_box,
                       g.object_category, g.predicate_id)
            for g in gt_predicates[pred]
        ]
        group_dets = [d for d in dets if d.predicate_id == pred]
        flags = match_category(group_dets, group_gts)
        ap = average_precision(flags, len(group_gts))
        predicate_results.append(
            PredicateResult(pred, bool(taxonomy.temporal[pred]), len(group_gts), ap)
        )

    return EvalReport(
        mode=mode,
        map_full=map_full,
        map_rare=_mean(rare_aps),
        map_nonrare=_mean(nonrare_aps),
        map_temporal=_mean(temporal_aps),
        map_spatial=_mean(spatial_aps),
        triplets=triplet_results,
        predicates=predicate_results,
        metadata={
            "interpolation": "all-point (continuous)",
            "undefined_categories_excluded": True,
            "predicate_ap_pooling": "across object categories; matches GT of any "
                                    "object category sharing the predicate",
            "max_detections_per_keyframe": MAX_DETECTIONS_PER_KEYFRAME,
        },
    )


def build_gt_instances(
    ann: AnnotationSet, keyframes: list[tuple[str, int]], taxonomy: Taxonomy
) -> list[GtInstance]:
    """Expand keyframe label matrices into one GtInstance per active predicate."""
    out: list[GtInstance] = []
    for video_id, frame in keyframes:
        video = ann.video(video_id)
        present, pairs, gt = convert_labels(video, frame, taxonomy.num_predicates)
        for row, (h, o) in enumerate(pairs):
            for pred in np.flatnonzero(gt[row]):
                out.append(
                    GtInstance(
                        video_id=video_id,
                        keyframe_index=frame,
                        human_box=video.boxes[(frame, present[h])],
                        object_box=video.boxes[(frame, present[o])],
                        object_category=taxonomy.category_index(
                            video.instances[present[o]]
                        ),
                        predicate_id=int(pred),
                    )
                )
    return out


def paired_mode_run(
    predictor,
    gt_ann: AnnotationSet,
    frames_dir: str | Path,
    taxonomy: Taxonomy,
    rarity: RaritySplit,
    detected_ann: AnnotationSet,
    segment_len: int,
) -> tuple[EvalReport, EvalReport]:
    """Evaluate one model under Oracle and Detection trajectory sources.

    The pipeline is identical in both passes; only the trajectories (and
    hence the reported boxes) come from the ground-truth annotation or from
    the externally supplied one. Videos missing from ``detected_ann``
    contribute only false negatives in Detection mode.
    """
    keyframes = sample_keyframes(gt_ann, mode="eval")
    gts = build_gt_instances(gt_ann, keyframes, taxonomy)
    keyframe_set = set(keyframes)

    oracle_dets: list[Detection] = []
    detection_dets: list[Detection] = []
    missing_videos: set[str] = set()
    detected_ids = {v.video_id for v in detected_ann.videos}
    frame_cache: dict[str, np.ndarray] = {}
    for video_id, frame in keyframes:
        if video_id not in frame_cache:
            frame_cache[video_id] = read_video_frames(frames_dir, video_id)
        frames = frame_cache[video_id]
        oracle_sample = build_sample(
            gt_ann.video(video_id), frames, frame, segment_len, taxonomy, oracle=True
        )
        oracle_dets.extend(predictor.predict_sample(oracle_sample))
        if video_id not in detected_ids:
            missing_videos.add(video_id)
            continue
        det_video = detected_ann.video(video_id)
        if not any(f == frame for (f, _i) in det_video.boxes):
            missing_videos.add(video_id)
            continue
        det_sample = build_sample(
            det_video, frames, frame, segment_len, taxonomy, oracle=False
        )
        if det_sample.pairs:
            detection_dets.extend(predictor.predict_sample(det_sample))

    oracle_report = evaluate(oracle_dets, gts, taxonomy, rarity, "oracle", keyframe_set)
    detection_report = evaluate(
        detection_dets, gts, taxonomy, rarity, "detection", keyframe_set
    )
    if missing_videos:
        detection_report.metadata["videos_without_detected_trajectories"] = sorted(
            missing_videos
        )
    return oracle_report, detection_report


# --------------------------------------------------------------------------
# File formats


def write_detections_jsonl(dets: list[Detection], path: str | Path) -> None:
    with open(path, "w") as f:
        for d in dets:
            f.write(
                json.dumps(
                    {
                        "video_id": d.video_id,
                        "keyframe_index": d.keyframe_index,
                        "human_box": list(d.human_box.astuple()),
                        "object_box": list(d.object_box.astuple()),
                        "object_category": d.object_category,
                        "predicate_id": d.predicate_id,
                        "score": d.score,
                    }
                )
                + "\n"
            )


def read_detections_jsonl(path: str | Path) -> list[Detection]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        out.append(
            Detection(
                video_id=str(doc["video_id"]),
                keyframe_index=int(doc["keyframe_index"]),
                human_box=Box(*doc["human_box"]),
                object_box=Box(*doc["object_box"]),
                object_category=int(doc["object_category"]),
                predicate_id=int(doc["predicate_id"]),
                score=float(doc["score"]),
            )
        )
    return out


def write_report_files(
    report: EvalReport, taxonomy: Taxonomy, out_dir: str | Path, stem: str = "report"
) -> None:
    """Emit the JSON report plus plot-ready per-triplet and per-predicate CSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(json.dumps(report.to_json(), indent=2))
    with open(out_dir / f"{stem}_triplet_ap.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["triplet_id", "subject", "predicate", "object", "split", "n_gt", "ap"])
        for t in report.triplets:
            writer.writerow(
                [
                    t.triplet_id,
                    "person",
                    taxonomy.predicates[t.predicate_id],
                    taxonomy.object_categories[t.object_category],
                    t.split,
                    t.n_gt,
                    "" if t.ap is None else f"{t.ap:.6f}",
                ]
            )
    with open(out_dir / f"{stem}_predicate_ap.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["predicate", "temporal", "n_gt", "ap"])
        for p in report.predicates:
            writer.writerow(
                [
                    taxonomy.predicates[p.predicate_id],
                    int(p.temporal),
                    p.n_gt,
                    "" if p.ap is None else f"{p.ap:.6f}",
                ]
            )
