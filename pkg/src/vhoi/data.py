"""Annotation schema, keyframe conversion, rarity splits, and augmentation.

Annotations describe whole videos (instances, per-frame boxes and poses,
relation intervals); training and evaluation operate on keyframes sampled at
1 Hz, so this module converts clip-level relation intervals into per-keyframe
pair/predicate label matrices. Relation intervals are begin-inclusive,
end-exclusive.
"""

from __future__ import annotations

import importlib.resources
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import jsonschema
import numpy as np

from .features import NUM_KEYPOINTS, Pose, bilinear_resize
from .geometry import Box, PairProposal, Trajectory, fill_trajectory

PERSON_CATEGORY = "person"


class AnnotationError(ValueError):
    pass


@dataclass
class RelationInterval:
    subject_id: str
    object_id: str
    predicate_id: int
    begin_frame: int
    end_frame: int

    def covers(self, frame: int) -> bool:
        return self.begin_frame <= frame < self.end_frame


@dataclass
class VideoAnnotation:
    video_id: str
    fps: float
    width: int
    height: int
    frame_count: int
    instances: dict[str, str]                     # instance_id -> category name
    boxes: dict[tuple[int, str], Box]             # (frame, instance_id) -> Box
    poses: dict[tuple[int, str], Pose] = field(default_factory=dict)
    relations: list[RelationInterval] = field(default_factory=list)

    def validate(self) -> None:
        if self.fps <= 0:
            raise AnnotationError(f"video {self.video_id!r}: fps must be positive")
        for (frame, iid) in self.boxes:
            if iid not in self.instances:
                raise AnnotationError(
                    f"video {self.video_id!r}: box at frame {frame} references "
                    f"undeclared instance {iid!r}"
                )
        for rel in self.relations:
            for iid in (rel.subject_id, rel.object_id):
                if iid not in self.instances:
                    raise AnnotationError(
                        f"video {self.video_id!r}: relation "
                        f"({rel.subject_id!r}, {rel.predicate_id}, {rel.object_id!r}) "
                        f"references undeclared instance {iid!r}"
                    )
            if self.instances[rel.subject_id] != PERSON_CATEGORY:
                raise AnnotationError(
                    f"video {self.video_id!r}: relation subject {rel.subject_id!r} "
                    f"is not a {PERSON_CATEGORY}"
                )
            if not rel.begin_frame < rel.end_frame:
                raise AnnotationError(
                    f"video {self.video_id!r}: relation interval "
                    f"[{rel.begin_frame}, {rel.end_frame}) is empty"
                )


@dataclass
class AnnotationSet:
    videos: list[VideoAnnotation]

    def __post_init__(self) -> None:
        self._by_id = {v.video_id: v for v in self.videos}
        if len(self._by_id) != len(self.videos):
            raise AnnotationError("duplicate video ids in annotation set")

    def video(self, video_id: str) -> VideoAnnotation:
        return self._by_id[video_id]


@dataclass
class Taxonomy:
    """Predicate list with temporal flags, object categories, triplet table."""

    predicates: list[str]
    temporal: list[bool]
    object_categories: list[str]
    # (predicate_id, object_category_id, train_count); subject is always person
    triplets: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.predicates) != len(self.temporal):
            raise AnnotationError("temporal flags must cover every predicate")
        if PERSON_CATEGORY not in self.object_categories:
            raise AnnotationError(f"object categories must include {PERSON_CATEGORY!r}")

    @property
    def num_predicates(self) -> int:
        return len(self.predicates)

    def predicate_index(self, name: str) -> int:
        return self.predicates.index(name)

    def category_index(self, name: str) -> int:
        return self.object_categories.index(name)

    def triplet_id(self, predicate_id: int, object_category_id: int) -> int | None:
        for tid, (p, o, _) in enumerate(self.triplets):
            if p == predicate_id and o == object_category_id:
                return tid
        return None


# --------------------------------------------------------------------------
# JSON serialization


def annotation_to_json(ann: AnnotationSet) -> dict:
    videos = []
    for v in ann.videos:
        videos.append(
            {
                "video_id": v.video_id,
                "fps": v.fps,
                "width": v.width,
                "height": v.height,
                "frame_count": v.frame_count,
                "instances": [
                    {"instance_id": iid, "category": cat}
                    for iid, cat in sorted(v.instances.items())
                ],
                "boxes": [
                    {"frame": f, "instance_id": iid, "box": list(box.astuple())}
                    for (f, iid), box in sorted(v.boxes.items())
                ],
                "poses": [
                    {
                        "frame": f,
                        "instance_id": iid,
                        "keypoints": pose.keypoints.tolist(),
                        "valid": pose.valid.tolist(),
                    }
                    for (f, iid), pose in sorted(v.poses.items())
                ],
                "relations": [
                    {
                        "subject_id": r.subject_id,
                        "object_id": r.object_id,
                        "predicate_id": r.predicate_id,
                        "begin_frame": r.begin_frame,
                        "end_frame": r.end_frame,
                    }
                    for r in v.relations
                ],
            }
        )
    return {"videos": videos}


def annotation_from_json(doc: dict) -> AnnotationSet:
    videos = []
    for v in doc["videos"]:
        boxes = {}
        for b in v.get("boxes", []):
            boxes[(int(b["frame"]), str(b["instance_id"]))] = Box(*b["box"])
        poses = {}
        for p in v.get("poses", []):
            poses[(int(p["frame"]), str(p["instance_id"]))] = Pose(
                np.array(p["keypoints"], dtype=np.float64),
                np.array(p["valid"], dtype=bool),
            )
        relations = [
            RelationInterval(
                str(r["subject_id"]),
                str(r["object_id"]),
                int(r["predicate_id"]),
                int(r["begin_frame"]),
                int(r["end_frame"]),
            )
            for r in v.get("relations", [])
        ]
        video = VideoAnnotation(
            video_id=str(v["video_id"]),
            fps=float(v["fps"]),
            width=int(v["width"]),
            height=int(v["height"]),
            frame_count=int(v["frame_count"]),
            instances={
                str(i["instance_id"]): str(i["category"]) for i in v["instances"]
            },
            boxes=boxes,
            poses=poses,
            relations=relations,
        )
        video.validate()
        videos.append(video)
    return AnnotationSet(videos)


@lru_cache(maxsize=None)
def _annotation_validator() -> jsonschema.Draft202012Validator:
    schema = json.loads(
        importlib.resources.files("vhoi").joinpath(
            "schemas/annotation_schema.json"
        ).read_text()
    )
    return jsonschema.Draft202012Validator(schema)


def validate_annotation_json(doc: dict) -> None:
    errors = sorted(_annotation_validator().iter_errors(doc), key=lambda e: e.json_path)
    if errors:
        first = errors[0]
        raise AnnotationError(f"schema violation at {first.json_path}: {first.message}")


def save_annotations(ann: AnnotationSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(annotation_to_json(ann), sort_keys=True))


def load_annotations(path: str | Path) -> AnnotationSet:
    doc = json.loads(Path(path).read_text())
    validate_annotation_json(doc)
    return annotation_from_json(doc)


def taxonomy_to_json(tax: Taxonomy) -> dict:
    return {
        "predicates": [
            {"name": n, "temporal": bool(t)} for n, t in zip(tax.predicates, tax.temporal)
        ],
        "object_categories": list(tax.object_categories),
        "triplets": [
            {
                "id": tid,
                "subject": PERSON_CATEGORY,
                "predicate": tax.predicates[p],
                "object": tax.object_categories[o],
                "train_count": c,
            }
            for tid, (p, o, c) in enumerate(tax.triplets)
        ],
    }


def taxonomy_from_json(doc: dict) -> Taxonomy:
    predicates = [str(p["name"]) for p in doc["predicates"]]
    temporal = [bool(p["temporal"]) for p in doc["predicates"]]
    categories = [str(c) for c in doc["object_categories"]]
    triplets = []
    for t in sorted(doc.get("triplets", []), key=lambda t: t["id"]):
        triplets.append(
            (
                predicates.index(t["predicate"]),
                categories.index(t["object"]),
                int(t.get("train_count", 0)),
            )
        )
    return Taxonomy(predicates, temporal, categories, triplets)


def save_taxonomy(tax: Taxonomy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(taxonomy_to_json(tax), sort_keys=True))


def load_taxonomy(path: str | Path) -> Taxonomy:
    return taxonomy_from_json(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# Keyframe sampling and label conversion


def keyframe_candidates(video: VideoAnnotation) -> list[int]:
    """Frame indices at 1 Hz: round(k * fps) for k = 0, 1, ... within the video."""
    out: list[int] = []
    k = 0
    while True:
        idx = int(math.floor(k * video.fps + 0.5))
        if idx >= video.frame_count:
            return out
        if not out or idx > out[-1]:
            out.append(idx)
        k += 1


def _present_instances(video: VideoAnnotation, frame: int) -> list[str]:
    return sorted(iid for iid in video.instances if (frame, iid) in video.boxes)


def _has_valid_pair(video: VideoAnnotation, frame: int) -> bool:
    present = _present_instances(video, frame)
    humans = [i for i in present if video.instances[i] == PERSON_CATEGORY]
    return len(humans) >= 1 and len(present) >= 2


def _has_active_relation(video: VideoAnnotation, frame: int) -> bool:
    for rel in video.relations:
        if (
            rel.covers(frame)
            and (frame, rel.subject_id) in video.boxes
            and (frame, rel.object_id) in video.boxes
        ):
            return True
    return False


def sample_keyframes(
    ann: AnnotationSet,
    mode: str = "train",
    require_active_relation: bool | None = None,
) -> list[tuple[str, int]]:
    """1 Hz keyframes that carry at least one usable human-object pair.

    Training keeps keyframes with an active relation (both endpoints boxed);
    evaluation keeps any keyframe with a co-present person and other
    instance. ``require_active_relation`` overrides the mode default.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown keyframe mode {mode!r}")
    if require_active_relation is None:
        require_active_relation = mode == "train"
    out: list[tuple[str, int]] = []
    for video in ann.videos:
        for frame in keyframe_candidates(video):
            if not _has_valid_pair(video, frame):
                continue
            if require_active_relation and not _has_active_relation(video, frame):
                continue
            out.append((video.video_id, frame))
    return out


def convert_labels(
    video: VideoAnnotation, keyframe: int, num_predicates: int
) -> tuple[list[str], list[tuple[int, int]], np.ndarray]:
    """Pairs and the binary pair x predicate matrix at one keyframe.

    Returns (present instance ids sorted, (human_idx, object_idx) pairs into
    that list, gt matrix). gt[p, c] is 1 iff some relation with predicate c
    between the pair's instances covers the keyframe.
    """
    present = _present_instances(video, keyframe)
    index = {iid: i for i, iid in enumerate(present)}
    pairs = [
        (index[h], index[o])
        for h in present
        if video.instances[h] == PERSON_CATEGORY
        for o in present
        if o != h
    ]
    gt = np.zeros((len(pairs), num_predicates))
    pair_lookup = {(present[h], present[o]): row for row, (h, o) in enumerate(pairs)}
    for rel in video.relations:
        if not rel.covers(keyframe):
            continue
        for iid in (rel.subject_id, rel.object_id):
            if iid not in video.instances:
                raise AnnotationError(
                    f"relation ({rel.subject_id!r}, {rel.predicate_id}, "
                    f"{rel.object_id!r}) references missing instance {iid!r}"
                )
        key = (rel.subject_id, rel.object_id)
        if key in pair_lookup:
            if not 0 <= rel.predicate_id < num_predicates:
                raise AnnotationError(
                    f"relation predicate {rel.predicate_id} outside taxonomy "
                    f"of size {num_predicates}"
                )
            gt[pair_lookup[key], rel.predicate_id] = 1.0
    return present, pairs, gt


@dataclass
class RaritySplit:
    rare: set[int]
    nonrare: set[int]
    counts: dict[int, int]

    def to_json(self) -> dict:
        return {
            "rare": sorted(self.rare),
            "nonrare": sorted(self.nonrare),
            "counts": {str(k): v for k, v in sorted(self.counts.items())},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RaritySplit":
        return cls(
            rare=set(doc["rare"]),
            nonrare=set(doc["nonrare"]),
            counts={int(k): int(v) for k, v in doc["counts"].items()},
        )


RARE_THRESHOLD = 25


def triplet_counts(train_ann: AnnotationSet, taxonomy: Taxonomy) -> dict[int, int]:
    """Instance counts per triplet over training keyframe labels."""
    counts = {tid: 0 for tid in range(len(taxonomy.triplets))}
    for video_id, frame in sample_keyframes(train_ann, mode="train"):
        video = train_ann.video(video_id)
        present, pairs, gt = convert_labels(video, frame, taxonomy.num_predicates)
        for row, (_h, o) in enumerate(pairs):
            ocat = taxonomy.category_index(video.instances[present[o]])
            for pred in np.flatnonzero(gt[row]):
                tid = taxonomy.triplet_id(int(pred), ocat)
                if tid is not None:
                    counts[tid] += 1
    return counts


def rarity_split(train_ann: AnnotationSet, taxonomy: Taxonomy) -> RaritySplit:
    """Triplets with fewer than 25 training instances are Rare; the rest Non-rare."""
    counts = triplet_counts(train_ann, taxonomy)
    rare = {tid for tid, c in counts.items() if c < RARE_THRESHOLD}
    nonrare = set(counts) - rare
    return RaritySplit(rare=rare, nonrare=nonrare, counts=counts)


def rarity_from_taxonomy(taxonomy: Taxonomy) -> RaritySplit:
    """Rarity split read off the taxonomy's recorded training counts."""
    counts = {tid: c for tid, (_p, _o, c) in enumerate(taxonomy.triplets)}
    rare = {tid for tid, c in counts.items() if c < RARE_THRESHOLD}
    return RaritySplit(rare=rare, nonrare=set(counts) - rare, counts=counts)


def _observed_triplets(
    ann: AnnotationSet, taxonomy: Taxonomy, mode: str
) -> dict[tuple[int, int], int]:
    observed: dict[tuple[int, int], int] = {}
    for video_id, frame in sample_keyframes(ann, mode=mode):
        video = ann.video(video_id)
        present, pairs, gt = convert_labels(video, frame, taxonomy.num_predicates)
        for row, (_h, o) in enumerate(pairs):
            ocat = taxonomy.category_index(video.instances[present[o]])
            for pred in np.flatnonzero(gt[row]):
                key = (int(pred), ocat)
                observed[key] = observed.get(key, 0) + 1
    return observed


def build_taxonomy(
    base: Taxonomy, train_ann: AnnotationSet, extra_anns: list[AnnotationSet] = ()
) -> Taxonomy:
    """Fill the triplet table from observed data and record training counts.

    The table covers every triplet seen in the training keyframes or in any
    extra (e.g. validation) annotation set; triplets absent from training
    carry count 0 and therefore land in the Rare split.
    """
    train_obs = _observed_triplets(train_ann, base, "train")
    keys = set(train_obs)
    for ann in extra_anns:
        keys |= set(_observed_triplets(ann, base, "eval"))
    triplets = [(p, o, train_obs.get((p, o), 0)) for p, o in sorted(keys)]
    return Taxonomy(
        list(base.predicates), list(base.temporal), list(base.object_categories), triplets
    )


# --------------------------------------------------------------------------
# Keyframe samples


@dataclass
class KeyframeSample:
    """One training/evaluation unit: a T-frame window centered at a keyframe."""

    video_id: str
    keyframe_index: int
    frames: np.ndarray                      # (3, T, H, W) float64 in [0, 1]
    trajectories: list[Trajectory]          # filled; sorted by instance id
    poses: dict[str, list[Pose | None]]     # human instance id -> per-window poses
    pairs: list[PairProposal]
    gt: np.ndarray                          # (num_pairs, C) binary
    frame_w: int
    frame_h: int

    @property
    def segment_len(self) -> int:
        return self.frames.shape[1]

    @property
    def center(self) -> int:
        return self.segment_len // 2

    def human_indices(self, person_category_id: int) -> list[int]:
        return [
            i for i, t in enumerate(self.trajectories) if t.category_id == person_category_id
        ]


def window_frame_indices(keyframe: int, segment_len: int, frame_count: int) -> list[int]:
    """Window of segment_len frames centered at the keyframe, edge-clamped."""
    center = segment_len // 2
    return [
        min(max(keyframe - center + i, 0), frame_count - 1) for i in range(segment_len)
    ]


def build_sample(
    video: VideoAnnotation,
    frames_rgb: np.ndarray,
    keyframe: int,
    segment_len: int,
    taxonomy: Taxonomy,
    oracle: bool = True,
) -> KeyframeSample:
    """Assemble the model input for one keyframe from whole-video data.

    ``frames_rgb`` is the (frame_count, H, W, 3) uint8 video. Trajectories of
    instances boxed at the keyframe are cut to the window and whole-image
    filled where boxes are missing; in oracle mode a missing keyframe box is
    an annotation error.
    """
    if frames_rgb.shape[0] != video.frame_count:
        raise AnnotationError(
            f"video {video.video_id!r}: {frames_rgb.shape[0]} frames on disk, "
            f"annotation says {video.frame_count}"
        )
    window = window_frame_indices(keyframe, segment_len, video.frame_count)
    center = segment_len // 2

    present, pairs, gt = convert_labels(video, keyframe, taxonomy.num_predicates)
    trajectories: list[Trajectory] = []
    poses: dict[str, list[Pose | None]] = {}
    for iid in present:
        boxes = []
        valid = []
        for f in window:
            box = video.boxes.get((f, iid))
            boxes.append(box if box is not None else Box(0, 0, 0, 0))
            valid.append(box is not None)
        traj = Trajectory(
            instance_id=iid,
            category_id=taxonomy.category_index(video.instances[iid]),
            boxes=boxes,
            valid=valid,
        )
        trajectories.append(
            fill_trajectory(
                traj, video.width, video.height,
                require_index=center if oracle else None,
            )
        )
        if video.instances[iid] == PERSON_CATEGORY:
            poses[iid] = [video.poses.get((f, iid)) for f in window]

    clip = frames_rgb[window].astype(np.float64) / 255.0       # (T, H, W, 3)
    frames = np.ascontiguousarray(clip.transpose(3, 0, 1, 2))  # (3, T, H, W)
    return KeyframeSample(
        video_id=video.video_id,
        keyframe_index=keyframe,
        frames=frames,
        trajectories=trajectories,
        poses=poses,
        pairs=[PairProposal(h, o) for h, o in pairs],
        gt=gt,
        frame_w=video.width,
        frame_h=video.height,
    )


# --------------------------------------------------------------------------
# Augmentation


@dataclass
class AugmentConfig:
    scale_min: float = 1.0      # shorter-side scale range, relative
    scale_max: float = 1.25
    flip_prob: float = 0.5
    max_crop_tries: int = 10


def _resize_sample_frames(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, t, _, _ = frames.shape
    out = np.empty((c, t, out_h, out_w))
    for i in range(t):
        out[:, i] = bilinear_resize(frames[:, i], out_h, out_w)
    return out


def _scale_box(box: Box, fx: float, fy: float) -> Box:
    return Box(box.x1 * fx, box.y1 * fy, box.x2 * fx, box.y2 * fy)


def _flip_box(box: Box, width: float) -> Box:
    return Box(width - box.x2, box.y1, width - box.x1, box.y2)


def _crop_box(box: Box, ox: float, oy: float, w: float, h: float) -> Box:
    x1 = min(max(box.x1 - ox, 0.0), w)
    y1 = min(max(box.y1 - oy, 0.0), h)
    x2 = min(max(box.x2 - ox, 0.0), w)
    y2 = min(max(box.y2 - oy, 0.0), h)
    return Box(x1, y1, x2, y2)


def _transform_pose(
    pose: Pose | None, fx: float, fy: float, flip: bool, width: float,
    ox: float, oy: float, out_w: float, out_h: float,
) -> Pose | None:
    if pose is None:
        return None
    kp = pose.keypoints.copy()
    kp[:, 0] *= fx
    kp[:, 1] *= fy
    if flip:
        kp[:, 0] = width - kp[:, 0]
    kp[:, 0] = np.clip(kp[:, 0] - ox, 0.0, out_w)
    kp[:, 1] = np.clip(kp[:, 1] - oy, 0.0, out_h)
    return Pose(kp, pose.valid.copy())


def augment(
    sample: KeyframeSample, rng: np.random.Generator, cfg: AugmentConfig | None = None
) -> KeyframeSample:
    """Random scale / horizontal flip / crop back to the original frame size.

    Boxes, poses, and trajectories move with the pixels; labels are
    untouched. A crop that would erase every human keyframe box is resampled
    (bounded tries, then center crop).
    """
    cfg = cfg or AugmentConfig()
    h, w = sample.frames.shape[2], sample.frames.shape[3]
    short = min(h, w)
    target = rng.uniform(cfg.scale_min, cfg.scale_max) * short
    f = target / short
    new_h, new_w = int(round(h * f)), int(round(w * f))
    fx, fy = new_w / w, new_h / h
    flip = bool(rng.random() < cfg.flip_prob)

    frames = _resize_sample_frames(sample.frames, new_h, new_w)
    if flip:
        frames = frames[:, :, :, ::-1].copy()

    def place_boxes(ox: float, oy: float) -> list[Trajectory]:
        out = []
        for traj in sample.trajectories:
            boxes = []
            for box in traj.boxes:
                b = _scale_box(box, fx, fy)
                if flip:
                    b = _flip_box(b, new_w)
                boxes.append(_crop_box(b, ox, oy, w, h))
            out.append(
                Trajectory(traj.instance_id, traj.category_id, boxes, [True] * len(traj))
            )
        return out

    max_ox, max_oy = new_w - w, new_h - h
    chosen = None
    for _ in range(cfg.max_crop_tries):
        ox = int(rng.integers(0, max_ox + 1)) if max_ox > 0 else 0
        oy = int(rng.integers(0, max_oy + 1)) if max_oy > 0 else 0
        trajs = place_boxes(ox, oy)
        keyframe_ok = any(
            t.boxes[sample.center].area > 0.0
            for t in trajs
            if t.instance_id in sample.poses
        )
        if keyframe_ok:
            chosen = (ox, oy, trajs)
            break
    if chosen is None:
        ox, oy = max_ox // 2, max_oy // 2
        chosen = (ox, oy, place_boxes(ox, oy))
    ox, oy, trajectories = chosen
    cropped = frames[:, :, oy : oy + h, ox : ox + w]

    poses = {
        iid: [
            _transform_pose(p, fx, fy, flip, new_w, ox, oy, w, h)
            for p in pose_list
        ]
        for iid, pose_list in sample.poses.items()
    }
    return KeyframeSample(
        video_id=sample.video_id,
        keyframe_index=sample.keyframe_index,
        frames=cropped,
        trajectories=trajectories,
        poses=poses,
        pairs=list(sample.pairs),
        gt=sample.gt.copy(),
        frame_w=w,
        frame_h=h,
    )


def resize_shorter_side(sample: KeyframeSample, target: int) -> KeyframeSample:
    """Inference-time resize: scale so the shorter side equals ``target``."""
    h, w = sample.frames.shape[2], sample.frames.shape[3]
    f = target / min(h, w)
    new_h, new_w = int(round(h * f)), int(round(w * f))
    if (new_h, new_w) == (h, w):
        return sample
    fx, fy = new_w / w, new_h / h
    frames = _resize_sample_frames(sample.frames, new_h, new_w)
    trajectories = [
        Trajectory(
            t.instance_id,
            t.category_id,
            [_scale_box(b, fx, fy) for b in t.boxes],
            [True] * len(t),
        )
        for t in sample.trajectories
    ]
    poses = {
        iid: [
            _transform_pose(p, fx, fy, False, new_w, 0.0, 0.0, new_w, new_h)
            for p in pose_list
        ]
        for iid, pose_list in sample.poses.items()
    }
    return KeyframeSample(
        video_id=sample.video_id,
        keyframe_index=sample.keyframe_index,
        frames=frames,
        trajectories=trajectories,
        poses=poses,
        pairs=list(sample.pairs),
        gt=sample.gt.copy(),
        frame_w=new_w,
        frame_h=new_h,
    )
