"""Deterministic synthetic benchmark of moving rectangles.

Videos contain one person and one or two objects on parameterized paths;
relation labels fall out of the paths themselves (kinematic definitions
below), so every label can be re-derived from the emitted boxes:

* ``towards``: center distance strictly decreasing over the interval;
* ``away``: strictly increasing;
* ``next_to``: distance below a threshold fraction of the frame throughout;
* ``hold``: object box center inside the person box throughout;
* ``wave_at``: the person's arm is raised throughout (visible only in the
  pose annotation, not in the rendered pixels).

Every ``towards`` video is emitted together with its exact time-reversal,
whose labels swap to ``away``. The center keyframes of such a twin pair show
pixel-identical frames with opposite labels, so any single-keyframe decision
function is reduced to guessing between the two classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import (
    AnnotationSet,
    RelationInterval,
    Taxonomy,
    VideoAnnotation,
)
from .features import NUM_KEYPOINTS, Pose
from .geometry import Box

DEFAULT_PREDICATES: list[tuple[str, bool]] = [
    ("towards", True),
    ("away", True),
    ("next_to", False),
    ("hold", False),
    ("wave_at", False),
    ("push", True),
    ("lean_on", False),
]

DEFAULT_CATEGORIES = ["person", "block", "ball", "cart", "toy"]

CATEGORY_COLORS = {
    "person": (70, 190, 80),
    "block": (210, 70, 60),
    "ball": (70, 100, 220),
    "cart": (225, 190, 60),
    "toy": (170, 70, 210),
}
BACKGROUND_COLOR = (28, 28, 32)


def default_taxonomy() -> Taxonomy:
    names = [n for n, _ in DEFAULT_PREDICATES]
    flags = [f for _, f in DEFAULT_PREDICATES]
    return Taxonomy(names, flags, list(DEFAULT_CATEGORIES))


@dataclass
class SyntheticSpec:
    seed: int = 0
    num_videos: int = 200
    frame_width: int = 64
    frame_height: int = 64
    fps: float = 8.0
    duration_s: float = 3.0
    next_to_tau: float = 0.20                       # fraction of min frame side
    approach_speed: tuple[float, float] = (0.008, 0.0115)  # fraction per frame
    glide_amplitude: tuple[float, float] = (0.04, 0.07)    # oscillation, fraction
    predicate_kit: tuple[str, ...] = ("towards", "away", "next_to", "hold", "wave_at")

    def __post_init__(self) -> None:
        if self.frame_width < 16 or self.frame_height < 16:
            raise ValueError("synthetic frames must be at least 16x16")
        if self.num_videos < 1 or self.fps <= 0 or self.duration_s <= 0:
            raise ValueError("num_videos, fps, and duration must be positive")
        known = {n for n, _ in DEFAULT_PREDICATES}
        unknown = set(self.predicate_kit) - known
        if unknown:
            raise ValueError(f"predicate kit entries {sorted(unknown)} not in taxonomy")

    @property
    def frame_count(self) -> int:
        return int(round(self.fps * self.duration_s)) + 1

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "num_videos": self.num_videos,
            "frame_width": self.frame_width,
            "frame_height": self.frame_height,
            "fps": self.fps,
            "duration_s": self.duration_s,
            "next_to_tau": self.next_to_tau,
            "approach_speed": list(self.approach_speed),
            "glide_amplitude": list(self.glide_amplitude),
            "predicate_kit": list(self.predicate_kit),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticSpec":
        kwargs = dict(doc)
        if "approach_speed" in kwargs:
            kwargs["approach_speed"] = tuple(kwargs["approach_speed"])
        if "glide_amplitude" in kwargs:
            kwargs["glide_amplitude"] = tuple(kwargs["glide_amplitude"])
        if "predicate_kit" in kwargs:
            kwargs["predicate_kit"] = tuple(kwargs["predicate_kit"])
        unknown = set(kwargs) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**kwargs)


@dataclass
class _Actor:
    instance_id: str
    category: str
    centers: np.ndarray          # (L, 2) float
    half_w: float
    half_h: float

    def boxes(self) -> list[Box]:
        return [
            Box(cx - self.half_w, cy - self.half_h, cx + self.half_w, cy + self.half_h)
            for cx, cy in self.centers
        ]


# Keypoint anchors relative to the person box: (x fraction, y fraction).
_POSE_ANCHORS = np.array(
    [
        (0.50, 0.08),  # nose
        (0.44, 0.05), (0.56, 0.05),  # eyes
        (0.38, 0.07), (0.62, 0.07),  # ears
        (0.30, 0.22), (0.70, 0.22),  # shoulders
        (0.24, 0.40), (0.76, 0.40),  # elbows
        (0.20, 0.58), (0.80, 0.58),  # wrists
        (0.36, 0.55), (0.64, 0.55),  # hips
        (0.34, 0.76), (0.66, 0.76),  # knees
        (0.33, 0.97), (0.67, 0.97),  # ankles
    ]
)
# Raised right arm: elbow up beside the head, wrist above it.
_RAISED_RIGHT = {8: (0.80, 0.10), 10: (0.86, -0.10)}


def _pose_for_box(box: Box, arm_raised: bool) -> Pose:
    anchors = _POSE_ANCHORS.copy()
    if arm_raised:
        for idx, (fx, fy) in _RAISED_RIGHT.items():
            anchors[idx] = (fx, fy)
    kp = np.empty((NUM_KEYPOINTS, 2))
    kp[:, 0] = box.x1 + anchors[:, 0] * box.width
    kp[:, 1] = box.y1 + anchors[:, 1] * box.height
    return Pose(kp, np.ones(NUM_KEYPOINTS, dtype=bool))


def _labels_for_pair(
    person_boxes: list[Box],
    object_boxes: list[Box],
    arm_raised: bool,
    tau_px: float,
    kit: tuple[str, ...],
) -> set[str]:
    pc = np.array([b.center for b in person_boxes])
    oc = np.array([b.center for b in object_boxes])
    dist = np.linalg.norm(pc - oc, axis=1)
    diffs = np.diff(dist)
    labels: set[str] = set()
    if diffs.size and np.all(diffs < 0):
        labels.add("towards")
    if diffs.size and np.all(diffs > 0):
        labels.add("away")
    if np.max(dist) < tau_px:
        labels.add("next_to")
    if all(p.contains_point(*o.center) for p, o in zip(person_boxes, object_boxes)):
        labels.add("hold")
    if arm_raised:
        labels.add("wave_at")
    return labels & set(kit)


def _fill_rect(img: np.ndarray, box: Box, color: tuple[int, int, int]) -> None:
    h, w = img.shape[:2]
    x_lo = max(int(math.ceil(box.x1 - 0.5)), 0)
    x_hi = min(int(math.floor(box.x2 - 0.5)), w - 1)
    y_lo = max(int(math.ceil(box.y1 - 0.5)), 0)
    y_hi = min(int(math.floor(box.y2 - 0.5)), h - 1)
    if x_lo <= x_hi and y_lo <= y_hi:
        img[y_lo : y_hi + 1, x_lo : x_hi + 1] = color


def _render(actors: list[_Actor], length: int, width: int, height: int) -> np.ndarray:
    frames = np.empty((length, height, width, 3), dtype=np.uint8)
    frames[:] = BACKGROUND_COLOR
    ordered = sorted(actors, key=lambda a: (a.category != "person", a.instance_id))
    for t in range(length):
        for actor in ordered:
            cx, cy = actor.centers[t]
            box = Box(cx - actor.half_w, cy - actor.half_h, cx + actor.half_w, cy + actor.half_h)
            _fill_rect(frames[t], box, CATEGORY_COLORS[actor.category])
    return frames


@dataclass
class _VideoDraft:
    actors: list[_Actor]
    arm_raised: bool


def _static_series(center: np.ndarray, length: int) -> np.ndarray:
    return np.tile(center, (length, 1))


def _glide_series(
    base: np.ndarray, direction: np.ndarray, amplitude: float, length: int
) -> np.ndarray:
    t = np.arange(length)
    phase = np.sin(2.0 * np.pi * t / (length - 1))
    return base[None, :] + amplitude * phase[:, None] * direction[None, :]


def _unit(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)])


class _Builder:
    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.m = min(spec.frame_width, spec.frame_height)
        self.length = spec.frame_count

    def _person_geometry(self) -> tuple[np.ndarray, float, float]:
        rng, m = self.rng, self.m
        base = np.array(
            [
                rng.uniform(0.46, 0.54) * self.spec.frame_width,
                rng.uniform(0.46, 0.54) * self.spec.frame_height,
            ]
        )
        half_w = rng.uniform(0.08, 0.11) * m
        half_h = rng.uniform(0.13, 0.17) * m
        return base, half_w, half_h

    def _object_half(self) -> float:
        return self.rng.uniform(0.05, 0.07) * self.m

    def _distractor(self, base: np.ndarray, iid: str) -> _Actor:
        rng, m = self.rng, self.m
        angle = rng.uniform(0.0, 2.0 * math.pi)
        dist = rng.uniform(0.33, 0.40) * m
        center = base + dist * _unit(angle)
        center[0] = np.clip(center[0], 0.09 * m, self.spec.frame_width - 0.09 * m)
        center[1] = np.clip(center[1], 0.09 * m, self.spec.frame_height - 0.09 * m)
        half = self._object_half()
        category = str(rng.choice(["block", "cart"]))
        return _Actor(iid, category, _static_series(center, self.length), half, half)

    def towards(self) -> _VideoDraft:
        rng, m = self.rng, self.m
        base, phw, phh = self._person_geometry()
        person = _Actor("h0", "person", _static_series(base, self.length), phw, phh)
        d0 = rng.uniform(0.28, 0.34) * m
        lo, hi = self.spec.approach_speed
        speed = rng.uniform(lo, hi) * m
        speed = min(speed, (d0 - 0.07 * m) / (self.length - 1))
        theta0 = rng.uniform(0.0, 2.0 * math.pi)
        drift = rng.uniform(-0.012, 0.012)
        t = np.arange(self.length)
        d = d0 - speed * t
        theta = theta0 + drift * t
        centers = base[None, :] + d[:, None] * np.stack(
            [np.cos(theta), np.sin(theta)], axis=1
        )
        half = self._object_half()
        category = str(rng.choice(["block", "ball"]))
        actors = [person, _Actor("o0", category, centers, half, half)]
        if rng.random() < 0.35:
            actors.append(self._distractor(base, "o1"))
        return _VideoDraft(actors, arm_raised=False)

    def _group(self, offset_frac: float, bob_frac: float, hold: bool) -> _VideoDraft:
        rng, m = self.rng, self.m
        base, phw, phh = self._person_geometry()
        lo, hi = self.spec.glide_amplitude
        amp = rng.uniform(lo, hi) * m
        direction = _unit(rng.uniform(0.0, 2.0 * math.pi))
        person_centers = _glide_series(base, direction, amp, self.length)
        person = _Actor("h0", "person", person_centers, phw, phh)
        if hold:
            off = np.array(
                [rng.uniform(-0.55, 0.55) * phw, rng.uniform(-0.55, 0.55) * phh]
            )
            obj_centers = person_centers + off[None, :]
        else:
            # side-by-side: a mostly horizontal offset keeps the object center
            # outside the (taller) person box, so next_to never implies hold
            side = float(rng.choice([0.0, math.pi]))
            off_dir = _unit(side + rng.uniform(-0.35, 0.35))
            off = offset_frac * m * off_dir
            perp = np.array([-off_dir[1], off_dir[0]])
            bob = _glide_series(np.zeros(2), perp, bob_frac * m, self.length)
            obj_centers = person_centers + off[None, :] + bob
        half = self._object_half()
        if hold:
            category = str(rng.choice(["ball"] * 6 + ["toy"]))
        else:
            category = str(rng.choice(["block", "cart"]))
        actors = [person, _Actor("o0", category, obj_centers, half, half)]
        if not hold and rng.random() < 0.35:
            actors.append(self._distractor(base, "o1"))
        return _VideoDraft(actors, arm_raised=False)

    def next_to(self) -> _VideoDraft:
        return self._group(self.rng.uniform(0.13, 0.16), 0.015, hold=False)

    def wave(self) -> _VideoDraft:
        draft = self._group(self.rng.uniform(0.13, 0.16), 0.015, hold=False)
        draft.arm_raised = True
        return draft

    def hold(self) -> _VideoDraft:
        return self._group(0.0, 0.0, hold=True)

    def none(self) -> _VideoDraft:
        rng, m = self.rng, self.m
        base, phw, phh = self._person_geometry()
        person = _Actor("h0", "person", _static_series(base, self.length), phw, phh)
        actors = [person, self._distractor(base, "o0")]
        return _VideoDraft(actors, arm_raised=False)


def _draft_to_video(
    draft: _VideoDraft, video_id: str, spec: SyntheticSpec, taxonomy: Taxonomy
) -> tuple[VideoAnnotation, np.ndarray]:
    length = spec.frame_count
    tau_px = spec.next_to_tau * min(spec.frame_width, spec.frame_height)
    boxes: dict[tuple[int, str], Box] = {}
    poses: dict[tuple[int, str], Pose] = {}
    instances: dict[str, str] = {}
    actor_boxes: dict[str, list[Box]] = {}
    for actor in draft.actors:
        instances[actor.instance_id] = actor.category
        blist = actor.boxes()
        actor_boxes[actor.instance_id] = blist
        for t, box in enumerate(blist):
            boxes[(t, actor.instance_id)] = box
            if actor.category == "person":
                poses[(t, actor.instance_id)] = _pose_for_box(box, draft.arm_raised)

    relations: list[RelationInterval] = []
    humans = [a.instance_id for a in draft.actors if a.category == "person"]
    for h in humans:
        for actor in draft.actors:
            if actor.instance_id == h:
                continue
            labels = _labels_for_pair(
                actor_boxes[h],
                actor_boxes[actor.instance_id],
                draft.arm_raised,
                tau_px,
                spec.predicate_kit,
            )
            for name in sorted(labels):
                relations.append(
                    RelationInterval(
                        h, actor.instance_id, taxonomy.predicate_index(name), 0, length
                    )
                )

    video = VideoAnnotation(
        video_id=video_id,
        fps=spec.fps,
        width=spec.frame_width,
        height=spec.frame_height,
        frame_count=length,
        instances=instances,
        boxes=boxes,
        poses=poses,
        relations=relations,
    )
    video.validate()
    frames = _render(draft.actors, length, spec.frame_width, spec.frame_height)
    return video, frames


def _reverse_video(
    video: VideoAnnotation, frames: np.ndarray, video_id: str, spec: SyntheticSpec,
    taxonomy: Taxonomy, arm_raised: bool,
) -> tuple[VideoAnnotation, np.ndarray]:
    length = video.frame_count
    boxes = {(length - 1 - f, iid): box for (f, iid), box in video.boxes.items()}
    poses = {(length - 1 - f, iid): pose for (f, iid), pose in video.poses.items()}
    tau_px = spec.next_to_tau * min(spec.frame_width, spec.frame_height)
    humans = [i for i, cat in video.instances.items() if cat == "person"]
    relations: list[RelationInterval] = []
    for h in humans:
        for iid in video.instances:
            if iid == h:
                continue
            pb = [boxes[(t, h)] for t in range(length)]
            ob = [boxes[(t, iid)] for t in range(length)]
            labels = _labels_for_pair(pb, ob, arm_raised, tau_px, spec.predicate_kit)
            for name in sorted(labels):
                relations.append(
                    RelationInterval(h, iid, taxonomy.predicate_index(name), 0, length)
                )
    reversed_video = VideoAnnotation(
        video_id=video_id,
        fps=video.fps,
        width=video.width,
        height=video.height,
        frame_count=length,
        instances=dict(video.instances),
        boxes=boxes,
        poses=poses,
        relations=relations,
    )
    reversed_video.validate()
    return reversed_video, frames[::-1].copy()


_TEMPLATES = ["towards", "next_to", "hold", "wave", "none"]
_TEMPLATE_WEIGHTS = [0.34, 0.18, 0.16, 0.20, 0.12]


def generate_synthetic(
    spec: SyntheticSpec,
) -> tuple[AnnotationSet, dict[str, np.ndarray]]:
    """Render the dataset: annotations plus per-video uint8 RGB frames.

    Deterministic in ``spec`` alone: identical specs give byte-identical
    annotations and frames.
    """
    taxonomy = default_taxonomy()
    rng = np.random.default_rng(spec.seed)
    builder = _Builder(spec, rng)
    videos: list[VideoAnnotation] = []
    frames_by_video: dict[str, np.ndarray] = {}
    index = 0
    while len(videos) < spec.num_videos:
        template = str(rng.choice(_TEMPLATES, p=_TEMPLATE_WEIGHTS))
        if template == "towards" and len(videos) + 2 > spec.num_videos:
            template = "next_to"
        draft = getattr(builder, template)()
        video_id = f"v{index:04d}"
        index += 1
        video, frames = _draft_to_video(draft, video_id, spec, taxonomy)
        videos.append(video)
        frames_by_video[video_id] = frames
        if template == "towards":
            twin, twin_frames = _reverse_video(
                video, frames, video_id + "r", spec, taxonomy, draft.arm_raised
            )
            videos.append(twin)
            frames_by_video[video_id + "r"] = twin_frames
    return AnnotationSet(videos), frames_by_video
