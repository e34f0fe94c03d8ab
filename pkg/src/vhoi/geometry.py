"""Axis-aligned box arithmetic and trajectory utilities.

Boxes use corner ``(x1, y1, x2, y2)`` coordinates in a continuous pixel
space; areas carry no "+1" pixel correction so that the geometry matches the
continuous bilinear-sampling convention used by the feature pooling code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


class InvalidBoxError(ValueError):
    pass


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """One axis-aligned rectangle with x1 <= x2, y1 <= y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise InvalidBoxError(f"non-finite box coordinate in {self.astuple()}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise InvalidBoxError(f"box corners out of order: {self.astuple()}")

    def astuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def contains_point(self, x: float, y: float) -> bool:
        return self.x1 <= x <= self.x2 and self.y1 <= y <= self.y2


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes; 0.0 when the union is empty.

    Zero-area boxes are tolerated (some trackers emit them) and always
    contribute IoU 0.
    """
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def union_box(a: Box, b: Box) -> Box:
    """Smallest box containing both inputs."""
    return Box(
        min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2)
    )


@dataclass
class Trajectory:
    """Per-frame boxes of one instance across a T-frame segment.

    ``boxes`` and ``valid`` always have the same length; an invalid entry
    means the instance had no annotation (or no detection) at that frame.
    """

    instance_id: str
    category_id: int
    boxes: list[Box]
    valid: list[bool] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.valid:
            self.valid = [True] * len(self.boxes)
        if len(self.boxes) != len(self.valid):
            raise TrajectoryError(
                f"trajectory {self.instance_id!r}: {len(self.boxes)} boxes "
                f"but {len(self.valid)} validity flags"
            )

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def all_valid(self) -> bool:
        return all(self.valid)


@dataclass(frozen=True)
class PairProposal:
    """Indices of a (human, object) trajectory pair within one sample."""

    human_index: int
    object_index: int

    def __post_init__(self) -> None:
        if self.human_index == self.object_index:
            raise ValueError("pair proposal must reference two distinct instances")


def fill_trajectory(
    traj: Trajectory,
    frame_w: float,
    frame_h: float,
    require_index: int | None = None,
) -> Trajectory:
    """Replace invalid entries with the whole-image box and mark them valid.

    ``require_index`` names an entry (the keyframe) that must already be
    valid; a missing keyframe box signals a corrupt annotation and raises.
    Idempotent: a fully valid trajectory is returned unchanged (new object,
    same values).
    """
    if frame_w <= 0 or frame_h <= 0:
        raise ValueError(f"frame dimensions must be positive, got {frame_w}x{frame_h}")
    if require_index is not None and not traj.valid[require_index]:
        raise TrajectoryError(
            f"trajectory {traj.instance_id!r}: keyframe entry {require_index} is invalid"
        )
    whole = Box(0.0, 0.0, float(frame_w), float(frame_h))
    boxes = [b if ok else whole for b, ok in zip(traj.boxes, traj.valid)]
    return Trajectory(
        instance_id=traj.instance_id,
        category_id=traj.category_id,
        boxes=boxes,
        valid=[True] * len(traj),
    )
