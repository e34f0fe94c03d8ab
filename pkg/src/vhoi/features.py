"""Temporal feature extractors over backbone feature maps.

Three families live here:

* correctly-localized visual features: per-frame RoIAlign along a trajectory
  followed by temporal averaging (``toi_pool``);
* the conventional order it corrects: temporal averaging of the map followed
  by RoIAlign at the keyframe box (``naive_temporal_roi_pool``), which reads
  the same spatial location at every timestep and picks up background or
  other instances whenever the target moves;
* masking pose features: rasterized skeleton plus dual human/object spatial
  masks, encoded by two 3-D conv layers.

RoIAlign geometry: boxes are given in frame coordinates and scaled by the
map's ``spatial_scale``; a continuous coordinate ``c`` maps to array index
``c - 0.5`` (half-pixel convention); every bin averages ``samples_per_bin**2``
bilinear samples on a regular sub-grid; out-of-bounds samples read 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .geometry import Box, Trajectory
from .tensor import Tensor, constant

logger = logging.getLogger(__name__)

NUM_KEYPOINTS = 17


@dataclass
class FeatureMap:
    """Backbone output (d, T, H', W') plus its resolution ratio to the frame."""

    tensor: Tensor
    spatial_scale: float

    def __post_init__(self) -> None:
        if self.tensor.ndim != 4:
            raise ops.ShapeError(f"feature map must be 4-D, got {self.tensor.shape}")
        if not 0.0 < self.spatial_scale <= 1.0:
            raise ValueError(f"spatial_scale must be in (0, 1], got {self.spatial_scale}")

    @property
    def num_frames(self) -> int:
        return self.tensor.shape[1]

    def frame(self, t: int) -> Tensor:
        return ops.take_index(self.tensor, 1, t)


@dataclass
class PooledFeature:
    """RoI-pooled feature of shape (d, h, w)."""

    tensor: Tensor


@dataclass
class Pose:
    """17 keypoints in frame pixel coordinates with per-joint validity."""

    keypoints: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.keypoints.shape != (NUM_KEYPOINTS, 2):
            raise ValueError(f"pose needs {NUM_KEYPOINTS}x2 keypoints, got {self.keypoints.shape}")
        if self.valid.shape != (NUM_KEYPOINTS,):
            raise ValueError(f"pose needs {NUM_KEYPOINTS} validity flags, got {self.valid.shape}")


@dataclass
class SkeletonEdgeTable:
    """Ordered joint pairs with the distinct value each line is drawn in."""

    edges: list[tuple[int, int, float]]

    def __post_init__(self) -> None:
        values = [v for _, _, v in self.edges]
        if len(set(values)) != len(values):
            raise ValueError("skeleton edge values must be distinct")
        for a, b, v in self.edges:
            if not (0 <= a < NUM_KEYPOINTS and 0 <= b < NUM_KEYPOINTS):
                raise ValueError(f"edge ({a},{b}) references a joint outside [0,{NUM_KEYPOINTS})")
            if not 0.0 < v <= 1.0:
                raise ValueError(f"edge value {v} outside (0, 1]")


_COCO_EDGE_PAIRS = [
    (0, 1), (0, 2), (1, 3), (2, 4),          # nose - eyes - ears
    (5, 7), (7, 9), (6, 8), (8, 10),         # shoulders - elbows - wrists
    (11, 13), (13, 15), (12, 14), (14, 16),  # hips - knees - ankles
    (5, 6), (11, 12), (5, 11), (6, 12),      # torso links
]


def coco_skeleton() -> SkeletonEdgeTable:
    """The 16-edge COCO-17 skeleton, edge i drawn with value (i+1)/16."""
    edges = [(a, b, (i + 1) / 16.0) for i, (a, b) in enumerate(_COCO_EDGE_PAIRS)]
    return SkeletonEdgeTable(edges)


def _sample_positions(lo: float, extent: float, out_bins: int, spb: int) -> np.ndarray:
    """Continuous sample coordinates for out_bins bins of spb samples each."""
    bin_size = extent / out_bins
    bins = np.repeat(np.arange(out_bins, dtype=np.float64), spb)
    sub = np.tile((np.arange(spb, dtype=np.float64) + 0.5) / spb, out_bins)
    return lo + (bins + sub) * bin_size


def roi_align(
    fmap: Tensor,
    box: Box,
    out_h: int,
    out_w: int,
    samples_per_bin: int = 2,
    spatial_scale: float = 1.0,
) -> PooledFeature:
    """Average-of-bilinear-samples pooling of one (d, H, W) map over a box."""
    if fmap.ndim != 3:
        raise ops.ShapeError(f"roi_align expects a (d,H,W) map, got {fmap.shape}")
    if out_h < 1 or out_w < 1 or samples_per_bin < 1:
        raise ValueError("output size and samples_per_bin must be positive")
    d, height, width = fmap.shape
    x1 = box.x1 * spatial_scale
    y1 = box.y1 * spatial_scale
    w = (box.x2 - box.x1) * spatial_scale
    h = (box.y2 - box.y1) * spatial_scale
    if w <= 0.0 or h <= 0.0:
        logger.warning("roi_align over degenerate box %s: returning zeros", box.astuple())
        return PooledFeature(constant(np.zeros((d, out_h, out_w))))

    spb = samples_per_bin
    # continuous coordinate c sits at array index c - 0.5
    iy = _sample_positions(y1, h, out_h, spb) - 0.5
    ix = _sample_positions(x1, w, out_w, spb) - 0.5
    ny, nx = iy.size, ix.size

    y0 = np.floor(iy).astype(np.int64)
    x0 = np.floor(ix).astype(np.int64)
    fy = iy - y0
    fx = ix - x0
    # corner index/weight pairs along each axis; out-of-bounds weight is 0
    ys = np.stack([y0, y0 + 1])
    xs = np.stack([x0, x0 + 1])
    wy = np.stack([1.0 - fy, fy]) * ((ys >= 0) & (ys < height))
    wx = np.stack([1.0 - fx, fx]) * ((xs >= 0) & (xs < width))
    ysc = np.clip(ys, 0, height - 1)
    xsc = np.clip(xs, 0, width - 1)

    # (2,2,ny,nx) grids of corner weights and flat spatial indices
    weights = wy[:, None, :, None] * wx[None, :, None, :]
    flat_idx = ysc[:, None, :, None] * width + xsc[None, :, None, :]
    flat_idx = np.broadcast_to(flat_idx, weights.shape)

    map2d = fmap.data.reshape(d, height * width)
    sampled = np.einsum(
        "cks,ks->cs", map2d[:, flat_idx.reshape(4, -1)], weights.reshape(4, -1)
    )
    out_data = sampled.reshape(d, out_h, spb, out_w, spb).mean(axis=(2, 4))

    def backward(g: np.ndarray) -> None:
        if not fmap.needs_grad:
            return
        gs = np.repeat(np.repeat(g, spb, axis=1), spb, axis=2) / (spb * spb)
        contrib = gs.reshape(d, 1, ny * nx) * weights.reshape(1, 4, ny * nx)
        idx = (
            np.arange(d, dtype=np.int64)[:, None, None] * (height * width)
            + flat_idx.reshape(1, 4, ny * nx)
        )
        gflat = np.zeros(d * height * width)
        np.add.at(gflat, idx.reshape(-1), contrib.reshape(-1))
        fmap.accumulate_grad(gflat.reshape(d, height, width))

    return PooledFeature(Tensor(out_data, (fmap,), backward))


def toi_pool(
    fmap: FeatureMap,
    traj: Trajectory,
    out_h: int,
    out_w: int,
    samples_per_bin: int = 2,
) -> PooledFeature:
    """Per-frame RoIAlign along the trajectory, then temporal mean."""
    t_len = fmap.num_frames
    if len(traj) != t_len:
        raise ops.ShapeError(
            f"trajectory length {len(traj)} does not match feature map frames {t_len}"
        )
    if not traj.all_valid:
        raise ValueError("toi_pool requires a filled trajectory (all entries valid)")
    acc: Tensor | None = None
    for t in range(t_len):
        pooled = roi_align(
            fmap.frame(t), traj.boxes[t], out_h, out_w, samples_per_bin, fmap.spatial_scale
        ).tensor
        acc = pooled if acc is None else ops.add(acc, pooled)
    assert acc is not None
    return PooledFeature(ops.scale(acc, 1.0 / t_len))


def naive_temporal_roi_pool(
    fmap: FeatureMap,
    keyframe_box: Box,
    out_h: int,
    out_w: int,
    samples_per_bin: int = 2,
) -> PooledFeature:
    """Temporal mean of the map first, then RoIAlign at the keyframe box.

    This is the conventional order; it is exact for static instances and
    wrong for moving ones, which is precisely what the pooling-order tests
    demonstrate.
    """
    averaged = ops.mean_pool(fmap.tensor, axes=1)
    return roi_align(averaged, keyframe_box, out_h, out_w, samples_per_bin, fmap.spatial_scale)


def _line_pixels(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Integer Bresenham segment, endpoints inclusive, 1 pixel wide."""
    pts = []
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return pts
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def rasterize_skeleton(
    pose: Pose | None, height: int, width: int, table: SkeletonEdgeTable
) -> np.ndarray:
    """Draw skeleton edges into a (1, H, W) mask, each edge in its own value.

    Edges are drawn in table order; later edges overwrite earlier ones where
    they cross. A missing pose (or no valid joints) yields an all-zero mask.
    """
    if height < 1 or width < 1:
        raise ValueError("mask dimensions must be positive")
    mask = np.zeros((1, height, width))
    if pose is None:
        return mask
    px = np.clip(np.round(pose.keypoints[:, 0]).astype(int), 0, width - 1)
    py = np.clip(np.round(pose.keypoints[:, 1]).astype(int), 0, height - 1)
    for a, b, value in table.edges:
        if pose.valid[a] and pose.valid[b]:
            for x, y in _line_pixels(px[a], py[a], px[b], py[b]):
                mask[0, y, x] = value
    return mask


def pair_spatial_masks(hbox: Box, obox: Box, height: int, width: int) -> np.ndarray:
    """(2, H, W) binary masks: pixel is 1 iff its center lies inside the box."""
    cx = np.arange(width) + 0.5
    cy = np.arange(height) + 0.5
    out = np.zeros((2, height, width))
    for ch, box in enumerate((hbox, obox)):
        in_x = (cx >= box.x1) & (cx <= box.x2)
        in_y = (cy >= box.y1) & (cy <= box.y2)
        out[ch] = in_y[:, None] & in_x[None, :]
    return out


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (C, H, W) by bilinear interpolation with border clamping."""
    c, h, w = img.shape
    sy = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    sx = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[None, :, None]
    fx = (sx - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


@dataclass
class PoseFeatureConfig:
    mask_size: int = 64
    skeleton: SkeletonEdgeTable = field(default_factory=coco_skeleton)


def masking_pose_feature(
    poses: list[Pose | None],
    h_traj: Trajectory,
    o_traj: Trajectory,
    frame_w: int,
    frame_h: int,
    conv_params: tuple[Tensor, Tensor, Tensor, Tensor],
    cfg: PoseFeatureConfig,
) -> Tensor:
    """Spatial-temporal masking pose feature for one human-object pair.

    Per frame the human skeleton mask and the two pair masks are stacked into
    a 3-channel image, bilinearly downsampled to ``mask_size**2``, stacked
    over time, passed through two 3-D conv+relu layers, and mean-pooled over
    space and time into one vector.
    """
    t_len = len(h_traj)
    if len(o_traj) != t_len or len(poses) != t_len:
        raise ops.ShapeError(
            f"pose feature inputs disagree on length: human {t_len}, "
            f"object {len(o_traj)}, poses {len(poses)}"
        )
    if not (h_traj.all_valid and o_traj.all_valid):
        raise ValueError("masking_pose_feature requires filled trajectories")
    ms = cfg.mask_size
    stacked = np.empty((3, t_len, ms, ms))
    for t in range(t_len):
        masks = pair_spatial_masks(h_traj.boxes[t], o_traj.boxes[t], frame_h, frame_w)
        skel = rasterize_skeleton(poses[t], frame_h, frame_w, cfg.skeleton)
        frame = np.concatenate([masks, skel], axis=0)
        stacked[:, t] = bilinear_resize(frame, ms, ms)

    w1, b1, w2, b2 = conv_params
    x = constant(stacked)
    x = ops.relu(ops.conv3d(x, w1, b1, stride=(1, 1, 1), pad=(1, 1, 1)))
    x = ops.relu(ops.conv3d(x, w2, b2, stride=(1, 1, 1), pad=(1, 1, 1)))
    return ops.mean_pool(x, axes=(1, 2, 3))
