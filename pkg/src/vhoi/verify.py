"""Built-in invariant suites for the ``verify`` CLI command.

Each suite checks a production code path against a deliberately naive
reference computation (scalar loops, exhaustive enumeration) or a property
that must hold by construction. Suites return the number of checks run plus
a list of failure descriptions; the CLI turns any failure into a nonzero
exit.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import features, ops
from .evaluation import Detection, GtInstance, average_precision, match_category
from .geometry import Box, Trajectory, iou
from .optim import grad_check
from .synthetic import SyntheticSpec, generate_synthetic
from .tensor import Tensor


@dataclass
class SuiteResult:
    name: str
    checks: int
    failures: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures


# --------------------------------------------------------------------------
# Gradient checks


def gradient_suite(seeds: int = 3, tol: float = 1e-4) -> SuiteResult:
    failures: list[str] = []
    checks = 0
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        cases = {
            "linear": (
                lambda ts: ops.linear(ts[0], ts[1], ts[2]),
                [rng.standard_normal((3, 4)), rng.standard_normal((2, 4)),
                 rng.standard_normal(2)],
            ),
            "conv3d": (
                lambda ts: ops.conv3d(ts[0], ts[1], ts[2], (1, 1, 1), (1, 1, 1)),
                [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 2, 3, 3, 3)),
                 rng.standard_normal(2)],
            ),
            "relu": (
                lambda ts: ops.relu(ts[0]),
                [rng.standard_normal((4, 5)) + np.sign(rng.standard_normal((4, 5))) * 0.5],
            ),
            "sigmoid": (lambda ts: ops.sigmoid(ts[0]), [rng.standard_normal((4, 5))]),
            "mean_pool": (
                lambda ts: ops.mean_pool(ts[0], axes=(1, 2)),
                [rng.standard_normal((3, 4, 5))],
            ),
            "bce": (
                lambda ts: ops.bce_multilabel(
                    ts[0], Tensor((rng.random((3, 4)) > 0.5).astype(float))
                ),
                [rng.standard_normal((3, 4))],
            ),
            "roi_align": (
                lambda ts: features.roi_align(
                    ts[0], Box(0.7, 0.4, 4.6, 5.1), 3, 3, 2, 1.0
                ).tensor,
                [rng.standard_normal((2, 6, 6))],
            ),
        }
        for name, (fn, inputs) in cases.items():
            checks += 1
            err = grad_check(fn, inputs)
            if err >= tol:
                failures.append(f"{name} (seed {seed}): max rel err {err:.2e} >= {tol}")
    return SuiteResult("gradient-checks", checks, failures)


# --------------------------------------------------------------------------
# RoIAlign against a scalar bilinear oracle


def naive_roi_align(
    fmap: np.ndarray, box: Box, out_h: int, out_w: int, spb: int, scale: float
) -> np.ndarray:
    d, height, width = fmap.shape

    def bilinear(ch: int, y: float, x: float) -> float:
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        total = 0.0
        for yy, wy in ((y0, 1.0 - (y - y0)), (y0 + 1, y - y0)):
            for xx, wx in ((x0, 1.0 - (x - x0)), (x0 + 1, x - x0)):
                if 0 <= yy < height and 0 <= xx < width:
                    total += wy * wx * fmap[ch, yy, xx]
        return total

    x1, y1 = box.x1 * scale, box.y1 * scale
    bw = (box.x2 - box.x1) * scale / out_w
    bh = (box.y2 - box.y1) * scale / out_h
    out = np.zeros((d, out_h, out_w))
    for ch in range(d):
        for i in range(out_h):
            for j in range(out_w):
                acc = 0.0
                for sy in range(spb):
                    for sx in range(spb):
                        cy = y1 + (i + (sy + 0.5) / spb) * bh - 0.5
                        cx = x1 + (j + (sx + 0.5) / spb) * bw - 0.5
                        acc += bilinear(ch, cy, cx)
                out[ch, i, j] = acc / (spb * spb)
    return out


def roi_align_suite(cases: int = 100, tol: float = 1e-9) -> SuiteResult:
    rng = np.random.default_rng(7)
    failures: list[str] = []
    for case in range(cases):
        d = int(rng.integers(1, 3))
        height = int(rng.integers(4, 10))
        width = int(rng.integers(4, 10))
        fmap = rng.standard_normal((d, height, width))
        scale = float(rng.choice([1.0, 0.5, 0.25]))
        x1 = float(rng.uniform(-2, width / scale - 1))
        y1 = float(rng.uniform(-2, height / scale - 1))
        bw = rng.uniform(0.5, width / scale)
        bh = rng.uniform(0.5, height / scale)
        box = Box(x1, y1, x1 + bw, y1 + bh)
        out_h, out_w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        spb = int(rng.integers(1, 4))
        got = features.roi_align(Tensor(fmap), box, out_h, out_w, spb, scale).tensor.data
        want = naive_roi_align(fmap, box, out_h, out_w, spb, scale)
        err = float(np.max(np.abs(got - want)))
        if err >= tol:
            failures.append(f"case {case}: max abs err {err:.2e} >= {tol}")
    return SuiteResult("roi-align-oracle", cases, failures)


# --------------------------------------------------------------------------
# Pooling order: equivalence for static boxes, divergence for moving ones


def pooling_suite(cases: int = 20) -> SuiteResult:
    rng = np.random.default_rng(11)
    failures: list[str] = []
    checks = 0
    for case in range(cases):
        d, t_len, height, width = 2, 4, 8, 8
        data = rng.standard_normal((d, t_len, height, width))
        fmap = features.FeatureMap(Tensor(data), spatial_scale=1.0)
        x1, y1 = rng.uniform(0, 3, 2)
        box = Box(x1, y1, x1 + rng.uniform(2, 4), y1 + rng.uniform(2, 4))
        traj = Trajectory("i", 0, [box] * t_len)
        a = features.toi_pool(fmap, traj, 3, 3, 2).tensor.data
        b = features.naive_temporal_roi_pool(fmap, box, 3, 3, 2).tensor.data
        checks += 1
        if np.max(np.abs(a - b)) >= 1e-9:
            failures.append(f"static case {case}: pooling orders disagree")

    # moving instance on a two-region map: keyframe region is bright, the rest 0
    d, t_len, height, width = 1, 4, 8, 16
    data = np.zeros((d, t_len, height, width))
    data[:, :, :, :8] = 8.0
    fmap = features.FeatureMap(Tensor(data), spatial_scale=1.0)
    keyframe_box = Box(2.0, 2.0, 6.0, 6.0)          # inside the bright region
    away_box = Box(10.0, 2.0, 14.0, 6.0)            # zeros region
    boxes = [keyframe_box if t == t_len // 2 else away_box for t in range(t_len)]
    traj = Trajectory("i", 0, boxes)
    a = features.toi_pool(fmap, traj, 3, 3, 2).tensor.data
    b = features.naive_temporal_roi_pool(fmap, keyframe_box, 3, 3, 2).tensor.data
    rel = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
    checks += 1
    if not np.all(rel > 0.5):
        failures.append(f"divergence witness too weak: min rel diff {rel.min():.3f}")
    return SuiteResult("pooling-order", checks, failures)


# --------------------------------------------------------------------------
# AP against exhaustive PR enumeration


def naive_average_precision(flags: list[bool], n_gt: int) -> float | None:
    if n_gt == 0:
        return None
    if not flags:
        return 0.0
    total = Fraction(0)
    tp = 0
    for i, flag in enumerate(flags):
        if flag:
            tp += 1
            # best precision at any rank >= this one
            best = Fraction(0)
            running = tp
            for j in range(i + 1, len(flags)):
                if flags[j]:
                    running += 1
                cand = Fraction(running, j + 1)
                if cand > best:
                    best = cand
            best = max(best, Fraction(tp, i + 1))
            total += best
    return float(total / n_gt)


def naive_match(dets: list[Detection], gts: list[GtInstance]) -> list[bool]:
    taken: set[int] = set()
    flags = []
    for det in dets:
        best_idx, best_q = -1, 0.0
        for k, gt in enumerate(gts):
            if k in taken:
                continue
            if gt.video_id != det.video_id or gt.keyframe_index != det.keyframe_index:
                continue
            q = min(iou(det.human_box, gt.human_box), iou(det.object_box, gt.object_box))
            if q > best_q:
                best_q, best_idx = q, k
        if best_idx >= 0 and best_q > 0.5:
            taken.add(best_idx)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _rand_box(rng: np.random.Generator) -> Box:
    x1, y1 = rng.uniform(0, 10, 2)
    return Box(x1, y1, x1 + rng.uniform(1, 6), y1 + rng.uniform(1, 6))


def ap_oracle_suite(scenarios: int = 100) -> SuiteResult:
    rng = np.random.default_rng(23)
    failures: list[str] = []
    for s in range(scenarios):
        n_det = int(rng.integers(0, 6))
        n_gt = int(rng.integers(0, 6))
        gts = [
            GtInstance("v", 0, _rand_box(rng), _rand_box(rng), 1, 0)
            for _ in range(n_gt)
        ]
        dets = []
        for _ in range(n_det):
            if gts and rng.random() < 0.6:
                base = gts[int(rng.integers(0, len(gts)))]
                jitter = rng.uniform(-0.6, 0.6, 8)
                hb, ob = base.human_box, base.object_box
                det_hb = Box(hb.x1 + jitter[0], hb.y1 + jitter[1],
                             hb.x2 + jitter[2] + 1e-3, hb.y2 + jitter[3] + 1e-3)
                det_ob = Box(ob.x1 + jitter[4], ob.y1 + jitter[5],
                             ob.x2 + jitter[6] + 1e-3, ob.y2 + jitter[7] + 1e-3)
            else:
                det_hb, det_ob = _rand_box(rng), _rand_box(rng)
            dets.append(Detection("v", 0, det_hb, det_ob, 1, 0, float(rng.uniform(0.05, 1))))
        dets.sort(key=lambda d: -d.score)
        got_flags = match_category(dets, [GtInstance(g.video_id, g.keyframe_index,
                                                     g.human_box, g.object_box,
                                                     g.object_category, g.predicate_id)
                                          for g in gts])
        want_flags = naive_match(dets, gts)
        if got_flags != want_flags:
            failures.append(f"scenario {s}: matcher flags differ")
            continue
        got_ap = average_precision(got_flags, n_gt)
        want_ap = naive_average_precision(want_flags, n_gt)
        if got_ap != want_ap:
            failures.append(f"scenario {s}: AP {got_ap} != oracle {want_ap}")
    return SuiteResult("ap-oracle", scenarios, failures)


# --------------------------------------------------------------------------
# Synthetic twin property


def twin_suite() -> SuiteResult:
    spec = SyntheticSpec(seed=5, num_videos=14, frame_width=32, frame_height=32,
                         fps=4.0, duration_s=3.0)
    ann, frames = generate_synthetic(spec)
    failures: list[str] = []
    checks = 0
    towards_id = 0
    ids = {v.video_id for v in ann.videos}
    for video in ann.videos:
        preds = {r.predicate_id for r in video.relations}
        if towards_id not in preds:
            continue
        checks += 1
        twin = video.video_id + "r"
        if twin not in ids:
            failures.append(f"{video.video_id}: missing reversal twin")
            continue
        fwd, rev = frames[video.video_id], frames[twin]
        length = video.frame_count
        for k in range(0, length, int(round(video.fps))):
            if not np.array_equal(fwd[k], rev[length - 1 - k]):
                failures.append(f"{video.video_id}: keyframe {k} differs from twin")
        # labels must be recoverable from the boxes
        for rel in video.relations:
            dist = [
                np.hypot(
                    *(np.array(video.boxes[(t, rel.subject_id)].center)
                      - np.array(video.boxes[(t, rel.object_id)].center))
                )
                for t in range(length)
            ]
            diffs = np.diff(dist)
            if rel.predicate_id == towards_id and not np.all(diffs < 0):
                failures.append(f"{video.video_id}: towards label not strictly decreasing")
    if checks == 0:
        failures.append("no towards videos generated")
    return SuiteResult("synthetic-twins", max(checks, 1), failures)


def run_all(quick: bool = False) -> list[SuiteResult]:
    if quick:
        return [
            gradient_suite(seeds=1),
            roi_align_suite(cases=25),
            pooling_suite(cases=5),
            ap_oracle_suite(scenarios=40),
            twin_suite(),
        ]
    return [
        gradient_suite(),
        roi_align_suite(),
        pooling_suite(),
        ap_oracle_suite(scenarios=200),
        twin_suite(),
    ]
