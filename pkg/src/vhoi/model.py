"""Variant model: backbone, feature fusion, classification, training.

Six variants share one two-layer head over concatenated per-pair features:

* ``baseline2d``  — center-frame-only RoIAlign features (no temporal context)
* ``naive3d``     — temporal-mean map pooled at the keyframe box
* ``T``           — naive3d visual features + per-frame trajectory coordinates
* ``T+V``         — trajectory-following pooled features + trajectory coords
* ``T+P``         — naive3d + trajectory coords + masking pose feature
* ``T+V+P``       — all three feature families

``HOIDetector`` wraps the functional pieces behind a scikit-learn style
fit/predict estimator so the pipeline composes with the wider ecosystem.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentConfig, KeyframeSample, augment
from .evaluation import Detection
from .features import (
    FeatureMap,
    PoseFeatureConfig,
    masking_pose_feature,
    naive_temporal_roi_pool,
    roi_align,
    toi_pool,
)
from .geometry import PairProposal, Trajectory, union_box
from .optim import TrainConfig, sgd_step, zero_grads
from .tensor import NonFiniteError, Parameter, Tensor, constant

VARIANTS = ("baseline2d", "naive3d", "T", "T+V", "T+P", "T+V+P")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    variant: str
    num_predicates: int
    segment_len: int = 8
    backbone_channels: tuple[int, int, int] = (16, 32, 64)
    roi_size: tuple[int, int] = (7, 7)
    roi_samples: int = 2
    hidden_width: int = 512
    pose_mask_size: int = 64
    pose_channels: tuple[int, int] = (16, 32)
    score_mode: str = "sigmoid"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.num_predicates < 1:
            raise ValueError("num_predicates must be >= 1")
        if self.score_mode not in ("sigmoid", "softmax"):
            raise ValueError(f"score_mode must be sigmoid or softmax, got {self.score_mode!r}")

    @property
    def uses_trajectory(self) -> bool:
        return self.variant in ("T", "T+V", "T+P", "T+V+P")

    @property
    def uses_toi(self) -> bool:
        return self.variant in ("T+V", "T+V+P")

    @property
    def uses_pose(self) -> bool:
        return self.variant in ("T+P", "T+V+P")

    @property
    def keyframe_only(self) -> bool:
        return self.variant == "baseline2d"

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "num_predicates": self.num_predicates,
            "segment_len": self.segment_len,
            "backbone_channels": list(self.backbone_channels),
            "roi_size": list(self.roi_size),
            "roi_samples": self.roi_samples,
            "hidden_width": self.hidden_width,
            "pose_mask_size": self.pose_mask_size,
            "pose_channels": list(self.pose_channels),
            "score_mode": self.score_mode,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        kwargs = dict(doc)
        for key in ("backbone_channels", "roi_size", "pose_channels"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class PairScores:
    pair: PairProposal
    scores: np.ndarray  # (C,) strictly inside (0, 1)


def feature_length(cfg: ModelConfig) -> int:
    """Total fused feature width; a pure function of the config."""
    d = cfg.backbone_channels[-1]
    h, w = cfg.roi_size
    length = 3 * d * h * w
    if cfg.uses_trajectory:
        length += 2 * cfg.segment_len * 4
    if cfg.uses_pose:
        length += cfg.pose_channels[-1]
    return length


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig) -> dict[str, Parameter]:
    """Seeded Kaiming-uniform weights, zero biases, in a fixed draw order."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, Parameter] = {}

    def conv(name: str, c_in: int, c_out: int, k: tuple[int, int, int]) -> None:
        fan_in = c_in * k[0] * k[1] * k[2]
        params[f"{name}.weight"] = Parameter(
            f"{name}.weight", _kaiming_uniform(rng, (c_out, c_in, *k), fan_in)
        )
        params[f"{name}.bias"] = Parameter(f"{name}.bias", np.zeros(c_out))

    c1, c2, c3 = cfg.backbone_channels
    conv("backbone.conv1", 3, c1, (3, 2, 2))
    conv("backbone.conv2", c1, c2, (3, 2, 2))
    conv("backbone.conv3", c2, c3, (3, 3, 3))
    if cfg.uses_pose:
        p1, p2 = cfg.pose_channels
        conv("pose.conv1", 3, p1, (3, 3, 3))
        conv("pose.conv2", p1, p2, (3, 3, 3))

    f_in = feature_length(cfg)
    params["head.fc1.weight"] = Parameter(
        "head.fc1.weight", _kaiming_uniform(rng, (cfg.hidden_width, f_in), f_in)
    )
    params["head.fc1.bias"] = Parameter("head.fc1.bias", np.zeros(cfg.hidden_width))
    params["head.fc2.weight"] = Parameter(
        "head.fc2.weight",
        _kaiming_uniform(rng, (cfg.num_predicates, cfg.hidden_width), cfg.hidden_width),
    )
    params["head.fc2.bias"] = Parameter("head.fc2.bias", np.zeros(cfg.num_predicates))
    return params


def backbone(params: dict[str, Parameter], frames: Tensor) -> FeatureMap:
    """Three conv3d+relu layers: spatial stride 4 total, temporal stride 1."""
    x = ops.relu(
        ops.conv3d(
            frames, params["backbone.conv1.weight"], params["backbone.conv1.bias"],
            stride=(1, 2, 2), pad=(1, 0, 0),
        )
    )
    x = ops.relu(
        ops.conv3d(
            x, params["backbone.conv2.weight"], params["backbone.conv2.bias"],
            stride=(1, 2, 2), pad=(1, 0, 0),
        )
    )
    x = ops.relu(
        ops.conv3d(
            x, params["backbone.conv3.weight"], params["backbone.conv3.bias"],
            stride=(1, 1, 1), pad=(1, 1, 1),
        )
    )
    return FeatureMap(x, spatial_scale=0.25)


def trajectory_feature(
    h_traj: Trajectory, o_traj: Trajectory, frame_w: float, frame_h: float
) -> np.ndarray:
    """Per-frame box corners normalized to [0,1], subject block then object block."""
    norm = np.array([frame_w, frame_h, frame_w, frame_h], dtype=np.float64)
    parts = []
    for traj in (h_traj, o_traj):
        coords = np.array([b.astuple() for b in traj.boxes], dtype=np.float64)
        parts.append((coords / norm).reshape(-1))
    return np.concatenate(parts)


def _union_trajectory(h_traj: Trajectory, o_traj: Trajectory) -> Trajectory:
    boxes = [union_box(a, b) for a, b in zip(h_traj.boxes, o_traj.boxes)]
    return Trajectory("union", -1, boxes, [True] * len(boxes))


def forward_logits(
    params: dict[str, Parameter], cfg: ModelConfig, sample: KeyframeSample
) -> tuple[Tensor | None, list[PairProposal]]:
    """Logits (num_pairs, C) for every valid pair, or None when no pair exists."""
    pairs = sample.pairs
    if not pairs:
        return None, []
    center = sample.center
    out_h, out_w = cfg.roi_size
    spb = cfg.roi_samples

    if cfg.keyframe_only:
        clip = constant(sample.frames[:, center : center + 1])
        fmap = backbone(params, clip)
        pooled_source = fmap.frame(0)
    else:
        fmap = backbone(params, constant(sample.frames))
        pooled_source = None
        if not cfg.uses_toi:
            pooled_source = ops.mean_pool(fmap.tensor, axes=1)

    pose_cfg = PoseFeatureConfig(mask_size=cfg.pose_mask_size)
    rows: list[Tensor] = []
    for pair in pairs:
        h_traj = sample.trajectories[pair.human_index]
        o_traj = sample.trajectories[pair.object_index]
        u_traj = _union_trajectory(h_traj, o_traj)
        blocks: list[Tensor] = []
        for traj in (h_traj, u_traj, o_traj):
            if cfg.uses_toi:
                pooled = toi_pool(fmap, traj, out_h, out_w, spb)
            else:
                pooled = roi_align(
                    pooled_source, traj.boxes[center], out_h, out_w, spb,
                    fmap.spatial_scale,
                )
            blocks.append(ops.flatten(pooled.tensor))
        if cfg.uses_trajectory:
            blocks.append(
                constant(
                    trajectory_feature(h_traj, o_traj, sample.frame_w, sample.frame_h)
                )
            )
        if cfg.uses_pose:
            poses = sample.poses.get(
                h_traj.instance_id, [None] * sample.segment_len
            )
            blocks.append(
                masking_pose_feature(
                    poses, h_traj, o_traj, sample.frame_w, sample.frame_h,
                    (
                        params["pose.conv1.weight"], params["pose.conv1.bias"],
                        params["pose.conv2.weight"], params["pose.conv2.bias"],
                    ),
                    pose_cfg,
                )
            )
        row = ops.concat(blocks, axis=0)
        if row.shape[0] != feature_length(cfg):
            raise ops.ShapeError(
                f"fused feature length {row.shape[0]} != configured {feature_length(cfg)}"
            )
        rows.append(ops.reshape(row, (1, row.shape[0])))

    x = ops.concat(rows, axis=0)
    hidden = ops.relu(ops.linear(x, params["head.fc1.weight"], params["head.fc1.bias"]))
    logits = ops.linear(hidden, params["head.fc2.weight"], params["head.fc2.bias"])
    return logits, pairs


def forward(
    params: dict[str, Parameter], cfg: ModelConfig, sample: KeyframeSample
) -> list[PairScores]:
    logits, pairs = forward_logits(params, cfg, sample)
    if logits is None:
        return []
    scores = ops.sigmoid(logits).data
    return [PairScores(pair, scores[i].copy()) for i, pair in enumerate(pairs)]


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_keyframe(
    params: dict[str, Parameter],
    cfg: ModelConfig,
    sample: KeyframeSample,
    top_k: int = 100,
) -> list[Detection]:
    """Expand pair scores into ranked detections, truncated to ``top_k``.

    Ranking uses the per-predicate sigmoid score by default; ``softmax``
    score_mode normalizes each pair's logits across classes instead. Ties
    break by pair index then predicate index.
    """
    logits, pairs = forward_logits(params, cfg, sample)
    if logits is None:
        return []
    if cfg.score_mode == "softmax":
        scores = _softmax_rows(logits.data)
    else:
        scores = ops.sigmoid(logits).data
    center = sample.center
    candidates = []
    for i, pair in enumerate(pairs):
        h_traj = sample.trajectories[pair.human_index]
        o_traj = sample.trajectories[pair.object_index]
        for c in range(cfg.num_predicates):
            candidates.append(
                (
                    -scores[i, c],
                    i,
                    c,
                    Detection(
                        video_id=sample.video_id,
                        keyframe_index=sample.keyframe_index,
                        human_box=h_traj.boxes[center],
                        object_box=o_traj.boxes[center],
                        object_category=o_traj.category_id,
                        predicate_id=c,
                        score=float(scores[i, c]),
                    ),
                )
            )
    candidates.sort(key=lambda t: (t[0], t[1], t[2]))
    return [det for _, _, _, det in candidates[:top_k]]


def sample_loss(
    params: dict[str, Parameter], cfg: ModelConfig, sample: KeyframeSample
) -> Tensor | None:
    logits, _pairs = forward_logits(params, cfg, sample)
    if logits is None:
        return None
    return ops.bce_multilabel(logits, constant(sample.gt))


def train_model(
    samples: list[KeyframeSample],
    cfg: ModelConfig,
    train_cfg: TrainConfig,
    augment_data: bool = False,
    augment_cfg: AugmentConfig | None = None,
    log_fn=None,
) -> tuple[dict[str, Parameter], list[float]]:
    """Train from scratch; returns parameters and the per-epoch mean loss curve.

    Deterministic given (config seeds, sample order): the shuffling and
    augmentation randomness all flow from ``train_cfg.seed``.
    """
    if not samples:
        raise ValueError("training requires a non-empty dataset")
    params = init_params(cfg)
    param_list = list(params.values())
    rng = np.random.default_rng(train_cfg.seed)
    losses: list[float] = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(samples))
        epoch_losses: list[float] = []
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start : start + train_cfg.batch_size]
            zero_grads(param_list)
            batch_losses = []
            for idx in batch:
                sample = samples[int(idx)]
                if augment_data:
                    sample = augment(sample, rng, augment_cfg)
                loss = sample_loss(params, cfg, sample)
                if loss is None:
                    continue
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, sample {sample.video_id}"
                        f"@{sample.keyframe_index}"
                    )
                batch_losses.append(value)
                ops.scale(loss, 1.0 / len(batch)).backward()
            try:
                sgd_step(param_list, train_cfg, epoch)
            except NonFiniteError as exc:
                raise TrainingDivergedError(str(exc)) from exc
            epoch_losses.extend(batch_losses)
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        losses.append(mean_loss)
        if log_fn is not None:
            log_fn(epoch, mean_loss)
    return params, losses


def params_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, Parameter]:
    return {name: Parameter(name, arr) for name, arr in arrays.items()}


class HOIDetector(BaseEstimator):
    """Keyframe interaction detector with a scikit-learn estimator surface.

    ``fit`` consumes a list of :class:`~vhoi.data.KeyframeSample` and trains
    the configured variant from scratch; ``predict`` returns the ranked
    top-k detections per sample. All hyperparameters are constructor
    arguments, so ``get_params``/``set_params``/``clone`` work as usual.
    """

    def __init__(
        self,
        variant: str = "T+V+P",
        num_predicates: int = 7,
        segment_len: int = 8,
        backbone_channels: tuple[int, int, int] = (16, 32, 64),
        roi_size: tuple[int, int] = (7, 7),
        roi_samples: int = 2,
        hidden_width: int = 512,
        pose_mask_size: int = 64,
        pose_channels: tuple[int, int] = (16, 32),
        score_mode: str = "sigmoid",
        seed: int = 0,
        base_lr: float = 1e-2,
        momentum: float = 0.9,
        weight_decay: float = 1e-7,
        epochs: int = 20,
        decay_epochs: tuple[int, ...] = (10, 15),
        decay_factor: float = 0.1,
        batch_size: int = 16,
        augment: bool = False,
        top_k: int = 100,
    ):
        self.variant = variant
        self.num_predicates = num_predicates
        self.segment_len = segment_len
        self.backbone_channels = backbone_channels
        self.roi_size = roi_size
        self.roi_samples = roi_samples
        self.hidden_width = hidden_width
        self.pose_mask_size = pose_mask_size
        self.pose_channels = pose_channels
        self.score_mode = score_mode
        self.seed = seed
        self.base_lr = base_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.decay_epochs = decay_epochs
        self.decay_factor = decay_factor
        self.batch_size = batch_size
        self.augment = augment
        self.top_k = top_k

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            variant=self.variant,
            num_predicates=self.num_predicates,
            segment_len=self.segment_len,
            backbone_channels=tuple(self.backbone_channels),
            roi_size=tuple(self.roi_size),
            roi_samples=self.roi_samples,
            hidden_width=self.hidden_width,
            pose_mask_size=self.pose_mask_size,
            pose_channels=tuple(self.pose_channels),
            score_mode=self.score_mode,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            base_lr=self.base_lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            decay_epochs=tuple(self.decay_epochs),
            decay_factor=self.decay_factor,
            seed=self.seed,
            batch_size=self.batch_size,
        )

    def fit(self, X, y=None, log_fn=None):
        from .validation import check_samples

        samples = check_samples(X, self.segment_len)
        self.params_, self.loss_curve_ = train_model(
            samples,
            self.model_config(),
            self.train_config(),
            augment_data=self.augment,
            log_fn=log_fn,
        )
        return self

    def predict(self, X) -> list[list[Detection]]:
        from .validation import check_samples

        check_is_fitted(self, "params_")
        samples = check_samples(X, self.segment_len)
        return [self.predict_sample(s) for s in samples]

    def predict_sample(self, sample: KeyframeSample) -> list[Detection]:
        check_is_fitted(self, "params_")
        return predict_keyframe(self.params_, self.model_config(), sample, self.top_k)

    def predict_pair_scores(self, X) -> list[list[PairScores]]:
        from .validation import check_samples

        check_is_fitted(self, "params_")
        samples = check_samples(X, self.segment_len)
        return [forward(self.params_, self.model_config(), s) for s in samples]

    def save(self, ckpt_path: str | Path) -> None:
        check_is_fitted(self, "params_")
        ckpt_path = Path(ckpt_path)
        save_checkpoint(ckpt_path, list(self.params_.values()))
        sidecar = {
            "model": self.model_config().to_json(),
            "estimator": {
                k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self.get_params().items()
            },
            "loss_curve": [float(x) for x in self.loss_curve_],
        }
        ckpt_path.with_suffix(ckpt_path.suffix + ".json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True)
        )

    @classmethod
    def load(cls, ckpt_path: str | Path) -> "HOIDetector":
        ckpt_path = Path(ckpt_path)
        sidecar = json.loads(
            ckpt_path.with_suffix(ckpt_path.suffix + ".json").read_text()
        )
        kwargs = dict(sidecar["estimator"])
        for key in ("backbone_channels", "roi_size", "pose_channels", "decay_epochs"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        est = cls(**kwargs)
        est.params_ = params_from_arrays(load_checkpoint(ckpt_path))
        est.loss_curve_ = [float(x) for x in sidecar.get("loss_curve", [])]
        return est
