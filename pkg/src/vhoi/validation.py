"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .data import KeyframeSample


def check_samples(X, segment_len: int) -> list[KeyframeSample]:
    """Validate a fit/predict input as a list of compatible keyframe samples."""
    if isinstance(X, KeyframeSample):
        raise TypeError("expected a sequence of KeyframeSample, got a single sample")
    samples = list(X)
    for i, s in enumerate(samples):
        if not isinstance(s, KeyframeSample):
            raise TypeError(f"X[{i}] is {type(s).__name__}, expected KeyframeSample")
        if s.segment_len != segment_len:
            raise ValueError(
                f"X[{i}] has segment length {s.segment_len}, model expects {segment_len}"
            )
        if s.frames.ndim != 4 or s.frames.shape[0] != 3:
            raise ValueError(f"X[{i}] frames must be (3, T, H, W), got {s.frames.shape}")
        if not np.isfinite(s.frames).all():
            raise ValueError(f"X[{i}] frames contain non-finite values")
        if s.gt.shape[0] != len(s.pairs):
            raise ValueError(
                f"X[{i}] gt rows ({s.gt.shape[0]}) do not match pairs ({len(s.pairs)})"
            )
        for traj in s.trajectories:
            if len(traj) != s.segment_len:
                raise ValueError(
                    f"X[{i}] trajectory {traj.instance_id!r} has length {len(traj)}, "
                    f"expected {s.segment_len}"
                )
            if not traj.all_valid:
                raise ValueError(
                    f"X[{i}] trajectory {traj.instance_id!r} is not filled"
                )
    return samples
