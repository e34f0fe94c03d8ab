"""Raw RGB frame container ("VHFR").

Layout: magic b"VHFR", then little-endian uint32 version, frame_count,
height, width, channels, followed by the raw uint8 pixel data in
(frame, row, column, channel) order. Round-trips are byte-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VHFR"
VERSION = 1


class FrameContainerError(ValueError):
    pass


def write_frames(path: str | Path, frames: np.ndarray) -> None:
    if frames.dtype != np.uint8 or frames.ndim != 4 or frames.shape[3] != 3:
        raise FrameContainerError(
            f"expected uint8 frames of shape (F, H, W, 3), got {frames.dtype} {frames.shape}"
        )
    count, height, width, channels = frames.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<5I", VERSION, count, height, width, channels))
        f.write(np.ascontiguousarray(frames).tobytes())


def read_frames(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise FrameContainerError(f"bad magic {magic!r}, expected {MAGIC!r}")
        header = f.read(20)
        if len(header) != 20:
            raise FrameContainerError("truncated header")
        version, count, height, width, channels = struct.unpack("<5I", header)
        if version != VERSION:
            raise FrameContainerError(f"unsupported version {version}")
        n = count * height * width * channels
        raw = f.read(n)
        if len(raw) != n:
            raise FrameContainerError("truncated pixel data")
        return np.frombuffer(raw, dtype=np.uint8).reshape(count, height, width, channels)


def frames_path(directory: str | Path, video_id: str) -> Path:
    return Path(directory) / f"{video_id}.vhfr"


def write_video_frames(directory: str | Path, frames_by_video: dict[str, np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for video_id in sorted(frames_by_video):
        write_frames(frames_path(directory, video_id), frames_by_video[video_id])


def read_video_frames(directory: str | Path, video_id: str) -> np.ndarray:
    return read_frames(frames_path(directory, video_id))
