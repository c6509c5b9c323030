"""Batch export of labeled videos to feature grid datasets.

A video file is a NumPy ``.npy`` array of shape (frames, height, width, 3)
with dtype uint8. Videos are cut into non-overlapping clips: each clip
samples ``clip_length`` frames spaced ``frame_stride`` source frames
apart, so it spans ``clip_length * frame_stride`` frames of the video,
and the trailing remainder is dropped. Every clip passes through the
backbone once and its pre-pooling feature map becomes one grid file.

Videos that fail to decode or are too short for a single clip are skipped
with a logged warning. A feature map whose shape disagrees with the first
exported clip aborts the export, as does a job whose videos were all
skipped. The output directory is self-contained: manifest, grid files and
a copy of the hierarchy file.
"""

import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from . import ExportError
from .backbone import available_backbones, build_backbone
from .formats import child_labels, write_grid_file, write_manifest

logger = logging.getLogger("feature_export")


@dataclass(frozen=True)
class VideoItem:
    """One source video and its child-class label (id or name)."""

    path: str
    label: Union[int, str]


@dataclass
class ExportJob:
    videos: Sequence[VideoItem]
    hierarchy: str                     # hierarchy JSON file path
    out_dir: str
    backbone: str = "conv3d-64"
    clip_length: int = 16              # frames per clip after striding
    frame_stride: int = 1              # source frames between sampled frames
    input_size: Optional[Tuple[int, int]] = (64, 64)   # (H, W); None keeps native size
    weights: Optional[str] = None      # backbone state-dict file
    split: str = "export"

    def validate(self) -> None:
        if not self.videos:
            raise ExportError("job lists no videos")
        if self.clip_length < 1:
            raise ExportError("clip_length must be >= 1")
        if self.frame_stride < 1:
            raise ExportError("frame_stride must be >= 1")
        if self.backbone not in available_backbones():
            raise ExportError(
                f"unknown backbone {self.backbone!r}; "
                f"available: {', '.join(available_backbones())}"
            )


def clip_starts(frame_count: int, clip_length: int, frame_stride: int) -> List[int]:
    """Start frames of the non-overlapping clips a video yields."""
    span = clip_length * frame_stride
    return list(range(0, frame_count - span + 1, span))


def _decode_video(path: Path) -> np.ndarray:
    try:
        frames = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ValueError(f"not a readable .npy array: {exc}") from exc
    if frames.ndim != 4 or frames.shape[-1] != 3 or frames.dtype != np.uint8:
        raise ValueError(
            "expected a (frames, height, width, 3) uint8 array, "
            f"got shape {frames.shape} dtype {frames.dtype}"
        )
    return frames


def _clip_tensor(frames: np.ndarray, input_size: Optional[Tuple[int, int]]) -> torch.Tensor:
    """(T, H, W, 3) uint8 frames to a (1, 3, T, H', W') tensor in [-1, 1]."""
    clip = torch.from_numpy(frames.astype(np.float32) / 255.0).permute(0, 3, 1, 2)
    if input_size is not None and tuple(clip.shape[-2:]) != tuple(input_size):
        clip = F.interpolate(clip, size=tuple(input_size), mode="bilinear",
                             align_corners=False)
    clip = clip * 2.0 - 1.0
    return clip.permute(1, 0, 2, 3).unsqueeze(0)


def _resolve_labels(job: ExportJob) -> List[Tuple[Path, int]]:
    names = child_labels(job.hierarchy)
    ids = set(names.values())
    resolved = []
    for item in job.videos:
        if isinstance(item.label, str):
            if item.label not in names:
                raise ExportError(
                    f"label {item.label!r} is not a child class in {job.hierarchy}"
                )
            label = names[item.label]
        else:
            label = int(item.label)
            if label not in ids:
                raise ExportError(
                    f"label {label} is not a child class id in {job.hierarchy}"
                )
        resolved.append((Path(item.path), label))
    return resolved


def export(job: ExportJob) -> Path:
    """Run the job and return the path of the written manifest."""
    job.validate()
    resolved = _resolve_labels(job)
    module = build_backbone(job.backbone, job.weights)

    out_dir = Path(job.out_dir)
    (out_dir / "grids").mkdir(parents=True, exist_ok=True)

    dims: Optional[Tuple[int, int, int, int]] = None
    clips: List[dict] = []
    seen_videos = set()
    threads = torch.get_num_threads()
    torch.set_num_threads(1)   # keeps convolution results run-to-run identical
    try:
        with torch.no_grad():
            for video_path, label in resolved:
                try:
                    frames = _decode_video(video_path)
                except ValueError as exc:
                    logger.warning("skipping video %s: %s", video_path, exc)
                    continue
                starts = clip_starts(frames.shape[0], job.clip_length, job.frame_stride)
                if not starts:
                    logger.warning(
                        "skipping video %s: %d frames cannot fill a clip of "
                        "%d frames at stride %d",
                        video_path, frames.shape[0], job.clip_length, job.frame_stride,
                    )
                    continue
                video_id = video_path.stem
                if video_id in seen_videos:
                    raise ExportError(
                        f"duplicate video id {video_id!r}; video file stems must be unique"
                    )
                seen_videos.add(video_id)
                span = job.clip_length * job.frame_stride
                for index, start in enumerate(starts):
                    sampled = frames[start:start + span:job.frame_stride]
                    feature = module.features(_clip_tensor(sampled, job.input_size))
                    volume = feature[0].permute(1, 2, 3, 0).numpy().astype(np.float64)
                    t, h, w, d = volume.shape
                    clip_dims = (w, h, t, d)
                    if dims is None:
                        dims = clip_dims
                    elif clip_dims != dims:
                        raise ExportError(
                            f"feature dims drifted: video {video_id} clip {index} "
                            f"produced {clip_dims}, dataset started with {dims}"
                        )
                    clip_id = f"{video_id}_{index:03d}"
                    grid_rel = f"grids/{clip_id}.hpfg"
                    write_grid_file(out_dir / grid_rel, volume)
                    clips.append({
                        "clip_id": clip_id,
                        "video_id": video_id,
                        "label": label,
                        "grid_path": grid_rel,
                    })
    finally:
        torch.set_num_threads(threads)

    if not clips:
        raise ExportError("no clips exported; every video was skipped")
    shutil.copyfile(job.hierarchy, out_dir / "hierarchy.json")
    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest_path, job.split, "hierarchy.json", dims, clips)
    logger.info("exported %d clips from %d videos to %s",
                len(clips), len(resolved), out_dir)
    return manifest_path
