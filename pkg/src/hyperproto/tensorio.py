"""Feature grid files, dataset manifests and the synthetic benchmark.

Grid file layout (little-endian):

    bytes 0..4    magic "HPFG"
    bytes 4..8    u32 format version (currently 1)
    bytes 8..24   u32 W, H, T, D
    bytes 24..    T*H*W*D float64 values, D fastest, then W, then H, then T

Dims are quoted as (W, H, T, D) everywhere; the in-memory array is indexed
[t, h, w, d] so the serialized order is plain C order of the array.
"""

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ToolkitError
from .hierarchy import HierarchyTree, parse_hierarchy, serialize_hierarchy

GRID_MAGIC = b"HPFG"
GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<4sIIIII")


class GridFormatError(ToolkitError):
    pass


class ManifestError(ToolkitError):
    pass


@dataclass
class FeatureGrid:
    """A dense float64 feature volume of shape [T, H, W, D]."""

    dims: Tuple[int, int, int, int]   # (W, H, T, D)
    data: np.ndarray                  # shape (T, H, W, D)

    def __post_init__(self):
        w, h, t, d = self.dims
        if min(self.dims) < 1:
            raise GridFormatError(f"grid dims must be positive, got {self.dims}")
        expected = (t, h, w, d)
        if self.data.shape != expected:
            raise GridFormatError(
                f"grid data shape {self.data.shape} does not match dims {self.dims} "
                f"(expected array shape {expected})"
            )
        if self.data.dtype != np.float64:
            raise GridFormatError(f"grid data must be float64, got {self.data.dtype}")
        self.data = np.ascontiguousarray(self.data)


def write_grid(grid: FeatureGrid) -> bytes:
    if not np.isfinite(grid.data).all():
        flat = int(np.flatnonzero(~np.isfinite(grid.data.reshape(-1)))[0])
        raise GridFormatError(
            f"grid contains a non-finite value at byte offset {_GRID_HEADER.size + 8 * flat}"
        )
    w, h, t, d = grid.dims
    header = _GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, w, h, t, d)
    return header + grid.data.astype("<f8", copy=False).tobytes()


def read_grid(data: bytes) -> FeatureGrid:
    if len(data) < _GRID_HEADER.size:
        raise GridFormatError(
            f"grid file truncated: {len(data)} bytes, header needs {_GRID_HEADER.size}"
        )
    magic, version, w, h, t, d = _GRID_HEADER.unpack_from(data, 0)
    if magic != GRID_MAGIC:
        raise GridFormatError(f"bad magic {magic!r} at byte offset 0")
    if version != GRID_VERSION:
        raise GridFormatError(f"unsupported grid version {version} at byte offset 4")
    if min(w, h, t, d) < 1:
        raise GridFormatError(f"grid dims must be positive, got {(w, h, t, d)}")
    expected = _GRID_HEADER.size + 8 * w * h * t * d
    if len(data) != expected:
        raise GridFormatError(
            f"grid payload size mismatch: expected {expected} bytes total, got {len(data)}"
        )
    values = np.frombuffer(data, dtype="<f8", offset=_GRID_HEADER.size).copy()
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise GridFormatError(
            f"non-finite value at byte offset {_GRID_HEADER.size + 8 * int(bad[0])}"
        )
    return FeatureGrid(dims=(w, h, t, d), data=values.reshape(t, h, w, d))


def save_grid(grid: FeatureGrid, path) -> None:
    Path(path).write_bytes(write_grid(grid))


def load_grid_file(path) -> FeatureGrid:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise GridFormatError(f"cannot read grid file {path}: {exc}") from exc
    try:
        return read_grid(data)
    except GridFormatError as exc:
        raise GridFormatError(f"{path}: {exc}") from None


def peek_grid_dims(path) -> Tuple[int, int, int, int]:
    """Read only the header of a grid file and return its dims."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(_GRID_HEADER.size)
    except OSError as exc:
        raise GridFormatError(f"cannot read grid file {path}: {exc}") from exc
    if len(head) < _GRID_HEADER.size:
        raise GridFormatError(f"{path}: grid file truncated ({len(head)} bytes)")
    magic, version, w, h, t, d = _GRID_HEADER.unpack(head)
    if magic != GRID_MAGIC:
        raise GridFormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != GRID_VERSION:
        raise GridFormatError(f"{path}: unsupported grid version {version}")
    return (w, h, t, d)


@dataclass
class ClipRecord:
    clip_id: str
    video_id: str
    label: int
    grid_path: str
    # For synthetic data: (t0, h0, w0, bt, bh, bw), the planted signal block
    # as start cell plus size along each axis. Absent for real datasets.
    signal_block: Optional[Tuple[int, int, int, int, int, int]] = None


@dataclass
class DatasetManifest:
    split: str
    hierarchy: str                      # path, relative to the manifest file
    dims: Tuple[int, int, int, int]     # (W, H, T, D)
    clips: List[ClipRecord]
    tree: HierarchyTree = None
    base_dir: Path = field(default_factory=Path)

    def grid_path(self, record: ClipRecord) -> Path:
        return self.base_dir / record.grid_path

    def clip(self, clip_id: str) -> ClipRecord:
        for record in self.clips:
            if record.clip_id == clip_id:
                return record
        raise ManifestError(f"unknown clip id {clip_id!r}")


def _manifest_payload(manifest: DatasetManifest) -> dict:
    clips = []
    for record in manifest.clips:
        entry = {
            "clip_id": record.clip_id,
            "video_id": record.video_id,
            "label": record.label,
            "grid_path": record.grid_path,
        }
        if record.signal_block is not None:
            entry["signal_block"] = list(record.signal_block)
        clips.append(entry)
    return {
        "split": manifest.split,
        "hierarchy": manifest.hierarchy,
        "dims": list(manifest.dims),
        "clips": clips,
    }


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(
        json.dumps(_manifest_payload(manifest), indent=2, sort_keys=True) + "\n"
    )


def load_manifest(path, check_grids: bool = True) -> DatasetManifest:
    """Load and validate a manifest. Checks that labels are child classes of
    the referenced hierarchy, clip ids are unique, clips of one video share a
    label, and (optionally) that every grid file exists with matching dims."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    for key in ("split", "hierarchy", "dims", "clips"):
        if key not in raw:
            raise ManifestError(f"manifest {path} is missing key {key!r}")
    dims = tuple(raw["dims"])
    if len(dims) != 4 or not all(isinstance(v, int) and v >= 1 for v in dims):
        raise ManifestError(f"manifest dims must be four positive integers, got {raw['dims']}")

    base_dir = path.parent
    hierarchy_path = base_dir / raw["hierarchy"]
    try:
        tree = parse_hierarchy(hierarchy_path.read_text())
    except OSError as exc:
        raise ManifestError(f"cannot read hierarchy {hierarchy_path}: {exc}") from exc

    clips = []
    seen = set()
    video_labels: Dict[str, int] = {}
    for i, entry in enumerate(raw["clips"]):
        try:
            record = ClipRecord(
                clip_id=entry["clip_id"],
                video_id=entry["video_id"],
                label=entry["label"],
                grid_path=entry["grid_path"],
                signal_block=tuple(entry["signal_block"]) if "signal_block" in entry else None,
            )
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"manifest clip entry {i} is malformed: {exc}") from None
        if record.clip_id in seen:
            raise ManifestError(f"duplicate clip id {record.clip_id!r}")
        seen.add(record.clip_id)
        if record.label not in tree.child_ids:
            raise ManifestError(
                f"clip {record.clip_id!r} has label {record.label}, not a child class"
            )
        previous = video_labels.setdefault(record.video_id, record.label)
        if previous != record.label:
            raise ManifestError(
                f"video {record.video_id!r} mixes labels {previous} and {record.label}"
            )
        clips.append(record)

    manifest = DatasetManifest(
        split=raw["split"], hierarchy=raw["hierarchy"], dims=dims,
        clips=clips, tree=tree, base_dir=base_dir,
    )
    if check_grids:
        for record in clips:
            grid_dims = peek_grid_dims(manifest.grid_path(record))
            if grid_dims != dims:
                raise ManifestError(
                    f"clip {record.clip_id!r} grid dims {grid_dims} do not match "
                    f"manifest dims {dims}"
                )
    return manifest


def load_grids(manifest: DatasetManifest) -> Dict[str, FeatureGrid]:
    return {
        record.clip_id: load_grid_file(manifest.grid_path(record))
        for record in manifest.clips
    }


def write_dataset(manifest: DatasetManifest, grids: Dict[str, FeatureGrid], out_dir) -> Path:
    """Persist a manifest with its grids (and hierarchy, if not already on
    disk) under out_dir. Returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hierarchy_path = out_dir / manifest.hierarchy
    if not hierarchy_path.exists():
        hierarchy_path.parent.mkdir(parents=True, exist_ok=True)
        hierarchy_path.write_text(serialize_hierarchy(manifest.tree) + "\n")
    for record in manifest.clips:
        grid_file = out_dir / record.grid_path
        grid_file.parent.mkdir(parents=True, exist_ok=True)
        save_grid(grids[record.clip_id], grid_file)
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path


def _split_stream_key(split: str) -> int:
    digest = hashlib.sha256(split.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def class_means(tree: HierarchyTree, dim: int, seed: int,
                offset_scales: Tuple[float, float, float] = (1.0, 0.5, 0.25)):
    """Per-child-class mean feature vectors that respect the hierarchy:
    children of one parent share that parent's offset, parents of one
    grandparent share the grandparent's. Split-independent."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    gp_scale, parent_scale, child_scale = offset_scales
    means = {}
    for gp in tree.grandparent_ids:
        means[gp] = rng.normal(0.0, gp_scale, size=dim)
    for parent in tree.parent_ids:
        means[parent] = means[tree.parent_of(parent)] + rng.normal(0.0, parent_scale, size=dim)
    for child in tree.child_ids:
        means[child] = means[tree.parent_of(child)] + rng.normal(0.0, child_scale, size=dim)
    return {c: means[c] for c in tree.child_ids}


def generate_synthetic(tree: HierarchyTree, clips_per_class: int,
                       dims: Tuple[int, int, int, int], noise_sigma: float,
                       seed: int, split: str = "train",
                       clips_per_video: int = 2,
                       offset_scales: Tuple[float, float, float] = (1.0, 0.5, 0.25)):
    """Build a labeled synthetic dataset over the given hierarchy.

    Every clip is i.i.d. Gaussian background noise with its class mean added
    inside one contiguous sub-block (three quarters of the grid extent along
    each axis, rounded up, so signal patches outnumber background patches) at
    a random position. Class means are shared across splits for a fixed seed;
    clip noise and block positions are split-specific. offset_scales sets the
    grandparent/parent/child mean offset magnitudes, controlling how strongly
    the feature geometry mirrors the label hierarchy.
    Returns (manifest, grids) without touching the filesystem.
    """
    if clips_per_class < 1:
        raise ValueError("clips_per_class must be >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    w, h, t, d = dims
    if min(dims) < 1:
        raise ValueError(f"dims must be positive, got {dims}")
    block = (math.ceil(3 * t / 4), math.ceil(3 * h / 4), math.ceil(3 * w / 4))

    means = class_means(tree, d, seed, offset_scales)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1, _split_stream_key(split)]))

    clips = []
    grids = {}
    for label in tree.child_ids:
        for i in range(clips_per_class):
            clip_id = f"{split}_c{label:03d}_{i:03d}"
            video_id = f"{split}_c{label:03d}_v{i // clips_per_video:03d}"
            bt, bh, bw = block
            t0 = int(rng.integers(0, t - bt + 1))
            h0 = int(rng.integers(0, h - bh + 1))
            w0 = int(rng.integers(0, w - bw + 1))
            data = rng.normal(0.0, noise_sigma, size=(t, h, w, d))
            data[t0:t0 + bt, h0:h0 + bh, w0:w0 + bw, :] += means[label]
            clips.append(ClipRecord(
                clip_id=clip_id, video_id=video_id, label=label,
                grid_path=f"grids/{clip_id}.hpfg",
                signal_block=(t0, h0, w0, bt, bh, bw),
            ))
            grids[clip_id] = FeatureGrid(dims=dims, data=data)

    manifest = DatasetManifest(
        split=split, hierarchy="hierarchy.json", dims=dims, clips=clips, tree=tree,
    )
    return manifest, grids
