"""Writers for the grid and manifest file formats the trainer consumes.

Grid files are little-endian:

    bytes 0..4    magic "HPFG"
    bytes 4..8    u32 format version (currently 1)
    bytes 8..24   u32 W, H, T, D
    bytes 24..    T*H*W*D float64 values, D fastest, then W, then H, then T

Manifests are JSON objects {"split", "hierarchy", "dims", "clips"} where
each clip entry carries clip_id, video_id, an integer child-class label
and a grid path relative to the manifest file. Both writers work from
these byte and schema definitions alone; nothing here imports the
trainer's code.
"""

import json
import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from . import ExportError

GRID_MAGIC = b"HPFG"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


def grid_bytes(data: np.ndarray) -> bytes:
    """Serialize a (T, H, W, D) array to grid file bytes."""
    if data.ndim != 4:
        raise ExportError(f"feature map must have 4 axes, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise ExportError("feature map contains non-finite values")
    t, h, w, d = data.shape
    header = _HEADER.pack(GRID_MAGIC, GRID_VERSION, w, h, t, d)
    return header + np.ascontiguousarray(data, dtype="<f8").tobytes()


def write_grid_file(path, data: np.ndarray) -> None:
    Path(path).write_bytes(grid_bytes(data))


def write_manifest(path, split: str, hierarchy: str,
                   dims: Tuple[int, int, int, int], clips: List[Dict]) -> None:
    """Write a dataset manifest. `hierarchy` and every clip's grid_path
    must be relative to the manifest's directory."""
    payload = {
        "split": split,
        "hierarchy": hierarchy,
        "dims": list(dims),
        "clips": clips,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def child_labels(hierarchy_path) -> Dict[str, int]:
    """Map child-class names to ids in a hierarchy JSON file.

    The hierarchy format is a JSON array of node records with keys id,
    name, level and (except at the top level) parent; only records with
    level "child" are legal clip labels.
    """
    path = Path(hierarchy_path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ExportError(f"cannot read hierarchy {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ExportError(f"hierarchy {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise ExportError(f"hierarchy {path} must be a JSON array of node records")
    names: Dict[str, int] = {}
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise ExportError(f"hierarchy {path}: entry {i} is not an object")
        if entry.get("level") != "child":
            continue
        try:
            names[str(entry["name"])] = int(entry["id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ExportError(f"hierarchy {path}: entry {i} is malformed: {exc}") from None
    if not names:
        raise ExportError(f"hierarchy {path} declares no child classes")
    return names
