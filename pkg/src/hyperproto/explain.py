"""Multi-level explanations: per-prototype activation maps, upsampling to
clip resolution, top-k prototype selection per hierarchy level, and heatmap
rendering.

Upsampling uses trilinear interpolation with the align-corners-false
convention: output index u along an axis of source length S_in and output
length S_out reads the source at s = (u + 0.5) * S_in / S_out - 0.5, edge
values clamped. The source cell of an output position is floor(s + 0.5)
clipped to [0, S_in - 1]; for peaked similarity maps the argmax of the
upsampled map falls back into the raw argmax cell under this transform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .hierarchy import HierarchyTree
from .protonet import (
    ModelState,
    forward,
    patch_distances,
    predict_children,
    similarity_from_distances,
)
from .tensorio import FeatureGrid

# rendering constants
_OVERLAY_ALPHA = 0.5
LEVEL_ORDER = ("grandparent", "parent", "child")


@dataclass(frozen=True)
class ActivationMap:
    prototype_id: int
    owner_id: int
    owner_level: str
    raw: np.ndarray          # (Tm, Hm, Wm) similarity per patch position
    upsampled: np.ndarray    # (T_up, H_up, W_up)
    raw_argmax: Tuple[int, int, int]
    upsampled_argmax: Tuple[int, int, int]


@dataclass(frozen=True)
class PrototypeHit:
    rank: int                # 1-based within its level
    prototype_id: int
    similarity: float
    map: ActivationMap
    provenance: Optional[dict]


@dataclass(frozen=True)
class LevelExplanation:
    level: str
    class_id: int
    class_name: str
    hits: Tuple[PrototypeHit, ...]


@dataclass(frozen=True)
class Explanation:
    clip_id: str
    predicted_child: int
    predicted_path: Dict[str, int]           # level name -> class id
    levels: Tuple[LevelExplanation, ...]     # grandparent first
    notices: Tuple[str, ...]


def upsample_map(raw: np.ndarray, out_dims: Tuple[int, int, int]) -> np.ndarray:
    """Trilinear upsampling of a (Tm, Hm, Wm) map to out_dims = (W, H, T)."""
    if raw.ndim != 3:
        raise ValueError(f"activation map must be 3-D, got {raw.ndim}-D")
    w_out, h_out, t_out = out_dims
    if min(out_dims) < 1:
        raise ValueError(f"output dims must be positive, got {out_dims}")
    t = torch.from_numpy(np.ascontiguousarray(raw))[None, None]
    up = torch.nn.functional.interpolate(
        t, size=(t_out, h_out, w_out), mode="trilinear", align_corners=False,
    )
    return up[0, 0].numpy()


def source_cell(position: Tuple[int, int, int], raw_shape: Tuple[int, ...],
                upsampled_shape: Tuple[int, ...]) -> Tuple[int, int, int]:
    """Raw-map cell that an upsampled position reads from."""
    cells = []
    for u, s_in, s_out in zip(position, raw_shape, upsampled_shape):
        s = (u + 0.5) * (s_in / s_out) - 0.5
        cells.append(int(np.clip(np.floor(s + 0.5), 0, s_in - 1)))
    return tuple(cells)


def argmax_consistent(amap: ActivationMap) -> bool:
    """True when the upsampled argmax maps back into the raw argmax cell."""
    return source_cell(amap.upsampled_argmax, amap.raw.shape,
                       amap.upsampled.shape) == amap.raw_argmax


def _first_argmax(values: np.ndarray) -> Tuple[int, ...]:
    return tuple(int(i) for i in np.unravel_index(int(np.argmax(values)),
                                                  values.shape))


def activation_map(grid: FeatureGrid, model: ModelState, tree: HierarchyTree,
                   prototype_id: int,
                   out_dims: Optional[Tuple[int, int, int]] = None
                   ) -> ActivationMap:
    """Similarity of one prototype at every patch position of one clip,
    plus the trilinear upsampling to out_dims (default: the grid's W, H, T).
    """
    if not 0 <= prototype_id < model.bank.count:
        raise ValueError(
            f"prototype id {prototype_id} outside [0, {model.bank.count})"
        )
    if out_dims is None:
        out_dims = grid.dims[:3]
    with torch.no_grad():
        z = model.adapters.apply(torch.from_numpy(grid.data).unsqueeze(0))[0]
        d2 = patch_distances(z, model.bank.prototypes[prototype_id])
        raw = similarity_from_distances(d2, model.config.similarity_eps).numpy()
    upsampled = upsample_map(raw, out_dims)
    owner = model.bank.owner_ids[prototype_id]
    return ActivationMap(
        prototype_id=prototype_id,
        owner_id=owner,
        owner_level=tree.level_of(owner),
        raw=raw,
        upsampled=upsampled,
        raw_argmax=_first_argmax(raw),
        upsampled_argmax=_first_argmax(upsampled),
    )


def explain_clip(grid: FeatureGrid, clip_id: str, model: ModelState,
                 tree: HierarchyTree, k: int = 1,
                 out_dims: Optional[Tuple[int, int, int]] = None
                 ) -> Explanation:
    """Top-k prototype explanation at every level of the predicted path.

    Levels whose class owns no prototypes are omitted with a notice; levels
    owning fewer than k prototypes report all of them.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    with torch.no_grad():
        out = forward(model, torch.from_numpy(grid.data).unsqueeze(0))
        predicted = predict_children(model, out)[0]
        scores = out.scores[0].numpy()
    child, parent, grandparent = tree.path_ids(predicted)
    path = {"grandparent": grandparent, "parent": parent, "child": child}

    levels: List[LevelExplanation] = []
    notices: List[str] = []
    for level in LEVEL_ORDER:
        class_id = path[level]
        owned = model.bank.indices_for_owner(class_id)
        if not owned:
            notices.append(
                f"{level} class {tree.name_of(class_id)} (id {class_id}) "
                f"owns no prototypes; level omitted"
            )
            continue
        ranked = sorted(owned, key=lambda j: (-scores[j], j))[:k]
        hits = tuple(
            PrototypeHit(
                rank=rank,
                prototype_id=j,
                similarity=float(scores[j]),
                map=activation_map(grid, model, tree, j, out_dims),
                provenance=model.bank.provenance[j],
            )
            for rank, j in enumerate(ranked, start=1)
        )
        levels.append(LevelExplanation(
            level=level, class_id=class_id,
            class_name=tree.name_of(class_id), hits=hits,
        ))
    return Explanation(
        clip_id=clip_id, predicted_child=predicted, predicted_path=path,
        levels=tuple(levels), notices=tuple(notices),
    )


def _to_gray(values: np.ndarray) -> np.ndarray:
    """Min-max normalize one map to uint8; a constant map renders black."""
    lo = float(values.min())
    hi = float(values.max())
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    scaled = (values - lo) / (hi - lo) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def write_pgm(path: Path, image: np.ndarray, comment: Optional[str] = None) -> None:
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM image must be 2-D uint8")
    h, w = image.shape
    header = b"P5\n"
    if comment:
        if "\n" in comment:
            raise ValueError("PGM comment must be a single line")
        header += b"# " + comment.encode("ascii") + b"\n"
    header += f"{w} {h}\n255\n".encode("ascii")
    path.write_bytes(header + image.tobytes())


def read_pgm(path: Path) -> Tuple[np.ndarray, List[str]]:
    """Minimal P5 reader used by tests; returns (image, comment lines)."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a P5 PGM file")
    fields = []
    comments = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comments.append(data[pos + 1:end].decode("ascii").strip())
            pos = end + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(int(data[pos:end]))
        pos = end
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported max value {maxval}")
    image = np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(h, w)
    return image, comments


def explanation_to_dict(explanation: Explanation) -> dict:
    return {
        "clip_id": explanation.clip_id,
        "predicted_child": explanation.predicted_child,
        "predicted_path": dict(explanation.predicted_path),
        "notices": list(explanation.notices),
        "levels": [
            {
                "level": lv.level,
                "class_id": lv.class_id,
                "class_name": lv.class_name,
                "prototypes": [
                    {
                        "rank": hit.rank,
                        "prototype_id": hit.prototype_id,
                        "similarity": hit.similarity,
                        "raw_argmax": list(hit.map.raw_argmax),
                        "upsampled_argmax": list(hit.map.upsampled_argmax),
                        "raw_shape": list(hit.map.raw.shape),
                        "upsampled_shape": list(hit.map.upsampled.shape),
                        "provenance": (
                            None if hit.provenance is None else {
                                "clip_id": hit.provenance["clip_id"],
                                "position": list(hit.provenance["position"]),
                                "epoch": hit.provenance["epoch"],
                            }
                        ),
                    }
                    for hit in lv.hits
                ],
            }
            for lv in explanation.levels
        ],
    }


def render(explanation: Explanation, out_dir,
           raw_frames: Optional[np.ndarray] = None,
           comment: Optional[str] = None,
           metadata: Optional[dict] = None) -> List[Path]:
    """Write per-time-step heatmaps and a JSON index for one explanation.

    Layout: <out_dir>/<clip_id>/<level>/<rank>_<prototype_id>_<t>.pgm plus
    <out_dir>/<clip_id>/explanation.json. When raw_frames (F, H, W) uint8 is
    given with F >= the upsampled temporal extent and matching spatial dims,
    alpha-blended overlays are written next to each heatmap. Returns the
    written paths in order.
    """
    clip_dir = Path(out_dir) / explanation.clip_id
    written: List[Path] = []
    for lv in explanation.levels:
        for hit in lv.hits:
            t_up, h_up, w_up = hit.map.upsampled.shape
            if raw_frames is not None:
                if raw_frames.ndim != 3 or raw_frames.dtype != np.uint8:
                    raise ValueError("raw_frames must be (F, H, W) uint8")
                if raw_frames.shape[0] < t_up \
                        or raw_frames.shape[1:] != (h_up, w_up):
                    raise ValueError(
                        f"raw_frames {raw_frames.shape} do not cover the "
                        f"upsampled map {(t_up, h_up, w_up)}"
                    )
            level_dir = clip_dir / lv.level
            level_dir.mkdir(parents=True, exist_ok=True)
            for t in range(t_up):
                gray = _to_gray(hit.map.upsampled[t])
                path = level_dir / f"{hit.rank}_{hit.prototype_id}_{t}.pgm"
                write_pgm(path, gray, comment)
                written.append(path)
                if raw_frames is not None:
                    blend = np.floor(
                        _OVERLAY_ALPHA * raw_frames[t].astype(np.float64)
                        + (1.0 - _OVERLAY_ALPHA) * gray.astype(np.float64)
                        + 0.5
                    ).astype(np.uint8)
                    overlay = level_dir \
                        / f"{hit.rank}_{hit.prototype_id}_{t}_overlay.pgm"
                    write_pgm(overlay, blend, comment)
                    written.append(overlay)
    clip_dir.mkdir(parents=True, exist_ok=True)
    index = explanation_to_dict(explanation)
    if metadata:
        index["metadata"] = metadata
    index_path = clip_dir / "explanation.json"
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    written.append(index_path)
    return written
