"""Prototype network over spatiotemporal feature grids.

Pipeline per clip: two pointwise channel-mixing layers -> sliding-window
squared distances between every prototype and every patch -> per-prototype
similarity score (max over positions) -> fully connected head -> exponential
map into the Poincare ball, where class probabilities come from a softmax
over negative hyperbolic distances to the child class templates.

Prototypes are owned by classes: every child class owns the same number m,
every ancestor class the same number n (n = 0 gives the flat baseline).

Checkpoint file layout (little-endian):

    magic "HPMS", u32 version
    u8 euclidean_head, u8 include_ancestor_classes, u16 zero padding
    u32 in_channels, hidden_channels, channels, head_cols,
        prototype_t, prototype_h, prototype_w,
        prototypes_per_child, prototypes_per_ancestor, prototype_count
    u32 child class count, then the child class ids
    f64 similarity_eps, cluster_weight, separation_weight, leaky_slope
    32-byte sha256 of the template file (zeros when no templates are used)
    owner class ids, u32 per prototype
    adapter w1, b1, w2, b2 as f64
    prototypes as f64, row-major (count, T1, H1, W1, D)
    head as f64, row-major (count, head_cols)
    per prototype: u8 provenance flag; if set, u32 clip-id length + UTF-8
    bytes, u32 t, h, w patch position, u32 epoch
"""

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import ToolkitError
from .embed import TemplateMatrix, write_templates
from .hierarchy import HierarchyTree
from .poincare import distance, exp_map_zero
from .tensorio import FeatureGrid

CHECKPOINT_MAGIC = b"HPMS"
CHECKPOINT_VERSION = 1


class ConfigurationError(ToolkitError):
    pass


class CheckpointFormatError(ToolkitError):
    pass


@dataclass
class ModelConfig:
    in_channels: int
    channels: Optional[int] = None          # adapter output width; defaults to in_channels
    hidden_channels: Optional[int] = None   # middle adapter width; defaults to channels
    prototype_dims: Tuple[int, int, int] = (1, 1, 1)   # (W1, H1, T1)
    prototypes_per_child: int = 10
    prototypes_per_ancestor: int = 5
    similarity_eps: float = 1e-4
    cluster_weight: float = 0.8
    separation_weight: float = 0.08
    leaky_slope: float = 0.01
    euclidean_head: bool = False
    include_ancestor_classes: bool = False
    seed: int = 0

    def resolved(self) -> "ModelConfig":
        cfg = ModelConfig(**{**self.__dict__})
        if cfg.channels is None:
            cfg.channels = cfg.in_channels
        if cfg.hidden_channels is None:
            cfg.hidden_channels = cfg.channels
        return cfg

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigurationError("in_channels must be >= 1")
        if min(self.prototype_dims) < 1:
            raise ConfigurationError("prototype dims must be positive")
        if self.prototypes_per_child < 1:
            raise ConfigurationError("prototypes_per_child must be >= 1")
        if self.prototypes_per_ancestor < 0:
            raise ConfigurationError("prototypes_per_ancestor must be >= 0")
        if self.similarity_eps <= 0:
            raise ConfigurationError("similarity_eps must be > 0")
        if self.cluster_weight < 0 or self.separation_weight < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if self.euclidean_head and self.include_ancestor_classes:
            raise ConfigurationError(
                "include_ancestor_classes requires the hyperbolic head"
            )


class AdapterStack:
    """Two pointwise channel-mixing layers with LeakyReLU after each."""

    def __init__(self, w1: torch.Tensor, b1: torch.Tensor,
                 w2: torch.Tensor, b2: torch.Tensor, leaky_slope: float = 0.01):
        if w1.shape[1] != b1.shape[0] or w2.shape[0] != w1.shape[1] \
                or w2.shape[1] != b2.shape[0]:
            raise ConfigurationError(
                f"inconsistent adapter shapes {tuple(w1.shape)}, {tuple(w2.shape)}"
            )
        for name, t in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
            if not torch.isfinite(t).all():
                raise ConfigurationError(f"adapter {name} contains non-finite entries")
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2
        self.leaky_slope = leaky_slope

    @classmethod
    def initialize(cls, in_channels: int, hidden_channels: int, out_channels: int,
                   seed: int, leaky_slope: float = 0.01) -> "AdapterStack":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 10]))

        def layer(fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=fan_out)
            return (torch.tensor(w, dtype=torch.float64),
                    torch.tensor(b, dtype=torch.float64))

        w1, b1 = layer(in_channels, hidden_channels)
        w2, b2 = layer(hidden_channels, out_channels)
        return cls(w1, b1, w2, b2, leaky_slope)

    @property
    def in_channels(self) -> int:
        return self.w1.shape[0]

    @property
    def out_channels(self) -> int:
        return self.w2.shape[1]

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_channels:
            raise ConfigurationError(
                f"adapter expects {self.in_channels} channels, got {x.shape[-1]}"
            )
        y = torch.nn.functional.leaky_relu(x @ self.w1 + self.b1, self.leaky_slope)
        return torch.nn.functional.leaky_relu(y @ self.w2 + self.b2, self.leaky_slope)

    def parameters(self) -> List[torch.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


class PrototypeBank:
    """All prototypes stacked as (count, T1, H1, W1, D), plus per-prototype
    owner class ids and projection provenance."""

    def __init__(self, prototypes: torch.Tensor, owner_ids: Sequence[int],
                 provenance: Optional[List[Optional[dict]]] = None):
        if prototypes.ndim != 5:
            raise ConfigurationError(
                f"prototypes must be 5-D (count, T1, H1, W1, D), got {prototypes.ndim}-D"
            )
        if len(owner_ids) != prototypes.shape[0]:
            raise ConfigurationError(
                f"{len(owner_ids)} owners for {prototypes.shape[0]} prototypes"
            )
        self.prototypes = prototypes
        self.owner_ids = tuple(int(i) for i in owner_ids)
        self.provenance = provenance if provenance is not None \
            else [None] * prototypes.shape[0]

    @classmethod
    def initialize(cls, tree: HierarchyTree, per_child: int, per_ancestor: int,
                   window: Tuple[int, int, int], channels: int, seed: int) -> "PrototypeBank":
        w1, h1, t1 = window
        owners = []
        for child in tree.child_ids:
            owners.extend([child] * per_child)
        for ancestor in tree.ancestor_ids:
            owners.extend([ancestor] * per_ancestor)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        values = rng.uniform(0.0, 1.0, size=(len(owners), t1, h1, w1, channels))
        return cls(torch.tensor(values, dtype=torch.float64), owners)

    @property
    def count(self) -> int:
        return self.prototypes.shape[0]

    @property
    def window(self) -> Tuple[int, int, int]:
        # (W1, H1, T1)
        _, t1, h1, w1, _ = self.prototypes.shape
        return (w1, h1, t1)

    @property
    def channels(self) -> int:
        return self.prototypes.shape[4]

    def indices_for_owner(self, class_id: int) -> List[int]:
        return [j for j, owner in enumerate(self.owner_ids) if owner == class_id]

    def validate_counts(self, tree: HierarchyTree, per_child: int, per_ancestor: int) -> None:
        for child in tree.child_ids:
            if len(self.indices_for_owner(child)) != per_child:
                raise ConfigurationError(
                    f"child class {child} must own exactly {per_child} prototypes"
                )
        for ancestor in tree.ancestor_ids:
            if len(self.indices_for_owner(ancestor)) != per_ancestor:
                raise ConfigurationError(
                    f"ancestor class {ancestor} must own exactly {per_ancestor} prototypes"
                )


@dataclass
class ModelState:
    adapters: AdapterStack
    bank: PrototypeBank
    head: torch.Tensor                      # (count, head_cols)
    templates: Optional[TemplateMatrix]     # frozen; None for the Euclidean head
    child_class_ids: Tuple[int, ...]
    config: ModelConfig

    def __post_init__(self):
        if not torch.isfinite(self.head).all():
            raise ConfigurationError("head contains non-finite entries")
        if self.head.shape[0] != self.bank.count:
            raise ConfigurationError(
                f"head rows {self.head.shape[0]} != prototype count {self.bank.count}"
            )
        if self.config.euclidean_head:
            if self.head.shape[1] != len(self.child_class_ids):
                raise ConfigurationError(
                    "euclidean head must have one column per child class"
                )
        else:
            if self.templates is None:
                raise ConfigurationError("hyperbolic head requires templates")
            if self.head.shape[1] != self.templates.dim:
                raise ConfigurationError(
                    f"head columns {self.head.shape[1]} != template dim "
                    f"{self.templates.dim}"
                )

    def class_set(self) -> Tuple[int, ...]:
        """Ids the classification softmax ranges over, children first."""
        if self.config.include_ancestor_classes:
            extra = tuple(i for i in self.templates.node_ids
                          if i not in self.child_class_ids)
            return self.child_class_ids + tuple(sorted(extra))
        return self.child_class_ids

    def parameter_groups(self) -> Dict[str, List[torch.Tensor]]:
        return {
            "adapters": self.adapters.parameters(),
            "prototypes": [self.bank.prototypes],
            "head": [self.head],
        }


def _class_identity_head(owner_ids, column_ids, rows, cols) -> np.ndarray:
    m = np.full((rows, cols), -0.5)
    col = {c: k for k, c in enumerate(column_ids)}
    for j, owner in enumerate(owner_ids):
        if owner in col:
            m[j, col[owner]] = 1.0
    return m / np.sqrt(rows)


def build_model(tree: HierarchyTree, templates: Optional[TemplateMatrix],
                config: ModelConfig) -> ModelState:
    config = config.resolved()
    config.validate()
    if not config.euclidean_head:
        if templates is None:
            raise ConfigurationError("hyperbolic head requires a template matrix")
        missing = [i for i in tree.child_ids + tree.ancestor_ids
                   if i not in templates.index]
        if missing:
            raise ConfigurationError(f"templates missing for classes {missing}")

    adapters = AdapterStack.initialize(
        config.in_channels, config.hidden_channels, config.channels,
        config.seed, config.leaky_slope,
    )
    bank = PrototypeBank.initialize(
        tree, config.prototypes_per_child, config.prototypes_per_ancestor,
        config.prototype_dims, config.channels, config.seed,
    )
    if config.euclidean_head:
        head = _class_identity_head(bank.owner_ids, tree.child_ids,
                                    bank.count, tree.num_children)
        head_t = torch.tensor(head, dtype=torch.float64)
    else:
        # start each prototype's head row pointing at its owner's template
        identity = _class_identity_head(bank.owner_ids, templates.node_ids,
                                        bank.count, len(templates.node_ids))
        head_t = torch.tensor(identity, dtype=torch.float64) @ templates.points
    return ModelState(
        adapters=adapters, bank=bank, head=head_t, templates=templates,
        child_class_ids=tree.child_ids, config=config,
    )


def batch_tensor(grids: Sequence[FeatureGrid]) -> torch.Tensor:
    if not grids:
        raise ValueError("empty grid batch")
    dims = grids[0].dims
    for g in grids:
        if g.dims != dims:
            raise ValueError(f"mixed grid dims in batch: {g.dims} vs {dims}")
    return torch.from_numpy(np.stack([g.data for g in grids]))


def _window_view(z: torch.Tensor, window: Tuple[int, int, int]) -> torch.Tensor:
    """(B, T, H, W, D) -> (B, positions, T1*H1*W1*D) sliding windows with
    stride 1, positions in (T, H, W) scan order."""
    w1, h1, t1 = window
    b, t, h, w, d = z.shape
    if t1 > t or h1 > h or w1 > w:
        raise ConfigurationError(
            f"prototype window {(w1, h1, t1)} exceeds grid dims {(w, h, t)}"
        )
    v = z.unfold(1, t1, 1).unfold(2, h1, 1).unfold(3, w1, 1)
    # (B, Tm, Hm, Wm, D, t1, h1, w1) -> (B, Tm, Hm, Wm, t1, h1, w1, D)
    v = v.permute(0, 1, 2, 3, 5, 6, 7, 4)
    return v.reshape(b, -1, t1 * h1 * w1 * d)


def _batch_patch_distances(z: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Squared distances (B, positions, J) between every sliding window of z
    and every prototype."""
    count = prototypes.shape[0]
    window = (prototypes.shape[3], prototypes.shape[2], prototypes.shape[1])
    views = _window_view(z, window)
    flat = prototypes.reshape(count, -1)
    d2 = (views * views).sum(dim=2, keepdim=True) \
        + (flat * flat).sum(dim=1) \
        - 2.0 * views @ flat.T
    return d2.clamp_min(0.0)


def patch_distances(grid: torch.Tensor, prototype: torch.Tensor) -> torch.Tensor:
    """Squared distance between one prototype (T1, H1, W1, D) and every patch
    of one adapted grid (T, H, W, D); output (T-T1+1, H-H1+1, W-W1+1)."""
    if grid.ndim != 4 or prototype.ndim != 4:
        raise ValueError("grid and prototype must be 4-D (T, H, W, D)")
    if grid.shape[3] != prototype.shape[3]:
        raise ConfigurationError(
            f"channel mismatch: grid {grid.shape[3]}, prototype {prototype.shape[3]}"
        )
    t1, h1, w1, _ = prototype.shape
    t, h, w, _ = grid.shape
    d2 = _batch_patch_distances(grid.unsqueeze(0), prototype.unsqueeze(0))
    return d2[0, :, 0].reshape(t - t1 + 1, h - h1 + 1, w - w1 + 1)


def similarity_from_distances(d2: torch.Tensor, eps: float) -> torch.Tensor:
    return torch.log((d2 + 1.0) / (d2 + eps))


def similarity_score(distance_map: torch.Tensor, eps: float):
    """Best similarity over a squared-distance map plus the achieving
    position, first in (T, H, W) scan order on ties."""
    if distance_map.numel() == 0:
        raise ValueError("empty distance map")
    flat = distance_map.detach().reshape(-1).numpy()
    best = int(np.argmin(flat))
    position = tuple(int(i) for i in np.unravel_index(best, distance_map.shape))
    score = similarity_from_distances(distance_map.reshape(-1)[best], eps)
    return score, position


@dataclass
class ForwardOut:
    min_d2: torch.Tensor          # (B, J) smallest squared patch distance
    positions: np.ndarray         # (B, J, 3) argmin patch (t, h, w), scan-order ties
    scores: torch.Tensor          # (B, J) similarity scores
    h: torch.Tensor               # (B, head_cols) head output
    h_e: Optional[torch.Tensor]   # (B, n) ball embedding; None for euclidean head


def forward(model: ModelState, grids: torch.Tensor) -> ForwardOut:
    """Run the network on a batch (B, T, H, W, D_in) of feature grids."""
    if grids.ndim == 4:
        grids = grids.unsqueeze(0)
    if grids.ndim != 5:
        raise ValueError(f"expected (B, T, H, W, D) input, got {grids.ndim}-D")
    z = model.adapters.apply(grids)
    d2 = _batch_patch_distances(z, model.bank.prototypes)
    min_d2 = d2.min(dim=1).values
    w1, h1, t1 = model.bank.window
    map_shape = (z.shape[1] - t1 + 1, z.shape[2] - h1 + 1, z.shape[3] - w1 + 1)
    flat_idx = d2.detach().numpy().argmin(axis=1)
    positions = np.stack(np.unravel_index(flat_idx, map_shape), axis=-1)
    scores = similarity_from_distances(min_d2, model.config.similarity_eps)
    h = scores @ model.head
    h_e = None if model.config.euclidean_head else exp_map_zero(h)
    return ForwardOut(min_d2=min_d2, positions=positions, scores=scores, h=h, h_e=h_e)


def class_probabilities(h_e: torch.Tensor, templates: TemplateMatrix,
                        class_ids: Sequence[int]) -> torch.Tensor:
    return torch.softmax(_class_logits(h_e, templates, class_ids), dim=-1)


def _class_logits(h_e: torch.Tensor, templates: TemplateMatrix,
                  class_ids: Sequence[int]) -> torch.Tensor:
    if len(class_ids) == 0:
        raise ValueError("empty class set")
    anchors = templates.rows_for(class_ids)
    single = h_e.ndim == 1
    if single:
        h_e = h_e.unsqueeze(0)
    logits = -distance(h_e.unsqueeze(1), anchors.unsqueeze(0))
    return logits[0] if single else logits


def model_logits(model: ModelState, out: ForwardOut) -> torch.Tensor:
    """Classification logits (B, K) over model.class_set()."""
    if model.config.euclidean_head:
        return out.h
    return _class_logits(out.h_e, model.templates, model.class_set())


def predict_children(model: ModelState, out: ForwardOut) -> List[int]:
    """Predicted child class id per clip: argmax probability, lowest id on
    ties. Ancestor entries of an extended class set never win."""
    logits = model_logits(model, out).detach().numpy()
    k = len(model.child_class_ids)
    return [model.child_class_ids[int(np.argmax(row[:k]))] for row in logits]


def _label_columns(model: ModelState, labels: Sequence[int]) -> torch.Tensor:
    class_ids = model.class_set() if not model.config.euclidean_head \
        else model.child_class_ids
    col = {c: k for k, c in enumerate(class_ids)}
    try:
        return torch.tensor([col[int(y)] for y in labels], dtype=torch.long)
    except KeyError as exc:
        raise ValueError(f"label {exc} is not a child class of this model") from None


def loss_crs(model: ModelState, out: ForwardOut, labels: Sequence[int]) -> torch.Tensor:
    """Mean negative log-likelihood of the true child class."""
    if len(labels) != out.scores.shape[0]:
        raise ValueError("one label per clip required")
    cols = _label_columns(model, labels)
    logp = torch.log_softmax(model_logits(model, out), dim=-1)
    return -logp[torch.arange(len(labels)), cols].mean()


def path_prototype_masks(model: ModelState, tree: HierarchyTree) -> Dict[int, torch.Tensor]:
    """For each child class, the boolean mask of prototypes owned by any
    class on its ancestor path."""
    owners = torch.tensor(model.bank.owner_ids, dtype=torch.long)
    masks = {}
    for child in tree.child_ids:
        path = tree.path_ids(child)
        mask = torch.zeros(model.bank.count, dtype=torch.bool)
        for class_id in path:
            mask |= owners == class_id
        masks[child] = mask
    return masks


def loss_cluster(model: ModelState, out: ForwardOut, labels: Sequence[int],
                 tree: HierarchyTree) -> torch.Tensor:
    """Mean over clips of the smallest squared patch distance to any
    prototype owned by a class on the true label's path."""
    masks = path_prototype_masks(model, tree)
    terms = []
    for row, label in enumerate(labels):
        mask = masks[int(label)]
        if not mask.any():
            raise ConfigurationError(
                f"no prototype owned by any class on the path of label {label}"
            )
        terms.append(out.min_d2[row][mask].min())
    return torch.stack(terms).mean()


def loss_separation(model: ModelState, out: ForwardOut, labels: Sequence[int],
                    tree: HierarchyTree) -> torch.Tensor:
    """Negated mean over clips of the smallest squared patch distance to any
    prototype NOT owned by a class on the true label's path. Clips with no
    off-path prototypes contribute zero."""
    masks = path_prototype_masks(model, tree)
    terms = []
    for row, label in enumerate(labels):
        off = ~masks[int(label)]
        if off.any():
            terms.append(out.min_d2[row][off].min())
        else:
            terms.append(torch.zeros((), dtype=out.min_d2.dtype))
    return -torch.stack(terms).mean()


def total_loss(model: ModelState, grids: torch.Tensor, labels: Sequence[int],
               tree: HierarchyTree):
    """Full objective: crs + cluster_weight * cluster + separation_weight *
    separation. Returns (total, per-term dict of tensors)."""
    out = forward(model, grids)
    crs = loss_crs(model, out, labels)
    cluster = loss_cluster(model, out, labels, tree)
    separation = loss_separation(model, out, labels, tree)
    total = crs + model.config.cluster_weight * cluster \
        + model.config.separation_weight * separation
    return total, {"crs": crs, "cluster": cluster, "separation": separation}


def template_file_hash(templates: Optional[TemplateMatrix]) -> bytes:
    if templates is None:
        return bytes(32)
    return hashlib.sha256(write_templates(templates)).digest()


def write_checkpoint(model: ModelState) -> bytes:
    cfg = model.config
    w1, h1, t1 = model.bank.window
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<BBH", int(cfg.euclidean_head),
                    int(cfg.include_ancestor_classes), 0),
        struct.pack(
            "<10I", cfg.in_channels, cfg.hidden_channels, cfg.channels,
            model.head.shape[1], t1, h1, w1,
            cfg.prototypes_per_child, cfg.prototypes_per_ancestor,
            model.bank.count,
        ),
        struct.pack("<I", len(model.child_class_ids)),
        struct.pack(f"<{len(model.child_class_ids)}I", *model.child_class_ids),
        struct.pack("<4d", cfg.similarity_eps, cfg.cluster_weight,
                    cfg.separation_weight, cfg.leaky_slope),
        template_file_hash(model.templates),
        struct.pack(f"<{model.bank.count}I", *model.bank.owner_ids),
    ]
    for tensor in (*model.adapters.parameters(), model.bank.prototypes, model.head):
        parts.append(tensor.detach().numpy().astype("<f8", copy=False).tobytes())
    for entry in model.bank.provenance:
        if entry is None:
            parts.append(b"\x00")
        else:
            clip = entry["clip_id"].encode("utf-8")
            t, h, w = entry["position"]
            parts.append(b"\x01" + struct.pack("<I", len(clip)) + clip
                         + struct.pack("<4I", t, h, w, entry["epoch"]))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, fmt: str):
        s = struct.Struct(fmt)
        if self.offset + s.size > len(self.data):
            raise CheckpointFormatError(
                f"checkpoint truncated at byte offset {self.offset}"
            )
        values = s.unpack_from(self.data, self.offset)
        self.offset += s.size
        return values

    def tensor(self, shape) -> torch.Tensor:
        count = int(np.prod(shape))
        end = self.offset + 8 * count
        if end > len(self.data):
            raise CheckpointFormatError(
                f"checkpoint truncated at byte offset {self.offset}"
            )
        values = np.frombuffer(self.data, dtype="<f8", count=count,
                               offset=self.offset).copy()
        self.offset = end
        if not np.isfinite(values).all():
            raise CheckpointFormatError("checkpoint contains non-finite parameters")
        return torch.from_numpy(values.reshape(shape))


def read_checkpoint(data: bytes,
                    templates: Optional[TemplateMatrix]) -> ModelState:
    r = _Reader(data)
    magic, version = r.take("<4sI")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r} at byte offset 0")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    euclidean, include_ancestors, _ = r.take("<BBH")
    (in_ch, hidden_ch, channels, head_cols, t1, h1, w1,
     per_child, per_ancestor, count) = r.take("<10I")
    (n_children,) = r.take("<I")
    child_ids = r.take(f"<{n_children}I")
    eps, lambda1, lambda2, slope = r.take("<4d")
    (stored_hash,) = r.take("<32s")
    owner_ids = r.take(f"<{count}I")

    if bool(euclidean):
        if stored_hash != bytes(32):
            raise CheckpointFormatError(
                "euclidean-head checkpoint carries a template hash"
            )
        templates = None
    else:
        if templates is None:
            raise CheckpointFormatError(
                "checkpoint needs the template matrix it was trained with"
            )
        if template_file_hash(templates) != stored_hash:
            raise CheckpointFormatError(
                "template hash mismatch: checkpoint was trained against a "
                "different template file"
            )

    w1_t = r.tensor((in_ch, hidden_ch))
    b1_t = r.tensor((hidden_ch,))
    w2_t = r.tensor((hidden_ch, channels))
    b2_t = r.tensor((channels,))
    prototypes = r.tensor((count, t1, h1, w1, channels))
    head = r.tensor((count, head_cols))

    provenance: List[Optional[dict]] = []
    for _ in range(count):
        (flag,) = r.take("<B")
        if flag == 0:
            provenance.append(None)
            continue
        (clip_len,) = r.take("<I")
        if r.offset + clip_len > len(data):
            raise CheckpointFormatError(
                f"checkpoint truncated at byte offset {r.offset}"
            )
        clip_id = data[r.offset:r.offset + clip_len].decode("utf-8")
        r.offset += clip_len
        t, h, w, epoch = r.take("<4I")
        provenance.append({"clip_id": clip_id, "position": (t, h, w), "epoch": epoch})
    if r.offset != len(data):
        raise CheckpointFormatError(
            f"{len(data) - r.offset} trailing bytes after checkpoint payload"
        )

    config = ModelConfig(
        in_channels=in_ch, channels=channels, hidden_channels=hidden_ch,
        prototype_dims=(w1, h1, t1), prototypes_per_child=per_child,
        prototypes_per_ancestor=per_ancestor, similarity_eps=eps,
        cluster_weight=lambda1, separation_weight=lambda2, leaky_slope=slope,
        euclidean_head=bool(euclidean),
        include_ancestor_classes=bool(include_ancestors),
    )
    adapters = AdapterStack(w1_t, b1_t, w2_t, b2_t, slope)
    bank = PrototypeBank(prototypes, owner_ids, provenance)
    return ModelState(adapters=adapters, bank=bank, head=head,
                      templates=templates, child_class_ids=tuple(child_ids),
                      config=config)


def save_checkpoint(model: ModelState, path) -> None:
    Path(path).write_bytes(write_checkpoint(model))


def load_checkpoint_file(path, templates: Optional[TemplateMatrix]) -> ModelState:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return read_checkpoint(data, templates)
    except CheckpointFormatError as exc:
        raise CheckpointFormatError(f"{path}: {exc}") from None
