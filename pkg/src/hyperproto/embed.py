"""Embedding of the label hierarchy into the Poincare ball.

Every hierarchy node gets one template point. Training pulls each node
toward its parent relative to sampled non-parents and pushes sibling
templates apart, using Riemannian Adam steps (Euclidean Adam moments on the
rescaled gradient, followed by a ball projection).

Template file layout (little-endian):

    bytes 0..4   magic "HPTM"
    bytes 4..8   u32 format version (currently 1)
    bytes 8..12  u32 embedding dimension n
    bytes 12..16 u32 node count
    then         node ids, u32 each, in storage order
    then         one float64 row of n coordinates per node, same order
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
import torch

from . import ToolkitError
from .hierarchy import HierarchyTree, PairBatch, sample_pairs
from .poincare import distance, project_to_ball, riemannian_rescale

TEMPLATE_MAGIC = b"HPTM"
TEMPLATE_VERSION = 1
_TEMPLATE_HEADER = struct.Struct("<4sIII")

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


class TemplateFormatError(ToolkitError):
    pass


class TrainingError(ToolkitError):
    pass


class TemplateMatrix:
    """Template points for a set of hierarchy nodes, one row per node."""

    def __init__(self, node_ids, points: torch.Tensor):
        node_ids = tuple(int(i) for i in node_ids)
        if points.ndim != 2:
            raise ValueError(f"points must be 2-D, got shape {tuple(points.shape)}")
        if len(node_ids) != points.shape[0]:
            raise ValueError(
                f"{len(node_ids)} node ids for {points.shape[0]} template rows"
            )
        if len(set(node_ids)) != len(node_ids):
            raise ValueError("node ids must be unique")
        if points.dtype != torch.float64:
            raise ValueError(f"points must be float64, got {points.dtype}")
        with torch.no_grad():
            if not torch.isfinite(points).all():
                raise ValueError("template points contain non-finite entries")
            norms = points.norm(dim=-1)
            if (norms >= 1.0).any():
                worst = norms.max().item()
                raise ValueError(f"template norm {worst:.6g} outside the unit ball")
        self.node_ids = node_ids
        self.points = points
        self.index = {node_id: row for row, node_id in enumerate(node_ids)}

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def point(self, node_id: int) -> torch.Tensor:
        return self.points[self.index[node_id]]

    def rows_for(self, node_ids) -> torch.Tensor:
        return self.points[[self.index[i] for i in node_ids]]

    def detached(self) -> "TemplateMatrix":
        return TemplateMatrix(self.node_ids, self.points.detach().clone())


def write_templates(templates: TemplateMatrix) -> bytes:
    count, dim = templates.points.shape
    header = _TEMPLATE_HEADER.pack(TEMPLATE_MAGIC, TEMPLATE_VERSION, dim, count)
    ids = struct.pack(f"<{count}I", *templates.node_ids)
    payload = templates.points.detach().numpy().astype("<f8", copy=False).tobytes()
    return header + ids + payload


def read_templates(data: bytes) -> TemplateMatrix:
    if len(data) < _TEMPLATE_HEADER.size:
        raise TemplateFormatError(
            f"template file truncated: {len(data)} bytes, header needs "
            f"{_TEMPLATE_HEADER.size}"
        )
    magic, version, dim, count = _TEMPLATE_HEADER.unpack_from(data, 0)
    if magic != TEMPLATE_MAGIC:
        raise TemplateFormatError(f"bad magic {magic!r} at byte offset 0")
    if version != TEMPLATE_VERSION:
        raise TemplateFormatError(f"unsupported template version {version}")
    if dim < 1 or count < 1:
        raise TemplateFormatError(f"invalid dimensions: n={dim}, nodes={count}")
    expected = _TEMPLATE_HEADER.size + 4 * count + 8 * count * dim
    if len(data) != expected:
        raise TemplateFormatError(
            f"template size mismatch: expected {expected} bytes, got {len(data)}"
        )
    ids = struct.unpack_from(f"<{count}I", data, _TEMPLATE_HEADER.size)
    offset = _TEMPLATE_HEADER.size + 4 * count
    values = np.frombuffer(data, dtype="<f8", offset=offset).copy().reshape(count, dim)
    points = torch.from_numpy(values)
    try:
        return TemplateMatrix(ids, points)
    except ValueError as exc:
        raise TemplateFormatError(str(exc)) from None


def save_templates(templates: TemplateMatrix, path) -> None:
    Path(path).write_bytes(write_templates(templates))


def load_templates_file(path) -> TemplateMatrix:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise TemplateFormatError(f"cannot read template file {path}: {exc}") from exc
    try:
        return read_templates(data)
    except TemplateFormatError as exc:
        raise TemplateFormatError(f"{path}: {exc}") from None


@dataclass
class EmbedConfig:
    dim: int = 256
    epochs: int = 1000
    learning_rate: float = 1e-3
    separation_weight: float = 0.1      # weight of the sibling/orthogonality term
    orthogonality_weight: float = 0.1   # weight of the identity penalty inside it
    negatives_per_positive: int = 10
    seed: int = 0
    init_scale: float = 1e-3
    # Keep the positive pair out of the softmax denominator by default; with
    # it included the objective saturates instead of reaching zero.
    include_positive_in_denominator: bool = False
    # The printed sibling term rewards large sibling Gram norms when
    # minimized; the default pushes siblings apart instead.
    flip_sibling_sign: bool = False

    def validate(self) -> None:
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")
        if self.separation_weight < 0 or self.orthogonality_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0 < self.init_scale < 1:
            raise ValueError("init_scale must be in (0, 1)")


def hierarchy_loss(templates: TemplateMatrix, batch: PairBatch,
                   include_positive: bool = False) -> torch.Tensor:
    """Softmax contrastive loss over hyperbolic distances: each anchor's
    distance to its parent, normalized against its sampled negatives.
    Returns the minimized quantity (lower is better, zero unreachable)."""
    if not batch.positives:
        raise ValueError("empty pair batch")
    widths = {len(negs) for negs in batch.negatives}
    if len(widths) != 1:
        raise ValueError("all positives must carry the same number of negatives")
    index = templates.index
    anchor_rows = [index[v] for v, _ in batch.positives]
    parent_rows = [index[u] for _, u in batch.positives]
    neg_rows = [[index[u] for _, u in negs] for negs in batch.negatives]

    pts = templates.points
    anchors = pts[anchor_rows]
    parents = pts[parent_rows]
    negatives = pts[torch.tensor(neg_rows, dtype=torch.long)]

    d_pos = distance(anchors, parents)
    d_neg = distance(anchors.unsqueeze(1), negatives)
    scores = -d_neg
    if include_positive:
        scores = torch.cat([scores, -d_pos.unsqueeze(1)], dim=1)
    return (d_pos + torch.logsumexp(scores, dim=1)).sum()


def _frobenius(m: torch.Tensor) -> torch.Tensor:
    # sqrt with a floor so the gradient stays finite at the zero matrix
    return (m * m).sum().clamp_min(1e-30).sqrt()


def separation_loss(templates: TemplateMatrix, tree: HierarchyTree,
                    orthogonality_weight: float,
                    flip_sibling_sign: bool = False) -> torch.Tensor:
    """Per child class: a sibling Gram-norm term plus a penalty tying the
    remaining child templates' outer product to the identity."""
    pts = templates.points
    index = templates.index
    eye = torch.eye(templates.dim, dtype=pts.dtype)
    sign = 1.0 if flip_sibling_sign else -1.0
    terms = []
    for child in tree.child_ids:
        siblings = tree.siblings(child)
        if siblings:
            sib = pts[[index[s] for s in siblings]]
            terms.append(sign * _frobenius(sib @ sib.T))
        rest = [c for c in tree.child_ids if c != child and c not in siblings]
        if rest:
            other = pts[[index[c] for c in rest]]
            terms.append(orthogonality_weight * _frobenius(other.T @ other - eye))
        else:
            terms.append(orthogonality_weight * _frobenius(-eye))
    return torch.stack(terms).sum()


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train_embeddings(tree: HierarchyTree, cfg: EmbedConfig) -> Tuple[TemplateMatrix, list]:
    """Fit one template per hierarchy node. Returns the trained templates and
    a per-epoch trace of the loss terms."""
    cfg.validate()
    node_ids = [n.id for n in tree.nodes]
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    points = torch.tensor(
        init_rng.uniform(-cfg.init_scale, cfg.init_scale, size=(len(node_ids), cfg.dim)),
        dtype=torch.float64, requires_grad=True,
    )
    templates = TemplateMatrix(node_ids, points)

    m = torch.zeros_like(points)
    v = torch.zeros_like(points)
    trace = []
    for epoch in range(1, cfg.epochs + 1):
        batch = sample_pairs(tree, cfg.negatives_per_positive, _epoch_seed(cfg.seed, epoch))
        pair_loss = hierarchy_loss(templates, batch, cfg.include_positive_in_denominator)
        if cfg.separation_weight != 0.0:
            sep_loss = separation_loss(
                templates, tree, cfg.orthogonality_weight, cfg.flip_sibling_sign
            )
        else:
            sep_loss = torch.zeros((), dtype=torch.float64)
        total = pair_loss + cfg.separation_weight * sep_loss
        if not torch.isfinite(total):
            raise TrainingError(f"non-finite embedding loss at epoch {epoch}")

        grad = torch.autograd.grad(total, points)[0]
        rgrad = riemannian_rescale(points.detach(), grad)
        m.mul_(_ADAM_BETA1).add_(rgrad, alpha=1 - _ADAM_BETA1)
        v.mul_(_ADAM_BETA2).addcmul_(rgrad, rgrad, value=1 - _ADAM_BETA2)
        m_hat = m / (1 - _ADAM_BETA1 ** epoch)
        v_hat = v / (1 - _ADAM_BETA2 ** epoch)
        with torch.no_grad():
            points -= cfg.learning_rate * m_hat / (v_hat.sqrt() + _ADAM_EPS)
            points.copy_(project_to_ball(points))

        trace.append({
            "epoch": epoch,
            "pair_loss": pair_loss.detach().item(),
            "separation_loss": sep_loss.detach().item(),
            "total_loss": total.detach().item(),
        })
    return templates.detached(), trace


def child_parent_win_fraction(templates: TemplateMatrix, tree: HierarchyTree,
                              negatives_per_positive: int = 10, seed: int = 0) -> float:
    """Fraction of children whose parent is strictly closer than every one of
    the child's sampled non-parents."""
    batch = sample_pairs(tree, negatives_per_positive, seed)
    children = set(tree.child_ids)
    wins = 0
    total = 0
    with torch.no_grad():
        pts = templates.points
        index = templates.index
        for (anchor, parent), negs in zip(batch.positives, batch.negatives):
            if anchor not in children:
                continue
            total += 1
            d_parent = distance(pts[index[anchor]], pts[index[parent]]).item()
            d_others = [distance(pts[index[anchor]], pts[index[u]]).item() for _, u in negs]
            if d_parent < min(d_others):
                wins += 1
    return wins / total


def median_child_margin(templates: TemplateMatrix, tree: HierarchyTree) -> float:
    """Median over children of (closest non-parent distance - parent
    distance). Positive means parents typically sit nearer than anything
    else."""
    margins = []
    with torch.no_grad():
        pts = templates.points
        index = templates.index
        for child in tree.child_ids:
            parent = tree.parent_of(child)
            d_parent = distance(pts[index[child]], pts[index[parent]]).item()
            d_rest = min(
                distance(pts[index[child]], pts[index[u]]).item()
                for u in templates.node_ids if u not in (child, parent)
            )
            margins.append(d_rest - d_parent)
    return float(np.median(margins))
