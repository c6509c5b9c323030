"""Multi-phase trainer: warm-up, joint training, periodic prototype
projection, and head-only fine-tuning after each projection.

Schedule. Epochs 1..warmup_epochs update adapters, prototypes, and head
(phase "warmup"). The remaining total_epochs - warmup_epochs epochs are
"joint" epochs over the same groups, plus the template points when
train_templates is set. After every projection_period-th joint epoch, and
after the last joint epoch regardless of alignment, prototypes are projected
onto their nearest training patches and finetune_epochs_after_projection
"finetune" epochs update the head only. Each phase keeps its own Adam
optimizer, so moments never leak across phases.

Projection. A prototype owned by class c is replaced by the patch of adapted
training features with the smallest euclidean distance, searching clips
whose label path contains c: the child's own clips for a child prototype,
all clips under the parent or grandparent for ancestor prototypes. Ties go
to the lowest (clip_id, scan-order position). The base variant projects
child prototypes only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .embed import TemplateMatrix, TrainingError
from .evalmetrics import MetricsReport, PredictionRecord, PredictionSet, full_report
from .hierarchy import HierarchyTree
from .poincare import project_to_ball
from .protonet import (
    ConfigurationError,
    ModelConfig,
    ModelState,
    _window_view,
    batch_tensor,
    build_model,
    forward,
    model_logits,
    predict_children,
    total_loss,
)
from .tensorio import DatasetManifest, FeatureGrid, load_grids

VARIANTS = ("base", "cpg")


@dataclass
class TrainConfig:
    total_epochs: int = 30
    warmup_epochs: int = 5
    projection_period: int = 10
    finetune_epochs_after_projection: int = 5
    adapter_lr: float = 3e-3
    prototype_lr: float = 3e-3
    head_lr: float = 1e-3
    template_lr: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    variant: str = "cpg"
    train_templates: bool = False
    model: Optional[ModelConfig] = None

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(
                f"variant must be one of {VARIANTS}, got {self.variant!r}"
            )
        if self.projection_period < 1:
            raise ConfigurationError("projection_period must be >= 1")
        if self.warmup_epochs < 0 or self.finetune_epochs_after_projection < 0:
            raise ConfigurationError("epoch counts must be >= 0")
        if self.total_epochs < self.warmup_epochs:
            raise ConfigurationError(
                "total_epochs must be >= warmup_epochs "
                f"({self.total_epochs} < {self.warmup_epochs})"
            )
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        for name in ("adapter_lr", "prototype_lr", "head_lr", "template_lr"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be > 0")


@dataclass
class TrainReport:
    """Chronological log: per-epoch loss records and projection events."""

    entries: List[dict] = field(default_factory=list)

    def epoch_records(self) -> List[dict]:
        return [e for e in self.entries if e["kind"] == "epoch"]

    def projection_events(self) -> List[dict]:
        return [e for e in self.entries if e["kind"] == "projection"]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)

    @staticmethod
    def from_jsonl(text: str) -> "TrainReport":
        entries = [json.loads(line) for line in text.splitlines() if line.strip()]
        return TrainReport(entries=entries)


def _resolve_model_config(cfg: TrainConfig, manifest: DatasetManifest) -> ModelConfig:
    if cfg.model is not None:
        model_cfg = cfg.model
        if model_cfg.in_channels != manifest.dims[3]:
            raise ConfigurationError(
                f"model expects {model_cfg.in_channels} input channels, "
                f"manifest grids carry {manifest.dims[3]}"
            )
        return model_cfg
    return ModelConfig(
        in_channels=manifest.dims[3],
        prototypes_per_ancestor=0 if cfg.variant == "base" else 5,
        seed=cfg.seed,
    )


def _sorted_clips(manifest: DatasetManifest):
    return sorted(manifest.clips, key=lambda r: r.clip_id)


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 20, epoch]))
    return rng.permutation(n)


def _check_finite_loss(total: torch.Tensor, terms: Dict[str, torch.Tensor],
                       epoch: int) -> None:
    for name in ("crs", "cluster", "separation"):
        if not torch.isfinite(terms[name]):
            raise TrainingError(f"non-finite {name} loss at epoch {epoch}")
    if not torch.isfinite(total):
        raise TrainingError(f"non-finite total loss at epoch {epoch}")


def _run_epoch(model: ModelState, tree: HierarchyTree, all_grids: torch.Tensor,
               labels: Sequence[int], order: np.ndarray, batch_size: int,
               optimizer: torch.optim.Optimizer,
               all_params: Sequence[torch.Tensor], epoch: int,
               project_templates: Optional[TemplateMatrix]) -> Dict[str, float]:
    n = len(order)
    sums = {"total": 0.0, "crs": 0.0, "cluster": 0.0, "separation": 0.0}
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        grids = all_grids[torch.from_numpy(idx)]
        batch_labels = [labels[i] for i in idx]
        for p in all_params:
            p.grad = None
        try:
            total, terms = total_loss(model, grids, batch_labels, tree)
        except ValueError as exc:
            # geometry guards reject non-finite values before the loss forms
            raise TrainingError(f"forward pass failed at epoch {epoch}: {exc}") \
                from None
        _check_finite_loss(total, terms, epoch)
        total.backward()
        optimizer.step()
        if project_templates is not None:
            # template points must stay strictly inside the unit ball
            with torch.no_grad():
                project_templates.points.copy_(
                    project_to_ball(project_templates.points)
                )
        k = len(idx)
        sums["total"] += float(total.detach()) * k
        for name in ("crs", "cluster", "separation"):
            sums[name] += float(terms[name].detach()) * k
    return {name: value / n for name, value in sums.items()}


def _clips_for_owner(tree: HierarchyTree, owner: int,
                     by_child: Dict[int, list]) -> list:
    level = tree.level_of(owner)
    if level == "child":
        children = [owner]
    elif level == "parent":
        children = list(tree.children_of(owner))
    else:
        children = [c for p in tree.children_of(owner)
                    for c in tree.children_of(p)]
    pool = []
    for child in children:
        pool.extend(by_child.get(child, []))
    return pool


def project_prototypes(model: ModelState, manifest: DatasetManifest,
                       tree: HierarchyTree, variant: str,
                       grids: Optional[Dict[str, FeatureGrid]] = None,
                       epoch: int = 0) -> List[dict]:
    """Replace each eligible prototype with its nearest training patch.

    Returns one event dict per considered prototype; prototypes whose owner
    has no training clips are left unchanged with a warning event. Mutates
    model.bank in place (values and provenance).
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if grids is None:
        grids = load_grids(manifest)
    records = _sorted_clips(manifest)
    by_child: Dict[int, list] = {}
    for rec in records:
        by_child.setdefault(rec.label, []).append(rec)

    window = model.bank.window
    w1, h1, t1 = window
    dims_w, dims_h, dims_t, _ = manifest.dims
    map_shape = (dims_t - t1 + 1, dims_h - h1 + 1, dims_w - w1 + 1)

    cache: Dict[str, torch.Tensor] = {}

    def windows_of(clip_id: str) -> torch.Tensor:
        if clip_id not in cache:
            grid = torch.from_numpy(grids[clip_id].data).unsqueeze(0)
            z = model.adapters.apply(grid)
            cache[clip_id] = _window_view(z, window)[0]
        return cache[clip_id]

    child_set = set(tree.child_ids)
    events: List[dict] = []
    with torch.no_grad():
        for j in range(model.bank.count):
            owner = model.bank.owner_ids[j]
            if variant == "base" and owner not in child_set:
                continue
            pool = _clips_for_owner(tree, owner, by_child)
            if not pool:
                events.append({
                    "kind": "projection", "epoch": epoch, "prototype": j,
                    "owner": owner, "status": "skipped_no_clips",
                })
                continue
            flat = model.bank.prototypes[j].reshape(-1)
            best = None  # (squared distance, clip_id, flat position, patch row)
            for rec in pool:
                windows = windows_of(rec.clip_id)
                d2 = ((windows - flat) ** 2).sum(dim=1)
                at = int(np.argmin(d2.numpy()))
                value = float(d2[at])
                if best is None or value < best[0]:
                    best = (value, rec.clip_id, at, windows[at])
            position = tuple(int(i) for i in np.unravel_index(best[2], map_shape))
            patch = best[3].reshape(model.bank.prototypes[j].shape).clone()
            pre = float(np.sqrt(best[0]))
            model.bank.prototypes[j].copy_(patch)
            post = float(((model.bank.prototypes[j] - patch) ** 2).sum().sqrt())
            model.bank.provenance[j] = {
                "clip_id": best[1], "position": position, "epoch": epoch,
            }
            events.append({
                "kind": "projection", "epoch": epoch, "prototype": j,
                "owner": owner, "status": "projected", "clip_id": best[1],
                "position": list(position), "pre_distance": pre,
                "post_distance": post,
            })
    return events


def run_training(manifest: DatasetManifest, templates: Optional[TemplateMatrix],
                 cfg: TrainConfig,
                 grids: Optional[Dict[str, FeatureGrid]] = None
                 ) -> Tuple[ModelState, TrainReport]:
    cfg.validate()
    tree = manifest.tree
    if grids is None:
        grids = load_grids(manifest)
    model_cfg = _resolve_model_config(cfg, manifest)
    model_templates = None if model_cfg.euclidean_head else templates
    if model_templates is not None and cfg.train_templates:
        model_templates = TemplateMatrix(model_templates.node_ids,
                                         model_templates.points.detach().clone())
    model = build_model(tree, model_templates, model_cfg)

    records = _sorted_clips(manifest)
    labels = [rec.label for rec in records]
    all_grids = batch_tensor([grids[rec.clip_id] for rec in records])

    groups = model.parameter_groups()
    network_params = groups["adapters"] + groups["prototypes"] + groups["head"]
    for p in network_params:
        p.requires_grad_(True)
    main_groups = [
        {"params": groups["adapters"], "lr": cfg.adapter_lr},
        {"params": groups["prototypes"], "lr": cfg.prototype_lr},
        {"params": groups["head"], "lr": cfg.head_lr},
    ]
    tuned_templates = None
    joint_groups = list(main_groups)
    if cfg.train_templates and model.templates is not None:
        tuned_templates = model.templates
        tuned_templates.points.requires_grad_(True)
        joint_groups = main_groups + [
            {"params": [tuned_templates.points], "lr": cfg.template_lr},
        ]
    all_params = network_params + (
        [tuned_templates.points] if tuned_templates is not None else []
    )

    warm_opt = torch.optim.Adam(main_groups)
    joint_opt = torch.optim.Adam(joint_groups)
    tune_opt = torch.optim.Adam(groups["head"], lr=cfg.head_lr)

    report = TrainReport()
    epoch = 0

    def do_epoch(phase: str, optimizer: torch.optim.Optimizer,
                 templates_moving: bool) -> None:
        nonlocal epoch
        epoch += 1
        order = _epoch_order(cfg.seed, epoch, len(records))
        means = _run_epoch(
            model, tree, all_grids, labels, order, cfg.batch_size, optimizer,
            all_params, epoch,
            tuned_templates if templates_moving else None,
        )
        report.entries.append({
            "kind": "epoch", "epoch": epoch, "phase": phase,
            "loss_total": means["total"], "loss_crs": means["crs"],
            "loss_cluster": means["cluster"],
            "loss_separation": means["separation"],
        })

    for _ in range(cfg.warmup_epochs):
        do_epoch("warmup", warm_opt, templates_moving=False)

    joint_total = cfg.total_epochs - cfg.warmup_epochs
    joint_done = 0
    while joint_done < joint_total:
        do_epoch("joint", joint_opt,
                 templates_moving=tuned_templates is not None)
        joint_done += 1
        if joint_done % cfg.projection_period == 0 or joint_done == joint_total:
            events = project_prototypes(
                model, manifest, tree, cfg.variant, grids=grids, epoch=epoch,
            )
            report.entries.extend(events)
            for _ in range(cfg.finetune_epochs_after_projection):
                do_epoch("finetune", tune_opt, templates_moving=False)

    for p in all_params:
        p.grad = None
        p.requires_grad_(False)
    return model, report


def _child_probabilities(model: ModelState, out) -> torch.Tensor:
    """Probabilities over child classes, renormalized when the class set
    also carries ancestors."""
    probs = torch.softmax(model_logits(model, out), dim=-1)
    child = probs[:, :len(model.child_class_ids)]
    return child / child.sum(dim=1, keepdim=True)


def predict_manifest(model: ModelState, manifest: DatasetManifest,
                     grids: Optional[Dict[str, FeatureGrid]] = None,
                     batch_size: int = 32) -> PredictionSet:
    if grids is None:
        grids = load_grids(manifest)
    records = _sorted_clips(manifest)
    rows = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            out = forward(model, batch_tensor([grids[r.clip_id] for r in chunk]))
            predicted = predict_children(model, out)
            probs = _child_probabilities(model, out)
            for rec, pred, p in zip(chunk, predicted, probs):
                rows.append(PredictionRecord(
                    clip_id=rec.clip_id, video_id=rec.video_id,
                    true_class=rec.label, predicted_class=pred,
                    probabilities=tuple(float(x) for x in p),
                ))
    return PredictionSet(tuple(rows))


def evaluate_epoch(model: ModelState, manifest: DatasetManifest,
                   grids: Optional[Dict[str, FeatureGrid]] = None
                   ) -> MetricsReport:
    """Pure evaluation pass; mutates nothing."""
    return full_report(predict_manifest(model, manifest, grids), manifest.tree)
