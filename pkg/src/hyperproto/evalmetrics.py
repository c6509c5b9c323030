"""Clip- and video-level accuracy, including hop-based sibling and cousin
accuracy over the class hierarchy.

A prediction is "correct within k hops" when the undirected hop distance
between the predicted and true child class is at most k: 0 hops is an exact
match, 2 hops admits siblings (same parent), 4 hops admits cousins (same
grandparent). Exact matches therefore count toward sibling and cousin
accuracy as well, which makes the three accuracies nested.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .hierarchy import HierarchyTree

# accuracy names by admitted hop distance
HOP_LEVELS = (("class", 0), ("sibling", 2), ("cousin", 4))

_SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class PredictionRecord:
    """One classified clip (or, after voting, one classified video)."""

    clip_id: str
    video_id: str
    true_class: int
    predicted_class: int
    probabilities: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "probabilities", tuple(float(p) for p in self.probabilities)
        )
        if not self.probabilities:
            raise ValueError(f"clip {self.clip_id}: empty probability vector")
        total = sum(self.probabilities)
        if min(self.probabilities) < -_SIMPLEX_TOL or abs(total - 1.0) > _SIMPLEX_TOL:
            raise ValueError(
                f"clip {self.clip_id}: probabilities are not on the simplex "
                f"(sum {total:.8f})"
            )


@dataclass(frozen=True)
class PredictionSet:
    records: Tuple[PredictionRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        width = None
        video_label: Dict[str, int] = {}
        for r in self.records:
            if r.clip_id in seen:
                raise ValueError(f"duplicate clip id {r.clip_id}")
            seen.add(r.clip_id)
            if width is None:
                width = len(r.probabilities)
            elif len(r.probabilities) != width:
                raise ValueError(
                    f"clip {r.clip_id}: probability vector length "
                    f"{len(r.probabilities)} != {width}"
                )
            if video_label.setdefault(r.video_id, r.true_class) != r.true_class:
                raise ValueError(
                    f"video {r.video_id} has clips with different true labels"
                )

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass(frozen=True)
class MetricsReport:
    """Six accuracies plus clip-level confusion counts (true -> pred)."""

    clip_accuracy: Dict[str, float]
    video_accuracy: Dict[str, float]
    confusion: Dict[int, Dict[int, int]]


def hop_accuracy(preds: PredictionSet, tree: HierarchyTree, max_hops: int) -> float:
    """Fraction of records with hop_distance(predicted, true) <= max_hops."""
    if max_hops not in (0, 2, 4):
        raise ValueError(f"max_hops must be 0, 2, or 4, got {max_hops}")
    if len(preds) == 0:
        raise ValueError("empty prediction set")
    hits = sum(
        1 for r in preds
        if tree.hop_distance(r.predicted_class, r.true_class) <= max_hops
    )
    return hits / len(preds)


def video_vote(preds: PredictionSet) -> PredictionSet:
    """Collapse clip predictions to one record per video by majority vote.

    Ties go to the lowest class id. The probability vector of a video is the
    mean of its clips' vectors. Output rows use the video id as clip id and
    are ordered by video id.
    """
    if len(preds) == 0:
        raise ValueError("empty prediction set")
    by_video: Dict[str, list] = {}
    for r in preds:
        by_video.setdefault(r.video_id, []).append(r)
    rows = []
    for video_id in sorted(by_video):
        clips = by_video[video_id]
        counts: Dict[int, int] = {}
        for r in clips:
            counts[r.predicted_class] = counts.get(r.predicted_class, 0) + 1
        top = max(counts.values())
        winner = min(c for c, n in counts.items() if n == top)
        probs = np.mean([r.probabilities for r in clips], axis=0)
        rows.append(PredictionRecord(
            clip_id=video_id,
            video_id=video_id,
            true_class=clips[0].true_class,
            predicted_class=winner,
            probabilities=tuple(float(p) for p in probs),
        ))
    return PredictionSet(tuple(rows))


def full_report(preds: PredictionSet, tree: HierarchyTree) -> MetricsReport:
    if len(preds) == 0:
        raise ValueError("empty prediction set")
    child_set = set(tree.child_ids)
    for r in preds:
        if r.true_class not in child_set or r.predicted_class not in child_set:
            raise ValueError(
                f"clip {r.clip_id}: true and predicted classes must be child "
                f"ids, got ({r.true_class}, {r.predicted_class})"
            )
    videos = video_vote(preds)
    clip_acc = {name: hop_accuracy(preds, tree, hops) for name, hops in HOP_LEVELS}
    video_acc = {name: hop_accuracy(videos, tree, hops) for name, hops in HOP_LEVELS}
    confusion: Dict[int, Dict[int, int]] = {}
    for r in preds:
        row = confusion.setdefault(r.true_class, {})
        row[r.predicted_class] = row.get(r.predicted_class, 0) + 1
    return MetricsReport(
        clip_accuracy=clip_acc, video_accuracy=video_acc, confusion=confusion
    )


def report_to_json(report: MetricsReport) -> str:
    payload = {
        "clip": report.clip_accuracy,
        "video": report.video_accuracy,
        "confusion": {
            str(true): {str(pred): n for pred, n in sorted(row.items())}
            for true, row in sorted(report.confusion.items())
        },
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def report_from_json(text: str) -> MetricsReport:
    payload = json.loads(text)
    return MetricsReport(
        clip_accuracy={k: float(v) for k, v in payload["clip"].items()},
        video_accuracy={k: float(v) for k, v in payload["video"].items()},
        confusion={
            int(true): {int(pred): int(n) for pred, n in row.items()}
            for true, row in payload["confusion"].items()
        },
    )


def report_to_csv(report: MetricsReport) -> str:
    """Two-row table: one line per granularity, one column per hop level."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["level"] + [name for name, _ in HOP_LEVELS])
    writer.writerow(["clip"] + [repr(report.clip_accuracy[n]) for n, _ in HOP_LEVELS])
    writer.writerow(["video"] + [repr(report.video_accuracy[n]) for n, _ in HOP_LEVELS])
    return buf.getvalue()


def predictions_to_jsonl(preds: PredictionSet) -> str:
    lines = []
    for r in preds:
        lines.append(json.dumps({
            "clip_id": r.clip_id,
            "video_id": r.video_id,
            "true_class": r.true_class,
            "predicted_class": r.predicted_class,
            "probabilities": list(r.probabilities),
        }, sort_keys=True))
    return "\n".join(lines) + "\n"


def predictions_from_jsonl(text: str) -> PredictionSet:
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        rows.append(PredictionRecord(
            clip_id=obj["clip_id"],
            video_id=obj["video_id"],
            true_class=int(obj["true_class"]),
            predicted_class=int(obj["predicted_class"]),
            probabilities=tuple(obj["probabilities"]),
        ))
    return PredictionSet(tuple(rows))
