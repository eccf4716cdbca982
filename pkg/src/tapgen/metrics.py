"""Class-agnostic proposal evaluation: recall, AR@AN curves, AUC.

Recall at (tiou, an) pools ground truths over videos and counts those
matched one-to-one by a video's top-an proposals; each ground truth
prefers its highest-scoring free proposal and conflicts are resolved so
the matching is maximum (equal to exhaustive assignment search). The
average-recall curve means recall over the tIoU thresholds, and AUC is
100 times the trapezoidal area under AR(an) for an = 1..100, normalized
by the an-range.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from tapgen.errors import UndefinedMetricError
from tapgen.inference import Proposal
from tapgen.timeline import GroundTruthAction, temporal_iou

ACTIVITYNET_THRESHOLDS = tuple(np.arange(0.5, 1.0, 0.05).round(10).tolist())
THUMOS_THRESHOLDS = tuple(np.arange(0.5, 1.05, 0.1).round(10).tolist())
DEFAULT_AN_VALUES = tuple(range(1, 101))

__all__ = [
    "EvalResult",
    "recall_at",
    "evaluate",
    "split_eval",
    "ACTIVITYNET_THRESHOLDS",
    "THUMOS_THRESHOLDS",
    "DEFAULT_AN_VALUES",
]


@dataclass(frozen=True)
class ScoredInterval:
    """Minimal scored proposal, e.g. loaded from the JSON interchange format."""

    start_sec: float
    end_sec: float
    score: float

    @property
    def interval(self) -> tuple[float, float]:
        return self.start_sec, self.end_sec


@dataclass(frozen=True)
class EvalResult:
    ar_at_an: dict[int, float]
    auc: float
    per_tiou_recall: np.ndarray  # [len(thresholds), len(an_values)]
    thresholds: tuple[float, ...]
    an_values: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "thresholds": list(self.thresholds),
            "an_values": list(self.an_values),
            "ar_at_an": {str(an): ar for an, ar in self.ar_at_an.items()},
            "per_tiou_recall": self.per_tiou_recall.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """Rows = AN values, columns = per-threshold recall plus the mean."""
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["an"] + [f"tiou_{t:g}" for t in self.thresholds] + ["mean"])
        for k, an in enumerate(self.an_values):
            row = [an] + [f"{self.per_tiou_recall[i, k]:.6f}" for i in range(len(self.thresholds))]
            row.append(f"{self.ar_at_an[an]:.6f}")
            writer.writerow(row)
        return buf.getvalue()


def _match_count(proposals, gts, tiou: float, an: int) -> int:
    """Maximum one-to-one matching between top-an proposals and ground truths.

    Each ground truth first tries to claim its highest-scoring free
    proposal; when none is free, an augmenting path reassigns earlier
    claims, so the count equals the exhaustive-enumeration optimum.
    """
    top = proposals[:an]
    hits = [
        [i for i, prop in enumerate(top) if temporal_iou(prop.interval, gt.interval) >= tiou]
        for gt in gts
    ]
    owner = [-1] * len(top)  # proposal index -> gt index

    def augment(g: int, visited: set[int]) -> bool:
        for i in hits[g]:
            if i in visited:
                continue
            visited.add(i)
            if owner[i] < 0 or augment(owner[i], visited):
                owner[i] = g
                return True
        return False

    return sum(augment(g, set()) for g in range(len(gts)))


def recall_at(
    proposals_per_video: dict[str, list[Proposal]],
    gts_per_video: dict[str, list[GroundTruthAction]],
    tiou: float,
    an: int,
) -> float:
    """Fraction of pooled ground truths recovered by top-an proposals."""
    if an < 1:
        raise UndefinedMetricError(f"an must be >= 1, got {an}")
    total = sum(len(g) for g in gts_per_video.values())
    if total == 0:
        raise UndefinedMetricError("no ground-truth instances in the corpus")
    matched = 0
    for vid, gts in gts_per_video.items():
        if not gts:
            continue
        props = proposals_per_video.get(vid, [])
        matched += _match_count(props, gts, tiou, an)
    return matched / total


def evaluate(
    proposals_per_video: dict[str, list[Proposal]],
    gts_per_video: dict[str, list[GroundTruthAction]],
    thresholds: tuple[float, ...] = ACTIVITYNET_THRESHOLDS,
    an_values: tuple[int, ...] = DEFAULT_AN_VALUES,
) -> EvalResult:
    """AR@AN table and AUC of the average-recall curve."""
    per = np.zeros((len(thresholds), len(an_values)), dtype=np.float64)
    for i, t in enumerate(thresholds):
        for k, an in enumerate(an_values):
            per[i, k] = recall_at(proposals_per_video, gts_per_video, t, an)
    ar = per.mean(axis=0)
    ar_at_an = {an: float(ar[k]) for k, an in enumerate(an_values)}
    ans = np.asarray(an_values, dtype=np.float64)
    if len(an_values) > 1:
        auc = 100.0 * float(np.trapezoid(ar, ans)) / (ans[-1] - ans[0])
    else:
        auc = 100.0 * float(ar[0])
    return EvalResult(
        ar_at_an=ar_at_an,
        auc=auc,
        per_tiou_recall=per,
        thresholds=tuple(thresholds),
        an_values=tuple(an_values),
    )


@dataclass(frozen=True)
class SplitEvalResult:
    seen: EvalResult | None
    unseen: EvalResult | None
    excluded_videos: tuple[str, ...]  # labels present in both sets


def split_eval(
    proposals_per_video: dict[str, list[Proposal]],
    gts_per_video: dict[str, list[GroundTruthAction]],
    seen_labels: set[str],
    unseen_labels: set[str],
    thresholds: tuple[float, ...] = ACTIVITYNET_THRESHOLDS,
    an_values: tuple[int, ...] = DEFAULT_AN_VALUES,
) -> SplitEvalResult:
    """Evaluate the seen / unseen partitions separately.

    Videos whose annotation labels touch both sets are excluded and
    reported; an empty partition yields None for that side.
    """
    if seen_labels & unseen_labels:
        raise UndefinedMetricError("seen and unseen label sets must be disjoint")
    partitions: dict[str, dict[str, list[GroundTruthAction]]] = {"seen": {}, "unseen": {}}
    excluded = []
    for vid, gts in gts_per_video.items():
        labels = {g.label for g in gts}
        in_seen = bool(labels & seen_labels)
        in_unseen = bool(labels & unseen_labels)
        if in_seen and in_unseen:
            excluded.append(vid)
        elif in_seen:
            partitions["seen"][vid] = gts
        elif in_unseen:
            partitions["unseen"][vid] = gts

    def run(gt_part: dict) -> EvalResult | None:
        try:
            return evaluate(proposals_per_video, gt_part, thresholds, an_values)
        except UndefinedMetricError:
            return None

    return SplitEvalResult(
        seen=run(partitions["seen"]),
        unseen=run(partitions["unseen"]),
        excluded_videos=tuple(sorted(excluded)),
    )
