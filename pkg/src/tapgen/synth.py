"""Seeded synthetic corpora for desk-scale end-to-end runs.

Videos get snippet-aligned, non-overlapping actions offset into their
first snippet by a small fraction of a snippet, so that boundary and
duration label generation recover each action's cell unambiguously.
Oracle score grids place probability 1 on exactly the generated label
cells; piping them through inference and evaluation must saturate recall.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from tapgen.supervision import LabelSet, ScoreGrids, gen_labels
from tapgen.tensorio import Manifest, SnippetEntry
from tapgen.timeline import GroundTruthAction, VideoMeta, build_grid

LABEL_POOL = ("sports", "leisure", "music", "cooking", "repair", "dance")

# fraction of a snippet by which synthetic actions are shifted off the
# snippet edge; keeps nearest-center labels unambiguous while leaving the
# recovered cell with IoU >= (1 - off) / (1 + off) ~ 0.98 against the gt
START_OFFSET = 0.01

__all__ = ["SynthVideo", "synth_corpus", "oracle_grids"]


@dataclass(frozen=True)
class SynthVideo:
    manifest: Manifest
    labels: LabelSet
    grids: ScoreGrids


def oracle_grids(labels: LabelSet) -> ScoreGrids:
    """Score grids with all probability mass on the label cells."""
    return ScoreGrids(
        start_probs=labels.starts.copy(),
        end_probs=labels.ends.copy(),
        conf_cls=labels.durations.copy(),
        conf_reg=labels.durations.copy(),
    )


def _synth_actions(
    rng: np.random.Generator, T: int, snippet_seconds: float, max_actions: int
) -> list[GroundTruthAction]:
    if max_actions < 1:
        return []
    n = int(rng.integers(1, max_actions + 1))
    actions = []
    cursor = 0
    for _ in range(n):
        # keep j + d <= T - 1 so the offset end stays inside the video
        max_d = min(6, T - 1 - cursor)
        if max_d < 1:
            break
        d = int(rng.integers(1, max_d + 1))
        max_j = T - 1 - d
        if max_j < cursor:
            break
        j = int(rng.integers(cursor, max_j + 1))
        label = str(rng.choice(LABEL_POOL))
        actions.append(
            GroundTruthAction(
                label=label,
                start_sec=(j + START_OFFSET) * snippet_seconds,
                end_sec=(j + d + START_OFFSET) * snippet_seconds,
            )
        )
        cursor = j + d + 2  # at least one empty snippet between actions
    return actions


def _synth_boxes(rng: np.random.Generator, max_boxes: int = 2) -> tuple:
    boxes = []
    for _ in range(int(rng.integers(0, max_boxes + 1))):
        x1, y1 = rng.uniform(0.0, 0.5, size=2)
        x2 = x1 + rng.uniform(0.1, 0.5)
        y2 = y1 + rng.uniform(0.1, 0.5)
        boxes.append((float(x1), float(y1), float(min(x2, 1.0)), float(min(y2, 1.0))))
    return tuple(boxes)


def synth_video(
    rng: np.random.Generator,
    video_id: str,
    max_actions: int,
    t_min: int = 8,
    t_max: int = 32,
    d_policy: str = "full",
) -> SynthVideo:
    """One deterministic synthetic video with labels and oracle grids."""
    T = int(rng.integers(t_min, t_max + 1))
    snippet_len = 16
    fps = float(rng.choice([10.0, 16.0, 25.0]))
    extra = int(rng.integers(0, snippet_len))
    meta = VideoMeta(
        video_id=video_id,
        num_frames=T * snippet_len + extra,
        fps=fps,
        snippet_len=snippet_len,
    )
    grid = build_grid(meta)
    assert grid.T == T
    actions = _synth_actions(rng, T, grid.snippet_seconds, max_actions)
    snippets = tuple(
        SnippetEntry(index=i, feature_file=None, agent_boxes=_synth_boxes(rng))
        for i in range(T)
    )
    manifest = Manifest(video=meta, annotations=tuple(actions), snippets=snippets)
    D = T if d_policy == "full" else max(1, T // 2)
    labels = gen_labels(grid, list(actions), D)
    return SynthVideo(manifest=manifest, labels=labels, grids=oracle_grids(labels))


def synth_corpus(
    n_videos: int,
    max_actions: int,
    seed: int,
    t_min: int = 8,
    t_max: int = 32,
    d_policy: str = "full",
) -> list[SynthVideo]:
    """Deterministic corpus; each video draws from its own keyed stream."""
    videos = []
    for i in range(n_videos):
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, i], dtype=np.uint64)))
        videos.append(
            synth_video(rng, f"synth_{i:04d}", max_actions, t_min, t_max, d_policy)
        )
    return videos
