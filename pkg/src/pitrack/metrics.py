"""Tracking evaluation: matching, angular error, identity switches, DET curves.

Per frame, active ground-truth tracks and detected estimate slots (norm at or
above the detection threshold) are matched by minimum-cost assignment on
angular error. A matched pair farther apart than the angular cutoff counts as
one miss plus one false positive instead of a true positive.

Identity switches follow the CLEAR-MOT convention: a track switches when it
is matched to a different estimate slot than its most recent previous match,
and unmatched gaps do not reset the remembered slot. Tracks are the maximal
runs of consecutive active frames in a ground-truth slot, so a slot reused by
a later source starts with a fresh memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .accdoa import scene_frames
from .assignment import hungarian

GT_ACTIVE_NORM = 0.5       # ground-truth norms are exactly 0 or 1
_PAD_ANGLE = 200.0         # larger than any real angle, used to square the cost matrix

DEFAULT_DET_THRESHOLD = 0.5
DEFAULT_CUTOFF_DEG = 30.0


@dataclass
class FrameMatch:
    """Outcome of matching one frame.

    pairs: (gt_track_index, est_slot_index, angular_error_deg) true positives
    misses: gt track indices with no valid match
    false_positives: detected estimate slots with no valid match
    """

    pairs: list = field(default_factory=list)
    misses: list = field(default_factory=list)
    false_positives: list = field(default_factory=list)


@dataclass
class MetricsReport:
    mae_deg: float | None
    ids_count: int
    ids_ratio: float              # switches per ground-truth track
    ids_ratio_per_instance: float  # switches per active (track, frame) pair
    miss_ratio: float
    fp_ratio: float
    counts: dict


@dataclass
class DetCurve:
    samples: list  # (threshold, miss_ratio, fp_ratio) per threshold


def _pair_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    # like accdoa.angular_error_deg but a zero-norm side scores the worst
    # possible angle instead of raising; only reachable at threshold 0
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 180.0
    c = float(np.dot(a, b) / (na * nb))
    return float(np.degrees(np.arccos(max(-1.0, min(1.0, c)))))


def match_frame(gt_frame, est_frame, det_threshold: float = DEFAULT_DET_THRESHOLD,
                cutoff_deg: float = DEFAULT_CUTOFF_DEG) -> FrameMatch:
    """Match one frame's active tracks against its detections."""
    if not 0.0 <= det_threshold <= 1.0:
        raise ValueError(f"detection threshold must be in [0, 1], got {det_threshold}")
    if cutoff_deg <= 0.0:
        raise ValueError(f"cutoff must be positive, got {cutoff_deg}")
    gt_frame = np.asarray(gt_frame, dtype=float)
    est_frame = np.asarray(est_frame, dtype=float)
    gt_idx = np.flatnonzero(np.linalg.norm(gt_frame, axis=1) > GT_ACTIVE_NORM)
    det_idx = np.flatnonzero(np.linalg.norm(est_frame, axis=1) >= det_threshold)
    match = FrameMatch()
    if gt_idx.size == 0 or det_idx.size == 0:
        match.misses = list(map(int, gt_idx))
        match.false_positives = list(map(int, det_idx))
        return match
    k = max(gt_idx.size, det_idx.size)
    cost = np.full((k, k), _PAD_ANGLE)
    for a, i in enumerate(gt_idx):
        for b, j in enumerate(det_idx):
            cost[a, b] = _pair_angle_deg(gt_frame[i], est_frame[j])
    sigma = hungarian(cost)
    matched_gt = set()
    matched_det = set()
    for a, b in enumerate(sigma):
        if a >= gt_idx.size or b >= det_idx.size:
            continue
        angle = cost[a, b]
        if angle <= cutoff_deg:
            match.pairs.append((int(gt_idx[a]), int(det_idx[b]), float(angle)))
            matched_gt.add(int(gt_idx[a]))
            matched_det.add(int(det_idx[b]))
    match.misses = [int(i) for i in gt_idx if int(i) not in matched_gt]
    match.false_positives = [int(j) for j in det_idx if int(j) not in matched_det]
    return match


def _count_switches(slot_sequence) -> int:
    """Switches in one track's per-frame match sequence (None = unmatched)."""
    switches = 0
    remembered = None
    for slot in slot_sequence:
        if slot is None:
            continue
        if remembered is not None and slot != remembered:
            switches += 1
        remembered = slot
    return switches


def _active_runs(active_col: np.ndarray) -> list:
    """Maximal runs of consecutive True as (start, end) with end exclusive."""
    col = active_col.astype(int)
    starts = np.flatnonzero(np.diff(np.concatenate(([0], col))) == 1)
    ends = np.flatnonzero(np.diff(np.concatenate((col, [0]))) == -1) + 1
    return list(zip(starts, ends))


def count_ids(matches, gt_scene=None) -> int:
    """Identity switches over a frame-ordered sequence of FrameMatch.

    Without a scene, each ground-truth index is treated as a single track for
    the whole sequence. With a scene, tracks are the maximal active runs per
    slot and the remembered slot resets between runs.
    """
    by_frame = [{g: e for g, e, _ in fm.pairs} for fm in matches]
    if gt_scene is None:
        tracks = {}
        for t, frame_pairs in enumerate(by_frame):
            for g, e in frame_pairs.items():
                tracks.setdefault(g, {})[t] = e
        return sum(
            _count_switches(seq.get(t) for t in range(len(matches)))
            for seq in tracks.values()
        )
    frames = scene_frames(gt_scene)
    active = np.linalg.norm(frames, axis=2) > GT_ACTIVE_NORM
    total = 0
    for s in range(frames.shape[1]):
        for start, end in _active_runs(active[:, s]):
            total += _count_switches(by_frame[t].get(s) for t in range(start, end))
    return total


def count_tracks(gt_scene) -> int:
    """Number of ground-truth tracks: maximal active runs over all slots."""
    frames = scene_frames(gt_scene)
    active = np.linalg.norm(frames, axis=2) > GT_ACTIVE_NORM
    return sum(len(_active_runs(active[:, s])) for s in range(frames.shape[1]))


def evaluate(gt_scenes, est_scenes, det_threshold: float = DEFAULT_DET_THRESHOLD,
             cutoff_deg: float = DEFAULT_CUTOFF_DEG) -> MetricsReport:
    """Aggregate tracking metrics over paired scene lists."""
    if len(gt_scenes) != len(est_scenes):
        raise ValueError(f"{len(gt_scenes)} ground-truth vs {len(est_scenes)} estimate scenes")
    tp_angles = []
    n_miss = n_fp = n_active = n_tracks = n_ids = n_frames = 0
    for gt_scene, est_scene in zip(gt_scenes, est_scenes):
        gt = scene_frames(gt_scene)
        est = scene_frames(est_scene)
        if gt.shape != est.shape:
            raise ValueError(f"scene shapes differ: {gt.shape} vs {est.shape}")
        matches = [
            match_frame(gt[t], est[t], det_threshold, cutoff_deg)
            for t in range(gt.shape[0])
        ]
        for fm in matches:
            tp_angles.extend(angle for _, _, angle in fm.pairs)
            n_miss += len(fm.misses)
            n_fp += len(fm.false_positives)
        n_active += int((np.linalg.norm(gt, axis=2) > GT_ACTIVE_NORM).sum())
        n_tracks += count_tracks(gt_scene)
        n_ids += count_ids(matches, gt_scene)
        n_frames += gt.shape[0]
    counts = {
        "tp": len(tp_angles),
        "miss": n_miss,
        "fp": n_fp,
        "gt_active": n_active,
        "tracks": n_tracks,
        "ids": n_ids,
        "frames": n_frames,
    }
    return MetricsReport(
        mae_deg=float(np.mean(tp_angles)) if tp_angles else None,
        ids_count=n_ids,
        ids_ratio=n_ids / n_tracks if n_tracks else 0.0,
        ids_ratio_per_instance=n_ids / n_active if n_active else 0.0,
        miss_ratio=n_miss / n_active if n_active else 0.0,
        fp_ratio=n_fp / n_active if n_active else 0.0,
        counts=counts,
    )


def det_curve(gt_scenes, est_scenes, thresholds, cutoff_deg: float = DEFAULT_CUTOFF_DEG) -> DetCurve:
    """Miss/false-positive tradeoff across a detection-threshold sweep."""
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("threshold list must be nonempty")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    samples = []
    for thr in thresholds:
        report = evaluate(gt_scenes, est_scenes, det_threshold=thr, cutoff_deg=cutoff_deg)
        samples.append((float(thr), report.miss_ratio, report.fp_ratio))
    return DetCurve(samples=samples)
