"""Core ACCDOA geometry: activity-coupled DOA vectors and scene containers.

An ACCDOA vector is a 3D Cartesian vector whose direction is the source DOA
and whose Euclidean norm encodes the probability that the source is active.
Ground-truth vectors have norm exactly 0 (inactive) or 1 (active); model
estimates may take any nonnegative norm.

Scenes are (T, M, 3) float64 arrays: T frames, M track slots, zero-padded
beyond the real tracks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GT_NORM_TOL = 1e-9


def norm(v) -> float:
    """Euclidean norm of a 3-vector."""
    v = np.asarray(v, dtype=float)
    return float(np.sqrt(np.dot(v, v)))


def unit(v) -> np.ndarray:
    """Unit vector in the direction of v.

    Raises ValueError for a zero-norm input, where the direction is undefined.
    """
    v = np.asarray(v, dtype=float)
    n = norm(v)
    if n == 0.0:
        raise ValueError("direction undefined for a zero-norm vector")
    return v / n


def angular_error_deg(a, b) -> float:
    """Angle in degrees between the directions of two ACCDOA vectors.

    Scale-invariant in each argument. The dot product is clamped to [-1, 1]
    before arccos so that exactly (anti-)parallel inputs cannot produce NaN.

    Raises ValueError if either vector has zero norm (inactive: no direction).
    """
    ua = unit(a)
    ub = unit(b)
    c = float(np.dot(ua, ub))
    c = max(-1.0, min(1.0, c))
    return float(np.degrees(np.arccos(c)))


def is_active(a, threshold: float) -> bool:
    """True iff the vector norm is at or above the detection threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"detection threshold must be in [0, 1], got {threshold}")
    return norm(a) >= threshold


@dataclass
class GroundTruthScene:
    """Reference trajectories for one scene, zero-padded to M slots.

    frames: (T, M, 3) array; every vector has norm 0 or 1.
    track_count: number of slots that host real tracks; slots >= track_count
        are all-zero in every frame.
    """

    frames: np.ndarray
    frame_period_s: float = 0.2
    track_count: int = 0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ValueError(f"frames must be (T, M, 3), got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_slots(self) -> int:
        return self.frames.shape[1]

    def active_mask(self) -> np.ndarray:
        """(T, M) boolean mask of active (unit-norm) ground-truth vectors."""
        return np.linalg.norm(self.frames, axis=2) > 0.5

    def validate(self) -> None:
        """Check the scene invariants, raising ValueError on violation."""
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("scene contains non-finite values")
        norms = np.linalg.norm(self.frames, axis=2)
        ok = (np.abs(norms) <= GT_NORM_TOL) | (np.abs(norms - 1.0) <= GT_NORM_TOL)
        if not np.all(ok):
            bad = np.argwhere(~ok)[0]
            raise ValueError(
                f"ground-truth norm must be 0 or 1, found {norms[tuple(bad)]:.6g} "
                f"at frame {bad[0]}, slot {bad[1]}"
            )
        if not 0 <= self.track_count <= self.n_slots:
            raise ValueError(f"track_count {self.track_count} out of range for M={self.n_slots}")
        if self.track_count < self.n_slots:
            pad = norms[:, self.track_count:]
            if np.any(pad != 0.0):
                raise ValueError("padding slots must be exactly zero in every frame")


@dataclass
class EstimateScene:
    """Model-estimated ACCDOA trajectories, shaped like the paired ground truth."""

    frames: np.ndarray
    frame_period_s: float = 0.2

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ValueError(f"frames must be (T, M, 3), got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_slots(self) -> int:
        return self.frames.shape[1]


def pad_to_m(tracks, m: int, frame_period_s: float = 0.2) -> GroundTruthScene:
    """Stack per-track frame sequences into a zero-padded (T, M, 3) scene.

    tracks: sequence of (T, 3) arrays, one per real track, zeros where the
    track is inactive. Slots beyond the real tracks are all-zero.
    """
    tracks = [np.asarray(tr, dtype=float) for tr in tracks]
    if len(tracks) > m:
        raise ValueError(f"{len(tracks)} tracks exceed capacity M={m}")
    if tracks:
        t_len = tracks[0].shape[0]
        for i, tr in enumerate(tracks):
            if tr.shape != (t_len, 3):
                raise ValueError(f"track {i} has shape {tr.shape}, expected ({t_len}, 3)")
    else:
        t_len = 0
    frames = np.zeros((t_len, m, 3))
    for i, tr in enumerate(tracks):
        frames[:, i, :] = tr
    return GroundTruthScene(frames=frames, frame_period_s=frame_period_s,
                            track_count=len(tracks))


def scene_frames(scene) -> np.ndarray:
    """Accept a scene object or a raw (T, M, 3) array and return the array."""
    frames = getattr(scene, "frames", scene)
    return np.asarray(frames, dtype=float)
