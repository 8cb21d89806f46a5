"""Permutation selection strategies and the PIT loss with its gradient.

Three ways to pick the output-to-target permutation before computing MSE:

- frame: a fresh optimal permutation per frame. Cheapest for the model to
  satisfy, but it rewards switching identities as fast as possible.
- utterance: one permutation for the whole scene, from the time-averaged
  distance matrix. Penalizes every frame after an identity switch forever.
- sliding: the optimal permutation for a moving window ending at (causal)
  or centered on each frame. Penalizes an identity switch for at most one
  window length, then accepts the new pairing.

Schedules are (T, M) integer arrays; sched[t, m] is the estimate slot paired
with ground-truth slot m at frame t. The loss is the mean squared error over
all T*M slot pairs under the schedule, padded slots included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .accdoa import scene_frames
from .assignment import hungarian, moving_average

STRATEGY_KINDS = ("frame", "utterance", "sliding")


@dataclass(frozen=True)
class PitStrategy:
    """Which permutation-selection rule to train with.

    window and mode only apply to the sliding kind; window is the length
    T_avg in frames of the averaging window.
    """

    kind: str = "sliding"
    window: int = 10
    mode: str = "causal"

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"kind must be one of {STRATEGY_KINDS}, got {self.kind!r}")
        if self.kind == "sliding":
            if self.window < 1:
                raise ValueError(f"window must be >= 1, got {self.window}")
            if self.mode not in ("causal", "centered"):
                raise ValueError(f"mode must be 'causal' or 'centered', got {self.mode!r}")


def fpit_assign(seq) -> np.ndarray:
    """Per-frame optimal permutations: sched[t] = hungarian(D(t))."""
    seq = np.asarray(seq, dtype=float)
    if seq.shape[0] == 0:
        raise ValueError("empty distance-matrix sequence")
    return np.stack([hungarian(seq[t]) for t in range(seq.shape[0])])


def upit_assign(seq) -> np.ndarray:
    """One permutation for the whole scene, replicated at every frame.

    The permutation minimizes the summed matching error over all frames,
    which is the assignment on the time-averaged distance matrix.
    """
    seq = np.asarray(seq, dtype=float)
    if seq.shape[0] == 0:
        raise ValueError("empty distance-matrix sequence")
    sigma = hungarian(seq.mean(axis=0))
    return np.tile(sigma, (seq.shape[0], 1))


def spit_assign(seq, window: int, mode: str = "causal") -> np.ndarray:
    """Sliding-window permutations: assignment on the moving-averaged D(t)."""
    return fpit_assign(moving_average(seq, window, mode))


def assign_schedule(seq, strategy: PitStrategy) -> np.ndarray:
    """Dispatch to the schedule builder selected by the strategy."""
    if strategy.kind == "frame":
        return fpit_assign(seq)
    if strategy.kind == "utterance":
        return upit_assign(seq)
    return spit_assign(seq, strategy.window, strategy.mode)


def _check_shapes(gt: np.ndarray, est: np.ndarray, sched: np.ndarray) -> None:
    if gt.shape != est.shape:
        raise ValueError(f"scene shapes differ: {gt.shape} vs {est.shape}")
    if sched.shape != gt.shape[:2]:
        raise ValueError(f"schedule shape {sched.shape} does not match scenes {gt.shape[:2]}")


def pit_loss(gt_scene, est_scene, sched) -> float:
    """MSE between ground truth and the schedule-permuted estimates.

    loss = 1/(T*M) * sum_t sum_m |gt[t, m] - est[t, sched[t, m]]|^2
    """
    gt = scene_frames(gt_scene)
    est = scene_frames(est_scene)
    sched = np.asarray(sched)
    _check_shapes(gt, est, sched)
    t_len, m = gt.shape[:2]
    permuted = np.take_along_axis(est, sched[:, :, None], axis=1)
    diff = gt - permuted
    return float(np.einsum("tmk,tmk->", diff, diff) / (t_len * m))


def invert_schedule(sched) -> np.ndarray:
    """Per-frame inverse permutations: inv[t, sched[t, m]] = m."""
    sched = np.asarray(sched)
    inv = np.empty_like(sched)
    t_idx = np.arange(sched.shape[0])[:, None]
    inv[t_idx, sched] = np.arange(sched.shape[1])[None, :]
    return inv


def pit_loss_grad(gt_scene, est_scene, sched) -> np.ndarray:
    """Gradient of pit_loss with respect to the estimates, schedule frozen.

    grad[t, j] = 2/(T*M) * (est[t, j] - gt[t, inv(sched)[t, j]]). A slot
    matched to a padding target is pulled toward 0; a below-threshold slot
    matched to an active target is pulled toward that target.
    """
    gt = scene_frames(gt_scene)
    est = scene_frames(est_scene)
    sched = np.asarray(sched)
    _check_shapes(gt, est, sched)
    t_len, m = gt.shape[:2]
    inv = invert_schedule(sched)
    gt_for_slot = np.take_along_axis(gt, inv[:, :, None], axis=1)
    return (2.0 / (t_len * m)) * (est - gt_for_slot)
