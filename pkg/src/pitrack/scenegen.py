"""Synthetic multi-source scene generation.

Sources are born and die on a 200 ms decision grid: at each step one birth
may occur with a probability that depends on how many sources are currently
active, and every source that has outlived its minimum duration may die.
Each source travels between two random points of a room box along a
half-cosine path per coordinate; the ground truth exposes only the unit DOA
of each position, activity-scaled to an ACCDOA vector.

A separate observation model turns the ground truth into noisy, per-frame
shuffled detections so that slot identity carries no information; this is
what the toy tracker consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .accdoa import EstimateScene, GroundTruthScene

ROOM_HALF_EXTENT = 3.0
ORIGIN_EXCLUSION_RADIUS = 0.3
_MAX_RESAMPLE = 1000


@dataclass
class SceneConfig:
    scene_length_s: float = 20.0
    step_s: float = 0.2
    frame_period_s: float = 0.2
    birth_rates: tuple = (0.06, 0.04, 0.02)  # indexed by current active count
    death_prob: float = 0.02
    min_duration_s: float = 2.0
    max_simultaneous: int = 3
    m: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.step_s != self.frame_period_s:
            raise ValueError("the decision step and the frame period must be equal")
        if not all(0.0 <= r <= 1.0 for r in self.birth_rates):
            raise ValueError(f"birth rates must be probabilities, got {self.birth_rates}")
        if not 0.0 <= self.death_prob <= 1.0:
            raise ValueError(f"death_prob must be in [0, 1], got {self.death_prob}")
        if self.min_duration_s <= 0 or self.scene_length_s <= 0 or self.step_s <= 0:
            raise ValueError("durations must be positive")
        if self.m < self.max_simultaneous:
            raise ValueError(
                f"M={self.m} must be at least max_simultaneous={self.max_simultaneous}"
            )

    @property
    def n_frames(self) -> int:
        return int(round(self.scene_length_s / self.frame_period_s))

    @property
    def min_duration_frames(self) -> int:
        return int(math.ceil(self.min_duration_s / self.frame_period_s))


@dataclass
class ObservationConfig:
    """Noise model standing in for an acoustic front end."""

    noise_deg: float = 5.0       # angular std of the per-frame DOA perturbation
    shuffle: bool = True         # permute the M slots independently per frame
    activity_noise: float = 0.05  # std of the additive norm jitter
    seed: int = 0

    def __post_init__(self):
        if self.noise_deg < 0:
            raise ValueError(f"noise_deg must be >= 0, got {self.noise_deg}")
        if self.activity_noise < 0:
            raise ValueError(f"activity_noise must be >= 0, got {self.activity_noise}")


@dataclass
class Trajectory:
    """One source's lifetime: frames [birth_frame, death_frame) are active."""

    birth_frame: int
    death_frame: int
    positions: np.ndarray  # (L, 3) room coordinates
    doas: np.ndarray       # (L, 3) unit DOA per active frame

    @property
    def lifetime(self) -> int:
        return self.death_frame - self.birth_frame


@dataclass
class ObservedScene:
    """A ground-truth scene paired with the noisy detections fed to a tracker.

    (seed, index) identifies the scene's random stream: the same pair always
    regenerates the same scene.
    """

    scene: GroundTruthScene
    observations: np.ndarray | None = None  # (T, M, 3)
    seed: int = 0
    index: int = 0


def sample_activity(cfg: SceneConfig, rng: np.random.Generator) -> list:
    """Draw (birth_frame, death_frame) intervals from the birth/death chain.

    Deaths are evaluated before births within each step, so a slot freed at
    step t can already host a newborn at step t. death_frame is exclusive;
    intervals are clipped to the scene end, which counts as a death.
    """
    t_total = cfg.n_frames
    min_frames = cfg.min_duration_frames
    live = []  # birth frames of currently active sources, in birth order
    done = []
    for t in range(t_total):
        survivors = []
        for birth in live:
            if t - birth >= min_frames and rng.random() < cfg.death_prob:
                done.append((birth, t))
            else:
                survivors.append(birth)
        live = survivors
        if len(live) < cfg.max_simultaneous:
            rate = cfg.birth_rates[min(len(live), len(cfg.birth_rates) - 1)]
            if rng.random() < rate:
                live.append(t)
    done.extend((birth, t_total) for birth in live)
    done.sort()
    return done


def _sample_point(rng: np.random.Generator) -> np.ndarray:
    for _ in range(_MAX_RESAMPLE):
        p = rng.uniform(-ROOM_HALF_EXTENT, ROOM_HALF_EXTENT, size=3)
        if np.linalg.norm(p) > ORIGIN_EXCLUSION_RADIUS:
            return p
    raise RuntimeError("could not draw a room point outside the origin exclusion ball")


def sample_trajectory(birth: int, death: int, cfg: SceneConfig,
                      rng: np.random.Generator) -> Trajectory:
    """Connect two random room points with a half-cosine ease per coordinate.

    The path has zero endpoint velocity and the DOA is the normalized
    position as seen from the origin. Start/end pairs whose path dips into
    the origin exclusion ball are redrawn.
    """
    if birth > death:
        raise ValueError(f"birth {birth} after death {death}")
    life = max(1, death - birth)
    tau = np.zeros(life) if life == 1 else np.arange(life) / (life - 1)
    blend = (1.0 - np.cos(np.pi * tau))[:, None] / 2.0
    for _ in range(_MAX_RESAMPLE):
        start = _sample_point(rng)
        end = _sample_point(rng)
        positions = start[None, :] + (end - start)[None, :] * blend
        radii = np.linalg.norm(positions, axis=1)
        if np.all(radii > ORIGIN_EXCLUSION_RADIUS):
            return Trajectory(birth, death, positions, positions / radii[:, None])
    raise RuntimeError("could not draw a trajectory clear of the origin exclusion ball")


def build_scene(cfg: SceneConfig, rng: np.random.Generator) -> GroundTruthScene:
    """Assemble activity intervals and trajectories into a padded scene.

    Trajectories are assigned to the lowest slot that is free for their whole
    lifetime; a freed slot is reused only from the frame after its previous
    occupant died, so one slot never hosts two back-to-back sources without
    at least one inactive frame between them. Each slot run of consecutive
    active frames is therefore exactly one source.
    """
    intervals = sample_activity(cfg, rng)
    t_total = cfg.n_frames
    frames = np.zeros((t_total, cfg.m, 3))
    slot_busy_until = np.full(cfg.m, -1)  # death frame of the last occupant
    track_count = 0
    for birth, death in intervals:
        free = np.flatnonzero(slot_busy_until < birth)
        if free.size == 0:
            # only reachable when M == max_simultaneous and a same-step
            # death/birth collide; fall back to immediate reuse
            free = np.flatnonzero(slot_busy_until <= birth)
        slot = int(free[0])
        traj = sample_trajectory(birth, death, cfg, rng)
        frames[birth:death, slot, :] = traj.doas
        slot_busy_until[slot] = death
        track_count = max(track_count, slot + 1)
    return GroundTruthScene(frames=frames, frame_period_s=cfg.frame_period_s,
                            track_count=track_count)


def _rotate_about_perpendicular(v: np.ndarray, angle_rad: float,
                                rng: np.random.Generator) -> np.ndarray:
    """Rotate unit vector v by angle_rad about a random axis perpendicular to v."""
    while True:
        g = rng.normal(size=3)
        axis = g - np.dot(g, v) * v
        n = np.linalg.norm(axis)
        if n > 1e-12:
            axis /= n
            break
    return v * math.cos(angle_rad) + np.cross(axis, v) * math.sin(angle_rad)


def observe(scene: GroundTruthScene, ocfg: ObservationConfig,
            rng: np.random.Generator) -> np.ndarray:
    """Noisy detections: perturbed DOAs, jittered norms, shuffled slots.

    Each active ground-truth vector is rotated by an angle drawn from
    N(0, noise_deg) about a random perpendicular axis (so the angular error
    equals |angle| exactly), and its norm is jittered additively and clamped
    to [0, 1.2]. Inactive slots stay exactly zero. When shuffle is on, the M
    slots are permuted independently per frame.
    """
    frames = scene.frames
    t_total, m = frames.shape[:2]
    out = np.zeros_like(frames)
    sigma_rad = math.radians(ocfg.noise_deg)
    for t in range(t_total):
        for s in range(m):
            v = frames[t, s]
            vnorm = np.linalg.norm(v)
            if vnorm == 0.0:
                continue
            u = v / vnorm
            if sigma_rad > 0.0:
                u = _rotate_about_perpendicular(u, rng.normal(0.0, sigma_rad), rng)
            amp = vnorm
            if ocfg.activity_noise > 0.0:
                amp = min(1.2, max(0.0, amp + rng.normal(0.0, ocfg.activity_noise)))
            out[t, s] = amp * u
        if ocfg.shuffle:
            out[t] = out[t][rng.permutation(m)]
    return out


def scene_rng(base_seed: int, index: int) -> np.random.Generator:
    """Independent per-scene stream derived from a base seed."""
    return np.random.default_rng(np.random.SeedSequence(base_seed, spawn_key=(index,)))


def generate_dataset(n_scenes: int, cfg: SceneConfig, ocfg: ObservationConfig | None = None,
                     base_seed: int | None = None) -> list:
    """Generate n_scenes observed scenes with independent per-scene streams.

    The i-th scene is reproducible from (base_seed, i) alone. With ocfg None
    the observations are omitted.
    """
    seed = cfg.seed if base_seed is None else base_seed
    out = []
    for i in range(n_scenes):
        rng = scene_rng(seed, i)
        scene = build_scene(cfg, rng)
        obs = observe(scene, ocfg, rng) if ocfg is not None else None
        out.append(ObservedScene(scene=scene, observations=obs, seed=seed, index=i))
    return out


def crossing_pair(t_len: int = 40, max_azimuth_deg: float = 60.0,
                  m: int = 2, frame_period_s: float = 0.2):
    """Two tracks crossing in azimuth, with estimates that swap identities.

    The ground-truth tracks sweep linearly between -max_azimuth_deg and
    +max_azimuth_deg in opposite directions, crossing between frames
    t_len//2 - 1 and t_len//2. The estimates copy the ground truth but swap
    identities from the crossing frame on: estimate slot 0 follows track 0
    before the crossing and track 1 after it. Azimuths are sampled at
    half-frame offsets so no frame lands exactly on the crossing.

    Returns (gt_scene, est_scene, swap_frame).
    """
    if t_len < 2 or t_len % 2:
        raise ValueError(f"t_len must be even and >= 2, got {t_len}")
    if m < 2:
        raise ValueError(f"need at least 2 slots, got {m}")
    a = math.radians(max_azimuth_deg)
    az0 = -a + 2 * a * (np.arange(t_len) + 0.5) / t_len
    az1 = -az0
    gt = np.zeros((t_len, m, 3))
    gt[:, 0, 0] = np.cos(az0)
    gt[:, 0, 1] = np.sin(az0)
    gt[:, 1, 0] = np.cos(az1)
    gt[:, 1, 1] = np.sin(az1)
    swap = t_len // 2
    est = gt.copy()
    est[swap:, 0, :] = gt[swap:, 1, :]
    est[swap:, 1, :] = gt[swap:, 0, :]
    gt_scene = GroundTruthScene(frames=gt, frame_period_s=frame_period_s, track_count=2)
    est_scene = EstimateScene(frames=est, frame_period_s=frame_period_s)
    return gt_scene, est_scene, swap
