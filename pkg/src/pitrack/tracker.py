"""A small trainable recurrent tracker, trained end to end under a PIT loss.

The network maps the M noisy per-frame detections (flattened to a 3M input)
through a linear projection, two stacked gated recurrent unit layers, and a
linear head back to M ACCDOA estimates. Everything is plain numpy with
hand-written backpropagation through time, so gradients can be checked
against finite differences without a framework in the loop.

An optional auxiliary head on the first recurrent layer produces a second
set of ACCDOA estimates trained with a frame-level PIT loss at weight 0.5;
it is off by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .accdoa import EstimateScene
from .pit import PitStrategy, assign_schedule, fpit_assign

AUX_LOSS_WEIGHT = 0.5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    strategy: PitStrategy = field(default_factory=PitStrategy)
    epochs: int = 100
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    grad_clip_norm: float = 1.0
    batch_size: int = 10
    hidden_size: int = 32
    m: int = 10
    seed: int = 0
    aux_fpit: bool = False        # auxiliary frame-level loss on the first GRU layer
    assign_squared: bool = False  # ablation: build assignment matrices from squared distances

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if min(self.batch_size, self.hidden_size, self.m) < 1:
            raise ValueError("batch_size, hidden_size and m must be positive")
        if self.learning_rate <= 0 or self.grad_clip_norm <= 0:
            raise ValueError("learning_rate and grad_clip_norm must be positive")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


def param_shapes(m: int, hidden: int) -> dict:
    """Canonical parameter layout; iteration order fixes the init sequence."""
    d = 3 * m
    shapes = {"in_w": (hidden, d), "in_b": (hidden,)}
    for layer in (1, 2):
        for gate in ("z", "r", "n"):
            shapes[f"gru{layer}_w{gate}"] = (hidden, hidden)
            shapes[f"gru{layer}_u{gate}"] = (hidden, hidden)
            shapes[f"gru{layer}_b{gate}"] = (hidden,)
    shapes["out_w"] = (d, hidden)
    shapes["out_b"] = (d,)
    shapes["aux_w"] = (d, hidden)
    shapes["aux_b"] = (d,)
    return shapes


@dataclass
class TrackerParams:
    m: int
    hidden: int
    arrays: dict

    def copy(self) -> "TrackerParams":
        return TrackerParams(self.m, self.hidden,
                             {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in sorted(self.arrays)])

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())


def init_params(m: int, hidden: int, rng: np.random.Generator) -> TrackerParams:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per weight matrix."""
    arrays = {}
    for name, shape in param_shapes(m, hidden).items():
        fan_in = shape[-1] if len(shape) == 2 else (3 * m if name == "in_b" else hidden)
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return TrackerParams(m=m, hidden=hidden, arrays=arrays)


def zero_params(m: int, hidden: int) -> TrackerParams:
    arrays = {name: np.zeros(shape) for name, shape in param_shapes(m, hidden).items()}
    return TrackerParams(m=m, hidden=hidden, arrays=arrays)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _forward_pass(params: TrackerParams, x: np.ndarray, linear_mode: bool = False):
    """Run the recurrence over x (B, T, 3M).

    Returns (est, aux, cache): est and aux are (B, T, 3M); the cache holds
    the per-frame activations needed by the backward pass. In linear_mode the
    gates are forced open (update 0, reset 1) and the candidate activation is
    the identity, which makes the whole network linear.
    """
    p = params.arrays
    b_sz, t_len, _ = x.shape
    h = params.hidden
    a_in = x @ p["in_w"].T + p["in_b"]  # (B, T, H)

    cache = {
        "x": x, "a_in": a_in, "linear_mode": linear_mode,
    }
    for layer in (1, 2):
        for key in ("z", "r", "hu", "n", "h"):
            cache[f"{key}{layer}"] = np.empty((t_len, b_sz, h))

    def cell(layer: int, t: int, i_t: np.ndarray, hprev: np.ndarray) -> np.ndarray:
        hu = hprev @ p[f"gru{layer}_un"].T
        if linear_mode:
            z = np.zeros_like(hu)
            r = np.ones_like(hu)
            n = i_t @ p[f"gru{layer}_wn"].T + hu + p[f"gru{layer}_bn"]
        else:
            z = _sigmoid(i_t @ p[f"gru{layer}_wz"].T + hprev @ p[f"gru{layer}_uz"].T
                         + p[f"gru{layer}_bz"])
            r = _sigmoid(i_t @ p[f"gru{layer}_wr"].T + hprev @ p[f"gru{layer}_ur"].T
                         + p[f"gru{layer}_br"])
            n = np.tanh(i_t @ p[f"gru{layer}_wn"].T + r * hu + p[f"gru{layer}_bn"])
        hnew = (1.0 - z) * n + z * hprev
        cache[f"z{layer}"][t] = z
        cache[f"r{layer}"][t] = r
        cache[f"hu{layer}"][t] = hu
        cache[f"n{layer}"][t] = n
        cache[f"h{layer}"][t] = hnew
        return hnew

    h1 = np.zeros((b_sz, h))
    h2 = np.zeros((b_sz, h))
    for t in range(t_len):
        h1 = cell(1, t, a_in[:, t], h1)
        h2 = cell(2, t, h1, h2)
    h1_seq = cache["h1"].transpose(1, 0, 2)  # (B, T, H)
    h2_seq = cache["h2"].transpose(1, 0, 2)
    est = h2_seq @ p["out_w"].T + p["out_b"]
    aux = h1_seq @ p["aux_w"].T + p["aux_b"]
    return est, aux, cache


def _layer_backward(p: dict, layer: int, t: int, cache: dict, dh: np.ndarray,
                    i_t: np.ndarray, hprev: np.ndarray, grads: dict):
    """One GRU cell backward step; returns (d_input, d_hprev)."""
    z = cache[f"z{layer}"][t]
    r = cache[f"r{layer}"][t]
    hu = cache[f"hu{layer}"][t]
    n = cache[f"n{layer}"][t]
    linear = cache["linear_mode"]

    dn = dh * (1.0 - z)
    da_n = dn if linear else dn * (1.0 - n * n)
    dhu = da_n * r
    d_hprev = dh * z + dhu @ p[f"gru{layer}_un"]
    d_in = da_n @ p[f"gru{layer}_wn"]
    grads[f"gru{layer}_wn"] += da_n.T @ i_t
    grads[f"gru{layer}_un"] += dhu.T @ hprev
    grads[f"gru{layer}_bn"] += da_n.sum(axis=0)
    if not linear:
        dz = dh * (hprev - n)
        da_z = dz * z * (1.0 - z)
        da_r = (da_n * hu) * r * (1.0 - r)
        grads[f"gru{layer}_wz"] += da_z.T @ i_t
        grads[f"gru{layer}_uz"] += da_z.T @ hprev
        grads[f"gru{layer}_bz"] += da_z.sum(axis=0)
        grads[f"gru{layer}_wr"] += da_r.T @ i_t
        grads[f"gru{layer}_ur"] += da_r.T @ hprev
        grads[f"gru{layer}_br"] += da_r.sum(axis=0)
        d_in += da_z @ p[f"gru{layer}_wz"] + da_r @ p[f"gru{layer}_wr"]
        d_hprev += da_z @ p[f"gru{layer}_uz"] + da_r @ p[f"gru{layer}_ur"]
    return d_in, d_hprev


def _backward_pass(params: TrackerParams, cache: dict, d_est: np.ndarray,
                   d_aux: np.ndarray | None = None) -> dict:
    """Backpropagation through time for upstream gradients d_est (B, T, 3M)."""
    p = params.arrays
    x = cache["x"]
    a_in = cache["a_in"]
    b_sz, t_len, _ = x.shape
    h = params.hidden
    grads = {name: np.zeros(shape) for name, shape in param_shapes(params.m, params.hidden).items()}

    h1_seq = cache["h1"]
    h2_seq = cache["h2"]
    zeros = np.zeros((b_sz, h))

    # output heads (vectorized over all frames)
    d_est_flat = d_est.reshape(-1, d_est.shape[2])
    grads["out_w"] += d_est_flat.T @ h2_seq.transpose(1, 0, 2).reshape(-1, h)
    grads["out_b"] += d_est_flat.sum(axis=0)
    dh2_seq = d_est @ p["out_w"]  # (B, T, H)
    if d_aux is not None:
        d_aux_flat = d_aux.reshape(-1, d_aux.shape[2])
        grads["aux_w"] += d_aux_flat.T @ h1_seq.transpose(1, 0, 2).reshape(-1, h)
        grads["aux_b"] += d_aux_flat.sum(axis=0)
        dh1_aux = d_aux @ p["aux_w"]
    else:
        dh1_aux = None

    da_in = np.empty((b_sz, t_len, h))
    dh1_next = zeros.copy()
    dh2_next = zeros.copy()
    for t in range(t_len - 1, -1, -1):
        h1_t = h1_seq[t]
        h1_prev = h1_seq[t - 1] if t > 0 else zeros
        h2_prev = h2_seq[t - 1] if t > 0 else zeros
        dh2 = dh2_seq[:, t] + dh2_next
        di2, dh2_next = _layer_backward(p, 2, t, cache, dh2, h1_t, h2_prev, grads)
        dh1 = di2 + dh1_next
        if dh1_aux is not None:
            dh1 = dh1 + dh1_aux[:, t]
        di1, dh1_next = _layer_backward(p, 1, t, cache, dh1, a_in[:, t], h1_prev, grads)
        da_in[:, t] = di1
    da_in_flat = da_in.reshape(-1, h)
    grads["in_w"] += da_in_flat.T @ x.reshape(-1, x.shape[2])
    grads["in_b"] += da_in_flat.sum(axis=0)
    return grads


def _check_obs(params: TrackerParams, observations: np.ndarray) -> np.ndarray:
    observations = np.asarray(observations, dtype=float)
    if observations.ndim != 3 or observations.shape[1:] != (params.m, 3):
        raise ValueError(
            f"observations must be (T, {params.m}, 3), got {observations.shape}"
        )
    return observations


def forward(params: TrackerParams, observations, frame_period_s: float = 0.2,
            linear_mode: bool = False) -> EstimateScene:
    """Deterministic forward pass over one scene's observations."""
    observations = _check_obs(params, observations)
    t_len = observations.shape[0]
    x = observations.reshape(1, t_len, 3 * params.m)
    est, _, _ = _forward_pass(params, x, linear_mode)
    return EstimateScene(frames=est[0].reshape(t_len, params.m, 3),
                         frame_period_s=frame_period_s)


def backward(params: TrackerParams, observations, upstream_grads,
             linear_mode: bool = False) -> dict:
    """Parameter gradients of sum(upstream * output) for one scene."""
    observations = _check_obs(params, observations)
    upstream_grads = np.asarray(upstream_grads, dtype=float)
    if upstream_grads.shape != observations.shape:
        raise ValueError(
            f"upstream gradients must be {observations.shape}, got {upstream_grads.shape}"
        )
    t_len = observations.shape[0]
    x = observations.reshape(1, t_len, 3 * params.m)
    _, _, cache = _forward_pass(params, x, linear_mode)
    return _backward_pass(params, cache, upstream_grads.reshape(1, t_len, 3 * params.m))


def global_grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their global norm is at most max_norm."""
    total = global_grad_norm(grads)
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class AdamWState:
    step: int
    m: dict
    v: dict


def adamw_init(params: TrackerParams) -> AdamWState:
    return AdamWState(
        step=0,
        m={k: np.zeros_like(v) for k, v in params.arrays.items()},
        v={k: np.zeros_like(v) for k, v in params.arrays.items()},
    )


def adamw_update(params: TrackerParams, grads: dict, state: AdamWState,
                 lr: float, weight_decay: float) -> None:
    """Adam step with decoupled weight decay, in place."""
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.step
    bc2 = 1.0 - ADAM_BETA2 ** state.step
    for name, p in params.arrays.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p *= 1.0 - lr * weight_decay
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + ADAM_EPS)


@dataclass
class Checkpoint:
    params: TrackerParams
    config: TrainConfig
    epoch: int
    train_loss_history: list
    val_loss_history: list


def _stack_dataset(samples, m: int):
    obs = np.stack([np.asarray(s.observations, dtype=float) for s in samples])
    gt = np.stack([s.scene.frames for s in samples])
    if obs.shape != gt.shape or obs.shape[2] != m:
        raise ValueError(f"dataset shapes {obs.shape} / {gt.shape} do not match M={m}")
    return obs, gt


def _batch_distance_sequences(gt_b: np.ndarray, est_b: np.ndarray, squared: bool) -> np.ndarray:
    diff = gt_b[:, :, :, None, :] - est_b[:, :, None, :, :]
    d2 = np.einsum("btijk,btijk->btij", diff, diff)
    return d2 if squared else np.sqrt(d2)


def _batch_loss_and_grad(gt_b: np.ndarray, est_b: np.ndarray, scheds: np.ndarray):
    """Per-scene PIT losses and the gradient of their mean w.r.t. the estimates."""
    b_sz, t_len, m = gt_b.shape[:3]
    permuted = np.take_along_axis(est_b, scheds[..., None], axis=2)
    diff = permuted - gt_b
    losses = np.einsum("btmk,btmk->b", diff, diff) / (t_len * m)
    grad = np.zeros_like(est_b)
    # each estimate slot appears exactly once per frame in the schedule
    np.put_along_axis(grad, scheds[..., None],
                      (2.0 / (t_len * m * b_sz)) * diff, axis=2)
    return losses, grad


def _schedules_for_batch(d_b: np.ndarray, strategy: PitStrategy) -> np.ndarray:
    return np.stack([assign_schedule(d_b[i], strategy) for i in range(d_b.shape[0])])


def _dataset_loss(params: TrackerParams, obs: np.ndarray, gt: np.ndarray,
                  cfg: TrainConfig, batch: int = 32) -> float:
    """Mean PIT loss over a dataset under cfg.strategy, without gradients."""
    n = obs.shape[0]
    total = 0.0
    for lo in range(0, n, batch):
        hi = min(lo + batch, n)
        x = obs[lo:hi].reshape(hi - lo, obs.shape[1], -1)
        est, _, _ = _forward_pass(params, x)
        est_b = est.reshape(hi - lo, obs.shape[1], cfg.m, 3)
        d_b = _batch_distance_sequences(gt[lo:hi], est_b, cfg.assign_squared)
        scheds = _schedules_for_batch(d_b, cfg.strategy)
        losses, _ = _batch_loss_and_grad(gt[lo:hi], est_b, scheds)
        total += float(losses.sum())
    return total / n


def train(train_set, val_set, cfg: TrainConfig, log=None) -> Checkpoint:
    """Train a tracker on observed scenes; deterministic given cfg.seed.

    Per batch: forward, build the per-frame distance matrices, select the
    permutation schedule with cfg.strategy, backpropagate the PIT loss under
    the frozen schedule, clip the global gradient norm, and take one step of
    Adam with decoupled weight decay.
    """
    if not train_set:
        raise ValueError("training set must not be empty")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.m, cfg.hidden_size, rng)
    obs, gt = _stack_dataset(train_set, cfg.m)
    val_obs = val_gt = None
    if val_set:
        val_obs, val_gt = _stack_dataset(val_set, cfg.m)
    n = obs.shape[0]
    t_len = obs.shape[1]
    opt = adamw_init(params)
    train_hist = []
    val_hist = []
    fpit = PitStrategy(kind="frame")
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b_idx, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            b_sz = idx.size
            x = obs[idx].reshape(b_sz, t_len, 3 * cfg.m)
            gt_b = gt[idx]
            est, aux, cache = _forward_pass(params, x)
            est_b = est.reshape(b_sz, t_len, cfg.m, 3)
            d_b = _batch_distance_sequences(gt_b, est_b, cfg.assign_squared)
            if not np.all(np.isfinite(d_b)):
                raise TrainingDivergedError(
                    f"non-finite estimate distances at epoch {epoch}, batch {b_idx}; "
                    f"max |estimate| = {np.abs(est).max():.3g}"
                )
            scheds = _schedules_for_batch(d_b, cfg.strategy)
            losses, d_est = _batch_loss_and_grad(gt_b, est_b, scheds)
            batch_loss = float(losses.mean())
            d_aux = None
            if cfg.aux_fpit:
                aux_b = aux.reshape(b_sz, t_len, cfg.m, 3)
                d_aux_seq = _batch_distance_sequences(gt_b, aux_b, cfg.assign_squared)
                aux_scheds = _schedules_for_batch(d_aux_seq, fpit)
                aux_losses, d_aux_est = _batch_loss_and_grad(gt_b, aux_b, aux_scheds)
                batch_loss += AUX_LOSS_WEIGHT * float(aux_losses.mean())
                d_aux = AUX_LOSS_WEIGHT * d_aux_est.reshape(b_sz, t_len, 3 * cfg.m)
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss {batch_loss} at epoch {epoch}, batch {b_idx}"
                )
            grads = _backward_pass(params, cache,
                                   d_est.reshape(b_sz, t_len, 3 * cfg.m), d_aux)
            clip_global_norm(grads, cfg.grad_clip_norm)
            adamw_update(params, grads, opt, cfg.learning_rate, cfg.weight_decay)
            epoch_loss += float(losses.sum())
        train_hist.append(epoch_loss / n)
        if val_obs is not None:
            val_hist.append(_dataset_loss(params, val_obs, val_gt, cfg))
        if log is not None:
            val_txt = f" val {val_hist[-1]:.6f}" if val_hist else ""
            log(f"epoch {epoch + 1}/{cfg.epochs} train {train_hist[-1]:.6f}{val_txt}")
    return Checkpoint(params=params, config=cfg, epoch=cfg.epochs,
                      train_loss_history=train_hist, val_loss_history=val_hist)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    worst_param: str
    n_params: int
    grad_inf_norm: float


def grad_check(params: TrackerParams, sample, strategy: PitStrategy,
               step: float = 1e-5, tolerance: float = 1e-5,
               linear_mode: bool = False) -> GradCheckReport:
    """Compare the analytic end-to-end gradient with central finite differences.

    The permutation schedule is computed once at the base point and frozen for
    both sides, matching how a training step treats the assignment. Relative
    error is measured per component against max(|analytic|, |numeric|) floored
    at the largest gradient component, i.e. errors on negligible components
    count relative to the gradient's scale; otherwise finite-difference
    roundoff (about eps * loss / step) would dominate the report.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    obs = _check_obs(params, sample.observations)
    gt = sample.scene.frames
    t_len = obs.shape[0]
    x = obs.reshape(1, t_len, 3 * params.m)

    est, _, cache = _forward_pass(params, x, linear_mode)
    est_b = est.reshape(1, t_len, params.m, 3)
    d_seq = _batch_distance_sequences(gt[None], est_b, False)[0]
    sched = assign_schedule(d_seq, strategy)

    losses, d_est = _batch_loss_and_grad(gt[None], est_b, sched[None])
    analytic = _backward_pass(params, cache, d_est.reshape(1, t_len, 3 * params.m))

    def loss_at(p: TrackerParams) -> float:
        e, _, _ = _forward_pass(p, x, linear_mode)
        ls, _ = _batch_loss_and_grad(gt[None], e.reshape(1, t_len, params.m, 3), sched[None])
        return float(ls[0])

    worst = ""
    max_rel = 0.0
    g_inf = max(float(np.abs(g).max()) for g in analytic.values())
    probe = params.copy()
    for name, arr in probe.arrays.items():
        flat = arr.ravel()
        a_flat = analytic[name].ravel()
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = loss_at(probe)
            flat[k] = orig - step
            down = loss_at(probe)
            flat[k] = orig
            fd = (up - down) / (2.0 * step)
            rel = abs(a_flat[k] - fd) / max(abs(a_flat[k]), abs(fd), g_inf, 1e-12)
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}[{k}]"
    return GradCheckReport(
        max_rel_error=max_rel,
        tolerance=tolerance,
        passed=max_rel < tolerance,
        worst_param=worst,
        n_params=params.n_params,
        grad_inf_norm=g_inf,
    )
