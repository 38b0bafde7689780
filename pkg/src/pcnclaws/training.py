"""Windowed multi-scenario training of the two conditional networks.

Each optimization step samples a batch of short windows uniformly over
(scenario, start frame), teacher-forces the window's initial state from the
ground-truth trajectory, rolls the neural model forward with a tape, and
accumulates position-loss gradients over the batch (batch-sum, matching the
training objective's plain sum over objects).  Adam with cosine-annealed
learning rate updates both networks; windows that blow up the explicit
integrator are skipped and counted.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .autodiff import rollout_with_tape
from .errors import (AllDiverged, Diverged, InvalidParam, OutOfDomain,
                     ShapeMismatch, TooShort)
from .materials import PhysParams
from .mpm import SimConfig, Trajectory, state_from_trajectory_frame
from .nn import NeuralLaw

# Loss value reported for a diverged window (skipped for gradients).
DIVERGED_PENALTY = 1e3
# Consecutive all-diverged steps tolerated before giving up.
_MAX_DEAD_STEPS = 25


@dataclass(frozen=True)
class TrainConfig:
    window_len: int = 20
    batch_size: int = 4
    lr0: float = 1e-3
    lr_min: float = 1e-5
    total_steps: int = 200
    seed: int = 0
    eval_every: int = 50
    # teacher-forcing noise: windows start from slightly perturbed states so
    # the model learns to pull accumulated rollout error back to the data
    # manifold (otherwise long autonomous rollouts drift off-distribution
    # and blow up)
    noise_x: float = 3e-4
    noise_v: float = 1e-2
    noise_F: float = 0.0
    # anchors against a failure mode of joint training: the position loss is
    # invariant under a joint reparameterization of the deformation code (the
    # plastic residual can absorb what the stress map re-reads), and tiny
    # per-substep residuals compound into a collapsed F over long rollouts;
    # the penalty keeps the learned projection at the identity unless the
    # data demands plasticity, and the slower plastic learning rate damps
    # the drift directions
    pls_lr_scale: float = 0.2
    residual_penalty: float = 0.03

    def __post_init__(self):
        if self.window_len < 1:
            raise InvalidParam("window_len must be >= 1")
        if self.lr_min > self.lr0:
            raise InvalidParam("lr_min must not exceed lr0")
        if self.pls_lr_scale < 0:
            raise InvalidParam("pls_lr_scale must be non-negative")


@dataclass
class Scenario:
    """One training trajectory plus the static scene data windows need."""

    trajectory: Trajectory
    params: PhysParams
    sim: SimConfig
    mass: np.ndarray
    volume0: np.ndarray


@dataclass
class Window:
    scenario: int
    start: int


def make_windows(dataset: Sequence[Scenario], window_len: int,
                 rng: np.random.Generator):
    """Infinite stream of uniformly sampled training windows.

    Every trajectory must have at least window_len + 1 frames; start frames
    cover [0, T - window_len].
    """
    for i, sc in enumerate(dataset):
        if sc.trajectory.n_frames < window_len + 1:
            raise TooShort(
                f"scenario {i} has {sc.trajectory.n_frames} frames, "
                f"needs at least {window_len + 1}")
    n = len(dataset)
    while True:
        s = int(rng.integers(0, n))
        hi = dataset[s].trajectory.n_frames - window_len
        yield Window(scenario=s, start=int(rng.integers(0, hi)))


def window_targets(sc: Scenario, window: Window, window_len: int) -> np.ndarray:
    """Ground-truth positions for frames start..start+W as float64."""
    sl = sc.trajectory.positions[window.start:window.start + window_len + 1]
    return sl.astype(np.float64)


def loss_total(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray]) -> float:
    """Sum over windows of the per-frame-averaged squared position error.

    Each window contributes (1/N_f) sum_n mean_p ||x_n - x_n^gt||^2 with
    N_f the number of recorded frames in the window (frame 0 included).
    """
    total = 0.0
    for p, g in zip(pred, gt):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeMismatch(f"window shapes differ: {p.shape} vs {g.shape}")
        total += float(np.mean(np.sum((p - g) ** 2, axis=-1), axis=-1).mean())
    return total


def window_loss_and_seed(pred64: np.ndarray, gt64: np.ndarray):
    """Loss of one window plus d(loss)/d(pred positions)."""
    if pred64.shape != gt64.shape:
        raise ShapeMismatch(f"window shapes differ: {pred64.shape} vs {gt64.shape}")
    n_f, m, _ = pred64.shape
    diff = pred64 - gt64
    loss = float(np.sum(diff * diff) / (n_f * m))
    seed = 2.0 * diff / (n_f * m)
    return loss, seed


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    """Cosine annealing from lr0 at step 0 down to lr_min at total_steps."""
    if not 0 <= step <= total_steps:
        raise InvalidParam("step must lie in [0, total_steps]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    """First/second moment accumulators; shapes mirror the weights."""

    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: List[np.ndarray],
              grads: Sequence[np.ndarray], lr: float) -> None:
    """Standard Adam update with bias correction, in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("parameter/gradient count mismatch")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class TrainHistory:
    steps: List[int] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    diverged: List[int] = field(default_factory=list)


def train(dataset: Sequence[Scenario], law: NeuralLaw, cfg: TrainConfig,
          log: Optional[Callable[[str], None]] = None) -> TrainHistory:
    """Optimize the law's two networks on windows of the dataset, in place.

    All scenarios must share the law's material kind.  Diverged windows
    contribute a capped penalty to the reported loss and are skipped for
    gradient purposes; an epoch of nothing but divergence raises.
    """
    if not dataset:
        raise InvalidParam("dataset is empty")
    for sc in dataset:
        if sc.params.material is not law.material:
            raise InvalidParam("all scenarios must match the law's material")
    if log is None:
        log = lambda line: print(line, file=sys.stdout)
    rng = np.random.default_rng(cfg.seed)
    stream = make_windows(dataset, cfg.window_len, rng)
    weights_e = law.els.flat_params()
    weights_p = law.pls.flat_params()
    weights = weights_e + weights_p
    opt_e = AdamState.for_params(weights_e)
    opt_p = AdamState.for_params(weights_p)
    history = TrainHistory()
    dead_steps = 0
    for step_i in range(cfg.total_steps):
        lr = cosine_lr(step_i, cfg.total_steps, cfg.lr0, cfg.lr_min)
        grad_sum = [np.zeros_like(w) for w in weights]
        loss_sum = 0.0
        n_diverged = 0
        n_ok = 0
        for _ in range(cfg.batch_size):
            window = next(stream)
            sc = dataset[window.scenario]
            state = state_from_trajectory_frame(
                sc.trajectory, window.start, sc.sim, sc.mass, sc.volume0)
            if cfg.noise_x:
                state.x += cfg.noise_x * rng.standard_normal(state.x.shape)
            if cfg.noise_v:
                state.v += cfg.noise_v * rng.standard_normal(state.v.shape)
            if cfg.noise_F:
                state.F_e += cfg.noise_F * rng.standard_normal(state.F_e.shape)
            gt = window_targets(sc, window, cfg.window_len)
            try:
                # frame-sized segments re-record one frame at a time during
                # the backward sweep: measurably faster than larger tapes
                # because the live intermediates stay cache-resident
                _, tape = rollout_with_tape(state, law, sc.params, sc.sim,
                                            cfg.window_len, segment=1)
            except (Diverged, OutOfDomain):
                # an untrained law can blow up the explicit integrator or walk
                # a particle out of the margin; both are skip-and-count events
                n_diverged += 1
                loss_sum += DIVERGED_PENALTY
                continue
            loss, seed = window_loss_and_seed(tape.positions64, gt)
            bundle = tape.backward(seed, residual_penalty=cfg.residual_penalty)
            for acc, g in zip(grad_sum, bundle.d_theta_e + bundle.d_theta_p):
                acc += g
            loss_sum += loss
            n_ok += 1
        if n_ok == 0:
            dead_steps += 1
            if dead_steps >= _MAX_DEAD_STEPS:
                raise AllDiverged(
                    f"{_MAX_DEAD_STEPS} consecutive steps produced no usable gradient")
        else:
            dead_steps = 0
            n_e = len(weights_e)
            adam_step(opt_e, weights_e, grad_sum[:n_e], lr)
            adam_step(opt_p, weights_p, grad_sum[n_e:], lr * cfg.pls_lr_scale)
        history.steps.append(step_i)
        history.losses.append(loss_sum)
        history.lrs.append(lr)
        history.diverged.append(n_diverged)
        log(f"step={step_i} lr={lr:.8g} loss={loss_sum:.8g} diverged={n_diverged}")
    return history


def eval_metrics(pred: Trajectory, gt: Trajectory, block: int = 5):
    """Position MSE averaged over consecutive `block`-frame blocks.

    Returns (per-block means, scalar mean over blocks).  A frame's value is
    the per-particle mean of the squared position error; a trailing partial
    block is included.
    """
    if pred.positions.shape != gt.positions.shape:
        raise ShapeMismatch(
            f"trajectory shapes differ: {pred.positions.shape} vs {gt.positions.shape}")
    diff = pred.positions.astype(np.float64) - gt.positions.astype(np.float64)
    per_frame = np.mean(np.sum(diff * diff, axis=-1), axis=-1)
    blocks = [float(per_frame[i:i + block].mean())
              for i in range(0, len(per_frame), block)]
    return np.asarray(blocks), float(np.mean(blocks))


def scenario_from_entry(entry: dict) -> Scenario:
    """Build a training Scenario from a data_io manifest entry.

    Particle masses/volumes are reconstructed from the scenario geometry
    (uniform density over the sampled object volume).
    """
    from .dataio import build_initial_state  # local import to avoid a cycle

    spec = entry["spec"]
    state = build_initial_state(spec)
    traj = entry["trajectory"]
    return Scenario(trajectory=traj, params=traj.params, sim=spec.sim,
                    mass=state.mass, volume0=state.volume0)


def scenarios_from_manifest(entries: Sequence[dict],
                            split: Optional[str] = None) -> List[Scenario]:
    return [scenario_from_entry(e) for e in entries
            if split is None or e["split"] == split]
