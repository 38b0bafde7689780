"""Inverse parameter estimation through a frozen model.

Given an observed trajectory and a trained (or analytic) constitutive law,
gradient descent runs on the normalized physical parameters: each iterate
re-simulates from the observed initial state, measures the position-matching
loss over the observation window, backpropagates to the parameter vector,
and projects back into the normalization box.  Network weights never
change; the best-loss iterate is returned.
"""

from __future__ import annotations

import enum
import hashlib
import sys
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .autodiff import rollout_with_tape
from .errors import Diverged, InvalidParam, NoProgress, OutOfDomain
from .materials import PhysParams
from .mpm import SimConfig, Trajectory, state_from_trajectory_frame
from .nn import (DEFAULT_RANGES, NeuralLaw, ParamRanges, normalize_params,
                 param_values, params_from_values)
from .training import DIVERGED_PENALTY


class Optimizer(enum.Enum):
    ADAM = "adam"
    SGD = "sgd"


@dataclass(frozen=True)
class EstimateConfig:
    observe_len: Optional[int] = None   # frames; None = full observed length
    optimizer: Optimizer = Optimizer.ADAM
    lr: float = 5e-2
    max_iters: int = 500
    loss_tol: float = 1e-12             # convergence threshold on loss change
    bound: float = 1.0                  # box half-width in normalized space
    n_starts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1 or self.lr <= 0:
            raise InvalidParam("max_iters must be >= 1 and lr positive")
        if not np.isfinite(self.bound):
            raise InvalidParam("bounds must be finite")


@dataclass
class EstimateResult:
    params: PhysParams
    loss: float
    losses: List[float] = field(default_factory=list)
    param_history: List[np.ndarray] = field(default_factory=list)
    diverged_iters: int = 0


def weights_digest(law) -> str:
    """SHA-256 over all network weights (frozen-weights assertion)."""
    h = hashlib.sha256()
    if isinstance(law, NeuralLaw):
        for net in (law.els, law.pls):
            for arr in net.flat_params():
                h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def loss_position(params: PhysParams, observed: Trajectory, law,
                  sim: SimConfig, mass, volume0,
                  observe_len: Optional[int] = None,
                  ranges: Optional[ParamRanges] = None):
    """Mean-per-frame position-matching loss of a re-simulation.

    Rolls the model forward from the observed initial state for observe_len
    frames and compares particle positions (per-particle mean, as in
    training).  Returns (loss, tape or None); a diverged rollout yields the
    capped penalty with tape None.
    """
    n = observed.n_frames - 1 if observe_len is None else observe_len
    if n < 1 or n > observed.n_frames - 1:
        raise InvalidParam("observation window exceeds the trajectory length")
    state = state_from_trajectory_frame(observed, 0, sim, mass, volume0)
    try:
        _, tape = rollout_with_tape(state, law, params, sim, n, ranges=ranges)
    except (Diverged, OutOfDomain):
        return DIVERGED_PENALTY, None
    gt = observed.positions[:n + 1].astype(np.float64)
    diff = tape.positions64 - gt
    m = observed.particle_count
    loss = float(np.sum(diff * diff) / ((n + 1) * m))
    return loss, (tape, 2.0 * diff / ((n + 1) * m))


def _single_start(law, observed, sim, mass, volume0, z0, ranges, material,
                  cfg: EstimateConfig, log) -> EstimateResult:
    z = np.clip(np.asarray(z0, dtype=np.float64), -cfg.bound, cfg.bound)
    m_acc = np.zeros_like(z)
    v_acc = np.zeros_like(z)
    best_loss = np.inf
    best_z = z.copy()
    losses: List[float] = []
    zs: List[np.ndarray] = []
    diverged = 0
    for it in range(cfg.max_iters):
        params = params_from_values(material, ranges.denormalize_values(z))
        loss, payload = loss_position(params, observed, law, sim, mass,
                                      volume0, cfg.observe_len, ranges)
        losses.append(loss)
        zs.append(z.copy())
        values = param_values(params)
        log(f"iter={it} loss={loss:.8g} params={','.join('%.8g' % v for v in values)}")
        if loss < best_loss:
            best_loss = loss
            best_z = z.copy()
        if payload is None:
            diverged += 1
            # back off toward the box center and keep trying
            z = 0.5 * z
            continue
        tape, seed = payload
        grad = tape.backward(seed).d_params
        if cfg.optimizer is Optimizer.ADAM:
            m_acc = 0.9 * m_acc + 0.1 * grad
            v_acc = 0.999 * v_acc + 0.001 * grad * grad
            t = it + 1
            step = cfg.lr * (m_acc / (1 - 0.9 ** t)) / (
                np.sqrt(v_acc / (1 - 0.999 ** t)) + 1e-8)
        else:
            step = cfg.lr * grad
        z = np.clip(z - step, -cfg.bound, cfg.bound)
        if len(losses) >= 2 and abs(losses[-1] - losses[-2]) < cfg.loss_tol:
            break
    return EstimateResult(
        params=params_from_values(material, ranges.denormalize_values(best_z)),
        loss=best_loss, losses=losses, param_history=zs, diverged_iters=diverged)


def estimate_params(law, observed: Trajectory, init: PhysParams,
                    sim: SimConfig, mass, volume0,
                    cfg: EstimateConfig = EstimateConfig(),
                    ranges: Optional[ParamRanges] = None,
                    log: Optional[Callable[[str], None]] = None) -> EstimateResult:
    """Estimate physical parameters against an observed motion sequence.

    The model weights are frozen (asserted by hashing); optimization runs
    in normalized space with box projection, optionally from several
    jittered starts, and the best-loss iterate wins.
    """
    if log is None:
        log = lambda line: print(line, file=sys.stdout)
    material = init.material
    if isinstance(law, NeuralLaw):
        if law.material is not material:
            raise InvalidParam("law material does not match the initial guess")
        ranges = law.ranges
    elif ranges is None:
        ranges = DEFAULT_RANGES[material]
    digest_before = weights_digest(law)
    with np.errstate(all="ignore"):
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # inits may sit outside the range
            z0 = normalize_params(init, ranges)
    rng = np.random.default_rng(cfg.seed)
    results = []
    for start in range(cfg.n_starts):
        z_init = z0 if start == 0 else np.clip(
            z0 + 0.3 * rng.normal(size=z0.shape), -cfg.bound, cfg.bound)
        results.append(_single_start(law, observed, sim, mass, volume0,
                                     z_init, ranges, material, cfg, log))
    assert weights_digest(law) == digest_before, "network weights must stay frozen"
    best = min(range(len(results)), key=lambda i: results[i].loss)
    result = results[best]
    if len(result.losses) > 1 and result.loss >= result.losses[0] \
            and result.loss > 1e-12:
        raise NoProgress("estimation failed to improve the loss over max_iters")
    return result
