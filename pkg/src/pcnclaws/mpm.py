"""MLS-MPM engine: APIC transfers on quadratic B-splines, explicit stepping.

State advances one substep as

    stress -> p2g -> grid update (gravity + walls) -> g2p -> plastic project

p2g scatters in a canonical order (particles sorted by position/velocity/mass
bit patterns, then offset-major sequential accumulation), so grids come out
bit-identical under any particle permutation; that is the deterministic mode
every test relies on.
"""

from __future__ import annotations

import enum
import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import Diverged, InvalidParam, OutOfDomain, PcnclawsError
from .materials import Material, PhysParams, lame_from_modulus

# Nodes lighter than this carry zero velocity.
MASS_EPS = 1e-12
# Blow-up sentinel on |x| and |v| in SI units.
DIVERGE_LIMIT = 1e6
# Grid nodes within this many cells of a wall get boundary conditions.
BC_CELLS = 2


class Boundary(enum.Enum):
    SLIP_WALLS = "slip"
    STICKY_FLOOR_SLIP_WALLS = "sticky"


@dataclass
class ParticleState:
    """Struct-of-arrays particle state: positions (M, D), velocities (M, D),
    elastic deformation gradients (M, D, D), APIC affine matrices (M, D, D),
    masses (M,), initial volumes (M,)."""

    x: np.ndarray
    v: np.ndarray
    F_e: np.ndarray
    C: np.ndarray
    mass: np.ndarray
    volume0: np.ndarray

    @property
    def count(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def copy(self) -> "ParticleState":
        return ParticleState(self.x.copy(), self.v.copy(), self.F_e.copy(),
                             self.C.copy(), self.mass.copy(), self.volume0.copy())


@dataclass
class Grid:
    """Background grid: per-node momentum/mass, velocity after grid_step."""

    resolution: int
    dx: float
    dim: int
    momentum: np.ndarray = field(default=None)
    mass: np.ndarray = field(default=None)
    velocity: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.resolution ** self.dim
        if self.momentum is None:
            self.momentum = np.zeros((n, self.dim))
        if self.mass is None:
            self.mass = np.zeros(n)

    @property
    def node_count(self) -> int:
        return self.resolution ** self.dim


@dataclass(frozen=True)
class SimConfig:
    """Scene-independent integration settings; CFL-checked at construction.

    The time step must satisfy dt <= 0.5 dx / c with the pressure wave speed
    c = sqrt((lam + 2 mu) / rho) evaluated at the stiffest material this
    config will ever integrate (max_youngs_modulus, max_poisson_ratio).
    """

    dim: int = 3
    domain_size: float = 1.0
    grid_resolution: int = 32
    dt: float = 1e-4
    frame_stride: int = 20
    gravity: tuple = (0.0, 0.0, -9.8)
    boundary: Boundary = Boundary.SLIP_WALLS
    density: float = 1000.0
    max_youngs_modulus: float = 6e5
    max_poisson_ratio: float = 0.4

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise InvalidParam(f"dim must be 2 or 3, got {self.dim}")
        if len(self.gravity) != self.dim:
            raise InvalidParam("gravity must have one component per axis")
        if self.grid_resolution < 2 * BC_CELLS + 4:
            raise InvalidParam("grid too coarse for boundary bands")
        if self.dt <= 0 or self.frame_stride < 1:
            raise InvalidParam("dt must be positive and frame_stride >= 1")
        mu, lam = lame_from_modulus(self.max_youngs_modulus, self.max_poisson_ratio)
        wave_speed = math.sqrt((lam + 2.0 * mu) / self.density)
        dt_max = 0.5 * self.dx / wave_speed
        if self.dt > dt_max:
            raise InvalidParam(
                f"dt={self.dt:g} violates the CFL bound {dt_max:g} "
                f"(dx={self.dx:g}, wave speed {wave_speed:.1f} m/s)")

    @property
    def dx(self) -> float:
        return self.domain_size / self.grid_resolution

    @property
    def frame_dt(self) -> float:
        return self.dt * self.frame_stride


def default_sim_config(dim: int, **overrides) -> SimConfig:
    """Spec defaults: unit domain, 32^3 grid in 3D / 64^2 in 2D, 2 ms frames."""
    base = dict(dim=dim, grid_resolution=32 if dim == 3 else 64,
                dt=1e-4, frame_stride=20,
                gravity=(0.0, 0.0, -9.8) if dim == 3 else (0.0, -9.8))
    base.update(overrides)
    return SimConfig(**base)


@dataclass
class Trajectory:
    """Recorded rollout: frame 0 is always the initial state."""

    positions: np.ndarray                     # (T+1, M, D) float32
    frame_dt: float
    velocities: Optional[np.ndarray] = None   # (T+1, M, D) float32
    deformation_gradients: Optional[np.ndarray] = None  # (T+1, M, D, D) float64
    params: Optional[PhysParams] = None
    material: Optional[Material] = None

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def particle_count(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]


# ---------------------------------------------------------------------------
# quadratic B-spline transfer helpers

def spline_coords(x: np.ndarray, dx: float):
    """Base node index and fractional offset (in [0.5, 1.5]) per particle."""
    xi = x / dx
    base = np.floor(xi - 0.5).astype(np.int64)
    fx = xi - base
    return base, fx


def spline_weights(fx: np.ndarray) -> np.ndarray:
    """Per-axis quadratic weights, shape (3, M, D)."""
    return np.stack([
        0.5 * (1.5 - fx) ** 2,
        0.75 - (fx - 1.0) ** 2,
        0.5 * (fx - 0.5) ** 2,
    ])


def spline_dweights(fx: np.ndarray) -> np.ndarray:
    """d(weight)/d(fx) per axis, shape (3, M, D)."""
    return np.stack([fx - 1.5, -2.0 * (fx - 1.0), fx - 0.5])


def _offsets(dim):
    return tuple(itertools.product(range(3), repeat=dim))


def _check_margin(x, dx, resolution):
    # Quadratic splines need 0.5 cells low / 1.5 cells high of clearance;
    # one full cell low is the contracted margin.
    if np.any(x < dx) or np.any(x > (resolution - 1.5) * dx):
        raise OutOfDomain("particle outside the one-cell domain margin")


def canonical_particle_order(particles: ParticleState) -> np.ndarray:
    """Permutation-invariant particle ordering for deterministic scatter.

    Sorting by position bits (velocity and mass bits break ties) fixes the
    accumulation order regardless of how the caller indexed the particles;
    two particles would have to coincide bit-exactly in all three to remain
    ambiguous, in which case their contributions are interchangeable anyway.
    """
    keys = [particles.mass.view(np.int64)]
    for d in range(particles.dim - 1, -1, -1):
        keys.append(np.ascontiguousarray(particles.v[:, d]).view(np.int64))
    for d in range(particles.dim - 1, -1, -1):
        keys.append(np.ascontiguousarray(particles.x[:, d]).view(np.int64))
    return np.lexsort(tuple(keys))


def _offset_tables(base, fx, w, dx, res, dim):
    """Per-offset weights, kernel positions, and node indices, vectorized.

    Returns (w_all (O, M), dpos_all (O, M, D), idx_all (O, M)) with the
    offsets enumerated in the fixed lexicographic order.
    """
    offs = np.asarray(_offsets(dim))
    w_all = w[offs[:, 0], :, 0]
    for d in range(1, dim):
        w_all = w_all * w[offs[:, d], :, d]
    dpos_all = (offs[:, None, :] - fx[None, :, :]) * dx
    idx = base[None, :, 0] + offs[:, 0, None]
    for d in range(1, dim):
        idx = idx * res + (base[None, :, d] + offs[:, d, None])
    return w_all, dpos_all, idx


def _p2g_core(x, v, C, F_e, stresses, mass_p, volume0, dx, res, dim, dt, order):
    """Scatter with a fixed canonical particle order; arrays pre-sorted by
    the caller make no difference because `order` re-sorts here."""
    x, v, C = x[order], v[order], C[order]
    m = mass_p[order]
    _check_margin(x, dx, res)
    base, fx = spline_coords(x, dx)
    w = spline_weights(fx)
    beta = (-dt * 4.0 / dx ** 2) * volume0[order]
    affine = m[:, None, None] * C + beta[:, None, None] * (
        stresses[order] @ np.swapaxes(F_e[order], -1, -2))
    w_all, dpos_all, idx_all = _offset_tables(base, fx, w, dx, res, dim)
    mass_all = w_all * m
    mom_all = w_all[:, :, None] * (m[:, None] * v +
                                   np.einsum("mij,omj->omi", affine, dpos_all))
    # bincount accumulates sequentially over offset-major, canonically
    # ordered entries: bit-identical under particle permutation.
    flat_idx = idx_all.ravel()
    n = res ** dim
    mass = np.bincount(flat_idx, weights=mass_all.ravel(), minlength=n)
    momentum = np.empty((n, dim))
    for d in range(dim):
        momentum[:, d] = np.bincount(flat_idx, weights=mom_all[:, :, d].ravel(), minlength=n)
    return momentum, mass


def p2g(particles: ParticleState, grid: Grid, stresses: np.ndarray, dt: float) -> Grid:
    """Particle-to-grid transfer of mass, momentum, and stress impulse."""
    if np.any(grid.mass != 0.0) or np.any(grid.momentum != 0.0):
        raise PcnclawsError("p2g requires a zeroed grid (no leakage between steps)")
    order = canonical_particle_order(particles)
    momentum, mass = _p2g_core(particles.x, particles.v, particles.C,
                               particles.F_e, stresses, particles.mass,
                               particles.volume0, grid.dx, grid.resolution,
                               particles.dim, dt, order)
    return Grid(resolution=grid.resolution, dx=grid.dx, dim=particles.dim,
                momentum=momentum, mass=mass)


@functools.lru_cache(maxsize=8)
def boundary_masks(resolution: int, dim: int, boundary: Boundary):
    """Per-axis node masks for the wall bands (within BC_CELLS of a wall)."""
    idx = np.arange(resolution ** dim)
    coords = []
    rem = idx
    for d in range(dim - 1, -1, -1):
        coords.append(rem % resolution)
        rem = rem // resolution
    coords = coords[::-1]  # coords[d] per node
    low = tuple(c <= BC_CELLS for c in coords)
    high = tuple(c >= resolution - 1 - BC_CELLS for c in coords)
    sticky = None
    if boundary is Boundary.STICKY_FLOOR_SLIP_WALLS:
        sticky = coords[dim - 1] <= BC_CELLS
    return low, high, sticky


def _grid_step_core(momentum, mass, resolution, dim, dt, gravity, boundary):
    """Returns (velocity, active mask, kept mask) for the adjoint."""
    active = mass > MASS_EPS
    vel = np.zeros_like(momentum)
    np.divide(momentum, mass[:, None], out=vel, where=active[:, None])
    vel = vel + dt * np.asarray(gravity) * active[:, None]
    low, high, sticky = boundary_masks(resolution, dim, boundary)
    kept = np.ones_like(vel, dtype=bool)
    for d in range(dim):
        zero_lo = low[d] & (vel[:, d] < 0.0)
        zero_hi = high[d] & (vel[:, d] > 0.0)
        vel[:, d] = np.where(zero_lo | zero_hi, 0.0, vel[:, d])
        kept[:, d] = ~(zero_lo | zero_hi)
    if sticky is not None:
        vel[sticky] = 0.0
        kept[sticky] = False
    return vel, active, kept


def grid_step(grid: Grid, dt: float, gravity, boundary: Boundary) -> Grid:
    """Momentum -> velocity, gravity, and wall conditions on grid nodes."""
    vel, _, _ = _grid_step_core(grid.momentum, grid.mass, grid.resolution,
                                grid.dim, dt, gravity, boundary)
    return Grid(resolution=grid.resolution, dx=grid.dx, dim=grid.dim,
                momentum=grid.momentum, mass=grid.mass, velocity=vel)


def _g2p_core(x, velocity_flat, dx, resolution, dim):
    """Gathered particle velocity and affine matrix from grid velocities."""
    base, fx = spline_coords(x, dx)
    w = spline_weights(fx)
    kappa = 4.0 / dx ** 2
    w_all, dpos_all, idx_all = _offset_tables(base, fx, w, dx, resolution, dim)
    g_v_all = velocity_flat[idx_all]
    v_new = np.einsum("om,omd->md", w_all, g_v_all)
    C_new = kappa * np.einsum("om,omi,omj->mij", w_all, g_v_all, dpos_all)
    return v_new, C_new


def g2p(grid: Grid, particles: ParticleState, dt: float) -> ParticleState:
    """Grid-to-particle gather; returns updated x, v, C and the trial F."""
    v_new, C_new = _g2p_core(particles.x, grid.velocity, grid.dx,
                             grid.resolution, particles.dim)
    x_new = particles.x + dt * v_new
    F_trial = (np.eye(particles.dim) + dt * C_new) @ particles.F_e
    return ParticleState(x=x_new, v=v_new, F_e=F_trial, C=C_new,
                         mass=particles.mass, volume0=particles.volume0)


def step(state: ParticleState, law, params: PhysParams, cfg: SimConfig) -> ParticleState:
    """One explicit substep; identical contract for analytic and neural laws."""
    stresses = law.stress(state.F_e, params)
    grid = Grid(resolution=cfg.grid_resolution, dx=cfg.dx, dim=cfg.dim)
    grid = p2g(state, grid, stresses, cfg.dt)
    grid = grid_step(grid, cfg.dt, cfg.gravity, cfg.boundary)
    new = g2p(grid, state, cfg.dt)
    new.F_e = law.project(new.F_e, params)
    if np.abs(new.x).max() > DIVERGE_LIMIT or np.abs(new.v).max() > DIVERGE_LIMIT:
        raise Diverged("position or velocity exceeded 1e6 SI units")
    return new


def simulate(initial: ParticleState, law, params: PhysParams, cfg: SimConfig,
             n_frames: int, record_velocities: bool = True,
             record_deformation: bool = True) -> Trajectory:
    """Roll out frame_stride * n_frames substeps, recording every frame.

    Frame 0 stores the initial state, so the result has n_frames + 1 frames.
    The APIC affine matrix is zeroed at every recorded frame boundary: a
    recorded frame (x, v, F_e) then fully determines the rest of the rollout,
    which is what makes teacher-forced training windows exactly consistent
    with the generator.
    """
    if n_frames < 1:
        raise InvalidParam("n_frames must be >= 1")
    m, d = initial.count, initial.dim
    positions = np.empty((n_frames + 1, m, d), dtype=np.float32)
    velocities = np.empty((n_frames + 1, m, d), dtype=np.float32) if record_velocities else None
    gradients = np.empty((n_frames + 1, m, d, d)) if record_deformation else None

    def record(i, st):
        positions[i] = st.x.astype(np.float32)
        if velocities is not None:
            velocities[i] = st.v.astype(np.float32)
        if gradients is not None:
            gradients[i] = st.F_e

    state = initial.copy()
    record(0, state)
    for frame in range(1, n_frames + 1):
        state.C = np.zeros_like(state.C)
        try:
            for _ in range(cfg.frame_stride):
                state = step(state, law, params, cfg)
        except Diverged as exc:
            raise Diverged(f"rollout diverged at frame {frame}", frame=frame) from exc
        record(frame, state)
    return Trajectory(positions=positions, frame_dt=cfg.frame_dt,
                      velocities=velocities, deformation_gradients=gradients,
                      params=params, material=getattr(law, "material", None))


def state_from_trajectory_frame(traj: Trajectory, frame: int, cfg: SimConfig,
                                particle_mass: np.ndarray, particle_volume: np.ndarray) -> ParticleState:
    """Rebuild a simulation state from a recorded frame (teacher forcing)."""
    m, d = traj.particle_count, traj.dim
    x = traj.positions[frame].astype(np.float64)
    v = (traj.velocities[frame].astype(np.float64) if traj.velocities is not None
         else np.zeros((m, d)))
    F = (traj.deformation_gradients[frame].copy() if traj.deformation_gradients is not None
         else np.tile(np.eye(d), (m, 1, 1)))
    return ParticleState(x=x, v=v, F_e=F, C=np.zeros((m, d, d)),
                         mass=np.asarray(particle_mass, dtype=np.float64).copy(),
                         volume0=np.asarray(particle_volume, dtype=np.float64).copy())
