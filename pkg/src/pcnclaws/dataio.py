"""Dataset generation and bit-exact serialization.

Trajectory file (little-endian, magic "PCNC"):

    magic[4] version:u32 dim:u8 particles:u32 frames:u32 frame_dt:f64 flags:u8
    per frame: positions f32[M,D]; velocities f32[M,D] if flags&1;
               deformation gradients f64[M,D,D] if flags&2
    crc32:u32 over everything above

Checkpoint file (magic "PCNW"):

    magic[4] version:u32 material:u8 dim:u8 stress_scale:f64
    elastic net, plastic net: 3 x (out:u32 in:u32 W:f64[out,in] b:f64[out])
    ranges: count:u32, then per parameter name_len:u8 name lo:f64 hi:f64 log:u8
    crc32:u32

Scenario/config files are UTF-8 JSON (SI units, angles in degrees); the
manifest lists relative paths, parameters, and train/test split labels.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import (BadMagic, ChecksumMismatch, InvalidParam, MaterialMismatch,
                     TruncatedFile, VersionMismatch)
from .laws import AnalyticLaw
from .materials import Material, PhysParams
from .mpm import (Boundary, ParticleState, SimConfig, Trajectory,
                  default_sim_config, simulate)
from .nn import Mlp, NeuralLaw, ParamRanges

TRAJ_MAGIC = b"PCNC"
CKPT_MAGIC = b"PCNW"
FORMAT_VERSION = 1
_MATERIAL_TAG = {Material.ELASTICITY: 0, Material.SAND: 1, Material.PLASTICINE: 2}
_TAG_MATERIAL = {v: k for k, v in _MATERIAL_TAG.items()}


# ---------------------------------------------------------------------------
# geometry

@dataclass(frozen=True)
class Cube:
    side: float


@dataclass(frozen=True)
class Sphere:
    radius: float


@dataclass(frozen=True)
class MeshFile:
    path: str


GeometryT = Union[Cube, Sphere, MeshFile]


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulated scene: object, material parameters, and run length."""

    name: str
    material: Material
    params: PhysParams
    geometry: GeometryT
    particle_count: int
    center: tuple
    velocity: tuple
    sim: SimConfig
    n_frames: int
    split: str = "train"

    def __post_init__(self):
        if self.particle_count < 8:
            raise InvalidParam("particle_count must be >= 8")
        if self.split not in ("train", "test"):
            raise InvalidParam("split must be 'train' or 'test'")
        if len(self.center) != self.sim.dim or len(self.velocity) != self.sim.dim:
            raise InvalidParam("center/velocity dimensionality mismatch")
        margin = 2.0 * self.sim.dx
        half = _half_extent(self.geometry)
        for c in self.center:
            if c - half < margin or c + half > self.sim.domain_size - margin:
                raise InvalidParam("geometry does not fit inside the domain margin")


def _half_extent(geometry: GeometryT) -> float:
    if isinstance(geometry, Cube):
        return geometry.side / 2.0
    if isinstance(geometry, Sphere):
        return geometry.radius
    return 0.0  # mesh bounds are validated by the margin check in p2g


def _lattice(n: int, dim: int) -> np.ndarray:
    """Cell-centered unit lattice, n points per axis, lexicographic order."""
    axes = [(np.arange(n) + 0.5) / n for _ in range(dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def sample_geometry(geometry: GeometryT, particle_count: int, center,
                    dim: int) -> tuple[np.ndarray, float]:
    """Particle positions plus the per-particle initial volume.

    Cubes use a regular lattice of ceil(M^(1/D)) points per axis trimmed to
    exactly M points; spheres trim the same lattice to the interior.
    """
    center = np.asarray(center, dtype=np.float64)
    if isinstance(geometry, Cube):
        n = math.ceil(particle_count ** (1.0 / dim))
        pts = _lattice(n, dim)[:particle_count]
        pts = (pts - 0.5) * geometry.side + center
        volume = geometry.side ** dim / particle_count
        return pts, volume
    if isinstance(geometry, Sphere):
        n = math.ceil(particle_count ** (1.0 / dim))
        while True:
            pts = (_lattice(n, dim) - 0.5) * 2.0 * geometry.radius
            inside = np.linalg.norm(pts, axis=1) <= geometry.radius
            if inside.sum() >= particle_count:
                break
            n += 1
        pts = pts[inside][:particle_count] + center
        full = (math.pi * geometry.radius ** 2 if dim == 2
                else 4.0 / 3.0 * math.pi * geometry.radius ** 3)
        volume = full / particle_count
        return pts, volume
    verts = np.loadtxt(geometry.path, ndmin=2)
    if verts.shape[1] != dim:
        raise InvalidParam(f"mesh file has {verts.shape[1]} columns, expected {dim}")
    if verts.shape[0] < particle_count:
        raise InvalidParam("mesh file has fewer vertices than particle_count")
    pts = verts[:particle_count] + center
    # mesh volume is unknown; assume the conventional half-cell per particle
    volume = None
    return pts, volume


def build_initial_state(spec: ScenarioSpec) -> ParticleState:
    pts, volume = sample_geometry(spec.geometry, spec.particle_count,
                                  spec.center, spec.sim.dim)
    if volume is None:
        volume = (spec.sim.dx / 2.0) ** spec.sim.dim
    m = spec.particle_count
    d = spec.sim.dim
    vol = np.full(m, volume)
    return ParticleState(
        x=pts.astype(np.float64),
        v=np.tile(np.asarray(spec.velocity, dtype=np.float64), (m, 1)),
        F_e=np.tile(np.eye(d), (m, 1, 1)),
        C=np.zeros((m, d, d)),
        mass=spec.sim.density * vol,
        volume0=vol,
    )


def drop_scene_spec(material: Material, params: PhysParams, *, dim: int = 2,
                    particle_count: int = 256, n_frames: int = 200,
                    name: str = "scene", split: str = "train",
                    boundary: Optional[Boundary] = None,
                    side: Optional[float] = None,
                    gap: float = 0.04, speed: float = 0.8) -> ScenarioSpec:
    """Desk-scale drop scene: a cube released just above the floor band.

    2D runs use a 32-cell grid with dt = 2e-4 (10 substeps per 2 ms frame);
    3D keeps the 32^3 grid with dt = 1e-4.  Both satisfy the CFL guard for
    the stiffest supported material.

    The sticky floor is the default: it keeps ground-truth rest states (and
    untrained-network rollouts over them) safely inside the domain margin.
    """
    if boundary is None:
        boundary = Boundary.STICKY_FLOOR_SLIP_WALLS
    if dim == 2:
        sim = SimConfig(dim=2, grid_resolution=32, dt=2e-4, frame_stride=10,
                        gravity=(0.0, -9.8), boundary=boundary)
    else:
        sim = SimConfig(dim=3, grid_resolution=32, dt=1e-4, frame_stride=20,
                        gravity=(0.0, 0.0, -9.8), boundary=boundary)
    if side is None:
        side = 0.25 if dim == 2 else 0.2
    floor_top = (2 + 1) * sim.dx  # first node row free of wall conditions
    center = [0.5] * dim
    center[-1] = floor_top + gap + side / 2.0
    velocity = [0.0] * dim
    velocity[-1] = -speed
    return ScenarioSpec(name=name, material=material, params=params,
                        geometry=Cube(side), particle_count=particle_count,
                        center=tuple(center), velocity=tuple(velocity),
                        sim=sim, n_frames=n_frames, split=split)


# ---------------------------------------------------------------------------
# trajectory serialization

def write_trajectory(traj: Trajectory, path) -> None:
    flags = (1 if traj.velocities is not None else 0) | \
            (2 if traj.deformation_gradients is not None else 0)
    t, m, d = traj.positions.shape
    head = TRAJ_MAGIC + struct.pack("<IBIIdB", FORMAT_VERSION, d, m, t,
                                    float(traj.frame_dt), flags)
    chunks = [head]
    for i in range(t):
        chunks.append(np.ascontiguousarray(traj.positions[i], dtype="<f4").tobytes())
        if traj.velocities is not None:
            chunks.append(np.ascontiguousarray(traj.velocities[i], dtype="<f4").tobytes())
        if traj.deformation_gradients is not None:
            chunks.append(np.ascontiguousarray(traj.deformation_gradients[i], dtype="<f8").tobytes())
    body = b"".join(chunks)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_trajectory(path) -> Trajectory:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != TRAJ_MAGIC:
        raise BadMagic(f"{path}: not a trajectory file")
    header_size = 4 + struct.calcsize("<IBIIdB")
    if len(raw) < header_size:
        raise TruncatedFile(f"{path}: truncated header")
    version, d, m, t, frame_dt, flags = struct.unpack_from("<IBIIdB", raw, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version} unsupported")
    frame_bytes = m * d * 4
    if flags & 1:
        frame_bytes += m * d * 4
    if flags & 2:
        frame_bytes += m * d * d * 8
    expected = header_size + t * frame_bytes + 4
    if len(raw) < expected:
        done = (len(raw) - header_size) // frame_bytes if frame_bytes else 0
        raise TruncatedFile(f"{path}: truncated at frame {done}", frame=done)
    body, crc_bytes = raw[:expected - 4], raw[expected - 4:expected]
    if zlib.crc32(body) != struct.unpack("<I", crc_bytes)[0]:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")
    positions = np.empty((t, m, d), dtype=np.float32)
    velocities = np.empty((t, m, d), dtype=np.float32) if flags & 1 else None
    gradients = np.empty((t, m, d, d)) if flags & 2 else None
    off = header_size
    for i in range(t):
        positions[i] = np.frombuffer(raw, "<f4", m * d, off).reshape(m, d)
        off += m * d * 4
        if flags & 1:
            velocities[i] = np.frombuffer(raw, "<f4", m * d, off).reshape(m, d)
            off += m * d * 4
        if flags & 2:
            gradients[i] = np.frombuffer(raw, "<f8", m * d * d, off).reshape(m, d, d)
            off += m * d * d * 8
    return Trajectory(positions=positions, frame_dt=frame_dt,
                      velocities=velocities, deformation_gradients=gradients)


def trajectories_equal(a: Trajectory, b: Trajectory) -> bool:
    """Bitwise equality of the file-borne fields."""
    if a.positions.shape != b.positions.shape or a.frame_dt != b.frame_dt:
        return False
    if not np.array_equal(a.positions, b.positions):
        return False
    for fa, fb in ((a.velocities, b.velocities),
                   (a.deformation_gradients, b.deformation_gradients)):
        if (fa is None) != (fb is None):
            return False
        if fa is not None and not np.array_equal(fa, fb):
            return False
    return True


# ---------------------------------------------------------------------------
# checkpoint serialization

def _pack_mlp(net: Mlp) -> bytes:
    parts = [struct.pack("<I", len(net.weights))]
    for w, b in zip(net.weights, net.biases):
        parts.append(struct.pack("<II", w.shape[0], w.shape[1]))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def _unpack_mlp(raw: bytes, off: int):
    (n_layers,) = struct.unpack_from("<I", raw, off)
    off += 4
    weights, biases = [], []
    for _ in range(n_layers):
        rows, cols = struct.unpack_from("<II", raw, off)
        off += 8
        w = np.frombuffer(raw, "<f8", rows * cols, off).reshape(rows, cols).copy()
        off += rows * cols * 8
        b = np.frombuffer(raw, "<f8", rows, off).copy()
        off += rows * 8
        weights.append(w)
        biases.append(b)
    return Mlp(weights, biases), off


def write_checkpoint(law: NeuralLaw, dim: int, path) -> None:
    head = CKPT_MAGIC + struct.pack("<IBBd", FORMAT_VERSION,
                                    _MATERIAL_TAG[law.material], dim,
                                    float(law.stress_scale))
    parts = [head, _pack_mlp(law.els), _pack_mlp(law.pls),
             struct.pack("<I", law.ranges.count)]
    for name, lo, hi, logs in zip(law.ranges.names, law.ranges.lo,
                                  law.ranges.hi, law.ranges.log_scale):
        enc = name.encode()
        parts.append(struct.pack("<B", len(enc)) + enc)
        parts.append(struct.pack("<ddB", lo, hi, 1 if logs else 0))
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_checkpoint(path, expected_material: Optional[Material] = None):
    """Load a trained law; returns (NeuralLaw, dim)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CKPT_MAGIC:
        raise BadMagic(f"{path}: not a checkpoint file")
    if len(raw) < 4 + struct.calcsize("<IBBd") + 4:
        raise TruncatedFile(f"{path}: truncated header")
    body, crc_bytes = raw[:-4], raw[-4:]
    if zlib.crc32(body) != struct.unpack("<I", crc_bytes)[0]:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")
    version, mat_tag, dim, stress_scale = struct.unpack_from("<IBBd", raw, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version} unsupported "
                              "(parameter ranges are mandatory from v1)")
    off = 4 + struct.calcsize("<IBBd")
    try:
        els, off = _unpack_mlp(raw, off)
        pls, off = _unpack_mlp(raw, off)
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        if count == 0:
            raise VersionMismatch(f"{path}: missing parameter ranges")
        names, lo, hi, logs = [], [], [], []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<B", raw, off)
            off += 1
            names.append(raw[off:off + nlen].decode())
            off += nlen
            l, h, flag = struct.unpack_from("<ddB", raw, off)
            off += 17
            lo.append(l)
            hi.append(h)
            logs.append(bool(flag))
    except struct.error as exc:
        raise TruncatedFile(f"{path}: truncated body") from exc
    material = _TAG_MATERIAL[mat_tag]
    if expected_material is not None and material is not expected_material:
        raise MaterialMismatch(
            f"{path}: checkpoint is for {material.value}, task needs {expected_material.value}")
    ranges = ParamRanges(names=tuple(names), lo=tuple(lo), hi=tuple(hi),
                         log_scale=tuple(logs))
    law = NeuralLaw(material=material, els=els, pls=pls, ranges=ranges,
                    stress_scale=stress_scale)
    return law, dim


# ---------------------------------------------------------------------------
# dataset generation

def _simulate_spec(spec: ScenarioSpec) -> Trajectory:
    law = AnalyticLaw(spec.material)
    state = build_initial_state(spec)
    return simulate(state, law, spec.params, spec.sim, spec.n_frames)


def _worker(args):
    spec, out_path = args
    write_trajectory(_simulate_spec(spec), out_path)
    return out_path


def _param_key(params: PhysParams) -> tuple:
    return (params.youngs_modulus, params.poisson_ratio,
            params.yield_stress, params.friction_angle)


def generate_dataset(specs: Sequence[ScenarioSpec], out_dir,
                     threads: int = 1) -> dict:
    """Simulate every scenario with its analytic law; write files + manifest.

    The cross-scenario split is validated: a parameter tuple may appear in
    the train list or the test list, never both.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_keys = {_param_key(s.params) for s in specs if s.split == "train"}
    test_keys = {_param_key(s.params) for s in specs if s.split == "test"}
    overlap = train_keys & test_keys
    if overlap:
        raise InvalidParam(f"parameter tuples appear in both splits: {sorted(overlap)}")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise InvalidParam("scenario names must be unique")

    jobs = [(spec, out_dir / f"{spec.name}.pcnc") for spec in specs]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            list(pool.map(_worker, jobs))
    else:
        for job in jobs:
            _worker(job)

    manifest = {"version": FORMAT_VERSION, "scenarios": []}
    for spec in specs:
        entry = {
            "file": f"{spec.name}.pcnc",
            "name": spec.name,
            "material": spec.material.value,
            "split": spec.split,
            "params": _params_dict(spec.params),
            "n_frames": spec.n_frames,
            "particle_count": spec.particle_count,
            "frame_dt": spec.sim.frame_dt,
            "dim": spec.sim.dim,
            "scenario": scenario_to_dict(spec),
        }
        manifest["scenarios"].append(entry)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _params_dict(params: PhysParams) -> dict:
    out = {"E": params.youngs_modulus, "nu": params.poisson_ratio}
    if params.yield_stress is not None:
        out["tau_y"] = params.yield_stress
    if params.friction_angle is not None:
        out["theta_f"] = params.friction_angle
    return out


def params_from_dict(material: Material, d: dict) -> PhysParams:
    return PhysParams(material=material,
                      youngs_modulus=float(d["E"]),
                      poisson_ratio=float(d["nu"]),
                      yield_stress=float(d["tau_y"]) if "tau_y" in d else None,
                      friction_angle=float(d["theta_f"]) if "theta_f" in d else None)


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    """Inverse of scenario_from_dict (the JSON schema for config files)."""
    if isinstance(spec.geometry, Cube):
        geo = {"cube": spec.geometry.side}
    elif isinstance(spec.geometry, Sphere):
        geo = {"sphere": spec.geometry.radius}
    else:
        geo = {"mesh": spec.geometry.path}
    return {
        "name": spec.name,
        "material": spec.material.value,
        "params": _params_dict(spec.params),
        "geometry": geo,
        "particles": spec.particle_count,
        "center": list(spec.center),
        "velocity": list(spec.velocity),
        "n_frames": spec.n_frames,
        "split": spec.split,
        "sim": {
            "dim": spec.sim.dim,
            "domain_size": spec.sim.domain_size,
            "grid_resolution": spec.sim.grid_resolution,
            "dt": spec.sim.dt,
            "frame_stride": spec.sim.frame_stride,
            "gravity": list(spec.sim.gravity),
            "boundary": spec.sim.boundary.value,
            "density": spec.sim.density,
            "max_youngs_modulus": spec.sim.max_youngs_modulus,
            "max_poisson_ratio": spec.sim.max_poisson_ratio,
        },
    }


def scenario_from_dict(d: dict) -> ScenarioSpec:
    """Parse one scenario from the JSON schema used by config files."""
    material = Material(d["material"])
    params = params_from_dict(material, d["params"])
    geo = d["geometry"]
    if "cube" in geo:
        geometry: GeometryT = Cube(float(geo["cube"]))
    elif "sphere" in geo:
        geometry = Sphere(float(geo["sphere"]))
    elif "mesh" in geo:
        geometry = MeshFile(str(geo["mesh"]))
    else:
        raise InvalidParam("geometry must specify one of cube/sphere/mesh")
    sim_kwargs = dict(d.get("sim", {}))
    dim = int(sim_kwargs.pop("dim", len(d["center"])))
    if "boundary" in sim_kwargs:
        sim_kwargs["boundary"] = Boundary(sim_kwargs["boundary"])
    if "gravity" in sim_kwargs:
        sim_kwargs["gravity"] = tuple(sim_kwargs["gravity"])
    sim = default_sim_config(dim, **sim_kwargs)
    return ScenarioSpec(
        name=str(d["name"]), material=material, params=params,
        geometry=geometry, particle_count=int(d["particles"]),
        center=tuple(float(c) for c in d["center"]),
        velocity=tuple(float(v) for v in d.get("velocity", [0.0] * dim)),
        sim=sim, n_frames=int(d["n_frames"]), split=d.get("split", "train"))


def load_manifest(path):
    """Read a manifest and its trajectories; returns list of dataset entries.

    Each entry carries the trajectory (with params/material restored) plus
    the reconstructed ScenarioSpec, which is everything training and
    evaluation need to rebuild states.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    entries = []
    for sc in manifest["scenarios"]:
        traj = read_trajectory(path.parent / sc["file"])
        material = Material(sc["material"])
        traj.material = material
        traj.params = params_from_dict(material, sc["params"])
        spec = scenario_from_dict(sc["scenario"])
        entries.append({"trajectory": traj, "split": sc["split"],
                        "name": sc["name"], "spec": spec})
    return entries
