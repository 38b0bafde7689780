"""Standalone reader for the "PCNC" binary trajectory format.

Layout (little-endian):

    magic[4]="PCNC" version:u32 dim:u8 particles:u32 frames:u32
    frame_dt:f64 flags:u8
    per frame: positions f32[M,D]; velocities f32[M,D] if flags&1;
               deformation gradients f64[M,D,D] if flags&2
    crc32:u32 over everything above
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"PCNC"
_HEADER = "<IBIIdB"


class BadFile(Exception):
    """The input is not a readable trajectory file."""


@dataclass
class TrajectoryData:
    positions: np.ndarray                   # (T, M, D) float32
    frame_dt: float
    velocities: Optional[np.ndarray] = None

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def particle_count(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]


def read_trajectory(path) -> TrajectoryData:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadFile(f"{path}: bad magic")
    header_size = 4 + struct.calcsize(_HEADER)
    if len(raw) < header_size + 4:
        raise BadFile(f"{path}: truncated header")
    version, d, m, t, frame_dt, flags = struct.unpack_from(_HEADER, raw, 4)
    if version != 1:
        raise BadFile(f"{path}: unsupported format version {version}")
    frame_bytes = m * d * 4
    if flags & 1:
        frame_bytes += m * d * 4
    if flags & 2:
        frame_bytes += m * d * d * 8
    expected = header_size + t * frame_bytes + 4
    if len(raw) < expected:
        raise BadFile(f"{path}: truncated body")
    if zlib.crc32(raw[:expected - 4]) != struct.unpack_from("<I", raw, expected - 4)[0]:
        raise BadFile(f"{path}: checksum mismatch")
    positions = np.empty((t, m, d), dtype=np.float32)
    velocities = np.empty((t, m, d), dtype=np.float32) if flags & 1 else None
    off = header_size
    for i in range(t):
        positions[i] = np.frombuffer(raw, "<f4", m * d, off).reshape(m, d)
        off += m * d * 4
        if flags & 1:
            velocities[i] = np.frombuffer(raw, "<f4", m * d, off).reshape(m, d)
            off += m * d * 4
        if flags & 2:
            off += m * d * d * 8  # deformation gradients are not rendered
    return TrajectoryData(positions=positions, frame_dt=frame_dt,
                          velocities=velocities)
