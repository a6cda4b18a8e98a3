"""Geometry primitives: rigid transforms, STL ingestion, particle sampling.

Everything is metric (meters) and numpy-backed: points are float64 arrays of
shape (3,) or (N, 3), rotations are (3, 3) row-major matrices.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import StlParseError

ORTHONORMAL_TOL = 1e-9
WELD_TOL = 1e-9


def _check_rotation(R: np.ndarray, tol: float = ORTHONORMAL_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    err = np.abs(R @ R.T - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"rotation is not orthonormal (max |R R^T - I| = {err:.3e})")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError(f"rotation determinant is {np.linalg.det(R):.12f}, expected +1")
    return R


@dataclass(frozen=True)
class RigidTransform:
    """Rotation-then-translation map x -> R @ x + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", _check_rotation(self.R))
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def rotation_z(angle: float, about: np.ndarray | None = None) -> "RigidTransform":
        """Rotation about a vertical axis through `about` (default: origin)."""
        c, s = np.cos(angle), np.sin(angle)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        if about is None:
            return RigidTransform(R, np.zeros(3))
        about = np.asarray(about, dtype=np.float64)
        return RigidTransform(R, about - R @ about)

    @staticmethod
    def translation(t: np.ndarray) -> "RigidTransform":
        return RigidTransform(np.eye(3), t)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply `other` first."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -(self.R.T @ self.t))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.t


@dataclass
class TriangleMesh:
    """Indexed triangle soup; vertices in meters."""

    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) corner coordinates."""
        return self.vertices[self.faces]


@dataclass
class ParticleCloud:
    """Point set discretizing a solid, with its nominal sampling spacing."""

    positions: np.ndarray  # (N, 3) float64
    spacing: float

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")

    def __len__(self) -> int:
        return len(self.positions)

    def transformed(self, pose: RigidTransform) -> "ParticleCloud":
        return ParticleCloud(pose.apply(self.positions), self.spacing)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.positions.min(axis=0), self.positions.max(axis=0)


# ---------------------------------------------------------------------------
# STL ingestion

_BINARY_HEADER = 80
_FACET_RECORD = 50  # 12 float32 + uint16 attribute


def _weld(raw_vertices: np.ndarray, raw_faces: np.ndarray) -> TriangleMesh:
    """Merge vertices closer than WELD_TOL and drop degenerate faces."""
    keys = np.round(raw_vertices / WELD_TOL).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    vertices = raw_vertices[first]
    faces = inverse[raw_faces]

    # drop faces with a repeated vertex or (numerically) zero area
    distinct = (
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 0] != faces[:, 2])
    )
    tri = vertices[faces]
    area2 = np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
    )
    keep = distinct & (area2 > 1e-18)
    return TriangleMesh(vertices, faces[keep])


def _parse_binary_stl(payload: bytes) -> TriangleMesh:
    if len(payload) < _BINARY_HEADER + 4:
        raise StlParseError(
            f"binary STL header truncated: {len(payload)} bytes, need at least 84"
        )
    (count,) = struct.unpack_from("<I", payload, _BINARY_HEADER)
    expected = _BINARY_HEADER + 4 + count * _FACET_RECORD
    if count > 50_000_000:
        raise StlParseError(f"facet count {count} at byte offset 80 is implausible")
    if len(payload) < expected:
        got_facets = (len(payload) - _BINARY_HEADER - 4) // _FACET_RECORD
        raise StlParseError(
            f"truncated binary STL at facet {got_facets + 1} of {count} "
            f"(byte offset {_BINARY_HEADER + 4 + got_facets * _FACET_RECORD}, "
            f"payload is {len(payload)} bytes, expected {expected})"
        )
    data = np.frombuffer(payload[_BINARY_HEADER + 4 : expected], dtype=np.uint8)
    data = data.reshape(count, _FACET_RECORD)
    floats = np.ascontiguousarray(data[:, :48]).view("<f4").reshape(count, 12)
    corners = floats[:, 3:12].astype(np.float64).reshape(count * 3, 3)
    faces = np.arange(count * 3, dtype=np.int64).reshape(count, 3)
    return _weld(corners, faces)


def _parse_ascii_stl(text: str) -> TriangleMesh:
    corners: list[list[float]] = []
    per_facet = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "vertex":
            if len(tokens) != 4:
                raise StlParseError(f"ASCII STL line {lineno}: malformed vertex line")
            try:
                corners.append([float(v) for v in tokens[1:4]])
            except ValueError as e:
                raise StlParseError(f"ASCII STL line {lineno}: {e}") from e
            per_facet += 1
        elif tokens[0] == "endloop":
            if per_facet != 3:
                raise StlParseError(
                    f"ASCII STL line {lineno}: facet has {per_facet} vertices, expected 3"
                )
            per_facet = 0
    if per_facet != 0:
        raise StlParseError("ASCII STL ends inside a facet")
    if not corners:
        raise StlParseError("ASCII STL contains no vertices")
    if len(corners) % 3:
        raise StlParseError(f"ASCII STL vertex count {len(corners)} is not a multiple of 3")
    raw = np.array(corners, dtype=np.float64)
    faces = np.arange(len(raw), dtype=np.int64).reshape(-1, 3)
    return _weld(raw, faces)


def parse_stl(payload: bytes) -> TriangleMesh:
    """Parse a binary or ASCII STL payload into a welded TriangleMesh."""
    if not isinstance(payload, (bytes, bytearray)):
        raise TypeError("parse_stl expects bytes")
    head = bytes(payload[:512]).lstrip()
    if head.startswith(b"solid"):
        # "solid" headers also occur on binary files; trust the record math first.
        if len(payload) >= _BINARY_HEADER + 4:
            (count,) = struct.unpack_from("<I", payload, _BINARY_HEADER)
            if len(payload) == _BINARY_HEADER + 4 + count * _FACET_RECORD and count > 0:
                return _parse_binary_stl(bytes(payload))
        try:
            return _parse_ascii_stl(bytes(payload).decode("ascii", errors="strict"))
        except UnicodeDecodeError as e:
            raise StlParseError(f"STL is neither valid binary nor ASCII: {e}") from e
    return _parse_binary_stl(bytes(payload))


def serialize_stl(mesh: TriangleMesh) -> bytes:
    """Write a binary STL (little-endian, zeroed attribute bytes)."""
    tri = mesh.triangles().astype("<f4")
    count = len(tri)
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]).astype("<f4")
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.where(norm > 0, normals / np.maximum(norm, 1e-30), 0.0).astype("<f4")
    out = bytearray(b"tacsim binary stl".ljust(_BINARY_HEADER, b"\0"))
    out += struct.pack("<I", count)
    record = np.zeros((count, _FACET_RECORD), dtype=np.uint8)
    floats = np.concatenate([normals, tri.reshape(count, 9)], axis=1).astype("<f4")
    record[:, :48] = floats.view(np.uint8).reshape(count, 48)
    out += record.tobytes()
    return bytes(out)


# ---------------------------------------------------------------------------
# Particle sampling


def make_box_cloud(extent: np.ndarray, spacing: float) -> ParticleCloud:
    """Regular lattice of ceil(extent/spacing) per axis, centered in [0, extent]."""
    extent = np.asarray(extent, dtype=np.float64).reshape(3)
    if (extent <= 0).any():
        raise ValueError("box extents must be positive")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    counts = np.ceil(extent / spacing - 1e-12).astype(int)
    axes = [
        extent[a] / 2 + (np.arange(counts[a]) - (counts[a] - 1) / 2) * spacing
        for a in range(3)
    ]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    positions = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    return ParticleCloud(positions, spacing)


def _column_crossings(tri2d, tri_axis, centers2d, centers_axis):
    """Even-odd crossing parity for axis-aligned rays through voxel centers.

    tri2d: (T, 3, 2) triangle corners projected onto the plane normal to the ray
    tri_axis: (T, 3) corner coordinates along the ray axis
    centers2d: (C, 2) column coordinates; centers_axis: (K,) sample coordinates
    Returns (C, K) boolean parity (True = odd = inside).
    """
    a, b, c = tri2d[:, 0], tri2d[:, 1], tri2d[:, 2]
    # signed areas for barycentric point-in-triangle, broadcast (C, T)
    p = centers2d[:, None, :]
    d0 = (b - a)[None]
    d1 = (c - a)[None]
    ap = p - a[None]
    den = d0[..., 0] * d1[..., 1] - d0[..., 1] * d1[..., 0]
    u = (ap[..., 0] * d1[..., 1] - ap[..., 1] * d1[..., 0])
    v = (d0[..., 0] * ap[..., 1] - d0[..., 1] * ap[..., 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        u = u / den
        v = v / den
    contains = (np.abs(den) > 1e-30) & (u >= 0) & (v >= 0) & (u + v <= 1)

    # ray-axis coordinate of the plane intersection for containing pairs
    w = 1.0 - u - v
    z_hit = (
        w * tri_axis[None, :, 0]
        + u * tri_axis[None, :, 1]
        + v * tri_axis[None, :, 2]
    )
    parity = np.zeros((len(centers2d), len(centers_axis)), dtype=bool)
    for ci in range(len(centers2d)):
        hits = z_hit[ci][contains[ci]]
        if hits.size == 0:
            continue
        above = (hits[None, :] > centers_axis[:, None]).sum(axis=1)
        parity[ci] = (above % 2).astype(bool)
    return parity


def voxel_sample_volume(mesh: TriangleMesh, spacing: float) -> ParticleCloud:
    """Sample particles at voxel centers inside a watertight mesh.

    Inside test: even-odd ray crossing along each of the three axes, majority
    vote. Disagreement between the rays on more than 5% of candidate voxels
    triggers a non-watertight warning (the vote still decides).
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if len(mesh.faces) == 0:
        raise ValueError("mesh has no faces")
    lo, hi = mesh.bounds()
    counts = np.maximum(np.ceil((hi - lo) / spacing - 1e-12).astype(int), 1)
    axes = [lo[a] + ((hi[a] - lo[a]) - counts[a] * spacing) / 2
            + (np.arange(counts[a]) + 0.5) * spacing for a in range(3)]
    tri = mesh.triangles()

    votes = np.zeros((counts[0], counts[1], counts[2]), dtype=np.int8)
    for axis in range(3):
        keep = [a for a in range(3) if a != axis]
        c0, c1 = np.meshgrid(axes[keep[0]], axes[keep[1]], indexing="ij")
        centers2d = np.stack([c0.ravel(), c1.ravel()], axis=1)
        parity = _column_crossings(
            tri[:, :, keep], tri[:, :, axis], centers2d, axes[axis]
        )
        parity = parity.reshape(counts[keep[0]], counts[keep[1]], counts[axis])
        votes += np.moveaxis(parity, -1, axis).astype(np.int8)

    inside = votes >= 2
    disagree = (votes == 1) | (votes == 2)
    if disagree.sum() > 0.05 * votes.size:
        warnings.warn(
            f"mesh looks non-watertight: rays disagree on {disagree.sum()} of "
            f"{votes.size} voxels; using majority vote",
            RuntimeWarning,
        )
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    positions = np.stack([gx[inside], gy[inside], gz[inside]], axis=1)
    return ParticleCloud(positions, spacing)
