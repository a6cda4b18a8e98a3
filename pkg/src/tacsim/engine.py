"""MLS-MPM engine: scene state, the four transfer phases, and step().

One step is clear -> P2G (mass/momentum scatter with APIC and elastic terms)
-> grid update (velocity, gravity, boundary conditions) -> G2P (velocity and
affine-velocity gather) -> deformation update + advection. The rigid indenter
is kinematic: its particles carry the prescribed trajectory velocity into P2G
and grid nodes within one dx of it are forced to the rigid velocity field.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels as K
from .errors import CflError, InvertedElementError, OutOfDomainError
from .geometry import ParticleCloud, RigidTransform

ROLE_ELASTOMER = 0
ROLE_RIGID = 1

MASS_EPSILON = 1e-12


@dataclass
class SimConfig:
    """Material and integration parameters (SI units)."""

    dt: float = 1e-4
    youngs_modulus: float = 1.45e5
    poisson_ratio: float = 0.45
    density: float = 1070.0
    gravity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    substeps_per_frame: int = 50
    mass_epsilon: float = MASS_EPSILON

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not (0.0 <= self.poisson_ratio < 0.5):
            raise ValueError("poisson_ratio must be in [0, 0.5)")
        if self.youngs_modulus <= 0:
            raise ValueError("youngs_modulus must be positive")
        if self.density <= 0:
            raise ValueError("density must be positive")
        if self.substeps_per_frame < 1:
            raise ValueError("substeps_per_frame must be >= 1")

    @property
    def mu(self) -> float:
        return self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def lam(self) -> float:
        nu = self.poisson_ratio
        return self.youngs_modulus * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))


@dataclass
class SimGrid:
    """Dense background grid; nodes at origin + index * dx."""

    dims: np.ndarray  # (3,) int
    dx: float
    origin: np.ndarray  # (3,)
    mass: np.ndarray = field(init=False)
    momentum: np.ndarray = field(init=False)
    velocity: np.ndarray = field(init=False)
    tag: np.ndarray = field(init=False)
    base_tag: np.ndarray = field(init=False)

    def __post_init__(self):
        self.dims = np.asarray(self.dims, dtype=np.int64).reshape(3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if (self.dims < 3).any():
            raise ValueError("grid needs at least 3 nodes per axis")
        if self.dx <= 0:
            raise ValueError("dx must be positive")
        nx, ny, nz = self.dims
        self.mass = np.zeros((nx, ny, nz))
        self.momentum = np.zeros((nx, ny, nz, 3))
        self.velocity = np.zeros((nx, ny, nz, 3))
        self.tag = np.zeros((nx, ny, nz), dtype=np.uint8)
        self.base_tag = np.zeros((nx, ny, nz), dtype=np.uint8)

    def clear(self):
        self.mass.fill(0.0)
        self.momentum.fill(0.0)

    def node_positions(self) -> np.ndarray:
        """(nx, ny, nz, 3) world coordinates of every node."""
        ax = [self.origin[a] + np.arange(self.dims[a]) * self.dx for a in range(3)]
        gx, gy, gz = np.meshgrid(*ax, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def total_mass(self) -> float:
        return float(self.mass.sum())

    def total_momentum(self) -> np.ndarray:
        return self.momentum.sum(axis=(0, 1, 2))


def fit_grid(lo: np.ndarray, hi: np.ndarray, dx: float, margin: int = 4) -> SimGrid:
    """Grid covering [lo, hi] with `margin` extra cells on every side."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    origin = lo - margin * dx
    dims = np.ceil((hi - lo) / dx - 1e-12).astype(np.int64) + 2 * margin + 1
    return SimGrid(dims, dx, origin)


@dataclass
class RigidMotion:
    """Instantaneous rigid-body state: pose plus its velocity field."""

    pose: RigidTransform
    linear_velocity: np.ndarray
    angular_velocity: np.ndarray
    axis_point: np.ndarray

    def point_velocity(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.linear_velocity + np.cross(
            self.angular_velocity, points - self.axis_point
        )


RigidDriver = Callable[[int, float], RigidMotion]


class Scene:
    """Owns particle state, the grid, and scratch buffers for one simulation."""

    def __init__(self, x, v, C, F, mass, vol0, role, grid: SimGrid,
                 config: SimConfig, spacing: float,
                 rigid_local: Optional[np.ndarray] = None,
                 rigid_driver: Optional[RigidDriver] = None,
                 surface_indices: Optional[np.ndarray] = None):
        self.x = np.ascontiguousarray(x, dtype=np.float64)
        self.v = np.ascontiguousarray(v, dtype=np.float64)
        self.C = np.ascontiguousarray(C, dtype=np.float64)
        self.F = np.ascontiguousarray(F, dtype=np.float64)
        self.mass = np.ascontiguousarray(mass, dtype=np.float64)
        self.vol0 = np.ascontiguousarray(vol0, dtype=np.float64)
        self.role = np.ascontiguousarray(role, dtype=np.uint8)
        self.grid = grid
        self.config = config
        self.spacing = spacing
        self.rigid_local = rigid_local
        self.rigid_driver = rigid_driver
        self.current_motion: Optional[RigidMotion] = None
        self.step_index = 0
        self.surface_indices = (
            surface_indices if surface_indices is not None
            else np.arange(len(self.x))
        )
        self.n_rigid = int((self.role == ROLE_RIGID).sum())
        self.n_elastomer = len(self.x) - self.n_rigid
        self._scratch = None

    @property
    def n_particles(self) -> int:
        return len(self.x)

    def rigid_slice(self) -> slice:
        return slice(self.n_elastomer, self.n_particles)

    def scratch(self):
        if self._scratch is None:
            nx, ny, nz = self.grid.dims
            nc = K.N_SCATTER_CHUNKS
            self._scratch = (
                np.zeros((nc, nx, ny, nz)),
                np.zeros((nc, nx, ny, nz, 3)),
                np.zeros((nc, 6), dtype=np.int64),
                np.zeros((nc, 2), dtype=np.int64),
                np.zeros(self.n_particles, dtype=np.uint8),
                np.zeros(nc),
            )
        return self._scratch

    def clone(self) -> "Scene":
        dup = Scene(
            self.x.copy(), self.v.copy(), self.C.copy(), self.F.copy(),
            self.mass.copy(), self.vol0.copy(), self.role.copy(),
            SimGrid(self.grid.dims.copy(), self.grid.dx, self.grid.origin.copy()),
            self.config, self.spacing,
            None if self.rigid_local is None else self.rigid_local.copy(),
            self.rigid_driver,
            self.surface_indices.copy(),
        )
        dup.grid.base_tag[...] = self.grid.base_tag
        dup.step_index = self.step_index
        return dup


def make_scene(
    elastomer: ParticleCloud,
    config: SimConfig,
    rigid: Optional[ParticleCloud] = None,
    rigid_driver: Optional[RigidDriver] = None,
    rigid_pose: Optional[RigidTransform] = None,
    domain_lo: Optional[np.ndarray] = None,
    domain_hi: Optional[np.ndarray] = None,
    dx: Optional[float] = None,
    min_span_nodes: int = 32,
    sticky_base: bool = True,
) -> Scene:
    """Assemble a Scene from particle clouds.

    The grid covers the elastomer, the (posed) rigid cloud and any explicit
    domain bounds (use these for the trajectory sweep), plus a 4 dx margin.
    dx defaults to longest elastomer extent / min_span_nodes. The bottom
    elastomer layer's supporting nodes become sticky when sticky_base is set.
    """
    e_pos = elastomer.positions
    lo, hi = e_pos.min(axis=0), e_pos.max(axis=0)
    if dx is None:
        dx = float((hi - lo).max()) / float(min_span_nodes)

    r_pos = None
    if rigid is not None:
        r_pos = rigid.positions
        if rigid_pose is not None:
            r_pos = rigid_pose.apply(r_pos)
        lo = np.minimum(lo, r_pos.min(axis=0))
        hi = np.maximum(hi, r_pos.max(axis=0))
    if domain_lo is not None:
        lo = np.minimum(lo, np.asarray(domain_lo, dtype=np.float64))
    if domain_hi is not None:
        hi = np.maximum(hi, np.asarray(domain_hi, dtype=np.float64))
    grid = fit_grid(lo, hi, dx)

    n_e = len(e_pos)
    n_r = 0 if r_pos is None else len(r_pos)
    n = n_e + n_r
    x = np.empty((n, 3))
    x[:n_e] = e_pos
    role = np.zeros(n, dtype=np.uint8)
    mass = np.empty(n)
    vol0 = np.empty(n)
    vol_e = elastomer.spacing ** 3
    mass[:n_e] = config.density * vol_e
    vol0[:n_e] = vol_e
    if n_r:
        x[n_e:] = r_pos
        role[n_e:] = ROLE_RIGID
        vol_r = rigid.spacing ** 3
        mass[n_e:] = config.density * vol_r
        vol0[n_e:] = vol_r

    v = np.zeros((n, 3))
    C = np.zeros((n, 3, 3))
    F = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()

    z_top = e_pos[:, 2].max()
    surface = np.nonzero(e_pos[:, 2] >= z_top - 0.5 * elastomer.spacing)[0]

    scene = Scene(
        x, v, C, F, mass, vol0, role, grid, config, elastomer.spacing,
        rigid_local=None if rigid is None else rigid.positions.copy(),
        rigid_driver=rigid_driver,
        surface_indices=surface,
    )
    if sticky_base:
        z_bottom = e_pos[:, 2].min()
        k_max = int(np.floor((z_bottom - grid.origin[2]) / dx + 0.5))
        grid.base_tag[:, :, : max(k_max + 1, 0)] = K.TAG_STICKY
    return scene


# ---------------------------------------------------------------------------
# Public operations


def kernel_weights(position: np.ndarray, grid: SimGrid, particle: int = 0):
    """Quadratic B-spline weights over the particle's 3x3x3 node support.

    Returns (nodes (27,3) int, weights (27,), offsets (27,3) meters) where
    offsets are X_i - x_p. Raises OutOfDomainError when the support leaves
    the grid (particle closer than 1.5 dx to the boundary).
    """
    position = np.asarray(position, dtype=np.float64).reshape(3)
    g = (position - grid.origin) / grid.dx
    base = np.floor(g - 0.5).astype(np.int64)
    if (base < 0).any() or (base > grid.dims - 3).any():
        raise OutOfDomainError(particle)
    f = g - base
    w_ax = np.stack([
        0.5 * (1.5 - f) ** 2,
        0.75 - (f - 1.0) ** 2,
        0.5 * (f - 0.5) ** 2,
    ])  # (3 offsets, 3 axes)
    ii, jj, kk = np.meshgrid([0, 1, 2], [0, 1, 2], [0, 1, 2], indexing="ij")
    nodes = base + np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    weights = (w_ax[ii.ravel(), 0] * w_ax[jj.ravel(), 1] * w_ax[kk.ravel(), 2])
    offsets = (nodes - g) * grid.dx
    return nodes, weights, offsets


def polar_rotation(F: np.ndarray) -> np.ndarray:
    """Rotation factor of F = R S by scaled Newton iteration (det(F) > 0)."""
    R = np.asarray(F, dtype=np.float64).copy()
    for _ in range(100):
        det = np.linalg.det(R)
        g = abs(det) ** (-1.0 / 3.0)
        nxt = 0.5 * (g * R + np.linalg.inv(g * R).T)
        if np.abs(nxt - R).max() < 1e-14:
            R = nxt
            break
        R = nxt
    return R


def compute_stress(F: np.ndarray, config: SimConfig, particle: int | None = None) -> np.ndarray:
    """Fixed-corotated stress 2 mu (F - R) F^T + lam (J - 1) J I (Pa)."""
    F = np.asarray(F, dtype=np.float64).reshape(3, 3)
    J = np.linalg.det(F)
    if J <= 0.0:
        raise InvertedElementError(-1 if particle is None else particle)
    R = polar_rotation(F)
    return (2.0 * config.mu * (F - R) @ F.T
            + config.lam * (J - 1.0) * J * np.eye(3))


def elastic_energy(F: np.ndarray, config: SimConfig) -> float:
    """Fixed-corotated energy density mu ||F - R||_F^2 + lam/2 (J - 1)^2 (Pa)."""
    F = np.asarray(F, dtype=np.float64).reshape(3, 3)
    J = np.linalg.det(F)
    if J <= 0.0:
        raise InvertedElementError(-1)
    R = polar_rotation(F)
    return float(config.mu * ((F - R) ** 2).sum()
                 + 0.5 * config.lam * (J - 1.0) ** 2)


def _raise_p2g_status(scene: Scene, status: np.ndarray):
    bad = status[:, 0] != K.STATUS_OK
    if not bad.any():
        return
    rows = status[bad]
    particle = int(rows[:, 1].min())
    code = int(rows[rows[:, 1] == particle][0, 0])
    if code == K.STATUS_OUT_OF_DOMAIN:
        raise OutOfDomainError(particle, scene.step_index)
    raise InvertedElementError(particle, scene.step_index)


def particle_to_grid(scene: Scene, include_elastic: bool = True):
    """Eq.-style P2G: scatter mass and momentum into the (cleared) grid."""
    grid = scene.grid
    grid.clear()
    cm, cmom, cbox, status, _, _ = scene.scratch()
    K.p2g(
        scene.x, scene.v, scene.C, scene.F, scene.mass, scene.vol0, scene.role,
        cm, cmom, cbox, status,
        grid.origin[0], grid.origin[1], grid.origin[2],
        1.0 / grid.dx, grid.dx, scene.config.dt,
        scene.config.mu, scene.config.lam,
        1 if include_elastic else 0,
    )
    _raise_p2g_status(scene, status)
    live = cbox[:, 1] >= cbox[:, 0]
    if live.any():
        u = cbox[live]
        K.reduce_chunks(
            cm, cmom, cbox, grid.mass, grid.momentum,
            int(u[:, 0].min()), int(u[:, 1].max()),
            int(u[:, 2].min()), int(u[:, 3].max()),
            int(u[:, 4].min()), int(u[:, 5].max()),
        )


def grid_update(scene: Scene):
    """Node velocities from momentum, gravity, then sticky/rigid overrides."""
    grid = scene.grid
    np.copyto(grid.tag, grid.base_tag)
    motion = scene.current_motion
    if scene.n_rigid:
        K.mark_rigid_nodes(
            scene.x[scene.rigid_slice()], grid.tag,
            grid.origin[0], grid.origin[1], grid.origin[2],
            1.0 / grid.dx, grid.dx,
        )
    rv = np.zeros(3) if motion is None else motion.linear_velocity
    rw = np.zeros(3) if motion is None else motion.angular_velocity
    ra = np.zeros(3) if motion is None else motion.axis_point
    g = scene.config.gravity
    K.grid_update(
        grid.mass, grid.momentum, grid.velocity, grid.tag,
        g[0], g[1], g[2], scene.config.dt, scene.config.mass_epsilon,
        grid.origin[0], grid.origin[1], grid.origin[2], grid.dx,
        rv[0], rv[1], rv[2], rw[0], rw[1], rw[2], ra[0], ra[1], ra[2],
    )


def grid_to_particle(scene: Scene):
    """Gather node velocities into particle v and affine C (elastomer only)."""
    grid = scene.grid
    K.g2p(
        scene.x, scene.v, scene.C, scene.role, grid.velocity,
        grid.origin[0], grid.origin[1], grid.origin[2], 1.0 / grid.dx,
    )


def update_deformation_and_advect(scene: Scene):
    """F <- (I + dt C) F for elastomer particles; advect all particles."""
    _, _, _, _, errs, max_speed2 = scene.scratch()
    errs.fill(0)
    K.deform_advect(
        scene.x, scene.v, scene.C, scene.F, scene.role,
        scene.config.dt, errs, max_speed2,
    )
    if errs.any():
        raise InvertedElementError(int(np.argmax(errs)), scene.step_index)
    v_max = float(np.sqrt(max_speed2.max()))
    if scene.config.dt * v_max >= scene.grid.dx:
        raise CflError(
            f"CFL violated at step {scene.step_index}: dt*|v|max = "
            f"{scene.config.dt * v_max:.3e} >= dx = {scene.grid.dx:.3e}"
        )


def sync_rigid(scene: Scene):
    """Place the rigid cloud at the trajectory pose for the current step."""
    if not scene.n_rigid or scene.rigid_driver is None:
        return
    motion = scene.rigid_driver(scene.step_index, scene.config.dt)
    sl = scene.rigid_slice()
    scene.x[sl] = motion.pose.apply(scene.rigid_local)
    scene.v[sl] = motion.point_velocity(scene.x[sl])
    scene.current_motion = motion


def step(scene: Scene):
    """Advance the scene by one dt."""
    sync_rigid(scene)
    particle_to_grid(scene)
    grid_update(scene)
    grid_to_particle(scene)
    update_deformation_and_advect(scene)
    scene.step_index += 1


# ---------------------------------------------------------------------------
# Debug particle dump (count header + per-particle x, v, F, little-endian f64)


def dump_particles(scene: Scene, path: str | os.PathLike):
    n = scene.n_particles
    rec = np.empty((n, 15))
    rec[:, 0:3] = scene.x
    rec[:, 3:6] = scene.v
    rec[:, 6:15] = scene.F.reshape(n, 9)
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", n))
        fh.write(rec.astype("<f8").tobytes())
    os.replace(tmp, path)


def load_particle_dump(path: str | os.PathLike):
    """Returns (x, v, F) arrays from a dump_particles file."""
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        rec = np.frombuffer(fh.read(n * 15 * 8), dtype="<f8").reshape(n, 15)
    return (
        rec[:, 0:3].astype(np.float64),
        rec[:, 3:6].astype(np.float64),
        rec[:, 6:15].astype(np.float64).reshape(n, 3, 3),
    )
