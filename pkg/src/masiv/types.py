"""Core simulation state containers (particles, grid, stepping config)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

# Boundary condition kinds for grid faces / the floor plane.
BC_OPEN = "open"
BC_STICKY = "sticky"
BC_SEPARATE = "separate"

# Nodes this close (in cells) to a non-open face get the face condition.
BOUNDARY_BAND = 3


@dataclass
class BoundarySpec:
    """Per-face grid boundary conditions plus an optional floor plane.

    ``faces`` maps face names (xmin, xmax, ymin, ymax, zmin, zmax) to one of
    the BC_* kinds.  The floor, when enabled, applies its condition to every
    node at or below ``floor_height`` (world y).
    """

    faces: dict = field(
        default_factory=lambda: {
            "xmin": BC_OPEN, "xmax": BC_OPEN,
            "ymin": BC_OPEN, "ymax": BC_OPEN,
            "zmin": BC_OPEN, "zmax": BC_OPEN,
        }
    )
    friction: float = 0.2
    floor_height: float | None = None
    floor_kind: str = BC_SEPARATE
    floor_friction: float = 0.2

    def copy(self):
        return BoundarySpec(dict(self.faces), self.friction,
                            self.floor_height, self.floor_kind,
                            self.floor_friction)


@dataclass
class ParticleState:
    """Per-particle Lagrangian state: the full simulation state s_n.

    Arrays are float64 and share leading dimension Q: positions ``x`` (Q,3)
    [m], velocities ``v`` (Q,3) [m/s], elastic deformation gradients ``F``
    (Q,3,3), affine velocity matrices ``C`` (Q,3,3) [1/s], masses ``m`` (Q,)
    [kg] and rest volumes ``vol`` (Q,) [m^3].
    """

    x: np.ndarray
    v: np.ndarray
    F: np.ndarray
    C: np.ndarray
    m: np.ndarray
    vol: np.ndarray

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.v = np.ascontiguousarray(self.v, dtype=np.float64)
        self.F = np.ascontiguousarray(self.F, dtype=np.float64)
        self.C = np.ascontiguousarray(self.C, dtype=np.float64)
        self.m = np.ascontiguousarray(self.m, dtype=np.float64)
        self.vol = np.ascontiguousarray(self.vol, dtype=np.float64)
        q = self.x.shape[0]
        if q == 0:
            raise ValueError("empty particle state (Q must be > 0)")
        for name in ("v", "F", "C", "m", "vol"):
            if getattr(self, name).shape[0] != q:
                raise ValueError(f"array {name} does not share length Q={q}")
        if np.any(self.m <= 0) or np.any(self.vol <= 0):
            raise ValueError("particle masses and volumes must be positive")

    @property
    def q(self) -> int:
        return self.x.shape[0]

    def copy(self) -> "ParticleState":
        return ParticleState(self.x.copy(), self.v.copy(), self.F.copy(),
                             self.C.copy(), self.m.copy(), self.vol.copy())

    def validate_dets(self):
        dets = np.linalg.det(self.F)
        bad = np.flatnonzero(dets <= 0)
        if bad.size:
            from .errors import InversionError
            raise InversionError(bad[0], dets[bad[0]])

    @staticmethod
    def rest(x: np.ndarray, mass_per_particle: float, volume_per_particle: float,
             velocity=(0.0, 0.0, 0.0)) -> "ParticleState":
        """Undeformed state at given positions: F = I, C = 0."""
        x = np.asarray(x, dtype=np.float64)
        q = x.shape[0]
        eye = np.broadcast_to(np.eye(3), (q, 3, 3)).copy()
        v = np.broadcast_to(np.asarray(velocity, dtype=np.float64), (q, 3)).copy()
        return ParticleState(
            x=x, v=v, F=eye, C=np.zeros((q, 3, 3)),
            m=np.full(q, float(mass_per_particle)),
            vol=np.full(q, float(volume_per_particle)),
        )


@dataclass
class Grid:
    """Dense background Eulerian grid.

    Node (i,j,k) sits at ``origin + (i,j,k) * dx``.  ``mass`` and ``mom``
    (momentum, later velocity after the grid update) are scratch fields
    rebuilt every step.
    """

    resolution: tuple
    dx: float
    origin: np.ndarray
    boundary: BoundarySpec = field(default_factory=BoundarySpec)
    mass: np.ndarray | None = None
    vel: np.ndarray | None = None
    force: np.ndarray | None = None

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        if any(r < 4 for r in self.resolution):
            raise ValueError("grid resolution must be >= 4 per axis")
        self.dx = float(self.dx)
        self.origin = np.asarray(self.origin, dtype=np.float64).copy()
        self.clear()

    def clear(self):
        self.mass = np.zeros(self.resolution, dtype=np.float64)
        self.vel = np.zeros(self.resolution + (3,), dtype=np.float64)
        self.force = np.zeros(self.resolution + (3,), dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.resolution))

    def node_positions_axis(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.dx * np.arange(self.resolution[axis])

    def total_mass(self) -> float:
        return float(self.mass.sum())

    def copy_empty(self) -> "Grid":
        return Grid(self.resolution, self.dx, self.origin.copy(),
                    self.boundary.copy())


@dataclass
class SimConfig:
    """Time stepping configuration."""

    dt: float
    gravity: tuple = (0.0, -9.8, 0.0)
    substeps_per_frame: int = 200
    mass_epsilon: float = 1e-12
    cfl_check: bool = True

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.substeps_per_frame < 1:
            raise ValueError("substeps_per_frame must be >= 1")
        self.gravity = tuple(float(g) for g in self.gravity)

    def with_dt(self, dt: float) -> "SimConfig":
        return replace(self, dt=dt)
