"""Synthetic scene construction, ground-truth rollouts, and trajectory files.

A SceneSpec describes an object (shape, spacing, material, initial motion)
plus the grid and stepping setup; sample_shape turns it into a particle
state, gen_ground_truth rolls it out under the chosen expert law, and the
write/read pair persists trajectories in a small versioned binary format
with a plain-text metadata sidecar.
"""

from __future__ import annotations

import ast
import configparser
import hashlib
import struct
import warnings
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import ndimage

from .errors import FormatError, MasivError
from .materials import ELASTIC_LAWS, PLASTIC_LAWS, ElasticParams, PlasticParams
from .types import BoundarySpec, Grid, ParticleState, SimConfig

_MAGIC = b"MASIVTRJ"
_VERSION = 1

SHAPES = ("box", "sphere", "cross", "torus")


@dataclass
class SceneSpec:
    """Declarative description of a synthetic scene.

    Shape dimensions are interpreted per shape: box takes full extents
    (lx, ly, lz); sphere a radius; cross an (arm_length, arm_width) pair for
    the union of three axis-aligned square-section arms; torus a
    (major_radius, minor_radius) pair around the y axis.  All lengths in
    meters, density in kg/m^3.
    """

    shape: str = "box"
    dimensions: tuple = (0.2, 0.2, 0.2)
    spacing: float = 0.02
    density: float = 1000.0
    translation: tuple = (0.5, 0.5, 0.5)
    rotation: tuple = (0.0, 0.0, 0.0)       # XYZ Euler angles, radians
    velocity: tuple = (0.0, 0.0, 0.0)
    jitter: float = 0.0                     # lattice jitter, fraction of spacing
    seed: int = 0
    floor_height: float | None = None
    gravity: tuple = (0.0, -9.8, 0.0)
    elastic_law: str = "neo_hookean"
    elastic_params: ElasticParams = field(
        default_factory=lambda: ElasticParams(1e5, 0.3))
    plastic_law: str = "identity"
    plastic_params: PlasticParams = field(default_factory=PlasticParams)
    n_frames: int = 20
    frame_rate: float = 24.0
    grid_resolution: tuple = (48, 48, 48)
    grid_extent: float = 1.0
    substeps: int = 25

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise MasivError(f"unknown shape {self.shape!r}; "
                             f"expected one of {SHAPES}")
        if self.spacing <= 0:
            raise MasivError("particle spacing must be positive")
        if self.density <= 0:
            raise MasivError("density must be positive")
        if any(d <= 0 for d in np.atleast_1d(self.dimensions)):
            raise MasivError("shape dimensions must be positive")
        if self.n_frames < 2:
            raise MasivError("need at least two frames")
        if self.frame_rate <= 0 or self.substeps < 1:
            raise MasivError("frame rate must be positive, substeps >= 1")
        if self.elastic_law not in ELASTIC_LAWS:
            raise MasivError(f"unknown elastic law {self.elastic_law!r}")
        if self.plastic_law not in PLASTIC_LAWS:
            raise MasivError(f"unknown plastic law {self.plastic_law!r}")
        self.dimensions = tuple(float(d) for d in np.atleast_1d(self.dimensions))
        self.translation = tuple(float(v) for v in self.translation)
        self.rotation = tuple(float(v) for v in self.rotation)
        self.velocity = tuple(float(v) for v in self.velocity)
        self.gravity = tuple(float(v) for v in self.gravity)
        self.grid_resolution = tuple(int(r) for r in self.grid_resolution)

    @property
    def tau(self) -> float:
        """Simulation time step: frame duration over substeps."""
        return 1.0 / (self.frame_rate * self.substeps)

    def scene_hash(self) -> str:
        parts = []
        for f in fields(self):
            parts.append(f"{f.name}={getattr(self, f.name)!r}")
        return hashlib.sha256(";".join(parts).encode()).hexdigest()[:16]

    def make_grid(self) -> Grid:
        dx = self.grid_extent / self.grid_resolution[0]
        boundary = BoundarySpec()
        if self.floor_height is not None:
            boundary.floor_height = float(self.floor_height)
        return Grid(self.grid_resolution, dx, np.zeros(3), boundary)

    def make_config(self) -> SimConfig:
        return SimConfig(dt=self.tau, gravity=self.gravity,
                         substeps_per_frame=self.substeps)


def _euler_matrix(rx, ry, rz):
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def _shape_lattice(spec: SceneSpec) -> np.ndarray:
    """Shape-local lattice points (centered on the shape's origin)."""
    h = spec.spacing
    dims = spec.dimensions

    def centered_axis(extent):
        n = max(1, int(round(extent / h)))
        return (np.arange(n) + 0.5) * h - extent / 2.0

    def lattice(ex, ey, ez):
        ax, ay, az = centered_axis(ex), centered_axis(ey), centered_axis(ez)
        g = np.meshgrid(ax, ay, az, indexing="ij")
        return np.stack([a.ravel() for a in g], axis=1)

    if spec.shape == "box":
        if len(dims) != 3:
            raise MasivError("box dimensions must be (lx, ly, lz)")
        return lattice(*dims)
    if spec.shape == "sphere":
        r = dims[0]
        pts = lattice(2 * r, 2 * r, 2 * r)
        return pts[np.linalg.norm(pts, axis=1) <= r]
    if spec.shape == "cross":
        if len(dims) < 2:
            raise MasivError("cross dimensions must be (arm_length, arm_width)")
        length, width = dims[0], dims[1]
        if width > length:
            raise MasivError("cross arm width must not exceed arm length")
        pts = lattice(length, length, length)
        half_w = width / 2.0
        a = np.abs(pts)
        inside = ((a[:, 1] <= half_w) & (a[:, 2] <= half_w)) \
            | ((a[:, 0] <= half_w) & (a[:, 2] <= half_w)) \
            | ((a[:, 0] <= half_w) & (a[:, 1] <= half_w))
        return pts[inside]
    # torus around the y axis
    if len(dims) < 2:
        raise MasivError("torus dimensions must be (major_radius, minor_radius)")
    big, small = dims[0], dims[1]
    ext = 2 * (big + small)
    pts = lattice(ext, 2 * small, ext)
    ring = np.sqrt(pts[:, 0] ** 2 + pts[:, 2] ** 2) - big
    return pts[ring ** 2 + pts[:, 1] ** 2 <= small ** 2]


def sample_shape(spec: SceneSpec) -> ParticleState:
    """Particle state for the scene's object: lattice clipped to the shape.

    Mass per particle is density * spacing^3; particles start undeformed
    (F = I, C = 0) at the spec's translation/rotation with its velocity.
    """
    pts = _shape_lattice(spec)
    if pts.shape[0] == 0:
        raise MasivError(
            f"shape {spec.shape!r} with dimensions {spec.dimensions} "
            f"contains no lattice points at spacing {spec.spacing}")
    if spec.jitter > 0.0:
        rng = np.random.default_rng(spec.seed)
        pts = pts + rng.uniform(-0.5, 0.5, pts.shape) \
            * (spec.jitter * spec.spacing)
    rot = _euler_matrix(*spec.rotation)
    pts = pts @ rot.T + np.asarray(spec.translation)
    h3 = spec.spacing ** 3
    return ParticleState.rest(pts, spec.density * h3, h3,
                              velocity=spec.velocity)


def fill_interior(cloud: np.ndarray, cell: float) -> np.ndarray:
    """Fill the volume enclosed by a surface cloud with interior points.

    The cloud is voxelized at the given cell size; empty cells connected to
    the domain boundary are exterior (flood fill), every other empty cell
    gains one point at its center.  Original points are kept.  An open
    surface lets the fill escape, leaving nothing to add; that case warns
    and returns the input unchanged.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3 or cloud.shape[0] == 0:
        raise MasivError("surface cloud must be a nonempty (Q,3) array")
    if cell <= 0:
        raise MasivError("cell size must be positive")
    # half-cell offset keeps lattice-aligned points at voxel centers rather
    # than corners, where floor would alias them across adjacent voxels
    lo = cloud.min(axis=0) - 1.5 * cell
    idx = np.floor((cloud - lo) / cell).astype(np.int64)
    shape = idx.max(axis=0) + 2
    occupied = np.zeros(shape, dtype=bool)
    occupied[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    # connected components of empty space; any component touching the
    # boundary of the voxel box is exterior
    labels, n_comp = ndimage.label(~occupied)
    border = np.zeros(shape, dtype=bool)
    border[0, :, :] = border[-1, :, :] = True
    border[:, 0, :] = border[:, -1, :] = True
    border[:, :, 0] = border[:, :, -1] = True
    exterior = np.unique(labels[border & ~occupied])
    interior_mask = (labels > 0) & ~np.isin(labels, exterior)
    if not interior_mask.any():
        # an already-solid cloud legitimately has nothing to fill; only an
        # open surface (flood fill reaching everywhere, no buried cells)
        # deserves a warning
        if not ndimage.binary_erosion(occupied).any():
            warnings.warn("surface encloses no interior volume at this cell "
                          "size; returning the cloud unchanged", stacklevel=2)
        return cloud.copy()
    centers = np.argwhere(interior_mask) * cell + lo + 0.5 * cell
    return np.vstack([cloud, centers])


def gen_ground_truth(spec: SceneSpec, camera=None, record_every: int = 1):
    """Roll the scene out under its expert law, recording dense steps.

    Returns (TrajectoryDataset, MaskSequence or None).  Silhouettes are
    rendered once per frame with the given camera.  The trajectory metadata
    records the scene hash, laws, seed, and step interval; total particle
    mass is constant across the rollout by construction (masses never
    change during transfers).
    """
    from .mpm.sim import MaterialLaws, rollout

    state0 = sample_shape(spec)
    grid = spec.make_grid()
    cfg = spec.make_config()
    laws = MaterialLaws.classical(spec.elastic_law, spec.elastic_params,
                                  spec.plastic_law, spec.plastic_params)
    n_steps = spec.n_frames * spec.substeps
    try:
        traj, _ = rollout(state0, laws, n_steps, grid, cfg,
                          record_every=record_every)
    except MasivError as exc:
        step = getattr(exc, "step", None)
        where = f" at step {step}" if step is not None else ""
        raise MasivError(
            f"ground-truth rollout failed{where}: {exc}") from exc
    traj.metadata.update({
        "scene_hash": spec.scene_hash(),
        "shape": spec.shape,
        "elastic_law": spec.elastic_law,
        "plastic_law": spec.plastic_law,
        "seed": spec.seed,
        "tau": spec.tau,
        "substeps": spec.substeps,
        "n_frames": spec.n_frames,
    })
    masks = None
    if camera is not None:
        from .losses import MaskSequence, silhouette_render
        masks = MaskSequence()
        frame_stride = max(1, spec.substeps // record_every)
        for i in range(0, traj.n_steps, frame_stride):
            mask = silhouette_render(traj.positions[i], camera)
            masks.append(traj.times[i], mask.numpy())
    return traj, masks


# ---------------------------------------------------------------------------
# trajectory file format


def write_trajectory(traj, path):
    """Binary trajectory plus a plain-text metadata sidecar at path + '.meta'."""
    tau = float(traj.times[1] - traj.times[0]) if traj.n_steps > 1 else 0.0
    with open(str(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<QQ", traj.q, traj.n_steps))
        fh.write(struct.pack("<d", tau))
        fh.write(np.ascontiguousarray(traj.times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(traj.positions, dtype="<f8").tobytes())
    with open(str(path) + ".meta", "w") as fh:
        for key in sorted(traj.metadata):
            fh.write(f"{key}: {traj.metadata[key]!r}\n")


def read_trajectory(path):
    from .trajectory import TrajectoryDataset
    with open(str(path), "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:8] != _MAGIC:
        raise FormatError("magic", f"expected {_MAGIC!r} at start of {path}")
    off = 8
    if len(data) < off + 4:
        raise FormatError("version", "file truncated before version")
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != _VERSION:
        raise FormatError("version", f"unsupported version {version}")
    if len(data) < off + 24:
        raise FormatError("header", "file truncated inside header")
    q, steps = struct.unpack_from("<QQ", data, off)
    off += 16
    (_tau,) = struct.unpack_from("<d", data, off)
    off += 8
    if q == 0:
        raise FormatError("particle_count", "trajectory with zero particles")
    if steps == 0:
        raise FormatError("step_count", "trajectory with zero steps")
    need = steps * 8 + steps * q * 3 * 8
    if len(data) - off < need:
        raise FormatError("body", f"file truncated: need {need} body bytes, "
                          f"have {len(data) - off}")
    if len(data) - off > need:
        raise FormatError("body", f"{len(data) - off - need} trailing bytes")
    times = np.frombuffer(data, dtype="<f8", count=steps, offset=off).copy()
    off += steps * 8
    positions = np.frombuffer(data, dtype="<f8", count=steps * q * 3,
                              offset=off).reshape(steps, q, 3).copy()
    metadata = {}
    meta_path = str(path) + ".meta"
    try:
        with open(meta_path) as fh:
            for line in fh:
                line = line.strip()
                if not line or ":" not in line:
                    continue
                key, _, value = line.partition(":")
                value = value.strip()
                try:
                    metadata[key.strip()] = ast.literal_eval(value)
                except (ValueError, SyntaxError):
                    metadata[key.strip()] = value
    except FileNotFoundError:
        pass
    return TrajectoryDataset(times, positions, metadata)


# ---------------------------------------------------------------------------
# scene config files


_SCENE_KEYS = {
    "shape": str, "dimensions": tuple, "spacing": float, "density": float,
    "translation": tuple, "rotation": tuple, "velocity": tuple,
    "jitter": float, "seed": int, "floor_height": float, "gravity": tuple,
    "frames": int, "frame_rate": float,
}
_MATERIAL_KEYS = {
    "elastic": str, "youngs_modulus": float, "poisson_ratio": float,
    "plastic": str, "yield_stress": float, "friction_angle": float,
    "cohesion": float,
}
_GRID_KEYS = {"resolution": tuple, "extent": float, "substeps": int}


def _convert(section, key, raw, types):
    if key not in types:
        raise FormatError(f"{section}.{key}", "unknown configuration key")
    kind = types[key]
    try:
        if kind is tuple:
            return tuple(float(v) for v in raw.split())
        return kind(raw)
    except ValueError:
        raise FormatError(f"{section}.{key}",
                          f"cannot parse {raw!r} as {kind.__name__}")


def load_scene_config(path) -> SceneSpec:
    """Parse a plain-text scene description into a SceneSpec.

    The format is INI-style with three sections: [scene] for the object and
    its initial conditions, [material] for the expert law, [grid] for the
    background grid and substepping.  Unknown sections or keys are format
    errors; every key is optional and falls back to the SceneSpec default.
    """
    parser = configparser.ConfigParser()
    read = parser.read(str(path))
    if not read:
        raise FormatError("file", f"cannot read scene config {path}")
    kwargs = {}
    elastic = {}
    plastic = {}
    for section in parser.sections():
        if section == "scene":
            for key, raw in parser.items(section):
                value = _convert(section, key, raw, _SCENE_KEYS)
                name = {"frames": "n_frames"}.get(key, key)
                kwargs[name] = value
        elif section == "material":
            for key, raw in parser.items(section):
                value = _convert(section, key, raw, _MATERIAL_KEYS)
                if key == "elastic":
                    kwargs["elastic_law"] = value
                elif key == "plastic":
                    kwargs["plastic_law"] = value
                elif key in ("youngs_modulus", "poisson_ratio"):
                    elastic[key] = value
                else:
                    plastic[key] = value
        elif section == "grid":
            for key, raw in parser.items(section):
                value = _convert(section, key, raw, _GRID_KEYS)
                name = {"resolution": "grid_resolution",
                        "extent": "grid_extent"}.get(key, key)
                kwargs[name] = value
        else:
            raise FormatError(section, "unknown configuration section")
    if elastic:
        kwargs["elastic_params"] = ElasticParams(
            elastic.get("youngs_modulus", 1e5),
            elastic.get("poisson_ratio", 0.3))
    if plastic:
        kwargs["plastic_params"] = PlasticParams(
            plastic.get("yield_stress", 1e4),
            plastic.get("friction_angle", 30.0),
            plastic.get("cohesion", 0.0))
    return SceneSpec(**kwargs)
