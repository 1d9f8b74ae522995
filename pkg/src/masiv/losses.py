"""Identification objectives and evaluation metrics.

Geometric losses compare simulated particle positions against reference
clouds: dense per-step trajectory L1, per-frame Chamfer on solid continuums,
per-frame Chamfer on extracted surfaces.  The silhouette loss compares soft
occupancy masks rendered by orthographic particle splatting.

Every loss has a plain-number evaluation path and a torch path usable inside
the rollout gradient engine.  Nearest-neighbor assignments in the Chamfer
losses are frozen per evaluation: the gradient flows through the squared
distances, not through which neighbor is closest (the assignment is
piecewise constant in the positions anyway).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from .errors import FormatError, MasivError

# ---------------------------------------------------------------------------
# point-cloud metrics
# ---------------------------------------------------------------------------


def _cloud(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3 or a.shape[0] == 0:
        raise MasivError(f"expected a nonempty (n,3) cloud, got shape {a.shape}")
    return a


def nn_indices(query, ref):
    """Index of the nearest ref point for every query point (lowest index wins ties)."""
    tree = cKDTree(_cloud(ref))
    _, idx = tree.query(_cloud(query), k=1)
    return idx


def chamfer(a, b) -> float:
    """Symmetric mean squared nearest-neighbor distance between two clouds [m^2]."""
    a = _cloud(a)
    b = _cloud(b)
    da, _ = cKDTree(b).query(a, k=1)
    db, _ = cKDTree(a).query(b, k=1)
    return 0.5 * (float((da * da).mean()) + float((db * db).mean()))


def chamfer_t(a: torch.Tensor, b) -> torch.Tensor:
    """Chamfer with frozen assignments; differentiable w.r.t. the first cloud."""
    bn = _cloud(b if not isinstance(b, torch.Tensor) else b.detach().numpy())
    an = a.detach().numpy()
    ia = nn_indices(an, bn)        # nearest b for each a
    ib = nn_indices(bn, an)        # nearest a for each b
    bt = torch.from_numpy(bn)
    d1 = ((a - bt[ia]) ** 2).sum(dim=1).mean()
    d2 = ((a[ib] - bt) ** 2).sum(dim=1).mean()
    return 0.5 * (d1 + d2)


def traj_l1(pred, ref) -> float:
    """Mean absolute coordinate deviation over aligned trajectories [m].

    Accepts anything with matching (steps, Q, 3) position stacks, or objects
    exposing a ``positions`` attribute of that shape.
    """
    p = np.asarray(getattr(pred, "positions", pred), dtype=np.float64)
    r = np.asarray(getattr(ref, "positions", ref), dtype=np.float64)
    if p.shape != r.shape:
        raise MasivError(f"trajectory shape mismatch: {p.shape} vs {r.shape}")
    return float(np.abs(p - r).mean())


# ---------------------------------------------------------------------------
# surface extraction
# ---------------------------------------------------------------------------

_FACE_NEIGHBORS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0],
                            [0, -1, 0], [0, 0, 1], [0, 0, -1]])


def surface_extract(positions, cell: float) -> np.ndarray:
    """Indices of particles whose occupancy cell has an empty face neighbor."""
    x = _cloud(positions)
    cells = np.floor(x / cell).astype(np.int64)
    occupied = set(map(tuple, cells))
    keep = []
    for i, c in enumerate(cells):
        for d in _FACE_NEIGHBORS:
            if (c[0] + d[0], c[1] + d[1], c[2] + d[2]) not in occupied:
                keep.append(i)
                break
    return np.asarray(keep, dtype=np.int64)


def surf_loss(sim_frames, ref_frames, cell: float):
    """Sum over frames of Chamfer between extracted surfaces.

    sim_frames entries may be torch tensors (gradients flow through the
    simulated positions; surface index sets are frozen per evaluation).
    """
    if len(sim_frames) != len(ref_frames):
        raise MasivError("frame count mismatch")
    total = None
    for xs, pr in zip(sim_frames, ref_frames):
        xt = xs if isinstance(xs, torch.Tensor) else torch.from_numpy(_cloud(xs))
        si = surface_extract(xt.detach().numpy(), cell)
        ref = _cloud(pr)
        rj = surface_extract(ref, cell)
        term = chamfer_t(xt[si], ref[rj])
        total = term if total is None else total + term
    return total


def cont_loss(sim_frames, ref_frames):
    """Sum over frames of Chamfer between whole continuums."""
    if len(sim_frames) != len(ref_frames):
        raise MasivError("frame count mismatch")
    total = None
    for xs, pr in zip(sim_frames, ref_frames):
        xt = xs if isinstance(xs, torch.Tensor) else torch.from_numpy(_cloud(xs))
        term = chamfer_t(xt, pr)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# silhouettes
# ---------------------------------------------------------------------------

_AXES = {"+x": 0, "-x": 0, "+y": 1, "-y": 1, "+z": 2, "-z": 2}


@dataclass
class SilhouetteCamera:
    """Orthographic splatting camera.

    axis selects the projection direction; the image plane spans
    window_lo..window_hi in the two remaining world axes (u = first
    remaining axis, v = second, in x<y<z order).  Each particle splats a
    truncated polynomial kernel (1 - (d/r)^2)^softness of radius r meters.
    """

    axis: str = "+z"
    resolution: tuple = (64, 64)
    window_lo: tuple = (0.0, 0.0)
    window_hi: tuple = (1.0, 1.0)
    radius: float = 0.02
    softness: float = 2.0

    def __post_init__(self):
        if self.axis not in _AXES:
            raise ValueError(f"axis must be one of {sorted(_AXES)}")
        w, h = self.resolution
        if w < 8 or h < 8:
            raise ValueError("resolution must be at least 8x8")
        if self.radius <= 0:
            raise ValueError("splat radius must be positive")
        if self.softness < 1:
            raise ValueError("softness must be >= 1 (kernel smoothness)")

    @property
    def plane_axes(self):
        drop = _AXES[self.axis]
        return tuple(i for i in range(3) if i != drop)

    def pixel_size(self):
        w, h = self.resolution
        return ((self.window_hi[0] - self.window_lo[0]) / w,
                (self.window_hi[1] - self.window_lo[1]) / h)


@dataclass
class MaskSequence:
    times: list = field(default_factory=list)
    masks: list = field(default_factory=list)    # (H, W) float arrays in [0,1]

    def append(self, t, mask):
        m = np.asarray(mask, dtype=np.float64)
        if m.min() < 0.0 or m.max() > 1.0:
            raise MasivError("mask values must lie in [0,1]")
        self.times.append(float(t))
        self.masks.append(m)

    def __len__(self):
        return len(self.masks)


def silhouette_render(positions, camera: SilhouetteCamera) -> torch.Tensor:
    """Soft occupancy mask (H, W) from orthographic particle splatting.

    Occupancy per pixel is 1 - prod_i (1 - k_i) over the splat kernels, so
    overlapping particles saturate toward 1.  Differentiable w.r.t.
    positions; particles outside the window simply contribute nothing.
    """
    xt = positions if isinstance(positions, torch.Tensor) \
        else torch.from_numpy(_cloud(positions))
    w, h = camera.resolution
    au, av = camera.plane_axes
    lo = camera.window_lo
    pw, ph = camera.pixel_size()
    r = camera.radius
    # Pixel-center coordinates of the patch each particle can touch.
    u = xt[:, au]
    v = xt[:, av]
    pu = (u - lo[0]) / pw - 0.5          # fractional pixel coordinates
    pv = (v - lo[1]) / ph - 0.5
    reach_u = int(np.ceil(r / pw)) + 1
    reach_v = int(np.ceil(r / ph)) + 1
    iu0 = torch.floor(pu.detach()).to(torch.int64) - reach_u
    iv0 = torch.floor(pv.detach()).to(torch.int64) - reach_v
    du = torch.arange(2 * reach_u + 2, dtype=torch.int64)
    dv = torch.arange(2 * reach_v + 2, dtype=torch.int64)
    iu = iu0.unsqueeze(1) + du                     # (Q, Pu)
    iv = iv0.unsqueeze(1) + dv                     # (Q, Pv)
    cu = (iu.to(torch.float64) + 0.5) * pw + lo[0]
    cv = (iv.to(torch.float64) + 0.5) * ph + lo[1]
    d2 = ((cu - u.unsqueeze(1)) ** 2).unsqueeze(2) \
        + ((cv - v.unsqueeze(1)) ** 2).unsqueeze(1)    # (Q, Pu, Pv)
    k = torch.clamp(1.0 - d2 / (r * r), min=0.0) ** camera.softness
    # Multiplicative accumulation in log space via scatter-add; clamp keeps
    # log finite when a particle sits exactly on a pixel center.
    log_miss = torch.log1p(-torch.clamp(k, max=1.0 - 1e-12))
    flat = torch.zeros(h * w, dtype=torch.float64)
    inside = (iu >= 0) & (iu < w)
    insidev = (iv >= 0) & (iv < h)
    mask = inside.unsqueeze(2) & insidev.unsqueeze(1)
    idx = (iv.clamp(0, h - 1).unsqueeze(1) * w
           + iu.clamp(0, w - 1).unsqueeze(2))          # (Q, Pu, Pv)
    flat = flat.index_add(0, idx[mask.detach()].reshape(-1),
                          log_miss[mask].reshape(-1))
    return 1.0 - torch.exp(flat).reshape(h, w)


def silhouette_l1(pred: MaskSequence, ref: MaskSequence):
    """Mean absolute pixel deviation over all times and pixels."""
    if len(pred) != len(ref):
        raise MasivError("mask sequence length mismatch")
    total = None
    n = 0
    for pm, rm in zip(pred.masks, ref.masks):
        pt = pm if isinstance(pm, torch.Tensor) else torch.from_numpy(
            np.asarray(pm, dtype=np.float64))
        rt = torch.from_numpy(np.asarray(rm, dtype=np.float64)) \
            if not isinstance(rm, torch.Tensor) else rm
        if pt.shape != rt.shape:
            raise MasivError("mask shape mismatch")
        term = (pt - rt).abs().sum()
        total = term if total is None else total + term
        n += pt.numel()
    out = total / n
    return out if isinstance(out, torch.Tensor) and out.requires_grad \
        else float(out)


# ---------------------------------------------------------------------------
# PGM mask stacks
# ---------------------------------------------------------------------------

def write_masks(seq: MaskSequence, directory, prefix="mask"):
    """8-bit binary PGM per frame plus a manifest listing times and files."""
    import os
    os.makedirs(directory, exist_ok=True)
    lines = []
    for i, (t, m) in enumerate(zip(seq.times, seq.masks)):
        m = np.asarray(m, dtype=np.float64)
        name = f"{prefix}_{i:04d}.pgm"
        path = os.path.join(directory, name)
        data = np.clip(np.round(m * 255.0), 0, 255).astype(np.uint8)
        hgt, wid = data.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{wid} {hgt}\n255\n".encode())
            fh.write(data.tobytes())
        lines.append(f"{t!r} {name}")
    with open(os.path.join(directory, prefix + "_manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_masks(directory, prefix="mask") -> MaskSequence:
    import os
    manifest = os.path.join(directory, prefix + "_manifest.txt")
    seq = MaskSequence()
    try:
        with open(manifest) as fh:
            entries = [ln.split() for ln in fh.read().splitlines() if ln]
    except OSError as exc:
        raise FormatError("manifest", str(exc))
    for t_str, name in entries:
        path = os.path.join(directory, name)
        with open(path, "rb") as fh:
            magic = fh.readline().strip()
            if magic != b"P5":
                raise FormatError("pgm magic", repr(magic))
            dims = fh.readline().split()
            maxv = fh.readline().strip()
            if maxv != b"255":
                raise FormatError("pgm maxval", repr(maxv))
            wid, hgt = int(dims[0]), int(dims[1])
            raw = fh.read(wid * hgt)
            if len(raw) != wid * hgt:
                raise FormatError("pgm body", "truncated")
        img = np.frombuffer(raw, dtype=np.uint8).reshape(hgt, wid)
        seq.append(float(t_str), img.astype(np.float64) / 255.0)
    return seq


def write_metric_report(path, records):
    """One text record per frame: index, time, CD, traj-L1, sil-L1."""
    with open(path, "w") as fh:
        fh.write("# frame time cd traj_l1 sil_l1\n")
        for i, rec in enumerate(records):
            fh.write("%d %.9g %.12g %.12g %.12g\n" % (
                i, rec.get("time", i), rec.get("cd", float("nan")),
                rec.get("traj_l1", float("nan")),
                rec.get("sil_l1", float("nan"))))
