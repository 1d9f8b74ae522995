"""Pure-numpy MPM transfer kernels: the portable fallback backend.

The compiled extension in ``_kernels.pyx`` implements the same operations;
either backend must produce identical physics (tested against each other).
"""

from __future__ import annotations

from itertools import product

import numpy as np

from ..errors import InversionError
from ..types import (BC_OPEN, BC_SEPARATE, BC_STICKY, BOUNDARY_BAND, Grid,
                     ParticleState, SimConfig)
from .weights import stencil_arrays

_OFFSETS = list(product(range(3), range(3), range(3)))


def p2g(state: ParticleState, P: np.ndarray, grid: Grid, cfg: SimConfig) -> Grid:
    """Scatter mass, APIC momentum and internal forces to the grid.

    After the call ``grid.mass`` holds node masses, ``grid.vel`` node
    momenta, and ``grid.force`` the internal-force accumulation
    -sum_i V_i P_i F_i^T grad(w).
    """
    grid.clear()
    base, w, dw = stencil_arrays(state.x, grid)
    A = np.einsum("qij,qkj->qik", np.asarray(P, dtype=np.float64), state.F)
    mass_flat = grid.mass.reshape(-1)
    mom_flat = grid.vel.reshape(-1, 3)
    force_flat = grid.force.reshape(-1, 3)
    res = grid.resolution
    strides = np.array([res[1] * res[2], res[2], 1], dtype=np.int64)

    for i, j, k in _OFFSETS:
        wq = w[:, 0, i] * w[:, 1, j] * w[:, 2, k]
        gw = np.stack([
            dw[:, 0, i] * w[:, 1, j] * w[:, 2, k],
            w[:, 0, i] * dw[:, 1, j] * w[:, 2, k],
            w[:, 0, i] * w[:, 1, j] * dw[:, 2, k],
        ], axis=1)
        node = base + np.array([i, j, k], dtype=np.int64)
        flat = node @ strides
        node_pos = grid.origin + node * grid.dx
        dpos = node_pos - state.x
        wm = wq * state.m
        np.add.at(mass_flat, flat, wm)
        mom = wm[:, None] * (state.v + np.einsum("qij,qj->qi", state.C, dpos))
        np.add.at(mom_flat, flat, mom)
        f = -state.vol[:, None] * np.einsum("qij,qj->qi", A, gw)
        np.add.at(force_flat, flat, f)
    return grid


def _apply_separate(vel, normal, friction):
    """Project out the inward normal component and Coulomb-limit the tangent."""
    vn = vel @ normal
    inward = vn < 0.0
    if not np.any(inward):
        return vel
    v_in = vel[inward]
    vn_in = vn[inward]
    vt = v_in - vn_in[:, None] * normal
    vt_norm = np.linalg.norm(vt, axis=1)
    scale = np.zeros_like(vt_norm)
    nz = vt_norm > 0.0
    scale[nz] = np.maximum(0.0, 1.0 - friction * (-vn_in[nz]) / vt_norm[nz])
    vel[inward] = vt * scale[:, None]
    return vel


_FACE_AXIS = {"xmin": 0, "xmax": 0, "ymin": 1, "ymax": 1, "zmin": 2, "zmax": 2}


def apply_boundary(grid: Grid):
    """Project grid velocities per the boundary spec (in place)."""
    bc = grid.boundary
    vel = grid.vel
    for face, kind in bc.faces.items():
        if kind == BC_OPEN:
            continue
        axis = _FACE_AXIS[face]
        is_min = face.endswith("min")
        sl = [slice(None)] * 3
        sl[axis] = slice(0, BOUNDARY_BAND) if is_min else \
            slice(grid.resolution[axis] - BOUNDARY_BAND, None)
        sub = vel[tuple(sl)]
        if kind == BC_STICKY:
            sub[...] = 0.0
        elif kind == BC_SEPARATE:
            normal = np.zeros(3)
            normal[axis] = 1.0 if is_min else -1.0
            flat = sub.reshape(-1, 3)
            _apply_separate(flat, normal, bc.friction)
            sub[...] = flat.reshape(sub.shape)
        else:
            raise ValueError(f"unknown boundary kind {kind!r}")
    if bc.floor_height is not None:
        ys = grid.node_positions_axis(1)
        rows = np.flatnonzero(ys <= bc.floor_height)
        if rows.size:
            # fancy row indexing copies, so write the result back explicitly
            sub = vel[:, rows, :, :]
            if bc.floor_kind == BC_STICKY:
                vel[:, rows, :, :] = 0.0
            else:
                flat = sub.reshape(-1, 3)
                _apply_separate(flat, np.array([0.0, 1.0, 0.0]),
                                bc.floor_friction)
                vel[:, rows, :, :] = flat.reshape(sub.shape)
    return grid


def grid_update(grid: Grid, cfg: SimConfig) -> Grid:
    """Momentum to velocity, explicit force and gravity step, boundaries."""
    active = grid.mass > cfg.mass_epsilon
    inv_m = np.zeros_like(grid.mass)
    inv_m[active] = 1.0 / grid.mass[active]
    grid.vel = (grid.vel + cfg.dt * grid.force) * inv_m[..., None]
    grid.vel[active] += cfg.dt * np.asarray(cfg.gravity)
    apply_boundary(grid)
    return grid


def g2p(grid: Grid, state: ParticleState, cfg: SimConfig,
        step_index: int | None = None) -> ParticleState:
    """Gather velocities back, update C, trial F and positions."""
    base, w, dw = stencil_arrays(state.x, grid, check=False)
    vel_flat = grid.vel.reshape(-1, 3)
    res = grid.resolution
    strides = np.array([res[1] * res[2], res[2], 1], dtype=np.int64)

    q = state.q
    v_new = np.zeros((q, 3))
    c_new = np.zeros((q, 3, 3))
    grad_v = np.zeros((q, 3, 3))
    for i, j, k in _OFFSETS:
        wq = w[:, 0, i] * w[:, 1, j] * w[:, 2, k]
        gw = np.stack([
            dw[:, 0, i] * w[:, 1, j] * w[:, 2, k],
            w[:, 0, i] * dw[:, 1, j] * w[:, 2, k],
            w[:, 0, i] * w[:, 1, j] * dw[:, 2, k],
        ], axis=1)
        node = base + np.array([i, j, k], dtype=np.int64)
        flat = node @ strides
        vg = vel_flat[flat]
        node_pos = grid.origin + node * grid.dx
        dpos = node_pos - state.x
        v_new += wq[:, None] * vg
        c_new += wq[:, None, None] * vg[:, :, None] * dpos[:, None, :]
        grad_v += vg[:, :, None] * gw[:, None, :]
    c_new *= 4.0 / grid.dx**2

    f_trial = (np.eye(3) + cfg.dt * grad_v) @ state.F
    dets = np.linalg.det(f_trial)
    bad = np.flatnonzero(dets <= 0)
    if bad.size:
        raise InversionError(bad[0], dets[bad[0]], step=step_index)
    return ParticleState(
        x=state.x + cfg.dt * v_new, v=v_new, F=f_trial, C=c_new,
        m=state.m, vol=state.vol,
    )
