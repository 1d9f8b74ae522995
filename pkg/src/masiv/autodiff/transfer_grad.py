"""Hand-derived reverse-mode adjoint of one grid transfer.

One transfer maps particle state (x, v, F, C) plus first Piola stress P to
(x', v', F_trial, C') through scatter, grid momentum update, boundary
projection and gather.  The adjoint below propagates output cotangents back
to all five inputs, including the dependence of the interpolation weights
and their gradients on particle positions (which needs the spline second
derivatives).  A vectorized numpy implementation is kept as the portable
reference; the compiled backend routes the two particle loops through
Cython kernels and is checked against this one in the tests.
"""

from __future__ import annotations

import numpy as np

from ..types import (BC_OPEN, BC_SEPARATE, BC_STICKY, BOUNDARY_BAND, Grid,
                     SimConfig)
from ..mpm import backend
from ..mpm.step_numpy import _FACE_AXIS
from ..mpm.weights import stencil_arrays

_OFF = np.stack(np.meshgrid(np.arange(3), np.arange(3), np.arange(3),
                            indexing="ij"), axis=-1).reshape(27, 3)
# Second derivative of the quadratic spline per offset, before 1/dx^2.
_DD = np.array([1.0, -2.0, 1.0])


def stencil_products(x: np.ndarray, grid: Grid, check: bool = True,
                     need_hess: bool = False):
    """Per-particle 27-node stencil: flat ids, weights, gradients, offsets.

    Returns a dict with flat (Q,27) int64 node ids, wq (Q,27), gw (Q,27,3),
    dpos (Q,27,3) and, when requested, the weight Hessians hw (Q,27,3,3).
    """
    base, w, dw = stencil_arrays(x, grid, check=check)
    res = grid.resolution
    strides = np.array([res[1] * res[2], res[2], 1], dtype=np.int64)
    node = base[:, None, :] + _OFF[None, :, :]
    flat = node @ strides
    dpos = grid.origin + node * grid.dx - x[:, None, :]

    wx = w[:, 0, _OFF[:, 0]]
    wy = w[:, 1, _OFF[:, 1]]
    wz = w[:, 2, _OFF[:, 2]]
    dx_ = dw[:, 0, _OFF[:, 0]]
    dy_ = dw[:, 1, _OFF[:, 1]]
    dz_ = dw[:, 2, _OFF[:, 2]]
    out = {
        "flat": flat,
        "wq": wx * wy * wz,
        "gw": np.stack([dx_ * wy * wz, wx * dy_ * wz, wx * wy * dz_], axis=2),
        "dpos": dpos,
    }
    if need_hess:
        inv2 = 1.0 / grid.dx ** 2
        ddx = _DD[_OFF[:, 0]][None, :] * inv2
        ddy = _DD[_OFF[:, 1]][None, :] * inv2
        ddz = _DD[_OFF[:, 2]][None, :] * inv2
        h = np.empty(flat.shape + (3, 3))
        h[..., 0, 0] = ddx * wy * wz
        h[..., 1, 1] = wx * ddy * wz
        h[..., 2, 2] = wx * wy * ddz
        h[..., 0, 1] = h[..., 1, 0] = dx_ * dy_ * wz
        h[..., 0, 2] = h[..., 2, 0] = dx_ * wy * dz_
        h[..., 1, 2] = h[..., 2, 1] = wx * dy_ * dz_
        out["hw"] = h
    return out


def _face_regions(grid: Grid):
    """Ordered boundary stages as (kind, flat node index array, normal, mu)."""
    res = grid.resolution
    idx = np.arange(res[0] * res[1] * res[2], dtype=np.int64)
    idx3 = idx.reshape(res)
    stages = []
    bc = grid.boundary
    for face, kind in bc.faces.items():
        if kind == BC_OPEN:
            continue
        axis = _FACE_AXIS[face]
        is_min = face.endswith("min")
        sl = [slice(None)] * 3
        sl[axis] = slice(0, BOUNDARY_BAND) if is_min else \
            slice(res[axis] - BOUNDARY_BAND, None)
        normal = np.zeros(3)
        normal[axis] = 1.0 if is_min else -1.0
        stages.append((kind, idx3[tuple(sl)].reshape(-1), normal, bc.friction))
    if bc.floor_height is not None:
        ys = grid.node_positions_axis(1)
        rows = np.flatnonzero(ys <= bc.floor_height)
        if rows.size:
            normal = np.array([0.0, 1.0, 0.0])
            stages.append((bc.floor_kind, idx3[:, rows, :].reshape(-1),
                           normal, bc.floor_friction))
    return stages


def _separate_vjp(v_in, ubar, normal, mu):
    """Cotangent through the frictional non-penetration projection."""
    vn = v_in @ normal
    out = ubar.copy()
    inward = vn < 0.0
    if not np.any(inward):
        return out
    vi = v_in[inward]
    vni = vn[inward]
    vt = vi - vni[:, None] * normal
    tn = np.linalg.norm(vt, axis=1)
    g = ubar[inward]
    res = np.zeros_like(g)
    live = tn > 0.0
    if np.any(live):
        scale = 1.0 + mu * vni[live] / tn[live]
        open_ = scale > 0.0
        if np.any(open_):
            sub = np.flatnonzero(live)[open_]
            s = scale[open_]
            t = vt[sub]
            n3 = tn[sub]
            gs = g[sub]
            td = np.einsum("qi,qi->q", t, gs)
            res[sub] = (s[:, None] * (gs - (gs @ normal)[:, None] * normal)
                        + (td * mu / n3)[:, None] * normal
                        - (td * mu * vni[sub] / n3 ** 3)[:, None] * t)
    out[inward] = res
    return out


def boundary_vjp(grid: Grid, u_pre: np.ndarray, ubar: np.ndarray):
    """Adjoint of the in-place boundary projection on flat node velocities.

    Stages are replayed forward to recover each stage's input, then their
    vector-Jacobian products are applied in reverse order.
    """
    stages = _face_regions(grid)
    inputs = []
    v = u_pre.copy()
    for kind, idx, normal, mu in stages:
        inputs.append(v[idx].copy())
        if kind == BC_STICKY:
            v[idx] = 0.0
        else:
            sub = v[idx]
            vn = sub @ normal
            inward = vn < 0.0
            vt = sub - vn[:, None] * normal
            tn = np.linalg.norm(vt, axis=1)
            scale = np.zeros_like(tn)
            nz = tn > 0.0
            scale[nz] = np.maximum(0.0, 1.0 + mu * vn[nz] / tn[nz])
            proj = vt * scale[:, None]
            v[idx] = np.where(inward[:, None], proj, sub)
    g = ubar.copy()
    for (kind, idx, normal, mu), v_in in zip(reversed(stages),
                                             reversed(inputs)):
        if kind == BC_STICKY:
            g[idx] = 0.0
        else:
            g[idx] = _separate_vjp(v_in, g[idx], normal, mu)
    return g


def _forward_grid(x, v, F, C, P, m, vol, grid: Grid, cfg: SimConfig):
    """Recompute node mass, momentum, force and pre/post boundary velocity."""
    from ..types import ParticleState
    st = ParticleState(x=x, v=v, F=F, C=C, m=m, vol=vol)
    backend.p2g(st, P, grid, cfg)
    n = grid.mass.size
    mass = grid.mass.reshape(n).copy()
    mom = grid.vel.reshape(n, 3).copy()
    force = grid.force.reshape(n, 3).copy()
    active = mass > cfg.mass_epsilon
    u_pre = np.zeros((n, 3))
    u_pre[active] = ((mom[active] + cfg.dt * force[active])
                     / mass[active][:, None]
                     + cfg.dt * np.asarray(cfg.gravity))
    u_post = u_pre.copy()
    stages = _face_regions(grid)
    for kind, idx, normal, mu in stages:
        if kind == BC_STICKY:
            u_post[idx] = 0.0
        else:
            sub = u_post[idx]
            vn = sub @ normal
            inward = vn < 0.0
            vt = sub - vn[:, None] * normal
            tn = np.linalg.norm(vt, axis=1)
            scale = np.zeros_like(tn)
            nz = tn > 0.0
            scale[nz] = np.maximum(0.0, 1.0 + mu * vn[nz] / tn[nz])
            u_post[idx] = np.where(inward[:, None], vt * scale[:, None], sub)
    return mass, mom, force, active, u_pre, u_post


def transfer_vjp_numpy(x, v, F, C, P, m, vol, grid: Grid, cfg: SimConfig,
                       xbar_out, vbar_out, fbar_out, cbar_out):
    """Gradients of one transfer w.r.t. its inputs.

    ``xbar_out`` etc. are the cotangents of (x', v', F_trial, C').  Returns
    (xbar, vbar, Fbar, Cbar, Pbar).
    """
    q = x.shape[0]
    dt = cfg.dt
    kappa = 4.0 / grid.dx ** 2
    mass, mom, force, active, u_pre, u_post = _forward_grid(
        x, v, F, C, P, m, vol, grid, cfg)
    st = stencil_products(x, grid, check=False, need_hess=True)
    flat, wq, gw, dpos, hw = (st["flat"], st["wq"], st["gw"], st["dpos"],
                              st["hw"])
    ug = u_post[flat]                                        # (Q,27,3)

    # Gather-side adjoint: push output cotangents onto node velocities.
    vb = vbar_out + dt * xbar_out                            # (Q,3)
    gbar = dt * np.matmul(fbar_out, np.transpose(F, (0, 2, 1)))
    bbar = kappa * cbar_out
    ubar_p = (wq[..., None] * vb[:, None, :]
              + wq[..., None] * np.matmul(dpos, np.transpose(bbar, (0, 2, 1)))
              + np.matmul(gw, np.transpose(gbar, (0, 2, 1))))
    ubar = np.zeros_like(u_post)
    np.add.at(ubar, flat.reshape(-1), ubar_p.reshape(-1, 3))

    # Direct position terms of the gather (at fixed node velocities).
    s1 = np.einsum("qni,qi->qn", ug, vb)
    s2 = np.einsum("qni,qij,qnj->qn", ug, bbar, dpos)
    xbar = xbar_out + np.einsum("qn,qni->qi", s1 + s2, gw)
    xbar -= np.einsum("qn,qij,qnj->qi", wq, np.transpose(bbar, (0, 2, 1)), ug)
    gtu = np.einsum("qji,qnj->qni", gbar, ug)
    xbar += np.einsum("qnij,qnj->qi", hw, gtu)

    grad_v = np.einsum("qni,qnj->qij", ug, gw)
    fbar = np.matmul(np.transpose(np.eye(3) + dt * grad_v, (0, 2, 1)),
                     fbar_out)

    # Grid-side adjoint: through boundary projection and momentum update.
    ubar = boundary_vjp(grid, u_pre, ubar)
    qbar = np.zeros_like(ubar)
    fgbar = np.zeros_like(ubar)
    mbar = np.zeros(mass.shape)
    inv_m = 1.0 / mass[active]
    qbar[active] = ubar[active] * inv_m[:, None]
    fgbar[active] = dt * ubar[active] * inv_m[:, None]
    u_nog = (mom[active] + dt * force[active]) * inv_m[:, None]
    mbar[active] = -np.einsum("ni,ni->n", u_nog, ubar[active]) * inv_m

    # Scatter-side adjoint: gather node cotangents back to particles.
    qb = qbar[flat]                                          # (Q,27,3)
    fb = fgbar[flat]
    mb = mbar[flat]                                          # (Q,27)
    aff = v[:, None, :] + np.matmul(dpos, np.transpose(C, (0, 2, 1)))
    mq = np.einsum("qni,qni->qn", aff, qb)
    xbar += m[:, None] * np.einsum("qn,qni->qi", mb + mq, gw)
    xbar -= m[:, None] * np.einsum("qn,qji,qnj->qi", wq, C, qb)
    vbar = m[:, None] * np.einsum("qn,qni->qi", wq, qb)
    cbar = m[:, None, None] * np.einsum("qn,qni,qnj->qij", wq, qb, dpos)
    A = np.matmul(P, np.transpose(F, (0, 2, 1)))
    abar = -vol[:, None, None] * np.einsum("qni,qnj->qij", fb, gw)
    atf = np.einsum("qji,qnj->qni", A, fb)
    xbar -= vol[:, None] * np.einsum("qnij,qnj->qi", hw, atf)
    pbar = np.matmul(abar, F)
    fbar += np.matmul(abar.transpose(0, 2, 1), P)
    return xbar, vbar, fbar, cbar, pbar


def transfer_vjp(x, v, F, C, P, m, vol, grid: Grid, cfg: SimConfig,
                 xbar_out, vbar_out, fbar_out, cbar_out):
    """Dispatch the transfer adjoint to the compiled kernels when present."""
    if not backend.HAVE_COMPILED:
        return transfer_vjp_numpy(x, v, F, C, P, m, vol, grid, cfg,
                                  xbar_out, vbar_out, fbar_out, cbar_out)
    _k = backend._kernels
    q = x.shape[0]
    dt = cfg.dt
    kappa = 4.0 / grid.dx ** 2
    nt = backend.get_num_threads()
    c = np.ascontiguousarray
    x, v, F, C, P = c(x), c(v), c(F), c(C), c(P)
    mass, mom, force, active, u_pre, u_post = _forward_grid(
        x, v, F, C, P, m, vol, grid, cfg)

    vb = c(vbar_out + dt * xbar_out)
    gbar = c(dt * np.matmul(fbar_out, np.transpose(F, (0, 2, 1))))
    bbar = c(kappa * cbar_out)
    xbar = c(np.array(xbar_out, dtype=np.float64))
    grad_v = np.empty((q, 3, 3))
    ubar = np.zeros_like(u_post)
    res = grid.resolution
    geo = (grid.dx, grid.origin[0], grid.origin[1], grid.origin[2],
           res[0], res[1], res[2])
    _k.adjoint_g2p_scatter(x, u_post, vb, gbar, bbar, xbar, grad_v, ubar,
                           *geo, nt)
    fbar = np.matmul(np.transpose(np.eye(3) + dt * grad_v, (0, 2, 1)),
                     fbar_out)

    ubar = boundary_vjp(grid, u_pre, ubar)
    qbar = np.zeros_like(ubar)
    fgbar = np.zeros_like(ubar)
    mbar = np.zeros(mass.shape)
    inv_m = 1.0 / mass[active]
    qbar[active] = ubar[active] * inv_m[:, None]
    fgbar[active] = dt * ubar[active] * inv_m[:, None]
    u_nog = (mom[active] + dt * force[active]) * inv_m[:, None]
    mbar[active] = -np.einsum("ni,ni->n", u_nog, ubar[active]) * inv_m

    A = c(np.matmul(P, np.transpose(F, (0, 2, 1))))
    vbar = np.empty((q, 3))
    cbar = np.empty((q, 3, 3))
    abar = np.empty((q, 3, 3))
    _k.adjoint_p2g_gather(x, v, C, A, c(m), c(vol), qbar, fgbar, mbar,
                          xbar, vbar, cbar, abar, *geo, nt)
    pbar = np.matmul(abar, F)
    fbar += np.matmul(abar.transpose(0, 2, 1), P)
    return xbar, vbar, fbar, cbar, pbar
