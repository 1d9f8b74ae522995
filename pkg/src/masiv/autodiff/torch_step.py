"""Differentiable torch mirror of the MPM transfer.

Implements exactly the same physics as the fast forward backends (tested for
agreement to ~1e-13) with every operation expressed through torch autograd,
so a full rollout can be differentiated in reverse mode.  Grid work happens
on a per-step bounding-box subgrid of the touched nodes; nodes outside it
carry zero mass, so results match the dense grid exactly.
"""

from __future__ import annotations

from itertools import product
from typing import Callable, NamedTuple

import numpy as np
import torch

from ..errors import InversionError, OutOfDomainError
from ..mpm.weights import SAFE_MARGIN
from ..types import (BC_OPEN, BC_SEPARATE, BC_STICKY, BOUNDARY_BAND, Grid,
                     ParticleState, SimConfig)


class TState(NamedTuple):
    """Differentiable particle state tensors."""

    x: torch.Tensor
    v: torch.Tensor
    F: torch.Tensor
    C: torch.Tensor

    def detached(self) -> "TState":
        return TState(*(t.detach().clone() for t in self))

    @staticmethod
    def from_numpy(state: ParticleState) -> "TState":
        return TState(
            torch.from_numpy(state.x.copy()),
            torch.from_numpy(state.v.copy()),
            torch.from_numpy(state.F.copy()),
            torch.from_numpy(state.C.copy()),
        )

    def to_numpy(self, m: np.ndarray, vol: np.ndarray) -> ParticleState:
        return ParticleState(
            x=self.x.detach().numpy().copy(),
            v=self.v.detach().numpy().copy(),
            F=self.F.detach().numpy().copy(),
            C=self.C.detach().numpy().copy(),
            m=m.copy(), vol=vol.copy(),
        )


def det3x3_t(f: torch.Tensor) -> torch.Tensor:
    return (
        f[..., 0, 0] * (f[..., 1, 1] * f[..., 2, 2] - f[..., 1, 2] * f[..., 2, 1])
        - f[..., 0, 1] * (f[..., 1, 0] * f[..., 2, 2] - f[..., 1, 2] * f[..., 2, 0])
        + f[..., 0, 2] * (f[..., 1, 0] * f[..., 2, 1] - f[..., 1, 1] * f[..., 2, 0])
    )


_FACES = (("xmin", 0, True), ("xmax", 0, False), ("ymin", 1, True),
          ("ymax", 1, False), ("zmin", 2, True), ("zmax", 2, False))


class TorchSim:
    """Precomputed grid geometry + differentiable step for a fixed scene."""

    def __init__(self, grid: Grid, cfg: SimConfig, m: np.ndarray,
                 vol: np.ndarray):
        self.cfg = cfg
        self.res = grid.resolution
        self.dx = grid.dx
        self.boundary = grid.boundary
        self.origin = torch.from_numpy(
            np.asarray(grid.origin, dtype=np.float64).copy())
        self.m = torch.from_numpy(np.asarray(m, dtype=np.float64).copy())
        self.vol = torch.from_numpy(np.asarray(vol, dtype=np.float64).copy())
        self.gravity = torch.tensor(cfg.gravity, dtype=torch.float64)
        self.offsets = torch.tensor(
            list(product(range(3), range(3), range(3))), dtype=torch.int64)
        self.eye = torch.eye(3, dtype=torch.float64)
        self.res_t = torch.tensor(self.res, dtype=torch.float64)

    # -- stencil on the touched-node subgrid ------------------------------

    def _stencil(self, x: torch.Tensor, check: bool = True):
        xrel = (x - self.origin) / self.dx
        with torch.no_grad():
            if check:
                bad = ((xrel < SAFE_MARGIN)
                       | (xrel > (self.res_t - 1.0) - SAFE_MARGIN)).any(dim=1)
                if bad.any():
                    p = int(bad.nonzero()[0, 0])
                    raise OutOfDomainError(p, x[p].detach().numpy())
            base = torch.floor(xrel - 0.5).to(torch.int64)    # (Q,3)
            lo = base.amin(dim=0)                              # subgrid corner
            hi = base.amax(dim=0) + 2
            sub_res = hi - lo + 1
            strides = torch.tensor(
                [int(sub_res[1] * sub_res[2]), int(sub_res[2]), 1],
                dtype=torch.int64)
            nodes = base.unsqueeze(1) + self.offsets.unsqueeze(0)  # (Q,27,3)
            flat = ((nodes - lo) * strides).sum(-1)                # (Q,27)
            n_sub = int(sub_res.prod())
            # World coordinates of every subgrid node, (n_sub, 3).
            ii = torch.arange(int(sub_res[0]), dtype=torch.int64)
            jj = torch.arange(int(sub_res[1]), dtype=torch.int64)
            kk = torch.arange(int(sub_res[2]), dtype=torch.int64)
            gi, gj, gk = torch.meshgrid(ii, jj, kk, indexing="ij")
            sub_idx = torch.stack(
                [gi.reshape(-1), gj.reshape(-1), gk.reshape(-1)], dim=1) + lo
        fx = xrel - base.to(torch.float64)
        w = torch.stack([
            0.5 * (1.5 - fx) ** 2,
            0.75 - (fx - 1.0) ** 2,
            0.5 * (fx - 0.5) ** 2,
        ], dim=-1)                                       # (Q,3,3): axis, offset
        dw = torch.stack([
            (fx - 1.5) / self.dx,
            (2.0 - 2.0 * fx) / self.dx,
            (fx - 0.5) / self.dx,
        ], dim=-1)
        offs = self.offsets
        wx = w[:, 0, offs[:, 0]]
        wy = w[:, 1, offs[:, 1]]
        wz = w[:, 2, offs[:, 2]]
        wq = wx * wy * wz                                 # (Q,27)
        gw = torch.stack([
            dw[:, 0, offs[:, 0]] * wy * wz,
            wx * dw[:, 1, offs[:, 1]] * wz,
            wx * wy * dw[:, 2, offs[:, 2]],
        ], dim=-1)                                        # (Q,27,3)
        node_pos = self.origin + nodes.to(torch.float64) * self.dx
        dpos = node_pos - x.unsqueeze(1)                  # (Q,27,3)
        return flat, wq, gw, dpos, n_sub, sub_idx

    # -- boundary on the subgrid ------------------------------------------

    def _apply_boundary(self, vel: torch.Tensor, sub_idx: torch.Tensor):
        bc = self.boundary
        conditions = []
        for face, axis, is_min in _FACES:
            kind = bc.faces[face]
            if kind == BC_OPEN:
                continue
            coord = sub_idx[:, axis]
            mask = (coord < BOUNDARY_BAND) if is_min else \
                (coord >= self.res[axis] - BOUNDARY_BAND)
            if not bool(mask.any()):
                continue
            normal = [0.0, 0.0, 0.0]
            normal[axis] = 1.0 if is_min else -1.0
            conditions.append((mask, kind, normal, bc.friction))
        if bc.floor_height is not None:
            y = self.origin[1] + sub_idx[:, 1].to(torch.float64) * self.dx
            mask = y <= bc.floor_height
            if bool(mask.any()):
                conditions.append((mask, bc.floor_kind, [0.0, 1.0, 0.0],
                                   bc.floor_friction))
        for mask, kind, normal, friction in conditions:
            if kind == BC_STICKY:
                vel = torch.where(mask.unsqueeze(1), torch.zeros_like(vel),
                                  vel)
            elif kind == BC_SEPARATE:
                n = torch.tensor(normal, dtype=torch.float64)
                vn = vel @ n
                vt = vel - vn.unsqueeze(1) * n
                vt_norm = vt.norm(dim=1)
                denom = torch.where(vt_norm > 0, vt_norm,
                                    torch.ones_like(vt_norm))
                scale = torch.clamp(
                    1.0 - friction * torch.clamp(-vn, min=0.0) / denom,
                    min=0.0)
                scale = torch.where(vt_norm > 0, scale,
                                    torch.zeros_like(scale))
                projected = vt * scale.unsqueeze(1)
                vel = torch.where((mask & (vn < 0)).unsqueeze(1), projected,
                                  vel)
            else:
                raise ValueError(kind)
        return vel

    # -- one transfer ------------------------------------------------------

    def step(self, state: TState, stress_fn: Callable, return_fn: Callable,
             step_index=None) -> TState:
        cfg = self.cfg
        x, v, f_e, c = state
        P = stress_fn(f_e)
        a = P @ f_e.transpose(-1, -2)

        flat, wq, gw, dpos, n_sub, sub_idx = self._stencil(x)
        q = x.shape[0]
        idx = flat.reshape(-1)

        wm = wq * self.m.unsqueeze(1)                     # (Q,27)
        affine = torch.einsum("qij,qnj->qni", c, dpos)
        mom_src = wm.unsqueeze(-1) * (v.unsqueeze(1) + affine)
        f_src = -self.vol[:, None, None] * torch.einsum("qij,qnj->qni", a, gw)
        src = torch.cat(
            [wm.unsqueeze(-1), mom_src, f_src], dim=-1)   # (Q,27,7)
        acc = torch.zeros(n_sub, 7, dtype=torch.float64)
        acc = acc.index_add(0, idx, src.reshape(-1, 7))
        mass, mom, force = acc[:, 0], acc[:, 1:4], acc[:, 4:7]

        active = mass > cfg.mass_epsilon
        inv_m = torch.where(active, 1.0 / torch.where(
            active, mass, torch.ones_like(mass)), torch.zeros_like(mass))
        vel = (mom + cfg.dt * force) * inv_m.unsqueeze(1)
        vel = vel + (cfg.dt * self.gravity) * active.unsqueeze(1)
        vel = self._apply_boundary(vel, sub_idx)

        vg = vel[idx].reshape(q, 27, 3)
        wvg = wq.unsqueeze(-1) * vg
        v_new = wvg.sum(dim=1)
        c_new = (4.0 / self.dx ** 2) * torch.einsum("qni,qnj->qij", wvg, dpos)
        grad_v = torch.einsum("qni,qnj->qij", vg, gw)
        f_trial = (self.eye + cfg.dt * grad_v) @ f_e
        with torch.no_grad():
            dets = det3x3_t(f_trial)
            if (dets <= 0).any():
                p = int((dets <= 0).nonzero()[0, 0])
                raise InversionError(p, float(dets[p]), step=step_index)
        x_new = x + cfg.dt * v_new
        f_new = return_fn(f_trial)
        return TState(x_new, v_new, f_new, c_new)


# Classical laws in torch, for cross-checks and ground-truth comparisons.

def neo_hookean_stress_t(f, mu, lam):
    fit = torch.linalg.inv(f).transpose(-1, -2)
    j = det3x3_t(f)
    return mu * (f - fit) + lam * torch.log(j)[..., None, None] * fit


def identity_return_t(f_trial):
    return f_trial
