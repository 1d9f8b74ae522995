"""Backend selection: compiled OpenMP kernels when available, numpy otherwise.

Set MASIV_BACKEND=numpy to force the fallback; MASIV_THREADS (or
``set_num_threads``) controls the compiled backend's worker count.  One
worker keeps the historical single-ordering accumulation and is the default.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import InversionError, OutOfDomainError
from ..types import Grid, ParticleState, SimConfig
from . import step_numpy
from .weights import SAFE_MARGIN

try:
    if os.environ.get("MASIV_BACKEND", "").lower() == "numpy":
        _kernels = None
    else:
        from . import _kernels
except ImportError:
    _kernels = None

HAVE_COMPILED = _kernels is not None

_n_threads = 1


def set_num_threads(n: int):
    global _n_threads
    _n_threads = max(1, int(n))


def get_num_threads() -> int:
    return _n_threads


def _init_threads_from_env():
    env = os.environ.get("MASIV_THREADS")
    if env:
        try:
            set_num_threads(int(env))
        except ValueError:
            pass


_init_threads_from_env()


def backend_name() -> str:
    return "compiled" if HAVE_COMPILED else "numpy"


def _check_domain(x: np.ndarray, grid: Grid):
    xrel = (x - grid.origin) / grid.dx
    res = np.asarray(grid.resolution, dtype=np.float64)
    bad = np.flatnonzero(np.any(
        (xrel < SAFE_MARGIN) | (xrel > (res - 1.0) - SAFE_MARGIN), axis=1))
    if bad.size:
        raise OutOfDomainError(bad[0], x[bad[0]])


def det3x3(F: np.ndarray) -> np.ndarray:
    """Closed-form batched determinant, cheaper than np.linalg.det."""
    return (
        F[..., 0, 0] * (F[..., 1, 1] * F[..., 2, 2] - F[..., 1, 2] * F[..., 2, 1])
        - F[..., 0, 1] * (F[..., 1, 0] * F[..., 2, 2] - F[..., 1, 2] * F[..., 2, 0])
        + F[..., 0, 2] * (F[..., 1, 0] * F[..., 2, 1] - F[..., 1, 1] * F[..., 2, 0])
    )


def p2g(state: ParticleState, P: np.ndarray, grid: Grid, cfg: SimConfig) -> Grid:
    if not HAVE_COMPILED:
        return step_numpy.p2g(state, P, grid, cfg)
    _check_domain(state.x, grid)
    grid.clear()
    A = np.ascontiguousarray(
        np.einsum("qij,qkj->qik", np.asarray(P, dtype=np.float64), state.F))
    rx, ry, rz = grid.resolution
    _kernels.p2g_scatter(
        state.x, state.v, state.F, state.C, state.m, state.vol, A,
        grid.mass.reshape(-1), grid.vel.reshape(-1, 3),
        grid.force.reshape(-1, 3),
        grid.dx, grid.origin[0], grid.origin[1], grid.origin[2],
        rx, ry, rz, _n_threads)
    return grid


def grid_update(grid: Grid, cfg: SimConfig) -> Grid:
    if not HAVE_COMPILED:
        return step_numpy.grid_update(grid, cfg)
    gx, gy, gz = cfg.gravity
    _kernels.grid_momentum_to_velocity(
        grid.mass.reshape(-1), grid.vel.reshape(-1, 3),
        grid.force.reshape(-1, 3), cfg.dt, gx, gy, gz,
        cfg.mass_epsilon, _n_threads)
    step_numpy.apply_boundary(grid)
    return grid


def g2p(grid: Grid, state: ParticleState, cfg: SimConfig,
        step_index=None) -> ParticleState:
    if not HAVE_COMPILED:
        return step_numpy.g2p(grid, state, cfg, step_index=step_index)
    q = state.q
    x_new = np.empty((q, 3))
    v_new = np.empty((q, 3))
    c_new = np.empty((q, 3, 3))
    f_trial = np.empty((q, 3, 3))
    rx, ry, rz = grid.resolution
    _kernels.g2p_gather(
        state.x, state.F, grid.vel.reshape(-1, 3),
        x_new, v_new, c_new, f_trial,
        grid.dx, grid.origin[0], grid.origin[1], grid.origin[2],
        rx, ry, rz, cfg.dt, _n_threads)
    dets = det3x3(f_trial)
    bad = np.flatnonzero(dets <= 0)
    if bad.size:
        raise InversionError(bad[0], dets[bad[0]], step=step_index)
    return ParticleState(x=x_new, v=v_new, F=f_trial, C=c_new,
                         m=state.m, vol=state.vol)
