"""Quadratic B-spline interpolation stencils between particles and grid nodes."""

from __future__ import annotations

import numpy as np

from ..errors import OutOfDomainError
from ..types import Grid

# A particle must stay this many cells away from the grid domain edges.
SAFE_MARGIN = 1.5


def stencil_arrays(x: np.ndarray, grid: Grid, check: bool = True):
    """Batched stencil data for positions ``x`` (Q,3).

    Returns (base, w, dw): base node indices (Q,3) int64, per-axis weights
    w (Q,3,3) indexed [particle, axis, offset] and per-axis weight derivatives
    dw (Q,3,3) in 1/m.  The 27 trilinear weights are products over axes.
    """
    x = np.asarray(x, dtype=np.float64)
    xrel = (x - grid.origin) / grid.dx
    if check:
        res = np.asarray(grid.resolution, dtype=np.float64)
        lo = xrel < SAFE_MARGIN
        hi = xrel > (res - 1.0) - SAFE_MARGIN
        bad = np.flatnonzero(np.any(lo | hi, axis=1))
        if bad.size:
            raise OutOfDomainError(bad[0], x[bad[0]])
    base = np.floor(xrel - 0.5).astype(np.int64)
    fx = xrel - base  # in [0.5, 1.5]

    w = np.empty(x.shape + (3,))
    w[..., 0] = 0.5 * (1.5 - fx) ** 2
    w[..., 1] = 0.75 - (fx - 1.0) ** 2
    w[..., 2] = 0.5 * (fx - 0.5) ** 2

    dw = np.empty_like(w)
    dw[..., 0] = (fx - 1.5) / grid.dx
    dw[..., 1] = (2.0 - 2.0 * fx) / grid.dx
    dw[..., 2] = (fx - 0.5) / grid.dx
    return base, w, dw


def bspline_weights(xp, grid: Grid):
    """Stencil for a single particle position.

    Returns (base, w, dw) with base (3,), w and dw (3,3) indexed
    [axis, offset].  Weights along each axis sum to 1 and derivatives to 0.
    Raises OutOfDomainError when the particle is closer than 1.5 cells to the
    domain boundary.
    """
    base, w, dw = stencil_arrays(np.asarray(xp, dtype=np.float64)[None], grid)
    return base[0], w[0], dw[0]
