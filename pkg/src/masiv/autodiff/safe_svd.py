"""Batched 3x3 SVD with proper rotations and a degeneracy-safe adjoint."""

from __future__ import annotations

import numpy as np
import torch

from ..errors import NumericalError
from ..mpm import backend as _backend

# Regularizer for the 1/(s_j^2 - s_i^2) factors in the adjoint.  Coincident
# singular value pairs contribute zero instead of blowing up.
_DENOM_EPS = 1e-16

# Pairs closer than this are counted as degenerate (diagnostics only).
DEGENERACY_TOL = 1e-8

_degenerate_batches = 0


def degenerate_count() -> int:
    """How many safe_svd backward calls hit a near-coincident pair so far."""
    return _degenerate_batches


def reset_degenerate_count():
    global _degenerate_batches
    _degenerate_batches = 0


class _SafeSVD(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a):
        if (_backend.HAVE_COMPILED and a.dtype == torch.float64
                and a.dim() == 3 and a.shape[-2:] == (3, 3)):
            an = a.detach().numpy()
            if not an.flags["C_CONTIGUOUS"]:
                an = np.ascontiguousarray(an)
            q = an.shape[0]
            un = np.empty((q, 3, 3))
            sn = np.empty((q, 3))
            vtn = np.empty((q, 3, 3))
            _backend._kernels.svd3_batch(an, un, sn, vtn,
                                         _backend.get_num_threads())
            u = torch.from_numpy(un)
            s = torch.from_numpy(sn)
            vt = torch.from_numpy(vtn)
        else:
            try:
                u, s, vt = torch.linalg.svd(a)
            except Exception as exc:  # LAPACK failure
                raise NumericalError(
                    f"SVD failed: {exc}; batch shape {tuple(a.shape)}")
            # Make U and V proper rotations; for det(a) > 0 both dets share
            # sign, so flipping the last column of each keeps all singular
            # values >= 0.
            s = s.clone()
            du = torch.det(u)
            dv = torch.det(vt)
            flip_u = du < 0
            flip_v = dv < 0
            u = u.clone()
            vt = vt.clone()
            u[flip_u, :, 2] *= -1.0
            s[flip_u, 2] *= -1.0
            vt[flip_v, 2, :] *= -1.0
            s[flip_v, 2] *= -1.0
        ctx.save_for_backward(u, s, vt)
        return u, s, vt

    @staticmethod
    def backward(ctx, gu, gs, gvt):
        global _degenerate_batches
        u, s, vt = ctx.saved_tensors
        if u.dim() == 3 and u.dtype == torch.float64 and not u.is_cuda:
            un, sn, vtn = u.numpy(), s.numpy(), vt.numpy()
            s2 = sn * sn
            diff = s2[:, None, :] - s2[:, :, None]
            if (np.abs(diff)[:, ~np.eye(3, dtype=bool)]
                    < DEGENERACY_TOL).any():
                _degenerate_batches += 1
            f = diff / (diff * diff + _DENOM_EPS)
            f[:, np.arange(3), np.arange(3)] = 0.0
            ga = np.zeros_like(un)
            ga[:, np.arange(3), np.arange(3)] = \
                gs.numpy() if gs is not None else 0.0
            if gu is not None:
                ut_gu = np.matmul(un.transpose(0, 2, 1), gu.numpy())
                ga += (f * (ut_gu - ut_gu.transpose(0, 2, 1))) * sn[:, None, :]
            if gvt is not None:
                vt_gv = np.matmul(vtn, gvt.numpy().transpose(0, 2, 1))
                ga += sn[:, :, None] * (f * (vt_gv - vt_gv.transpose(0, 2, 1)))
            return torch.from_numpy(
                np.matmul(np.matmul(un, ga), vtn))
        v = vt.transpose(-1, -2)
        gv = gvt.transpose(-1, -2)

        s2 = s * s
        diff = s2.unsqueeze(-2) - s2.unsqueeze(-1)  # diff[i,j] = s_j^2 - s_i^2
        if (diff.abs() + torch.eye(3, dtype=s.dtype).abs() * 1e30
                < DEGENERACY_TOL).any():
            _degenerate_batches += 1
        f = diff / (diff * diff + _DENOM_EPS)
        f = f * (1.0 - torch.eye(3, dtype=s.dtype))

        ga = torch.diag_embed(gs)
        if gu is not None:
            ut_gu = u.transpose(-1, -2) @ gu
            j = f * (ut_gu - ut_gu.transpose(-1, -2))
            ga = ga + j @ torch.diag_embed(s)
        if gv is not None:
            vt_gv = vt @ gv
            k = f * (vt_gv - vt_gv.transpose(-1, -2))
            ga = ga + torch.diag_embed(s) @ k
        return u @ ga @ vt


def safe_svd(a: torch.Tensor):
    """Proper-rotation SVD of a (..., 3, 3) batch: a = U diag(S) V^T.

    The backward pass regularizes the singular-value-gap denominators so
    gradients stay finite at (near-)coincident singular values; such events
    are counted and readable via ``degenerate_count``.
    """
    return _SafeSVD.apply(a)
