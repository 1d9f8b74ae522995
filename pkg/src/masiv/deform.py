"""Motion-basis deformation field: canonical cloud to per-time positions.

Positions at time t are x(t) = x* + w(x*, t) . B(t) where B(t) is a bank of
shared time-varying 3-vector bases and w are per-particle blending
coefficients.  Both come from small perceptrons over sinusoidal embeddings.
The field is fitted to sparse frames by symmetric Chamfer distance and then
queried densely between frames, giving temporally dense trajectories with
persistent particle identity from sparse, unordered observations.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.interpolate import CubicSpline

from .errors import DivergedError, FormatError, MasivError
from .losses import chamfer, chamfer_t
from .trajectory import TrajectoryDataset

_MAGIC = b"MASIVDEF"
_VERSION = 1


def sin_embed(x: torch.Tensor, n_freq: int) -> torch.Tensor:
    """(sin, cos) features at octave frequencies; input (..., d) -> (..., 2*n_freq*d)."""
    freqs = (2.0 ** torch.arange(n_freq, dtype=x.dtype)) * np.pi
    ang = x.unsqueeze(-1) * freqs                     # (..., d, n_freq)
    out = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
    return out.reshape(*x.shape[:-1], -1)


def _mlp_init(rng, sizes):
    ws = []
    for nin, nout in zip(sizes[:-1], sizes[1:]):
        ws.append(rng.standard_normal((nout, nin)) * np.sqrt(2.0 / nin))
        ws.append(np.zeros(nout))
    return ws


def _mlp_apply(ws, x):
    n_layers = len(ws) // 2
    for i in range(n_layers):
        w = ws[2 * i]
        b = ws[2 * i + 1]
        x = x @ w.T + b
        if i + 1 < n_layers:
            x = torch.tanh(x)
    return x


@dataclass
class DeformField:
    """Fitted motion-basis field over a canonical particle cloud."""

    canonical: np.ndarray               # (Q, 3)
    basis_weights: list                 # MLP weights, time embed -> (B*3)
    coeff_weights: list                 # MLP weights, (space+time embed) -> B
    n_basis: int = 16
    t_max: float = 1.0
    freq_time: int = 6
    freq_space: int = 8
    hidden: int = 128

    def __post_init__(self):
        self.canonical = np.ascontiguousarray(self.canonical, dtype=np.float64)
        if self.canonical.ndim != 2 or self.canonical.shape[1] != 3 \
                or self.canonical.shape[0] == 0:
            raise MasivError("canonical cloud must be a nonempty (Q,3) array")
        if self.n_basis < 1:
            raise ValueError("need at least one motion basis")

    # -- evaluation -------------------------------------------------------

    def _torch_weights(self):
        if not hasattr(self, "_tw"):
            self._tw = ([torch.from_numpy(np.asarray(w)) for w in self.basis_weights],
                        [torch.from_numpy(np.asarray(w)) for w in self.coeff_weights])
        return self._tw

    def deform_t(self, t: float, bw=None, cw=None,
                 canonical: torch.Tensor | None = None) -> torch.Tensor:
        """Differentiable positions at scalar time t."""
        if t < 0.0 or t > self.t_max:
            raise MasivError(
                f"time {t} outside fitted range [0, {self.t_max}]")
        if bw is None or cw is None:
            bw, cw = self._torch_weights()
        xs = canonical if canonical is not None \
            else torch.from_numpy(self.canonical)
        tn = torch.tensor([t / self.t_max], dtype=torch.float64)
        emb_t = sin_embed(tn, self.freq_time)                  # (2*ft,)
        basis = _mlp_apply(bw, emb_t.unsqueeze(0)).reshape(self.n_basis, 3)
        emb_x = sin_embed(xs, self.freq_space)                 # (Q, 6*fs)
        feat = torch.cat(
            [emb_x, emb_t.unsqueeze(0).expand(xs.shape[0], -1)], dim=1)
        w = _mlp_apply(cw, feat)                               # (Q, B)
        return xs + w @ basis

    def deform(self, t: float) -> np.ndarray:
        with torch.no_grad():
            return self.deform_t(t).numpy()

    def sample_dense(self, n_steps: int, tau: float) -> TrajectoryDataset:
        """Positions at t = 0, tau, ..., n_steps*tau (persistent identity)."""
        if n_steps * tau > self.t_max * (1.0 + 1e-12):
            raise MasivError(
                f"{n_steps} steps of {tau} exceed fitted range {self.t_max}")
        times = np.arange(n_steps + 1, dtype=np.float64) * tau
        out = np.empty((n_steps + 1, self.canonical.shape[0], 3))
        with torch.no_grad():
            for i, t in enumerate(times):
                out[i] = self.deform_t(min(float(t), self.t_max)).numpy()
        return TrajectoryDataset(times, out,
                                 metadata={"source": "deform_field"})


def init_field(canonical, t_max, n_basis=16, hidden=128, freq_time=6,
               freq_space=8, seed=0) -> DeformField:
    rng = np.random.default_rng(seed)
    dt_in = 2 * freq_time
    dx_in = 6 * freq_space
    bw = _mlp_init(rng, (dt_in, hidden, hidden, n_basis * 3))
    cw = _mlp_init(rng, (dx_in + dt_in, hidden, hidden, n_basis))
    # Start at the identity map by zeroing the basis output layer only.
    # Zeroing both output layers would also give the identity, but then the
    # gradient of each net is gated by the other's zero output and training
    # starts at a saddle it cannot leave.
    bw[-2] = np.zeros_like(bw[-2])
    return DeformField(np.asarray(canonical, dtype=np.float64), bw, cw,
                       n_basis=n_basis, t_max=float(t_max),
                       freq_time=freq_time, freq_space=freq_space,
                       hidden=hidden)


def _track_frames(clouds):
    """Per-canonical-particle targets by chaining nearest neighbors.

    Frame-to-frame displacements are assumed smaller than the typical point
    spacing, so the nearest neighbor of a particle's previous estimate is a
    good guess for where it went.  The chained targets are only a warm
    start; the Chamfer phase owns the final fit.
    """
    from .losses import nn_indices
    targets = [clouds[0]]
    for cloud in clouds[1:]:
        prev = targets[-1]
        # constant-velocity extrapolation plus a few affine ICP rounds keep
        # the query inside the right nearest-neighbor basin even when
        # per-frame motion rivals the point spacing
        guess = prev if len(targets) < 2 else 2.0 * prev - targets[-2]
        ones = np.ones((len(prev), 1))
        design = np.hstack([prev, ones])
        cur = guess
        for _ in range(5):
            matched = cloud[nn_indices(cur, cloud)]
            coef, *_ = np.linalg.lstsq(design, matched, rcond=None)
            cur = design @ coef
        targets.append(cloud[nn_indices(cur, cloud)])
    return targets


def _hidden_np(ws, x):
    """Activations of the last hidden layer (numpy, tanh units)."""
    n_layers = len(ws) // 2
    for i in range(n_layers - 1):
        x = np.tanh(x @ ws[2 * i].T + ws[2 * i + 1])
    return x


def _als_solve(bw, cw, emb_t, emb_x, disp, n_basis, ridge=1e-10):
    """Exact least-squares update of both output layers in place.

    The predicted displacement is bilinear in the two output layers, so
    with all hidden layers frozen each one has a closed-form solve.  The
    normal equations factor as a sum of Kronecker products over frames,
    which avoids materializing the (K*Q*3, features) design matrix.
    """
    K, Q, _ = disp.shape
    B = n_basis
    Hb = np.hstack([_hidden_np(bw, emb_t), np.ones((K, 1))])     # (K, F+1)
    cfeat = np.stack([
        np.hstack([_hidden_np(cw, np.hstack(
            [emb_x, np.repeat(emb_t[k][None], Q, 0)])), np.ones((Q, 1))])
        for k in range(K)])                                      # (K, Q, F+1)
    Fb = Hb.shape[1]
    Fc = cfeat.shape[2]

    # coefficient output layer: unknown (Fc, B) mixing matrix
    basis = (Hb[:, :-1] @ bw[-2].T + bw[-1]).reshape(K, B, 3)
    G = np.zeros((Fc * B, Fc * B))
    c = np.zeros((Fc, B))
    for k in range(K):
        G += np.kron(cfeat[k].T @ cfeat[k], basis[k] @ basis[k].T)
        c += cfeat[k].T @ (disp[k] @ basis[k].T)
    G[np.diag_indices_from(G)] += ridge * max(1.0, np.trace(G) / (Fc * B))
    M = np.linalg.solve(G, c.reshape(-1)).reshape(Fc, B)
    cw[-2] = M[:-1].T.copy()
    cw[-1] = M[-1].copy()

    # basis output layer: unknown (B, Fb, 3) tensor
    w = cfeat[:, :, :-1] @ cw[-2].T + cw[-1]                     # (K, Q, B)
    G2 = np.zeros((B * Fb, B * Fb))
    c2 = np.zeros((B, Fb, 3))
    for k in range(K):
        G2 += np.kron(w[k].T @ w[k], np.outer(Hb[k], Hb[k]))
        c2 += np.einsum("bj,f->bfj", w[k].T @ disp[k], Hb[k])
    G2[np.diag_indices_from(G2)] += ridge * max(1.0, np.trace(G2) / (B * Fb))
    N = np.linalg.solve(G2, c2.reshape(B * Fb, 3)).reshape(B, Fb, 3)
    for b in range(B):
        for j in range(3):
            bw[-2][b * 3 + j] = N[b, :-1, j]
            bw[-1][b * 3 + j] = N[b, -1, j]


def fit(frames, n_basis=16, iterations=200, lr=1e-3, hidden=128,
        seed=0, refine_iterations=1200, freq_time=3, freq_space=8,
        verbose=False):
    """Fit a DeformField to (time, cloud) frames by summed Chamfer distance.

    The canonical cloud is the first frame's continuum.  Raw Chamfer from a
    cold start settles into permutation-defect minima whenever per-frame
    motion rivals the point spacing, so the fit warm starts on explicit
    targets: clouds are tracked frame to frame (extrapolated nearest
    neighbors with affine ICP alignment), then the networks are trained on
    those targets by alternating closed-form output-layer solves with Adam
    refinement of the hidden layers.  A final low-rate pass minimizes the
    summed symmetric Chamfer objective proper.  Returns the field and the
    final per-frame Chamfer values; aborts with the last finite iterate if
    the loss goes non-finite.
    """
    if len(frames) < 2:
        raise MasivError("need at least two frames to fit a deformation")
    times = [float(t) for t, _ in frames]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise MasivError("frame times must be strictly increasing")
    clouds = [np.asarray(c, dtype=np.float64) for _, c in frames]
    t_max = times[-1]
    fld = init_field(clouds[0], t_max, n_basis=n_basis, hidden=hidden,
                     freq_time=freq_time, freq_space=freq_space, seed=seed)
    # the identity init zeroes the basis output layer, which is a fixed
    # point of the alternating solve; break it with a small random draw
    fld.basis_weights[-2] = np.random.default_rng(seed + 1).normal(
        0.0, 0.1, fld.basis_weights[-2].shape)

    tracked_np = _track_frames(clouds)
    # supervise at interior times too, from per-particle cubic interpolation
    # of the tracked curves: the frame fit alone leaves the field free to
    # oscillate between frames, which ruins dense trajectory queries
    spline = CubicSpline(times, np.stack(tracked_np), axis=0)
    sup_times = []
    for a, b in zip(times[:-1], times[1:]):
        sup_times += [a, a + (b - a) / 3.0, a + 2.0 * (b - a) / 3.0]
    sup_times.append(times[-1])
    targets_np = spline(np.asarray(sup_times))
    disp = targets_np - clouds[0][None]
    with torch.no_grad():
        tn = torch.tensor([[t / t_max] for t in sup_times],
                          dtype=torch.float64)
        emb_t = sin_embed(tn, freq_time).numpy()
        emb_x = sin_embed(torch.from_numpy(clouds[0]), freq_space).numpy()

    tracked = [torch.from_numpy(c.copy()) for c in targets_np]
    adam_per_cycle = 150
    cycles = max(1, refine_iterations // adam_per_cycle)
    bwn = [w.copy() for w in fld.basis_weights]
    cwn = [w.copy() for w in fld.coeff_weights]
    nb = len(bwn)
    for cyc in range(cycles):
        _als_solve(bwn, cwn, emb_t, emb_x, disp, n_basis)
        params = [torch.from_numpy(w.copy()).requires_grad_(True)
                  for w in bwn + cwn]
        opt = torch.optim.Adam(params, lr=0.3 * lr)
        total = None
        for it in range(adam_per_cycle):
            total = None
            for t, tgt in zip(sup_times, tracked):
                xs = fld.deform_t(t, bw=params[:nb], cw=params[nb:])
                term = ((xs - tgt) ** 2).sum(dim=1).mean()
                total = term if total is None else total + term
            opt.zero_grad()
            total.backward()
            opt.step()
        bwn = [p.detach().numpy().copy() for p in params[:nb]]
        cwn = [p.detach().numpy().copy() for p in params[nb:]]
        if verbose:
            print(f"  deform refine cycle {cyc}: "
                  f"mse sum {float(total.detach()):.3e}")
    _als_solve(bwn, cwn, emb_t, emb_x, disp, n_basis)

    params = [torch.from_numpy(w.copy()).requires_grad_(True)
              for w in bwn + cwn]
    opt = torch.optim.Adam(params, lr=0.05 * lr)
    best = [w.detach().clone() for w in params]
    best_loss = float("inf")
    for it in range(iterations):
        total = None
        for t, cloud in zip(times, clouds):
            xs = fld.deform_t(t, bw=params[:nb], cw=params[nb:])
            term = chamfer_t(xs, cloud)
            total = term if total is None else total + term
        lv = float(total.detach())
        if not np.isfinite(lv):
            break    # keep the last finite iterate
        if lv < best_loss:
            best_loss = lv
            best = [w.detach().clone() for w in params]
        opt.zero_grad()
        total.backward()
        opt.step()
        if verbose and it % 50 == 0:
            print(f"  deform fit {it}: chamfer sum {lv:.3e}")
    if not np.isfinite(best_loss):
        raise DivergedError("deformation fit never produced a finite loss")
    fld.basis_weights = [w.numpy().copy() for w in best[:nb]]
    fld.coeff_weights = [w.numpy().copy() for w in best[nb:]]
    if hasattr(fld, "_tw"):
        del fld._tw
    per_frame = [chamfer(fld.deform(t), c) for t, c in zip(times, clouds)]
    return fld, per_frame


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def save_field(fld: DeformField, path):
    with open(str(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIIIQ", _VERSION, fld.n_basis, fld.hidden,
                             fld.freq_time, fld.freq_space,
                             fld.canonical.shape[0]))
        fh.write(struct.pack("<d", fld.t_max))
        fh.write(fld.canonical.astype("<f8").tobytes())
        for group in (fld.basis_weights, fld.coeff_weights):
            fh.write(struct.pack("<I", len(group)))
            for w in group:
                w = np.asarray(w, dtype=np.float64)
                shape = w.shape if w.ndim == 2 else (w.shape[0], 0)
                fh.write(struct.pack("<QQ", *shape))
                fh.write(w.astype("<f8").tobytes())


def load_field(path) -> DeformField:
    with open(str(path), "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise FormatError("magic", "not a deformation checkpoint")
        version, nb, hidden, ft, fs, q = struct.unpack("<IIIIIQ", fh.read(28))
        if version != _VERSION:
            raise FormatError("version", str(version))
        (t_max,) = struct.unpack("<d", fh.read(8))
        canon = np.frombuffer(fh.read(q * 24), dtype="<f8").reshape(q, 3).copy()
        groups = []
        for _ in range(2):
            (n,) = struct.unpack("<I", fh.read(4))
            ws = []
            for _ in range(n):
                a, b = struct.unpack("<QQ", fh.read(16))
                if b == 0:
                    ws.append(np.frombuffer(fh.read(a * 8),
                                            dtype="<f8").copy())
                else:
                    ws.append(np.frombuffer(fh.read(a * b * 8),
                                            dtype="<f8").reshape(a, b).copy())
            groups.append(ws)
    return DeformField(canon, groups[0], groups[1], n_basis=nb, t_max=t_max,
                       freq_time=ft, freq_space=fs, hidden=hidden)
