"""Reverse-mode gradients of a scalar loss through a full MPM rollout.

The rollout is differentiated with checkpoint-and-recompute: a no-grad
forward sweep stores detached particle states every K steps, then the
backward sweep walks the segments in reverse time order, re-runs each one
with gradients enabled, and chains the state cotangents across segment
boundaries.  Peak storage is ceil(n_steps / K) + 1 particle states no
matter how long the rollout is.

Losses are supplied as a per-step callback on particle positions, so both
terminal objectives and per-frame trajectory objectives fit the same
interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .. import neural
from ..errors import DivergedError
from ..mpm import backend
from ..types import Grid, ParticleState, SimConfig
from .transfer_fn import FastSim
from .torch_step import TState

_TARGETS = ("theta_e", "theta_p", "v0")


@dataclass
class GradientRequest:
    """What to differentiate and how to checkpoint."""

    wrt: tuple = _TARGETS
    checkpoint_every: int = 25
    # Record law and transfer intermediates during the no-grad sweep and
    # replay them in the backward segments.  Trades memory (all per-step
    # tapes live at once) for skipping every duplicate forward evaluation.
    reuse_forward: bool = True

    def __post_init__(self):
        self.wrt = tuple(self.wrt)
        for t in self.wrt:
            if t not in _TARGETS:
                raise ValueError(f"unknown target {t!r}")
        if not self.wrt:
            raise ValueError("at least one differentiation target")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint interval must be >= 1")


@dataclass
class GradientResult:
    loss: float
    grads: dict
    diagnostics: dict = field(default_factory=dict)


def _law_fns(laws: neural.NeuralLawParams, w1e, w2e, w1p, w2p, tape=None,
             cursor=None):
    scale = laws.stress_scale

    def stress_fn(f):
        slot = tape[cursor[0]]["e"] if tape is not None else None
        return neural.elastic_stress(f, w1e, w2e, scale, slot)

    def return_fn(f_trial):
        slot = tape[cursor[0]]["p"] if tape is not None else None
        return neural.plastic_return(f_trial, w1p, w2p, slot)

    return stress_fn, return_fn


def grad_rollout(state0: ParticleState, laws: neural.NeuralLawParams,
                 grid: Grid, cfg: SimConfig, n_steps: int, loss_fn,
                 request: GradientRequest, sim=None) -> GradientResult:
    """Gradients of sum-over-steps loss_fn(step, x) after each rollout step.

    loss_fn is called with (step_index, positions) where step_index runs
    from 0 (initial state, before any step) to n_steps; it returns a scalar
    tensor or None for steps that do not contribute.  Gradients are exact
    for the composed discrete map, independent of the checkpoint interval
    up to float reassociation.

    sim overrides the step backend (defaults to FastSim; TorchSim gives the
    same numbers through plain op-by-op autograd and exists for testing).
    """
    if sim is None:
        sim = FastSim(grid, cfg, state0.m, state0.vol)
    if (request.reuse_forward and isinstance(sim, FastSim)
            and backend.HAVE_COMPILED):
        return _taped_grad_rollout(state0, laws, cfg, n_steps, loss_fn,
                                   request, sim)
    k = request.checkpoint_every
    want = set(request.wrt)

    w1e, w2e = laws.elastic_tensors()
    w1p, w2p = laws.plastic_tensors()
    if "theta_e" in want:
        w1e = w1e.clone().requires_grad_(True)
        w2e = w2e.clone().requires_grad_(True)
    if "theta_p" in want:
        w1p = w1p.clone().requires_grad_(True)
        w2p = w2p.clone().requires_grad_(True)
    tape = cursor = None
    transfer_slots = None
    if request.reuse_forward:
        tape = [{"e": {}, "p": {}} for _ in range(n_steps)]
        cursor = [0]
        if isinstance(sim, FastSim):
            transfer_slots = [{} for _ in range(n_steps)]
    stress_fn, return_fn = _law_fns(laws, w1e, w2e, w1p, w2p, tape, cursor)

    def run_step(st, step):
        if cursor is not None:
            cursor[0] = step
        if transfer_slots is not None:
            return sim.step(st, stress_fn, return_fn, step_index=step,
                            slot=transfer_slots[step])
        return sim.step(st, stress_fn, return_fn, step_index=step)

    # ---- forward sweep: checkpoints + loss bookkeeping ------------------
    state = TState.from_numpy(state0)
    checkpoints = {0: state}
    loss_total = 0.0
    loss_steps = []
    with torch.no_grad():
        lv = loss_fn(0, state.x)
        if lv is not None:
            loss_total += float(lv)
            loss_steps.append(0)
        for step in range(n_steps):
            state = run_step(state, step)
            if (step + 1) % k == 0 and step + 1 < n_steps:
                checkpoints[step + 1] = state.detached()
            lv = loss_fn(step + 1, state.x)
            if lv is not None:
                loss_total += float(lv)
                loss_steps.append(step + 1)
    if not np.isfinite(loss_total):
        raise DivergedError(f"non-finite rollout loss {loss_total}")
    max_stored = len(checkpoints) + 1    # plus the live segment head

    # ---- backward sweep over segments in reverse ------------------------
    weight_leaves = []
    if "theta_e" in want:
        weight_leaves += [w1e, w2e]
    if "theta_p" in want:
        weight_leaves += [w1p, w2p]
    wgrads = [torch.zeros_like(t) for t in weight_leaves]
    cot = None            # cotangent of the state at the segment end
    recompute = 0
    starts = sorted(checkpoints)
    for s_idx in reversed(starts):
        seg_start = s_idx
        seg_end = min(seg_start + k, n_steps)
        head = checkpoints.pop(s_idx)
        leaf = TState(*(t.clone().requires_grad_(True) for t in head))
        seg_loss = None
        st = leaf
        if seg_start == 0:
            lv = loss_fn(0, st.x)
            if lv is not None:
                seg_loss = lv
        with torch.enable_grad():
            for step in range(seg_start, seg_end):
                st = run_step(st, step)
                recompute += 1
                lv = loss_fn(step + 1, st.x)
                if lv is not None:
                    seg_loss = lv if seg_loss is None else seg_loss + lv
        terms = []
        if seg_loss is not None:
            terms.append(seg_loss)
        if cot is not None:
            terms.append(sum((a * b).sum() for a, b in zip(st, cot)))
        if tape is not None:
            for step in range(seg_start, seg_end):
                tape[step] = {"e": {}, "p": {}}
                if transfer_slots is not None:
                    transfer_slots[step] = {}
        if not terms:
            cot = None
            continue
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        grads = torch.autograd.grad(
            total, tuple(leaf) + tuple(weight_leaves),
            allow_unused=True)
        cot = [g if g is not None else torch.zeros_like(t)
               for g, t in zip(grads[:4], leaf)]
        for i, g in enumerate(grads[4:]):
            if g is not None:
                wgrads[i] += g
        for g in cot:
            if not torch.isfinite(g).all():
                raise DivergedError(
                    f"non-finite adjoint entering step {seg_start}")

    # ---- package --------------------------------------------------------
    out = {}
    it = iter(wgrads)
    if "theta_e" in want:
        out["theta_e"] = (next(it).numpy().copy(), next(it).numpy().copy())
    if "theta_p" in want:
        out["theta_p"] = (next(it).numpy().copy(), next(it).numpy().copy())
    if "v0" in want:
        vb = cot[1] if cot is not None else None
        out["v0"] = (vb.numpy().copy() if vb is not None
                     else np.zeros_like(state0.v))
    max_abs = 0.0
    for g in out.values():
        arrs = g if isinstance(g, tuple) else (g,)
        for a in arrs:
            if not np.isfinite(a).all():
                raise DivergedError("non-finite gradient in result")
            if a.size:
                max_abs = max(max_abs, float(np.abs(a).max()))
    diag = {
        "max_abs_grad": max_abs,
        "recompute_count": recompute,
        "checkpoints_stored": max_stored,
        "loss_steps": loss_steps,
    }
    return GradientResult(loss=loss_total, grads=out, diagnostics=diag)


def _taped_grad_rollout(state0: ParticleState, laws: neural.NeuralLawParams,
                        cfg: SimConfig, n_steps: int, loss_fn,
                        request: GradientRequest, sim: FastSim):
    """Store-everything adjoint on the compiled transfer.

    One numpy forward sweep records every step's transfer tape and law
    intermediates, then the analytic vjps are chained backwards directly,
    with no recomputation and no per-step autograd graph.  Numerically
    identical to the checkpointed path; peak memory grows linearly with
    the step count instead of staying constant.
    """
    core = sim.core
    want = set(request.wrt)
    k = request.checkpoint_every
    w1e, w2e = laws.w1_e, laws.w2_e
    w1p, w2p = laws.w1_p, laws.w2_p
    scale = laws.stress_scale

    loss_total = 0.0
    loss_steps = []
    xgrads = {}

    def eval_loss(step, xarr):
        nonlocal loss_total
        leaf = torch.from_numpy(xarr).clone().requires_grad_(True)
        with torch.enable_grad():
            lv = loss_fn(step, leaf)
            if lv is None:
                return
            loss_total += float(lv.detach())
            loss_steps.append(step)
            g = torch.autograd.grad(lv, leaf, allow_unused=True)[0]
        if g is not None:
            xgrads[step] = g.numpy()

    # ---- forward sweep: tape every step ---------------------------------
    x = np.ascontiguousarray(state0.x, dtype=np.float64)
    v = np.ascontiguousarray(state0.v, dtype=np.float64)
    F = np.ascontiguousarray(state0.F, dtype=np.float64)
    C = np.ascontiguousarray(state0.C, dtype=np.float64)
    records = [None] * n_steps
    eval_loss(0, x)
    for step in range(n_steps):
        P = neural._elastic_np(F, w1e, w2e, scale)[0]
        out, tape = core.forward(x, v, F, C, P, step_index=step, save=True)
        xn, vn, f_trial, cn = out
        fn, u, s, vt, eps, hp, sig = neural._plastic_np(f_trial, w1p, w2p)
        # Only the SVD factors are kept; the cheap activations are rebuilt
        # in the vjps so the tape stays small enough to remain cache-warm.
        records[step] = (x, v, F, C, P, tape, (u, s, vt))
        x, v, F, C = xn, vn, fn, cn
        eval_loss(step + 1, x)
    if not np.isfinite(loss_total):
        raise DivergedError(f"non-finite rollout loss {loss_total}")

    # ---- backward chain -------------------------------------------------
    q = x.shape[0]
    xbar = xgrads.pop(n_steps, np.zeros((q, 3)))
    vbar = np.zeros((q, 3))
    fbar = np.zeros((q, 3, 3))
    cbar = np.zeros((q, 3, 3))
    g1e = np.zeros_like(w1e)
    g2e = np.zeros_like(w2e)
    g1p = np.zeros_like(w1p)
    g2p = np.zeros_like(w2p)
    for step in reversed(range(n_steps)):
        x, v, F, C, P, tape, pcache = records[step]
        records[step] = None
        ftbar, w1pb, w2pb = neural.plastic_vjp(fbar, w1p, w2p, pcache)
        g1p += w1pb
        g2p += w2pb
        xbar, vbar, fbar, cbar, pbar = core.vjp(
            x, v, F, C, P, xbar, vbar, ftbar, cbar, tape=tape)
        febar, w1eb, w2eb = neural.elastic_vjp(F, pbar, w1e, w2e, scale)
        g1e += w1eb
        g2e += w2eb
        fbar = fbar + febar
        g = xgrads.pop(step, None)
        if g is not None:
            xbar = xbar + g
        if step % k == 0:
            for arr in (xbar, vbar, fbar, cbar):
                if not np.isfinite(arr).all():
                    raise DivergedError(
                        f"non-finite adjoint entering step {step}")

    # ---- package --------------------------------------------------------
    out = {}
    if "theta_e" in want:
        out["theta_e"] = (g1e, g2e)
    if "theta_p" in want:
        out["theta_p"] = (g1p, g2p)
    if "v0" in want:
        out["v0"] = vbar
    max_abs = 0.0
    for g in out.values():
        arrs = g if isinstance(g, tuple) else (g,)
        for a in arrs:
            if not np.isfinite(a).all():
                raise DivergedError("non-finite gradient in result")
            if a.size:
                max_abs = max(max_abs, float(np.abs(a).max()))
    diag = {
        "max_abs_grad": max_abs,
        "recompute_count": 0,
        "checkpoints_stored": n_steps,
        "loss_steps": loss_steps,
    }
    return GradientResult(loss=loss_total, grads=out, diagnostics=diag)


def finite_diff_check(fn, point, grad, h=1e-6):
    """Worst-coordinate relative error of grad vs central differences of fn.

    fn maps a flat float64 array to a scalar; grad is the candidate
    gradient at point.  Relative error per coordinate uses the larger of
    |fd| and |grad| as scale (coordinates where both are below 1e-12 count
    as exact).
    """
    point = np.asarray(point, dtype=np.float64).ravel()
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.shape != point.shape:
        raise ValueError("gradient/point shape mismatch")
    worst = 0.0
    for i in range(point.size):
        p = point.copy()
        p[i] += h
        fp = fn(p)
        p[i] -= 2.0 * h
        fm = fn(p)
        fd = (fp - fm) / (2.0 * h)
        scale = max(abs(fd), abs(grad[i]))
        if scale < 1e-12:
            continue
        worst = max(worst, abs(fd - grad[i]) / scale)
    return worst
