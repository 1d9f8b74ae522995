"""Staged identification: initial velocity, then constitutive weights.

Stage one optimizes a single shared initial velocity with the constitutive
weights frozen; stage two optimizes the neural law weights with the
velocity frozen.  Both stages use RAdam on gradients from the
checkpointed rollout adjoint.  The ablation harness reruns stage two under
each geometric objective with the silhouette term on or off and compares
per-frame Chamfer curves.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .autodiff.adjoint import GradientRequest, grad_rollout
from .errors import (CFLError, DivergedError, InversionError, MasivError,
                     NumericalError)
from .losses import chamfer, chamfer_t, silhouette_render, surface_extract
from .neural import NeuralLawParams
from .optim import RAdam
from .types import Grid, ParticleState, SimConfig

OBJECTIVES = ("none", "surface", "continuum", "trajectory")

# failure modes of an unstable rollout, all treated as divergence
DIVERGENCE_ERRORS = (DivergedError, InversionError, CFLError, NumericalError)


@dataclass
class IdentConfig:
    """Optimization schedule for the two identification stages."""

    objective: str = "trajectory"
    silhouette: bool = False
    v0_steps: int = 100
    theta_steps: int = 1000
    v0_lr: float = 1e-2
    theta_lr: float = 1e-3
    checkpoint_every: int = 25          # rollout adjoint segment length
    save_every: int = 100               # optimizer steps between checkpoints
    max_rollbacks: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise MasivError(f"unknown objective {self.objective!r}; "
                             f"expected one of {OBJECTIVES}")
        if self.v0_steps < 0 or self.theta_steps < 0:
            raise MasivError("step counts must be >= 0")
        if not self.silhouette and self.objective == "none":
            raise MasivError("objective 'none' requires the silhouette term "
                             "(there would be no loss at all)")


@dataclass
class Observations:
    """Reference data the identification optimizes against.

    ``trajectory`` holds dense per-step reference positions (persistent
    particle identity, times aligned with the simulation steps).  The
    silhouette term additionally needs per-frame masks and the camera they
    were rendered with.
    """

    trajectory: object
    masks: object = None                # MaskSequence, frame-aligned
    camera: object = None               # SilhouetteCamera
    surface_cell: float = 0.02

    def __post_init__(self):
        if self.trajectory is None:
            raise MasivError("observations need a reference trajectory")


@dataclass
class IdentReport:
    loss_curves: dict = field(default_factory=dict)
    per_frame_cd: list = field(default_factory=list)
    wall_clock: float = 0.0
    rollbacks: int = 0
    aborted: bool = False
    notes: list = field(default_factory=list)


def _frame_steps(n_steps, substeps):
    return list(range(substeps, n_steps + 1, substeps))


def _build_loss_fn(obs: Observations, cfg_obj: IdentConfig, substeps: int,
                   n_steps: int):
    """Per-step loss callback for grad_rollout from the configured terms."""
    ref = obs.trajectory
    frame_steps = set(_frame_steps(n_steps, substeps))
    ref_pos = {}
    for i, t in enumerate(ref.times):
        ref_pos[i] = ref.positions[i]

    ref_frames_t = {s: torch.from_numpy(np.ascontiguousarray(ref.positions[s]))
                    for s in frame_steps if s < ref.n_steps}
    ref_all_t = None
    if cfg_obj.objective == "trajectory":
        ref_all_t = [torch.from_numpy(np.ascontiguousarray(p))
                     for p in ref.positions]
    ref_surfaces = {}
    if cfg_obj.objective == "surface":
        for s, rp in ref_frames_t.items():
            idx = surface_extract(rp.numpy(), obs.surface_cell)
            ref_surfaces[s] = rp[idx]
    masks_t = {}
    if cfg_obj.silhouette:
        if obs.masks is None or obs.camera is None:
            raise MasivError("silhouette term needs masks and a camera")
        steps_sorted = sorted(frame_steps)
        if len(obs.masks) < len(steps_sorted) + 1:
            raise MasivError("mask sequence shorter than rollout frames")
        # mask index 0 is the initial frame; frames follow in order
        for i, s in enumerate(steps_sorted):
            masks_t[s] = torch.from_numpy(
                np.ascontiguousarray(obs.masks.masks[i + 1]))

    def loss_fn(step, x):
        terms = []
        if cfg_obj.objective == "trajectory" and 0 < step < len(ref_all_t):
            terms.append(torch.abs(x - ref_all_t[step]).sum(dim=1).mean())
        elif cfg_obj.objective == "continuum" and step in ref_frames_t:
            terms.append(chamfer_t(x, ref_frames_t[step]))
        elif cfg_obj.objective == "surface" and step in ref_surfaces:
            idx = surface_extract(x.detach().numpy(), obs.surface_cell)
            terms.append(chamfer_t(x[idx], ref_surfaces[step]))
        if cfg_obj.silhouette and step in masks_t:
            rendered = silhouette_render(x, obs.camera)
            terms.append(torch.abs(rendered - masks_t[step]).sum())
        if not terms:
            return None
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total

    return loss_fn


def optimize_v0(state0: ParticleState, laws: NeuralLawParams, grid: Grid,
                cfg: SimConfig, obs: Observations, config: IdentConfig,
                n_steps: int, v0_init=(0.0, 0.0, 0.0), verbose=False):
    """Stage one: fit the shared initial 3-velocity with weights frozen.

    Returns (v0, loss_curve).  The constitutive weights are read but never
    written.  A zero-step schedule returns the initial guess unchanged.
    """
    v0 = np.asarray(v0_init, dtype=np.float64).copy()
    if v0.shape != (3,):
        raise MasivError("initial velocity must be a 3-vector")
    loss_fn = _build_loss_fn(obs, config, cfg.substeps_per_frame, n_steps)
    request = GradientRequest(wrt=("v0",),
                              checkpoint_every=config.checkpoint_every)
    opt = RAdam([v0], lr=config.v0_lr)
    curve = []
    for it in range(config.v0_steps):
        state = state0.copy()
        state.v[:] = v0
        result = grad_rollout(state, laws, grid, cfg, n_steps, loss_fn,
                              request)
        # the adjoint returns per-particle velocity sensitivities; a shared
        # velocity sees their sum
        g = result.grads["v0"].sum(axis=0)
        curve.append(result.loss)
        opt.step([g])
        if verbose and it % 10 == 0:
            print(f"  v0 step {it}: loss {result.loss:.6e}  v0 {v0}")
    return v0, curve


def _eval_per_frame_cd(state0, laws, grid, cfg, obs, n_steps):
    """Per-frame Chamfer of a forward rollout against the reference."""
    from .autodiff.transfer_fn import FastSim
    from .autodiff.torch_step import TState
    from . import neural

    sim = FastSim(grid, cfg, state0.m, state0.vol)
    w1e, w2e = laws.elastic_tensors()
    w1p, w2p = laws.plastic_tensors()

    def stress_fn(f):
        return neural.elastic_stress(f, w1e, w2e, laws.stress_scale)

    def return_fn(f):
        return neural.plastic_return(f, w1p, w2p)

    frame_steps = _frame_steps(n_steps, cfg.substeps_per_frame)
    cds = []
    state = TState.from_numpy(state0)
    with torch.no_grad():
        for step in range(n_steps):
            state = sim.step(state, stress_fn, return_fn, step_index=step)
            if step + 1 in frame_steps and step + 1 < obs.trajectory.n_steps:
                cds.append(chamfer(state.x.numpy(),
                                   obs.trajectory.positions[step + 1]))
    return cds


def identify(theta_init: NeuralLawParams, v0, state0: ParticleState,
             grid: Grid, cfg: SimConfig, obs: Observations,
             config: IdentConfig, n_steps: int, verbose=False):
    """Stage two: optimize the constitutive weights with v0 frozen.

    Checkpoints the weights and optimizer state every ``save_every``
    accepted steps; a diverged rollout rolls back to the last checkpoint
    and halves the learning rate, up to ``max_rollbacks`` times, after
    which the run aborts with the report flagged.  Returns
    (NeuralLawParams, IdentReport).
    """
    t_start = time.time()
    params = theta_init.copy()
    base = state0.copy()
    base.v[:] = np.asarray(v0, dtype=np.float64)

    loss_fn = _build_loss_fn(obs, config, cfg.substeps_per_frame, n_steps)
    request = GradientRequest(wrt=("theta_e", "theta_p"),
                              checkpoint_every=config.checkpoint_every)
    weights = [params.w1_e, params.w2_e, params.w1_p, params.w2_p]
    opt = RAdam(weights, lr=config.theta_lr)
    report = IdentReport()
    curve = []

    def snapshot():
        return ([w.copy() for w in weights], opt.state_dict(), opt.lr)

    def restore(snap):
        ws, od, lr = snap
        for w, saved in zip(weights, ws):
            w[:] = saved
        opt.load_state_dict(od)
        opt.lr = lr

    last_good = snapshot()
    rollbacks = 0
    it = 0
    while it < config.theta_steps:
        try:
            result = grad_rollout(base, params, grid, cfg, n_steps,
                                  loss_fn, request)
        except DIVERGENCE_ERRORS as exc:
            rollbacks += 1
            if rollbacks > config.max_rollbacks:
                report.aborted = True
                report.notes.append(
                    f"aborted after {config.max_rollbacks} rollbacks: {exc}")
                break
            restore(last_good)
            opt.lr *= 0.5
            report.notes.append(
                f"step {it}: diverged ({exc}); rolled back, lr -> {opt.lr:g}")
            continue
        curve.append(result.loss)
        ge1, ge2 = result.grads["theta_e"]
        gp1, gp2 = result.grads["theta_p"]
        opt.step([ge1, ge2, gp1, gp2])
        it += 1
        if it % config.save_every == 0:
            last_good = snapshot()
        if verbose and it % 25 == 0:
            print(f"  theta step {it}: loss {result.loss:.6e}")

    report.loss_curves["theta"] = curve
    report.rollbacks = rollbacks
    report.per_frame_cd = _eval_per_frame_cd(base, params, grid, cfg, obs,
                                             n_steps)
    report.wall_clock = time.time() - t_start
    return params, report


def ablate(theta_init: NeuralLawParams, v0, state0: ParticleState,
           grid: Grid, cfg: SimConfig, obs: Observations,
           config_base: IdentConfig, n_steps: int,
           objectives=OBJECTIVES, silhouettes=(False, True), verbose=False):
    """Rerun identification across objective kinds and silhouette settings.

    Returns {(objective, silhouette): IdentReport-or-error-string} plus a
    ranking of completed runs by final mean per-frame Chamfer.  Failures of
    individual configurations are recorded and the remaining runs proceed.
    """
    from dataclasses import replace

    results = {}
    for objective in objectives:
        for sil in silhouettes:
            try:
                cfg_run = replace(config_base, objective=objective,
                                  silhouette=sil)
                _, report = identify(theta_init, v0, state0, grid, cfg,
                                     obs, cfg_run, n_steps, verbose=verbose)
                results[(objective, sil)] = report
            except MasivError as exc:
                results[(objective, sil)] = f"failed: {exc}"
    ranking = sorted(
        (float(np.mean(rep.per_frame_cd)), key)
        for key, rep in results.items()
        if isinstance(rep, IdentReport) and rep.per_frame_cd)
    return results, ranking
