"""Forward stepping: the state transfer composing transfers and constitutive laws."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import CFLError, MasivError
from ..trajectory import TrajectoryDataset
from ..types import Grid, ParticleState, SimConfig
from . import backend


@dataclass
class MaterialLaws:
    """Pair of batched numpy callables: stress(F) -> P and return_map(F_trial) -> F."""

    stress: Callable[[np.ndarray], np.ndarray]
    return_map: Callable[[np.ndarray], np.ndarray]

    @staticmethod
    def classical(elastic_name, elastic_params, plastic_name="identity",
                  plastic_params=None):
        from ..materials import ELASTIC_LAWS, PLASTIC_LAWS, PlasticParams
        if plastic_params is None:
            plastic_params = PlasticParams()
        stress_fn = ELASTIC_LAWS[elastic_name]
        return_fn = PLASTIC_LAWS[plastic_name]
        return MaterialLaws(
            stress=lambda F: stress_fn(F, elastic_params),
            return_map=lambda F: return_fn(F, plastic_params, elastic_params),
        )


def check_cfl(state: ParticleState, grid: Grid, cfg: SimConfig,
              step_index=None):
    speed = float(np.abs(state.v).max(initial=0.0))
    cfl = speed * cfg.dt / grid.dx
    if cfl >= 1.0:
        raise CFLError(cfl, step=step_index)


def step(state: ParticleState, laws: MaterialLaws, grid: Grid,
         cfg: SimConfig, step_index=None) -> ParticleState:
    """One full transfer: stress, P2G, grid update, G2P, plastic correction."""
    if cfg.cfl_check:
        check_cfl(state, grid, cfg, step_index)
    P = laws.stress(state.F)
    backend.p2g(state, P, grid, cfg)
    backend.grid_update(grid, cfg)
    new_state = backend.g2p(grid, state, cfg, step_index=step_index)
    new_state.F = np.ascontiguousarray(laws.return_map(new_state.F))
    return new_state


def rollout(state0: ParticleState, laws: MaterialLaws, n_steps: int,
            grid: Grid, cfg: SimConfig, record_every: int = 1,
            t0: float = 0.0) -> tuple[TrajectoryDataset, ParticleState]:
    """Run ``n_steps`` transfers, recording positions every ``record_every``.

    Step 0 (the initial state) is always recorded.  Returns the trajectory
    and the final state.  Deterministic given (state0, laws, cfg).
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    state = state0.copy()
    times = [t0]
    frames = [state.x.copy()]
    for n in range(1, n_steps + 1):
        try:
            state = step(state, laws, grid, cfg, step_index=n)
        except MasivError:
            raise
        if n % record_every == 0:
            times.append(t0 + n * cfg.dt)
            frames.append(state.x.copy())
    traj = TrajectoryDataset(np.asarray(times), np.stack(frames, axis=0))
    return traj, state
