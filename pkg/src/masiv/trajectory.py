"""Time-stamped particle position sequences with persistent particle identity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TrajectoryDataset:
    """Recorded particle positions at strictly increasing times.

    ``positions`` has shape (S, Q, 3) with the same canonical particle order
    at every step.  ``metadata`` carries provenance (scene hash, law, seed)
    and round-trips through the sidecar file as plain key/value text.
    """

    times: np.ndarray
    positions: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.ascontiguousarray(self.times, dtype=np.float64)
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.times.ndim != 1 or self.positions.ndim != 3:
            raise ValueError("times must be (S,), positions (S, Q, 3)")
        if self.times.shape[0] != self.positions.shape[0]:
            raise ValueError("times and positions disagree on step count")
        if self.positions.shape[0] == 0 or self.positions.shape[1] == 0:
            raise ValueError("trajectory must contain >= 1 step and >= 1 particle")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("time stamps must be strictly increasing")

    @property
    def n_steps(self) -> int:
        return self.times.shape[0]

    @property
    def q(self) -> int:
        return self.positions.shape[1]

    def __eq__(self, other):
        if not isinstance(other, TrajectoryDataset):
            return NotImplemented
        return (np.array_equal(self.times, other.times)
                and np.array_equal(self.positions, other.positions)
                and self.metadata == other.metadata)
