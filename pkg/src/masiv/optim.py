"""Rectified Adam over lists of numpy parameter arrays.

Small self-contained implementation so the identification loop can update
parameters stored as plain arrays (gradients arrive from the adjoint engine
as arrays too).  Follows the original rectification recurrence: while the
variance-rectification term rho_t stays at or below 4 the step uses the
bias-corrected first moment only; afterwards the usual adaptive step scaled
by the rectification factor r_t.
"""

from __future__ import annotations

import math

import numpy as np


class RAdam:
    """Rectified Adam for a list of float64 arrays updated in place."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = b1, b2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.rho_inf = 2.0 / (1.0 - b2) - 1.0

    def step(self, grads):
        """One update from a list of gradient arrays (same shapes as params)."""
        if len(grads) != len(self.params):
            raise ValueError("gradient list length mismatch")
        self.t += 1
        t = self.t
        b1, b2 = self.b1, self.b2
        b1t = b1 ** t
        b2t = b2 ** t
        rho = self.rho_inf - 2.0 * t * b2t / (1.0 - b2t)
        if rho > 4.0:
            r = math.sqrt(
                (rho - 4.0) * (rho - 2.0) * self.rho_inf
                / ((self.rho_inf - 4.0) * (self.rho_inf - 2.0) * rho))
        else:
            r = None
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = np.asarray(g, dtype=p.dtype)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1t)
            if r is not None:
                v_hat = np.sqrt(v / (1.0 - b2t))
                p -= self.lr * r * m_hat / (v_hat + self.eps)
            else:
                # Variance of the adaptive term still too high: plain
                # momentum step (the rectified branch of the recurrence).
                p -= self.lr * m_hat

    def state_dict(self):
        return {
            "t": self.t,
            "m": [a.copy() for a in self.m],
            "v": [a.copy() for a in self.v],
        }

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.m = [np.array(a, dtype=np.float64) for a in state["m"]]
        self.v = [np.array(a, dtype=np.float64) for a in state["v"]]
