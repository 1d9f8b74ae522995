"""Closed-form constitutive laws: ground-truth generators and distillation targets.

Elastic laws map an elastic deformation gradient F (or a batch) to the first
Piola-Kirchhoff stress P.  Plastic laws map a trial deformation gradient to an
admissible one via a log-strain return map.  Everything here is plain numpy
and vectorized over a leading batch dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InversionError, NumericalError


@dataclass(frozen=True)
class ElasticParams:
    youngs_modulus: float
    poisson_ratio: float

    def __post_init__(self):
        if self.youngs_modulus <= 0:
            raise ValueError("Young's modulus must be positive")
        if not (0.0 <= self.poisson_ratio < 0.5):
            raise ValueError("Poisson ratio must lie in [0, 0.5)")

    @property
    def mu(self) -> float:
        return self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def lam(self) -> float:
        e, nu = self.youngs_modulus, self.poisson_ratio
        return e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))

    @staticmethod
    def from_lame(mu: float, lam: float) -> "ElasticParams":
        # E, nu recovered from the Lame pair; lam = 0 maps to nu = 0.
        e = mu * (3.0 * lam + 2.0 * mu) / (lam + mu)
        nu = lam / (2.0 * (lam + mu))
        return ElasticParams(e, nu)


@dataclass(frozen=True)
class PlasticParams:
    yield_stress: float = 1e4          # von Mises sigma_Y [Pa]
    friction_angle: float = 30.0       # Drucker-Prager [deg]
    cohesion: float = 0.0              # Drucker-Prager, log-strain units

    def __post_init__(self):
        if self.yield_stress <= 0:
            raise ValueError("yield stress must be positive")
        if not (0.0 < self.friction_angle < 90.0):
            raise ValueError("friction angle must lie in (0, 90) degrees")


def _as_batch(F):
    F = np.asarray(F, dtype=np.float64)
    single = F.ndim == 2
    return (F[None] if single else F), single


def _check_dets(F):
    dets = np.linalg.det(F)
    bad = np.flatnonzero(dets <= 0)
    if bad.size:
        raise InversionError(bad[0], dets[bad[0]])
    return dets


def inv_T(F):
    """Batched inverse-transpose."""
    return np.linalg.inv(F).transpose(0, 2, 1)


def proper_svd(F):
    """SVD with proper rotations: F = U diag(S) V^T, det(U) = det(V) = +1.

    Singular values descending.  For det(F) > 0 all singular values stay
    positive; for det(F) < 0 the smallest one turns negative.
    """
    F = np.asarray(F, dtype=np.float64)
    try:
        U, S, Vt = np.linalg.svd(F)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed: {exc}; matrix batch shape {F.shape}")
    S = S.copy()
    dU = np.linalg.det(U)
    dV = np.linalg.det(Vt)
    flip_u = dU < 0
    U[flip_u, :, 2] *= -1.0
    S[flip_u, 2] *= -1.0
    flip_v = dV < 0
    Vt[flip_v, 2, :] *= -1.0
    S[flip_v, 2] *= -1.0
    return U, S, Vt


def polar_rotation(F):
    """Rotation factor of the polar decomposition F = R S."""
    U, _, Vt = proper_svd(F)
    return U @ Vt


# ---------------------------------------------------------------------------
# Elastic laws
# ---------------------------------------------------------------------------

def neo_hookean_energy(F, params: ElasticParams):
    """Strain energy density of the compressible neo-Hookean model."""
    Fb, single = _as_batch(F)
    J = _check_dets(Fb)
    logJ = np.log(J)
    mu, lam = params.mu, params.lam
    tr_c = np.einsum("qij,qij->q", Fb, Fb)
    psi = 0.5 * mu * (tr_c - 3.0) - mu * logJ + 0.5 * lam * logJ**2
    return psi[0] if single else psi

def neo_hookean_stress(F, params: ElasticParams):
    """P = mu (F - F^{-T}) + lam ln(J) F^{-T}."""
    Fb, single = _as_batch(F)
    J = _check_dets(Fb)
    Fit = inv_T(Fb)
    mu, lam = params.mu, params.lam
    P = mu * (Fb - Fit) + lam * np.log(J)[:, None, None] * Fit
    return P[0] if single else P


def fixed_corotated_energy(F, params: ElasticParams):
    """Energy of the fixed corotated model: mu sum (sigma_i - 1)^2 + lam/2 (J-1)^2."""
    Fb, single = _as_batch(F)
    J = _check_dets(Fb)
    _, S, _ = proper_svd(Fb)
    mu, lam = params.mu, params.lam
    psi = mu * ((S - 1.0) ** 2).sum(axis=1) + 0.5 * lam * (J - 1.0) ** 2
    return psi[0] if single else psi

def fixed_corotated_stress(F, params: ElasticParams):
    """P = 2 mu (F - R) + lam (J - 1) J F^{-T}, R from the polar decomposition."""
    Fb, single = _as_batch(F)
    J = _check_dets(Fb)
    R = polar_rotation(Fb)
    mu, lam = params.mu, params.lam
    P = 2.0 * mu * (Fb - R) + (lam * (J - 1.0) * J)[:, None, None] * inv_T(Fb)
    return P[0] if single else P


# ---------------------------------------------------------------------------
# Plastic return maps (log-strain space)
# ---------------------------------------------------------------------------

def identity_return(F_trial, params: PlasticParams | None = None,
                    elastic: ElasticParams | None = None):
    """No plasticity: the trial state is already admissible."""
    return np.asarray(F_trial, dtype=np.float64)


def von_mises_return(F_trial, params: PlasticParams, elastic: ElasticParams):
    """Project log principal strains onto the von Mises yield surface.

    Deviatoric log strain is shrunk so that 2 mu ||dev|| <= sigma_Y; the
    volumetric part is untouched.
    """
    Fb, single = _as_batch(F_trial)
    _check_dets(Fb)
    U, S, Vt = proper_svd(Fb)
    eps = np.log(S)
    dev = eps - eps.mean(axis=1, keepdims=True)
    dev_norm = np.linalg.norm(dev, axis=1)
    mu = elastic.mu
    limit = params.yield_stress / (2.0 * mu)
    yielded = dev_norm > limit
    scale = np.ones_like(dev_norm)
    scale[yielded] = limit / dev_norm[yielded]
    eps_new = eps.mean(axis=1, keepdims=True) + dev * scale[:, None]
    out = U @ (np.exp(eps_new)[:, :, None] * Vt)
    return out[0] if single else out


def drucker_prager_return(F_trial, params: PlasticParams, elastic: ElasticParams):
    """Log-strain cone projection for granular media.

    Expansion states (positive trace) project to the cone tip (eps = 0);
    shear states outside the cone slide back along the deviatoric direction.
    """
    Fb, single = _as_batch(F_trial)
    _check_dets(Fb)
    U, S, Vt = proper_svd(Fb)
    eps = np.log(S)
    tr = eps.sum(axis=1)
    dev = eps - (tr / 3.0)[:, None]
    dev_norm = np.linalg.norm(dev, axis=1)

    mu, lam = elastic.mu, elastic.lam
    phi = math.radians(params.friction_angle)
    alpha = math.sqrt(2.0 / 3.0) * 2.0 * math.sin(phi) / (3.0 - math.sin(phi))
    dgamma = dev_norm + alpha * (3.0 * lam + 2.0 * mu) / (2.0 * mu) * tr \
        - params.cohesion

    eps_new = eps.copy()
    # Cone tip: expanding, or no deviatoric direction to slide along.
    tip = (tr > 0) | ((dev_norm < 1e-300) & (dgamma > 0))
    eps_new[tip] = 0.0
    # Sliding projection.
    slide = (~tip) & (dgamma > 0)
    sn = dev_norm[slide]
    eps_new[slide] = eps[slide] - (dgamma[slide] / sn)[:, None] * dev[slide]
    out = U @ (np.exp(eps_new)[:, :, None] * Vt)
    return out[0] if single else out


def drucker_prager_violation(F, params: PlasticParams, elastic: ElasticParams):
    """Signed cone-constraint violation (<= 0 means admissible)."""
    Fb, single = _as_batch(F)
    _, S, _ = proper_svd(Fb)
    eps = np.log(S)
    tr = eps.sum(axis=1)
    dev = eps - (tr / 3.0)[:, None]
    dev_norm = np.linalg.norm(dev, axis=1)
    mu, lam = elastic.mu, elastic.lam
    phi = math.radians(params.friction_angle)
    alpha = math.sqrt(2.0 / 3.0) * 2.0 * math.sin(phi) / (3.0 - math.sin(phi))
    v = dev_norm + alpha * (3.0 * lam + 2.0 * mu) / (2.0 * mu) * tr \
        - params.cohesion
    # The tip itself is admissible regardless of the trace sign test above.
    v = np.where((dev_norm < 1e-12) & (np.abs(eps).max(axis=1) < 1e-12), 0.0, v)
    return v[0] if single else v


# Registry used by scene configs.
ELASTIC_LAWS = {
    "neo_hookean": neo_hookean_stress,
    "fixed_corotated": fixed_corotated_stress,
}
ELASTIC_ENERGIES = {
    "neo_hookean": neo_hookean_energy,
    "fixed_corotated": fixed_corotated_energy,
}
PLASTIC_LAWS = {
    "identity": identity_return,
    "von_mises": von_mises_return,
    "drucker_prager": drucker_prager_return,
}
