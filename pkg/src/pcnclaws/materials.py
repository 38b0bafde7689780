"""Analytic constitutive laws: ground truth for data generation and oracles.

Three material kinds:

- Elasticity: fixed corotated hyperelastic stress, no plasticity.
- Sand:       Hencky-strain elastic stress + Drucker-Prager return mapping
              parameterized by a friction angle.
- Plasticine: Hencky-strain elastic stress + von Mises radial return
              parameterized by a yield stress.

The elastic stress for sand/plasticine uses the logarithmic (Hencky) strain
formulation, which makes both return mappings closed-form in principal
space.  All functions accept batched (..., D, D) deformation gradients.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import smallmat as sm
from .errors import InvalidParam, NonInvertible


class Material(enum.Enum):
    ELASTICITY = "elasticity"
    SAND = "sand"
    PLASTICINE = "plasticine"


@dataclass(frozen=True)
class PhysParams:
    """Physical parameters of one object, SI units (angles in degrees)."""

    material: Material
    youngs_modulus: float
    poisson_ratio: float
    yield_stress: Optional[float] = None   # plasticine only, Pa
    friction_angle: Optional[float] = None  # sand only, degrees

    def __post_init__(self):
        if self.youngs_modulus <= 0.0:
            raise InvalidParam(f"E must be positive, got {self.youngs_modulus}")
        if not 0.0 < self.poisson_ratio < 0.5:
            raise InvalidParam(f"nu must lie in (0, 0.5), got {self.poisson_ratio}")
        if self.material is Material.PLASTICINE:
            if self.yield_stress is None or self.yield_stress <= 0.0:
                raise InvalidParam("plasticine requires yield_stress > 0")
        if self.material is Material.SAND:
            if self.friction_angle is None or not 0.0 < self.friction_angle < 90.0:
                raise InvalidParam("sand requires friction_angle in (0, 90) degrees")

    @property
    def lame(self):
        """(mu, lambda), recomputed on demand so they can never go stale."""
        return lame_from_modulus(self.youngs_modulus, self.poisson_ratio)


def lame_from_modulus(E, nu):
    """Lame pair from Young's modulus and Poisson's ratio."""
    if E <= 0.0:
        raise InvalidParam(f"E must be positive, got {E}")
    if not 0.0 < nu < 0.5:
        raise InvalidParam(f"nu must lie in (0, 0.5), got {nu}")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


def _require_invertible(F, name):
    d = sm.det(F)
    if np.any(d <= sm.DET_TOL):
        raise NonInvertible(f"{name} requires det(F) > 1e-12")
    return d


def fixed_corotated_stress(F, mu, lam):
    """First Piola-Kirchhoff stress P = 2 mu (F - R) + lam (J - 1) J F^-T."""
    F = np.asarray(F, dtype=np.float64)
    J = _require_invertible(F, "fixed_corotated_stress")
    r, _ = sm.polar_decompose(F)
    f_inv_t = sm.transpose(sm.inverse(F))
    return 2.0 * mu * (F - r) + (lam * (J - 1.0) * J)[..., None, None] * f_inv_t


def hencky_strain(F):
    """(U, sigma, eps) with eps = log(sigma); raises if any sigma <= 1e-12."""
    F = np.asarray(F, dtype=np.float64)
    res = sm.svd(F)
    if np.any(res.sigma <= sm.DET_TOL):
        raise NonInvertible("Hencky strain requires all singular values > 1e-12")
    return res, np.log(res.sigma)


def stvk_hencky_stress(F, mu, lam):
    """Hencky-strain Kirchhoff stress mapped back to first Piola-Kirchhoff.

    On principal axes tau = 2 mu eps + lam tr(eps); P = U diag(tau/sigma) V^T.
    """
    res, eps = hencky_strain(F)
    tr = np.sum(eps, axis=-1, keepdims=True)
    tau = 2.0 * mu * eps + lam * tr
    coeff = tau / res.sigma
    return res.u @ (coeff[..., :, None] * sm.transpose(res.v))


def dp_alpha(friction_angle_deg):
    """Drucker-Prager friction coefficient from the friction angle."""
    s = math.sin(math.radians(friction_angle_deg))
    return math.sqrt(2.0 / 3.0) * 2.0 * s / (3.0 - s)


def drucker_prager_project(F_trial, mu, lam, friction_angle_deg):
    """Project a trial elastic gradient onto the Drucker-Prager cone.

    In Hencky strain: expansion (tr eps > 0) snaps to the cone tip U V^T;
    otherwise the deviator shrinks by the plastic multiplier
    delta_gamma = |dev eps| + alpha (D lam + 2 mu) / (2 mu) tr(eps).
    """
    res, eps = hencky_strain(F_trial)
    d = F_trial.shape[-1]
    alpha = dp_alpha(friction_angle_deg)
    tr = np.sum(eps, axis=-1)
    dev = eps - tr[..., None] / d
    dev_norm = np.linalg.norm(dev, axis=-1)
    factor = (d * lam + 2.0 * mu) / (2.0 * mu)
    dgamma = dev_norm + alpha * factor * tr

    out = np.array(F_trial, dtype=np.float64, copy=True)
    tip = tr > 0.0
    plastic = (~tip) & (dgamma > 0.0) & (dev_norm > 0.0)
    if np.any(tip):
        rot = res.u @ sm.transpose(res.v)
        out = np.where(np.asarray(tip)[..., None, None], rot, out)
    if np.any(plastic):
        scale = np.where(dev_norm > 0.0, dgamma / np.where(dev_norm > 0.0, dev_norm, 1.0), 0.0)
        eps_new = eps - scale[..., None] * dev
        proj = res.u @ (np.exp(eps_new)[..., :, None] * sm.transpose(res.v))
        out = np.where(np.asarray(plastic)[..., None, None], proj, out)
    return out


def von_mises_project(F_trial, mu, lam, yield_stress):
    """Radial return onto the von Mises surface in Hencky strain.

    Deviatoric stress magnitude is s = 2 mu |dev eps|; when it exceeds
    sqrt(2/3) tau_Y the deviator shrinks so the yield surface is met
    exactly; the trace (volume) is untouched.
    """
    if yield_stress <= 0.0:
        raise InvalidParam("yield_stress must be positive")
    res, eps = hencky_strain(F_trial)
    d = F_trial.shape[-1]
    tr = np.sum(eps, axis=-1)
    dev = eps - tr[..., None] / d
    dev_norm = np.linalg.norm(dev, axis=-1)
    limit = math.sqrt(2.0 / 3.0) * yield_stress / (2.0 * mu)
    yielding = (dev_norm > limit) & (dev_norm > 0.0)
    if not np.any(yielding):
        return np.array(F_trial, dtype=np.float64, copy=True)
    shrink = np.where(yielding, (dev_norm - limit) / np.where(dev_norm > 0.0, dev_norm, 1.0), 0.0)
    eps_new = eps - shrink[..., None] * dev
    proj = res.u @ (np.exp(eps_new)[..., :, None] * sm.transpose(res.v))
    out = np.array(F_trial, dtype=np.float64, copy=True)
    return np.where(np.asarray(yielding)[..., None, None], proj, out)
