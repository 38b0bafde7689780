"""Constitutive-law objects consumed by the MPM engine.

A law exposes two maps evaluated on batched deformation gradients:

    stress(F_e, params)  -> first Piola-Kirchhoff stress per particle
    project(F_trial, params) -> plastically corrected elastic gradient

The engine treats analytic and neural laws through this one surface, so a
trained network is a drop-in replacement for the ground-truth physics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import materials as mat
from .materials import Material, PhysParams


@dataclass(frozen=True)
class AnalyticLaw:
    """Ground-truth constitutive law selected by material kind."""

    material: Material

    def stress(self, F_e: np.ndarray, params: PhysParams) -> np.ndarray:
        mu, lam = params.lame
        if self.material is Material.ELASTICITY:
            return mat.fixed_corotated_stress(F_e, mu, lam)
        return mat.stvk_hencky_stress(F_e, mu, lam)

    def project(self, F_trial: np.ndarray, params: PhysParams) -> np.ndarray:
        mu, lam = params.lame
        if self.material is Material.ELASTICITY:
            return F_trial
        if self.material is Material.SAND:
            return mat.drucker_prager_project(F_trial, mu, lam, params.friction_angle)
        return mat.von_mises_project(F_trial, mu, lam, params.yield_stress)


class ZeroStressLaw:
    """Test stub: no stress, no plasticity (pure advection dynamics)."""

    material = Material.ELASTICITY

    def stress(self, F_e, params):
        return np.zeros_like(F_e)

    def project(self, F_trial, params):
        return F_trial
