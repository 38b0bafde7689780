"""Conditional MLP constitutive laws and physical-parameter normalization.

Two networks share one architecture (two GELU hidden layers of width 64):

- the elastic network maps (vec(F_e - I), normalized elastic parameters)
  to a stress matrix, scaled by a fixed stress scale so the raw output
  stays order one;
- the plastic network is residual: F_e = F_trial + net(vec(F_trial - I),
  normalized plastic parameters), so a zero-initialized final layer is an
  exact identity projection.

Parameters are conditioned in normalized [-1, 1] space; stiffness-like
quantities (E, tau_Y) map on a log scale, ratios and angles linearly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy.special import erf

from .errors import InvalidParam, ShapeMismatch
from .materials import Material, PhysParams

HIDDEN_WIDTH = 64
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ParamRangeWarning(UserWarning):
    """A parameter fell outside its normalization range (extrapolated)."""


def gelu_gate(z):
    """Phi(z), the Gaussian CDF factor: gelu(z) = z * gelu_gate(z)."""
    return 0.5 * (1.0 + erf(z / _SQRT2))


def gelu(z):
    return z * gelu_gate(z)


def gelu_grad(z, gate=None):
    """d(gelu)/dz; passing the cached gate avoids recomputing erf."""
    if gate is None:
        gate = gelu_gate(z)
    return gate + z * np.exp(-0.5 * z * z) * _INV_SQRT_2PI


@dataclass
class Mlp:
    """Weights of a 3-layer MLP; hidden layers fixed at width 64, GELU."""

    weights: List[np.ndarray]  # per layer, shape (out, in)
    biases: List[np.ndarray]   # per layer, shape (out,)

    def __post_init__(self):
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise InvalidParam("network must have exactly 3 weight layers")
        for w, b in zip(self.weights, self.biases):
            if w.shape[0] != b.shape[0]:
                raise InvalidParam("bias shape inconsistent with weight shape")
        for hidden in (self.weights[0].shape[0], self.weights[1].shape[0]):
            if hidden != HIDDEN_WIDTH:
                raise InvalidParam(f"hidden layers must have width {HIDDEN_WIDTH}")
        if self.weights[1].shape[1] != HIDDEN_WIDTH or self.weights[2].shape[1] != HIDDEN_WIDTH:
            raise InvalidParam("layer input sizes inconsistent")

    @property
    def layer_dims(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[1], HIDDEN_WIDTH, HIDDEN_WIDTH,
                self.weights[2].shape[0])

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.weights[0].shape[1]:
            raise ShapeMismatch(
                f"network expects input width {self.weights[0].shape[1]}, got {x.shape[-1]}")
        h = gelu(x @ self.weights[0].T + self.biases[0])
        h = gelu(h @ self.weights[1].T + self.biases[1])
        return h @ self.weights[2].T + self.biases[2]

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping pre-activations and gates for the backward sweep."""
        z1 = x @ self.weights[0].T + self.biases[0]
        g1 = gelu_gate(z1)
        h1 = z1 * g1
        z2 = h1 @ self.weights[1].T + self.biases[1]
        g2 = gelu_gate(z2)
        h2 = z2 * g2
        out = h2 @ self.weights[2].T + self.biases[2]
        return out, (x, z1, g1, h1, z2, g2, h2)

    def backward(self, cache, g_out: np.ndarray):
        """Given d(loss)/d(out), return (d_x, [dW1, db1, dW2, db2, dW3, db3])."""
        x, z1, g1, h1, z2, g2, h2 = cache
        dw3 = g_out.T @ h2
        db3 = g_out.sum(axis=0)
        g_h2 = g_out @ self.weights[2]
        g_z2 = g_h2 * gelu_grad(z2, g2)
        dw2 = g_z2.T @ h1
        db2 = g_z2.sum(axis=0)
        g_h1 = g_z2 @ self.weights[1]
        g_z1 = g_h1 * gelu_grad(z1, g1)
        dw1 = g_z1.T @ x
        db1 = g_z1.sum(axis=0)
        g_x = g_z1 @ self.weights[0]
        return g_x, [dw1, db1, dw2, db2, dw3, db3]

    def flat_params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def mlp_init(in_dim: int, out_dim: int, rng: np.random.Generator,
             final_scale: float = 1.0, final_zero: bool = False) -> Mlp:
    """Uniform fan-in init; the output layer is shrunk or zeroed so a fresh
    model starts as a near-identity simulator."""
    dims = [in_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, out_dim]
    weights, biases = [], []
    for i in range(3):
        bound = 1.0 / np.sqrt(dims[i])
        w = rng.uniform(-bound, bound, size=(dims[i + 1], dims[i]))
        weights.append(w)
        biases.append(np.zeros(dims[i + 1]))
    if final_zero:
        weights[2][:] = 0.0
    else:
        weights[2] *= final_scale
    return Mlp(weights, biases)


# ---------------------------------------------------------------------------
# parameter normalization

PARAM_ORDER = {
    Material.ELASTICITY: ("youngs_modulus", "poisson_ratio"),
    Material.SAND: ("youngs_modulus", "poisson_ratio", "friction_angle"),
    Material.PLASTICINE: ("youngs_modulus", "poisson_ratio", "yield_stress"),
}


@dataclass(frozen=True)
class ParamRanges:
    """Per-parameter (min, max) normalization ranges with log-scale flags."""

    names: Tuple[str, ...]
    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    log_scale: Tuple[bool, ...]

    def __post_init__(self):
        for name, lo, hi in zip(self.names, self.lo, self.hi):
            if not lo < hi:
                raise InvalidParam(f"range for {name} must satisfy min < max")

    @property
    def count(self) -> int:
        return len(self.names)

    def normalize_values(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        z = np.empty(self.count)
        for i, (lo, hi, logs) in enumerate(zip(self.lo, self.hi, self.log_scale)):
            if logs:
                z[i] = 2.0 * (np.log(values[i]) - np.log(lo)) / (np.log(hi) - np.log(lo)) - 1.0
            else:
                z[i] = 2.0 * (values[i] - lo) / (hi - lo) - 1.0
        if np.any(np.abs(z) > 1.0 + 1e-12):
            warnings.warn("parameter outside normalization range; extrapolating",
                          ParamRangeWarning, stacklevel=2)
        return z

    def denormalize_values(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        v = np.empty(self.count)
        for i, (lo, hi, logs) in enumerate(zip(self.lo, self.hi, self.log_scale)):
            if logs:
                v[i] = np.exp(np.log(lo) + 0.5 * (z[i] + 1.0) * (np.log(hi) - np.log(lo)))
            else:
                v[i] = lo + 0.5 * (z[i] + 1.0) * (hi - lo)
        return v

    def denormalize_jacobian(self, z) -> np.ndarray:
        """dv/dz, elementwise (the map is diagonal)."""
        v = self.denormalize_values(z)
        j = np.empty(self.count)
        for i, (lo, hi, logs) in enumerate(zip(self.lo, self.hi, self.log_scale)):
            if logs:
                j[i] = v[i] * 0.5 * (np.log(hi) - np.log(lo))
            else:
                j[i] = 0.5 * (hi - lo)
        return j


DEFAULT_RANGES = {
    Material.ELASTICITY: ParamRanges(
        names=PARAM_ORDER[Material.ELASTICITY],
        lo=(1e5, 0.1), hi=(3e5, 0.3), log_scale=(True, False)),
    Material.PLASTICINE: ParamRanges(
        names=PARAM_ORDER[Material.PLASTICINE],
        lo=(3e5, 0.25, 3e3), hi=(6e5, 0.4, 7e3), log_scale=(True, False, True)),
    Material.SAND: ParamRanges(
        names=PARAM_ORDER[Material.SAND],
        lo=(2e5, 0.15, 15.0), hi=(5e5, 0.3, 40.0), log_scale=(True, False, False)),
}


def param_values(params: PhysParams) -> np.ndarray:
    """Parameter tuple in the material's canonical order, SI units."""
    return np.array([getattr(params, name) for name in PARAM_ORDER[params.material]])


def params_from_values(material: Material, values) -> PhysParams:
    kwargs = dict(zip(PARAM_ORDER[material], np.asarray(values, dtype=np.float64)))
    return PhysParams(material=material, **kwargs)


def normalize_params(params: PhysParams, ranges: ParamRanges) -> np.ndarray:
    """Map a PhysParams to the [-1, 1]^k conditioning vector."""
    if tuple(ranges.names) != PARAM_ORDER[params.material]:
        raise InvalidParam("ranges do not match the material's parameter list")
    return ranges.normalize_values(param_values(params))


# ---------------------------------------------------------------------------
# network evaluation

def _encode_input(F: np.ndarray, cond: np.ndarray) -> np.ndarray:
    d = F.shape[-1]
    feats = (F - np.eye(d)).reshape(F.shape[0], d * d)
    conds = np.broadcast_to(cond, (F.shape[0], cond.shape[-1]))
    return np.concatenate([feats, conds], axis=1)


def els_nn(F_e: np.ndarray, param_e: np.ndarray, net: Mlp, stress_scale: float) -> np.ndarray:
    """Conditional elastic law: stress from deformation gradient."""
    d = F_e.shape[-1]
    if net.layer_dims[0] != d * d + len(param_e):
        raise ShapeMismatch(
            f"elastic net expects input {net.layer_dims[0]}, got {d * d + len(param_e)}")
    out = net.forward(_encode_input(F_e, np.asarray(param_e)))
    return stress_scale * out.reshape(F_e.shape[0], d, d)


def pls_nn(F_trial: np.ndarray, param_p: np.ndarray, net: Mlp) -> np.ndarray:
    """Conditional plastic law in residual form; untrained net is identity."""
    d = F_trial.shape[-1]
    if net.layer_dims[0] != d * d + len(param_p):
        raise ShapeMismatch(
            f"plastic net expects input {net.layer_dims[0]}, got {d * d + len(param_p)}")
    out = net.forward(_encode_input(F_trial, np.asarray(param_p)))
    return F_trial + out.reshape(F_trial.shape[0], d, d)


@dataclass
class NeuralLaw:
    """Pair of conditional networks exposing the engine's law interface."""

    material: Material
    els: Mlp
    pls: Mlp
    ranges: ParamRanges
    stress_scale: float

    def conditioning(self, params: PhysParams) -> np.ndarray:
        return normalize_params(params, self.ranges)

    def stress(self, F_e: np.ndarray, params: PhysParams) -> np.ndarray:
        z = self.conditioning(params)
        return els_nn(F_e, z[:2], self.els, self.stress_scale)

    def project(self, F_trial: np.ndarray, params: PhysParams) -> np.ndarray:
        z = self.conditioning(params)
        return pls_nn(F_trial, z, self.pls)


def make_neural_law(material: Material, dim: int, seed: int = 0,
                    ranges: ParamRanges | None = None) -> NeuralLaw:
    """Fresh conditional law: elastic output shrunk 1e-2, plastic zeroed."""
    if ranges is None:
        ranges = DEFAULT_RANGES[material]
    rng = np.random.default_rng(seed)
    n_cond = len(PARAM_ORDER[material])
    els = mlp_init(dim * dim + 2, dim * dim, rng, final_scale=1e-2)
    pls = mlp_init(dim * dim + n_cond, dim * dim, rng, final_zero=True)
    stress_scale = ranges.hi[0]
    return NeuralLaw(material=material, els=els, pls=pls, ranges=ranges,
                     stress_scale=stress_scale)
