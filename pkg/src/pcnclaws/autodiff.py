"""Reverse-mode differentiation through full rollouts.

A rollout is recorded as a tape of coarse primitives, one per pipeline
phase per substep, each vectorized over all particles:

    stress (analytic or elastic net) -> p2g -> grid_op -> g2p
        -> advect -> f_trial -> plastic projection (analytic or net)

Every primitive has a hand-derived adjoint registered next to its forward
function; backward() walks the records in reverse, accumulating gradients
into the leaves (initial state, normalized physical parameters, network
weights).  Forward arithmetic is shared with the plain engine, so a taped
rollout reproduces mpm.simulate bit for bit.

Long rollouts use sqrt-spaced gradient checkpointing: the forward pass
stores particle state every ~sqrt(T) frames and the backward sweep
re-records one segment at a time, keeping peak memory O(sqrt(T)) frames.
Adjoints of the plastic projections differentiate the active yield branch
and treat the branch indicator as locally constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import materials as mat
from . import mpm
from . import smallmat as sm
from .errors import Diverged, InvalidParam, MissingAdjoint, ShapeMismatch
from .laws import AnalyticLaw
from .materials import Material, PhysParams
from .mpm import (ParticleState, SimConfig, Trajectory, _g2p_core,
                  _grid_step_core, _offsets, _p2g_core, canonical_particle_order,
                  spline_coords, spline_dweights, spline_weights)
from .nn import (DEFAULT_RANGES, Mlp, NeuralLaw, ParamRanges, _encode_input,
                 normalize_params, param_values)

# ---------------------------------------------------------------------------
# op registry


@dataclass
class Op:
    forward: Callable   # (inputs: tuple[np.ndarray], aux: dict) -> (outputs, saved)
    adjoint: Callable   # (inputs, outputs, saved, aux, gout) -> gin tuple


_REGISTRY: Dict[str, Op] = {}


def register_op(name: str, forward, adjoint):
    _REGISTRY[name] = Op(forward=forward, adjoint=adjoint)


def get_op(name: str) -> Op:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise MissingAdjoint(f"primitive '{name}' has no registered adjoint") from None


@dataclass
class OpRecord:
    op: str
    inputs: Tuple[int, ...]
    outputs: Tuple[int, ...]
    aux: dict
    saved: tuple


class SegmentTape:
    """Ordered op records over value slots for one contiguous run of substeps."""

    def __init__(self):
        self.values: List[Optional[np.ndarray]] = []
        self.records: List[OpRecord] = []

    def put(self, value) -> int:
        self.values.append(value)
        return len(self.values) - 1

    def apply(self, op_name: str, input_ids: Tuple[int, ...], aux: dict) -> Tuple[int, ...]:
        op = get_op(op_name)
        inputs = tuple(self.values[i] for i in input_ids)
        outputs, saved = op.forward(inputs, aux)
        out_ids = tuple(self.put(o) for o in outputs)
        self.records.append(OpRecord(op_name, input_ids, out_ids, aux, saved))
        return out_ids

    def backward(self, grads: Dict[int, np.ndarray], hook=None):
        """Accumulate gradients slot-by-slot, walking records in reverse.

        `hook(record, values, grads)` runs before each record is processed
        and may inject extra gradient terms (auxiliary loss contributions).
        """
        for rec in reversed(self.records):
            if hook is not None:
                hook(rec, self.values, grads)
            gout = tuple(grads.get(o) for o in rec.outputs)
            if all(g is None for g in gout):
                continue
            gout = tuple(
                g if g is not None else np.zeros_like(self.values[o])
                for g, o in zip(gout, rec.outputs))
            op = get_op(rec.op)
            inputs = tuple(self.values[i] for i in rec.inputs)
            outputs = tuple(self.values[o] for o in rec.outputs)
            gin = op.adjoint(inputs, outputs, rec.saved, rec.aux, gout)
            for slot, g in zip(rec.inputs, gin):
                if g is None:
                    continue
                if slot in grads:
                    grads[slot] = grads[slot] + g
                else:
                    grads[slot] = g

    def replay_check(self) -> bool:
        """Re-run every record and verify outputs bit-exactly."""
        for rec in self.records:
            op = get_op(rec.op)
            inputs = tuple(self.values[i] for i in rec.inputs)
            outputs, _ = op.forward(inputs, rec.aux)
            for o_id, o in zip(rec.outputs, outputs):
                if not np.array_equal(self.values[o_id], o):
                    return False
        return True


# ---------------------------------------------------------------------------
# primitive forwards and adjoints

def _fwd_p2g(inputs, aux):
    x, v, C, F, P = inputs
    order = canonical_particle_order(ParticleState(
        x=x, v=v, F_e=F, C=C, mass=aux["mass"], volume0=aux["volume0"]))
    momentum, mass = _p2g_core(x, v, C, F, P, aux["mass"], aux["volume0"],
                               aux["dx"], aux["res"], aux["dim"], aux["dt"], order)
    # the adjoint gathers per particle, so the scatter order is not needed
    return (momentum, mass), ()


def _grad_weight_tables(fx, w, dw, dx, dim):
    """dW/dx per offset: (O, M, D) tensor of weight-product gradients."""
    offs = np.asarray(_offsets(dim))
    n_off = offs.shape[0]
    grad = np.empty((n_off, fx.shape[0], dim))
    for e in range(dim):
        g = dw[offs[:, e], :, e] / dx
        for d in range(dim):
            if d != e:
                g = g * w[offs[:, d], :, d]
        grad[:, :, e] = g
    return grad


def _adj_p2g(inputs, outputs, saved, aux, gout):
    x, v, C, F, P = inputs
    g_mom, g_mass = gout
    dim, res, dx, dt = aux["dim"], aux["res"], aux["dx"], aux["dt"]
    m = aux["mass"]
    beta = (-dt * 4.0 / dx ** 2) * aux["volume0"]
    base, fx = spline_coords(x, dx)
    w = spline_weights(fx)
    dw = spline_dweights(fx)
    affine = m[:, None, None] * C + beta[:, None, None] * (P @ np.swapaxes(F, -1, -2))
    w_all, dpos_all, idx_all = mpm._offset_tables(base, fx, w, dx, res, dim)
    gm_all = g_mom[idx_all]            # (O, M, D)
    gmass_all = g_mass[idx_all]        # (O, M)
    a_dpos = np.einsum("mij,omj->omi", affine, dpos_all)
    gv = np.einsum("om,omd->md", w_all * m, gm_all)
    g_affine = np.einsum("om,omi,omj->mij", w_all, gm_all, dpos_all)
    # dW/dx routes the scalar payload gradient; d(dpos)/dx = -I routes the
    # affine term directly
    scal = m * np.einsum("md,omd->om", v, gm_all) + \
        np.einsum("omi,omi->om", a_dpos, gm_all) + m * gmass_all
    grad_w = _grad_weight_tables(fx, w, dw, dx, dim)
    gx = np.einsum("ome,om->me", grad_w, scal)
    gx -= np.einsum("om,mji,omj->mi", w_all, affine, gm_all)
    gC = m[:, None, None] * g_affine
    gP = beta[:, None, None] * (g_affine @ F)
    gF = beta[:, None, None] * (np.swapaxes(g_affine, -1, -2) @ P)
    return gx, gv, gC, gF, gP


def _fwd_grid_op(inputs, aux):
    momentum, mass = inputs
    vel, active, kept = _grid_step_core(momentum, mass, aux["res"], aux["dim"],
                                        aux["dt"], aux["gravity"], aux["boundary"])
    return (vel,), (active, kept)


def _adj_grid_op(inputs, outputs, saved, aux, gout):
    momentum, mass = inputs
    (g_vel,) = gout
    active, kept = saved
    g = np.where(kept, g_vel, 0.0)
    g = np.where(active[:, None], g, 0.0)
    safe_mass = np.where(active, mass, 1.0)
    g_mom = g / safe_mass[:, None]
    vel_raw = np.where(active[:, None], momentum / safe_mass[:, None], 0.0)
    g_mass = -np.einsum("ni,ni->n", g, vel_raw) / safe_mass
    return g_mom, g_mass


def _fwd_g2p(inputs, aux):
    x, vel = inputs
    v_new, C_new = _g2p_core(x, vel, aux["dx"], aux["res"], aux["dim"])
    return (v_new, C_new), ()


def _adj_g2p(inputs, outputs, saved, aux, gout):
    x, vel = inputs
    g_v, g_C = gout
    dim, res, dx = aux["dim"], aux["res"], aux["dx"]
    kappa = 4.0 / dx ** 2
    base, fx = spline_coords(x, dx)
    w = spline_weights(fx)
    dw = spline_dweights(fx)
    w_all, dpos_all, idx_all = mpm._offset_tables(base, fx, w, dx, res, dim)
    g_n_all = vel[idx_all]             # (O, M, D)
    # grid-velocity gradient: from v' and from C'
    contrib = w_all[:, :, None] * (g_v[None] +
                                   kappa * np.einsum("mij,omj->omi", g_C, dpos_all))
    g_vel = np.zeros_like(vel)
    np.add.at(g_vel, idx_all.ravel(),
              contrib.reshape(-1, dim))
    # position gradient through the weights and through dpos
    scal = np.einsum("omi,mi->om", g_n_all, g_v) + \
        kappa * np.einsum("omi,mij,omj->om", g_n_all, g_C, dpos_all)
    grad_w = _grad_weight_tables(fx, w, dw, dx, dim)
    gx = np.einsum("ome,om->me", grad_w, scal)
    gx -= kappa * np.einsum("om,mij,omi->mj", w_all, g_C, g_n_all)
    return gx, g_vel


def _fwd_advect(inputs, aux):
    x, v = inputs
    return (x + aux["dt"] * v,), ()


def _adj_advect(inputs, outputs, saved, aux, gout):
    (g_x,) = gout
    return g_x, aux["dt"] * g_x


def _fwd_f_trial(inputs, aux):
    F, C = inputs
    dim = F.shape[-1]
    return ((np.eye(dim) + aux["dt"] * C) @ F,), ()


def _adj_f_trial(inputs, outputs, saved, aux, gout):
    F, C = inputs
    (g_out,) = gout
    dim = F.shape[-1]
    a = np.eye(dim) + aux["dt"] * C
    gF = np.swapaxes(a, -1, -2) @ g_out
    gC = aux["dt"] * (g_out @ np.swapaxes(F, -1, -2))
    return gF, gC


# -- analytic parameter chain -------------------------------------------------

def _lame_grads(E, nu):
    """d(mu, lam)/d(E, nu)."""
    d1 = 1.0 + nu
    d2 = 1.0 - 2.0 * nu
    dmu_dE = 1.0 / (2.0 * d1)
    dmu_dnu = -E / (2.0 * d1 * d1)
    dlam_dE = nu / (d1 * d2)
    dlam_dnu = E * (d1 * d2 - nu * (d2 - 2.0 * d1)) / (d1 * d2) ** 2
    return dmu_dE, dmu_dnu, dlam_dE, dlam_dnu


def _z_grad_from_lame(g_mu, g_lam, aux):
    """Route (g_mu, g_lam) into the normalized parameter vector."""
    E, nu = aux["values"][0], aux["values"][1]
    dmu_dE, dmu_dnu, dlam_dE, dlam_dnu = _lame_grads(E, nu)
    jac = aux["ranges"].denormalize_jacobian(aux["z"])
    gz = np.zeros(len(aux["z"]))
    gz[0] = (g_mu * dmu_dE + g_lam * dlam_dE) * jac[0]
    gz[1] = (g_mu * dmu_dnu + g_lam * dlam_dnu) * jac[1]
    return gz


def _fwd_corotated(inputs, aux):
    F, _z = inputs
    P = mat.fixed_corotated_stress(F, aux["mu"], aux["lam"])
    return (P,), ()


def _adj_corotated(inputs, outputs, saved, aux, gout):
    F, _z = inputs
    (gP,) = gout
    mu, lam = aux["mu"], aux["lam"]
    res = sm.svd(F)
    r = res.u @ sm.transpose(res.v)
    J = sm.det(F)
    f_inv = sm.inverse(F)
    f_inv_t = sm.transpose(f_inv)
    gF = 2.0 * mu * gP
    gF += sm.polar_rotation_vjp(r, res.v, res.sigma, -2.0 * mu * gP)
    c = lam * (J - 1.0) * J
    # volumetric term c(J) * F^-T: product rule over c and F^-T
    tr_term = np.einsum("mij,mij->m", gP, f_inv_t)
    gF += (lam * (2.0 * J - 1.0) * tr_term)[:, None, None] * J[:, None, None] * f_inv_t
    gF -= c[:, None, None] * (f_inv_t @ sm.transpose(gP) @ f_inv_t)
    g_mu = float(np.sum(2.0 * gP * (F - r)))
    g_lam = float(np.sum(((J - 1.0) * J) * tr_term))
    return gF, _z_grad_from_lame(g_mu, g_lam, aux)


def _fwd_hencky(inputs, aux):
    F, _z = inputs
    P = mat.stvk_hencky_stress(F, aux["mu"], aux["lam"])
    return (P,), ()


def _adj_hencky(inputs, outputs, saved, aux, gout):
    F, _z = inputs
    (gP,) = gout
    mu, lam = aux["mu"], aux["lam"]
    res = sm.svd(F)
    u, s, v = res.u, res.sigma, res.v
    eps = np.log(s)
    tr = np.sum(eps, axis=-1, keepdims=True)
    h = 2.0 * mu * eps + lam * tr
    g = h / s
    u_bar = gP @ v * g[:, None, :]
    v_bar = sm.transpose(gP) @ u * g[:, None, :]
    g_bar = np.einsum("mji,mjk,mki->mi", u, gP, v)
    # sigma gradient through g = h(sigma)/sigma
    gsum = np.sum(g_bar / s, axis=-1, keepdims=True)
    s_bar = (2.0 * mu * g_bar / s + lam * gsum) / s - g_bar * h / (s * s)
    gF = sm.svd_vjp(u, s, v, u_bar=u_bar, sigma_bar=s_bar, v_bar=v_bar)
    g_mu = float(np.sum(g_bar * 2.0 * eps / s))
    g_lam = float(np.sum(g_bar * tr / s))
    return gF, _z_grad_from_lame(g_mu, g_lam, aux)


def _hencky_decomp(F):
    res = sm.svd(F)
    eps = np.log(res.sigma)
    return res, eps


def _fwd_dp_project(inputs, aux):
    F, _z = inputs
    out = mat.drucker_prager_project(F, aux["mu"], aux["lam"], aux["theta_f"])
    return (out,), ()


def _adj_dp_project(inputs, outputs, saved, aux, gout):
    F, _z = inputs
    (gOut,) = gout
    mu, lam, theta = aux["mu"], aux["lam"], aux["theta_f"]
    d = F.shape[-1]
    res, eps = _hencky_decomp(F)
    u, s, v = res.u, res.sigma, res.v
    alpha = mat.dp_alpha(theta)
    tr = np.sum(eps, axis=-1)
    dev = eps - tr[:, None] / d
    dev_norm = np.linalg.norm(dev, axis=-1)
    cfac = (d * lam + 2.0 * mu) / (2.0 * mu)
    dgamma = dev_norm + alpha * cfac * tr
    tip = tr > 0.0
    plastic = (~tip) & (dgamma > 0.0) & (dev_norm > 0.0)
    elastic = ~(tip | plastic)

    gF = np.where(elastic[:, None, None], gOut, 0.0)
    g_mu = 0.0
    g_lam = 0.0
    g_alpha = 0.0
    if np.any(tip):
        rot = u @ sm.transpose(v)
        g_rot = np.where(tip[:, None, None], gOut, 0.0)
        gF = gF + np.where(tip[:, None, None],
                           _svd_rotation_vjp(u, s, v, g_rot), 0.0)
    if np.any(plastic):
        safe_norm = np.where(dev_norm > 0.0, dev_norm, 1.0)
        n_hat = dev / safe_norm[:, None]
        eps_new = eps - (dgamma / safe_norm)[:, None] * dev
        y = np.exp(eps_new)
        u_bar = gOut @ v * y[:, None, :]
        v_bar = sm.transpose(gOut) @ u * y[:, None, :]
        e_bar = np.einsum("mji,mjk,mki->mi", u, gOut, v) * y
        ndote = np.einsum("mi,mi->m", n_hat, e_bar)
        p_dev_e = e_bar - np.mean(e_bar, axis=-1, keepdims=True)
        e_grad = e_bar \
            - ndote[:, None] * (n_hat + alpha * cfac) \
            - (dgamma / safe_norm)[:, None] * (p_dev_e - ndote[:, None] * n_hat)
        s_bar = e_grad / s
        gF_pl = sm.svd_vjp(u, s, v, u_bar=u_bar, sigma_bar=s_bar, v_bar=v_bar)
        gF = gF + np.where(plastic[:, None, None], gF_pl, 0.0)
        # parameter gradients: dgamma = |dev| + alpha * cfac * tr
        g_dgamma = -ndote * plastic
        g_alpha = float(np.sum(g_dgamma * cfac * tr))
        g_cfac = float(np.sum(g_dgamma * alpha * tr))
        g_mu = g_cfac * (-d * lam / (2.0 * mu * mu))
        g_lam = g_cfac * (d / (2.0 * mu))
    gz = _z_grad_from_lame(g_mu, g_lam, aux)
    # friction angle feeds alpha only (degrees -> radians chain)
    th = math.radians(theta)
    dalpha_dtheta = math.sqrt(2.0 / 3.0) * 2.0 * 3.0 * math.cos(th) \
        / (3.0 - math.sin(th)) ** 2 * math.pi / 180.0
    jac = aux["ranges"].denormalize_jacobian(aux["z"])
    gz[2] += g_alpha * dalpha_dtheta * jac[2]
    return gF, gz


def _svd_rotation_vjp(u, s, v, g_rot):
    """Adjoint of F -> U V^T through the SVD of F (used by the cone tip)."""
    r = u @ sm.transpose(v)
    return sm.polar_rotation_vjp(r, v, s, g_rot)


def _fwd_vm_project(inputs, aux):
    F, _z = inputs
    out = mat.von_mises_project(F, aux["mu"], aux["lam"], aux["tau_y"])
    return (out,), ()


def _adj_vm_project(inputs, outputs, saved, aux, gout):
    F, _z = inputs
    (gOut,) = gout
    mu, tau_y = aux["mu"], aux["tau_y"]
    d = F.shape[-1]
    res, eps = _hencky_decomp(F)
    u, s, v = res.u, res.sigma, res.v
    tr = np.sum(eps, axis=-1)
    dev = eps - tr[:, None] / d
    dev_norm = np.linalg.norm(dev, axis=-1)
    k = math.sqrt(2.0 / 3.0) * tau_y / (2.0 * mu)
    yielding = (dev_norm > k) & (dev_norm > 0.0)
    gF = np.where(yielding[:, None, None], 0.0, gOut)
    g_mu = 0.0
    g_tau = 0.0
    if np.any(yielding):
        safe_norm = np.where(dev_norm > 0.0, dev_norm, 1.0)
        n_hat = dev / safe_norm[:, None]
        shrink = dev_norm - k
        eps_new = eps - (shrink / safe_norm)[:, None] * dev
        y = np.exp(eps_new)
        u_bar = gOut @ v * y[:, None, :]
        v_bar = sm.transpose(gOut) @ u * y[:, None, :]
        e_bar = np.einsum("mji,mjk,mki->mi", u, gOut, v) * y
        ndote = np.einsum("mi,mi->m", n_hat, e_bar)
        p_dev_e = e_bar - np.mean(e_bar, axis=-1, keepdims=True)
        e_grad = e_bar \
            - ndote[:, None] * n_hat \
            - (shrink / safe_norm)[:, None] * (p_dev_e - ndote[:, None] * n_hat)
        s_bar = e_grad / s
        gF_pl = sm.svd_vjp(u, s, v, u_bar=u_bar, sigma_bar=s_bar, v_bar=v_bar)
        gF = gF + np.where(yielding[:, None, None], gF_pl, 0.0)
        g_k = float(np.sum(ndote * yielding))
        g_tau = g_k * math.sqrt(2.0 / 3.0) / (2.0 * mu)
        g_mu = -g_k * k / mu
    # mu also enters the elastic moduli chain; lam does not appear here
    gz = _z_grad_from_lame(g_mu, 0.0, aux)
    jac = aux["ranges"].denormalize_jacobian(aux["z"])
    gz[2] += g_tau * jac[2]
    return gF, gz


# -- neural ops ---------------------------------------------------------------

def _fwd_els_nn(inputs, aux):
    F, z = inputs[0], inputs[1]
    net = _net_from_slots(inputs[2:])
    cond = z[:aux["n_cond"]]
    d = F.shape[-1]
    out, cache = net.forward_cached(_encode_input(F, cond))
    P = aux["stress_scale"] * out.reshape(F.shape[0], d, d)
    return (P,), (cache,)


def _adj_els_nn(inputs, outputs, saved, aux, gout):
    F, z = inputs[0], inputs[1]
    net = _net_from_slots(inputs[2:])
    (gP,) = gout
    d = F.shape[-1]
    (cache,) = saved
    g_out = aux["stress_scale"] * gP.reshape(F.shape[0], d * d)
    g_x, g_w = net.backward(cache, g_out)
    gF = g_x[:, :d * d].reshape(F.shape)
    gz = np.zeros_like(z)
    gz[:aux["n_cond"]] = g_x[:, d * d:].sum(axis=0)
    return (gF, gz) + tuple(g_w)


def _fwd_pls_nn(inputs, aux):
    F, z = inputs[0], inputs[1]
    net = _net_from_slots(inputs[2:])
    cond = z[:aux["n_cond"]]
    d = F.shape[-1]
    out, cache = net.forward_cached(_encode_input(F, cond))
    return (F + out.reshape(F.shape[0], d, d),), (cache,)


def _adj_pls_nn(inputs, outputs, saved, aux, gout):
    F, z = inputs[0], inputs[1]
    net = _net_from_slots(inputs[2:])
    (gOut,) = gout
    d = F.shape[-1]
    (cache,) = saved
    g_x, g_w = net.backward(cache, gOut.reshape(F.shape[0], d * d))
    gF = gOut + g_x[:, :d * d].reshape(F.shape)
    gz = np.zeros_like(z)
    gz[:aux["n_cond"]] = g_x[:, d * d:].sum(axis=0)
    return (gF, gz) + tuple(g_w)


def _net_from_slots(slots):
    w = list(slots)
    return Mlp([w[0], w[2], w[4]], [w[1], w[3], w[5]])


register_op("p2g", _fwd_p2g, _adj_p2g)
register_op("grid_op", _fwd_grid_op, _adj_grid_op)
register_op("g2p", _fwd_g2p, _adj_g2p)
register_op("advect", _fwd_advect, _adj_advect)
register_op("f_trial", _fwd_f_trial, _adj_f_trial)
register_op("corotated_stress", _fwd_corotated, _adj_corotated)
register_op("hencky_stress", _fwd_hencky, _adj_hencky)
register_op("dp_project", _fwd_dp_project, _adj_dp_project)
register_op("vm_project", _fwd_vm_project, _adj_vm_project)
register_op("els_nn", _fwd_els_nn, _adj_els_nn)
register_op("pls_nn", _fwd_pls_nn, _adj_pls_nn)


# ---------------------------------------------------------------------------
# rollout recording

@dataclass
class GradBundle:
    """Gradients mirroring their primal objects.

    d_params lives in normalized parameter space; use to_si_gradient for
    SI-space values.
    """

    d_theta_e: Optional[List[np.ndarray]]
    d_theta_p: Optional[List[np.ndarray]]
    d_params: np.ndarray
    d_state0: Dict[str, np.ndarray]


def to_si_gradient(d_params: np.ndarray, z: np.ndarray, ranges: ParamRanges) -> np.ndarray:
    """Map a normalized-space gradient back through the normalization."""
    return d_params / ranges.denormalize_jacobian(z)


class _LawContext:
    """Slot wiring for one law: which ops to record and their aux payload."""

    def __init__(self, law, params: PhysParams, ranges: Optional[ParamRanges]):
        self.law = law
        self.params = params
        if isinstance(law, NeuralLaw):
            self.ranges = law.ranges
            self.z = normalize_params(params, law.ranges)
            self.neural = True
        else:
            self.ranges = ranges if ranges is not None else DEFAULT_RANGES[params.material]
            self.z = normalize_params(params, self.ranges)
            self.neural = False
        self.values = param_values(params)
        mu, lam = params.lame
        self.mu, self.lam = mu, lam

    def law_slots(self, tape: SegmentTape):
        """Put leaves (z and, for neural laws, weights) into a fresh tape."""
        slots = {"z": tape.put(self.z)}
        if self.neural:
            for tag, net in (("e", self.law.els), ("p", self.law.pls)):
                for i in range(3):
                    slots[f"{tag}w{i}"] = tape.put(net.weights[i])
                    slots[f"{tag}b{i}"] = tape.put(net.biases[i])
        return slots

    def stress_call(self, tape, slots, f_slot):
        base_aux = {"z": self.z, "values": self.values, "ranges": self.ranges}
        if self.neural:
            ids = (f_slot, slots["z"],
                   slots["ew0"], slots["eb0"], slots["ew1"], slots["eb1"],
                   slots["ew2"], slots["eb2"])
            aux = {"stress_scale": self.law.stress_scale, "n_cond": 2}
            return tape.apply("els_nn", ids, aux)[0]
        aux = dict(base_aux, mu=self.mu, lam=self.lam)
        name = ("corotated_stress" if self.params.material is Material.ELASTICITY
                else "hencky_stress")
        return tape.apply(name, (f_slot, slots["z"]), aux)[0]

    def project_call(self, tape, slots, f_slot):
        if self.neural:
            ids = (f_slot, slots["z"],
                   slots["pw0"], slots["pb0"], slots["pw1"], slots["pb1"],
                   slots["pw2"], slots["pb2"])
            aux = {"n_cond": len(self.z)}
            return tape.apply("pls_nn", ids, aux)[0]
        if self.params.material is Material.ELASTICITY:
            return f_slot  # identity projection: no op recorded
        aux = {"z": self.z, "values": self.values, "ranges": self.ranges,
               "mu": self.mu, "lam": self.lam}
        if self.params.material is Material.SAND:
            aux["theta_f"] = self.params.friction_angle
            return tape.apply("dp_project", (f_slot, slots["z"]), aux)[0]
        aux["tau_y"] = self.params.yield_stress
        return tape.apply("vm_project", (f_slot, slots["z"]), aux)[0]

    def weight_grad_slots(self, slots):
        e = [slots[f"e{k}{i}"] for i in range(3) for k in ("w", "b")]
        p = [slots[f"p{k}{i}"] for i in range(3) for k in ("w", "b")]
        return e, p


def _record_frames(ctx: _LawContext, cfg: SimConfig, state: ParticleState,
                   n_frames: int):
    """Record n_frames of substeps on one segment tape.

    Returns (tape, law slots, state-leaf slots, per-frame x and v slots
    incl. the segment's initial frame, final state slot ids).
    """
    tape = SegmentTape()
    slots = ctx.law_slots(tape)
    sx = tape.put(state.x)
    sv = tape.put(state.v)
    sF = tape.put(state.F_e)
    leaf_state = (sx, sv, sF)
    frame_x = [sx]
    frame_v = [sv]
    mass, vol = state.mass, state.volume0
    step_aux = {"dx": cfg.dx, "res": cfg.grid_resolution, "dim": cfg.dim,
                "dt": cfg.dt, "mass": mass, "volume0": vol}
    grid_aux = {"res": cfg.grid_resolution, "dim": cfg.dim, "dt": cfg.dt,
                "gravity": cfg.gravity, "boundary": cfg.boundary}
    g2p_aux = {"dx": cfg.dx, "res": cfg.grid_resolution, "dim": cfg.dim}
    for _ in range(n_frames):
        sC = tape.put(np.zeros_like(state.C))  # affine reset at frame boundary
        for _ in range(cfg.frame_stride):
            sP = ctx.stress_call(tape, slots, sF)
            s_mom, s_mass = tape.apply("p2g", (sx, sv, sC, sF, sP), step_aux)
            (s_vel,) = tape.apply("grid_op", (s_mom, s_mass), grid_aux)
            sv, sC = tape.apply("g2p", (sx, s_vel), g2p_aux)
            (sx,) = tape.apply("advect", (sx, sv), {"dt": cfg.dt})
            (sF_tr,) = tape.apply("f_trial", (sF, sC), {"dt": cfg.dt})
            sF = ctx.project_call(tape, slots, sF_tr)
            if np.abs(tape.values[sx]).max() > mpm.DIVERGE_LIMIT or \
               np.abs(tape.values[sv]).max() > mpm.DIVERGE_LIMIT:
                raise Diverged("position or velocity exceeded 1e6 SI units")
        frame_x.append(sx)
        frame_v.append(sv)
    return tape, slots, leaf_state, frame_x, frame_v, (sx, sv, sF, sC)


class Tape:
    """Checkpointed record of one rollout, sufficient for exact BPTT.

    The forward pass stores particle-state checkpoints every `segment`
    frames; backward() re-records one segment at a time and frees it after
    its reverse sweep, so peak live records stay O(sqrt(T)).
    """

    def __init__(self, ctx: _LawContext, cfg: SimConfig, checkpoints,
                 n_frames: int, segment: int, trajectory: Trajectory,
                 positions64: np.ndarray, live=None):
        self._ctx = ctx
        self._cfg = cfg
        self._checkpoints = checkpoints  # frame index -> ParticleState
        self.n_frames = n_frames
        self.segment = segment
        self.trajectory = trajectory
        # full-precision recorded positions: losses that feed backward()
        # must be computed from these, not the float32 file snapshots
        self.positions64 = positions64
        # single-segment tapes keep the records from the forward pass so
        # the backward sweep needs no re-recording
        self._live = live
        self.peak_live_records = len(live[0].records) if live else 0
        self.live_records = self.peak_live_records

    @property
    def n_checkpoints(self) -> int:
        return len(self._checkpoints)

    def _segment_starts(self):
        return list(range(0, self.n_frames, self.segment))

    def backward(self, seed: np.ndarray,
                 residual_penalty: float = 0.0) -> GradBundle:
        """Gradients of sum(seed * positions) plus, optionally, a penalty
        residual_penalty * mean over substeps/particles of the squared
        plastic-residual norm (keeps a learned projection anchored to the
        identity when the data demands no plasticity)."""
        ctx = self._ctx
        cfg = self._cfg
        m, d = self.trajectory.particle_count, self.trajectory.dim
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != (self.n_frames + 1, m, d):
            raise ShapeMismatch(
                f"seed must have shape {(self.n_frames + 1, m, d)}, got {seed.shape}")
        hook = None
        if residual_penalty:
            pen_scale = 2.0 * residual_penalty / (self.n_frames * cfg.frame_stride * m)

            def hook(rec, values, grads):
                if rec.op != "pls_nn":
                    return
                out_slot = rec.outputs[0]
                in_slot = rec.inputs[0]
                g = pen_scale * (values[out_slot] - values[in_slot])
                grads[out_slot] = grads.get(out_slot, 0.0) + g
                grads[in_slot] = grads.get(in_slot, 0.0) - g
        gz = np.zeros_like(ctx.z)
        g_theta_e = None
        g_theta_p = None
        carry = None  # grads wrt (x, v, F) at the segment boundary
        for start in reversed(self._segment_starts()):
            n_sub = min(self.segment, self.n_frames - start)
            if self._live is not None:
                tape, slots, leaf_state, frame_x, _, final = self._live
            else:
                tape, slots, leaf_state, frame_x, _, final = _record_frames(
                    ctx, cfg, self._checkpoints[start], n_sub)
            self.live_records = len(tape.records)
            self.peak_live_records = max(self.peak_live_records, self.live_records)
            grads: Dict[int, np.ndarray] = {}
            for k, slot in enumerate(frame_x):
                if k == 0 and start > 0:
                    continue  # seed of a checkpoint frame belongs to the previous segment
                s = seed[start + k]
                if np.any(s):
                    grads[slot] = grads.get(slot, 0.0) + s
            if carry is not None:
                fx_slot, fv_slot, fF_slot = final[0], final[1], final[2]
                for slot, g in zip((fx_slot, fv_slot, fF_slot), carry):
                    if slot in grads:
                        grads[slot] = grads[slot] + g
                    else:
                        grads[slot] = g.copy()
            tape.backward(grads, hook=hook)
            gz += grads.get(slots["z"], 0.0)
            if ctx.neural:
                e_slots, p_slots = ctx.weight_grad_slots(slots)
                ge = [grads.get(s_, None) for s_ in e_slots]
                gp = [grads.get(s_, None) for s_ in p_slots]
                ge = [g if g is not None else np.zeros_like(tape.values[s_])
                      for g, s_ in zip(ge, e_slots)]
                gp = [g if g is not None else np.zeros_like(tape.values[s_])
                      for g, s_ in zip(gp, p_slots)]
                if g_theta_e is None:
                    g_theta_e, g_theta_p = ge, gp
                else:
                    g_theta_e = [a + b for a, b in zip(g_theta_e, ge)]
                    g_theta_p = [a + b for a, b in zip(g_theta_p, gp)]
            carry = tuple(
                grads.get(s_, np.zeros_like(tape.values[s_])) for s_ in leaf_state)
            self.live_records = self.n_checkpoints
        d_state0 = {"x": carry[0], "v": carry[1], "F_e": carry[2],
                    "C": np.zeros((m, d, d))}
        return GradBundle(d_theta_e=g_theta_e, d_theta_p=g_theta_p,
                          d_params=gz, d_state0=d_state0)

    def replay(self) -> Trajectory:
        """Re-run the forward pass from the stored checkpoints."""
        positions = self.trajectory.positions.copy()
        for start in self._segment_starts():
            n_sub = min(self.segment, self.n_frames - start)
            tape, _, _, frame_x, _, _ = _record_frames(
                self._ctx, self._cfg, self._checkpoints[start], n_sub)
            for k, slot in enumerate(frame_x):
                positions[start + k] = tape.values[slot].astype(np.float32)
        return Trajectory(positions=positions, frame_dt=self.trajectory.frame_dt,
                          velocities=self.trajectory.velocities,
                          params=self.trajectory.params,
                          material=self.trajectory.material)


def rollout_with_tape(initial: ParticleState, law, params: PhysParams,
                      cfg: SimConfig, n_frames: int,
                      ranges: Optional[ParamRanges] = None,
                      segment: Optional[int] = None):
    """Forward rollout plus a Tape for exact reverse-mode gradients.

    The trajectory matches mpm.simulate bit for bit.  segment=None picks the
    sqrt(T) checkpoint spacing; segment=n_frames disables checkpointing.
    """
    if n_frames < 1:
        raise InvalidParam("n_frames must be >= 1")
    ctx = _LawContext(law, params, ranges)
    if segment is None:
        segment = max(1, int(math.ceil(math.sqrt(n_frames))))
    m, d = initial.count, initial.dim
    mat = getattr(law, "material", None)
    if segment >= n_frames:
        # single segment: record ops during the forward pass itself
        state0 = initial.copy()
        try:
            live = _record_frames(ctx, cfg, state0, n_frames)
        except Diverged as exc:
            raise Diverged(str(exc), frame=getattr(exc, "frame", None)) from exc
        tape_seg, _, _, frame_x, frame_v, _ = live
        positions64 = np.stack([tape_seg.values[s] for s in frame_x])
        positions = positions64.astype(np.float32)
        velocities = np.stack(
            [tape_seg.values[s] for s in frame_v]).astype(np.float32)
        traj = Trajectory(positions=positions, frame_dt=cfg.frame_dt,
                          velocities=velocities, params=params, material=mat)
        tape = Tape(ctx, cfg, {0: state0}, n_frames, n_frames, traj,
                    positions64, live=live)
        return traj, tape
    checkpoints = {}
    state = initial.copy()
    positions = np.empty((n_frames + 1, m, d), dtype=np.float32)
    velocities = np.empty((n_frames + 1, m, d), dtype=np.float32)
    positions64 = np.empty((n_frames + 1, m, d))
    positions[0] = state.x.astype(np.float32)
    velocities[0] = state.v.astype(np.float32)
    positions64[0] = state.x
    for frame in range(n_frames):
        if frame % segment == 0:
            checkpoints[frame] = state.copy()
        state.C = np.zeros_like(state.C)
        try:
            for _ in range(cfg.frame_stride):
                state = mpm.step(state, law, params, cfg)
        except Diverged as exc:
            raise Diverged(f"rollout diverged at frame {frame + 1}",
                           frame=frame + 1) from exc
        positions[frame + 1] = state.x.astype(np.float32)
        velocities[frame + 1] = state.v.astype(np.float32)
        positions64[frame + 1] = state.x
    traj = Trajectory(positions=positions, frame_dt=cfg.frame_dt,
                      velocities=velocities, params=params,
                      material=getattr(law, "material", None))
    tape = Tape(ctx, cfg, checkpoints, n_frames, segment, traj, positions64)
    return traj, tape


def backward(tape: Tape, seed: np.ndarray) -> GradBundle:
    """Reverse-mode gradients of sum(seed * positions) over recorded frames."""
    return tape.backward(seed)


# ---------------------------------------------------------------------------
# finite-difference harness

def finite_diff_check(fn, point: np.ndarray, eps: float = 1e-6,
                      coords=None) -> float:
    """Compare fn's analytic gradient against central differences.

    fn(x) must return (value, gradient).  Returns the max relative error
    over the tested coordinates (all of them unless `coords` given).
    """
    point = np.asarray(point, dtype=np.float64)
    _, grad = fn(point)
    grad = np.asarray(grad)
    if grad.shape != point.shape:
        raise ShapeMismatch("gradient shape must match the point")
    worst = 0.0
    idx_list = coords if coords is not None else list(np.ndindex(point.shape))
    for idx in idx_list:
        xp = point.copy()
        xp[idx] += eps
        xm = point.copy()
        xm[idx] -= eps
        fd = (fn(xp)[0] - fn(xm)[0]) / (2.0 * eps)
        err = abs(grad[idx] - fd) / max(abs(grad[idx]), abs(fd), 1e-12)
        worst = max(worst, err)
    return worst
