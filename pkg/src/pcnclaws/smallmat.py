"""Fixed-dimension (2x2 / 3x3) matrix kernels with hand-derived adjoints.

Every function accepts a single matrix of shape (D, D) or a batch of
shape (..., D, D) and is pure: no global state, bit-identical output for
bit-identical input.  All arithmetic is float64.

The SVD is computed by symmetric Jacobi iteration on M^T M (a single
closed-form rotation for D=2) followed by an explicit sign fix-up so that
det(u) = det(v) = +1 and only the last singular value may be negative
(rotation-preserving convention).  Adjoints:

- svd_vjp uses the standard F-matrix formula; the sigma_j^2 - sigma_i^2
  denominators are clamped to a sign-preserving magnitude >= 1e-8 because
  return mappings routinely produce near-tied singular values.
- polar_rotation_vjp solves the Lyapunov system W S + S W = B in the
  stretch eigenbasis; its sigma_i + sigma_j denominators are strictly
  positive, so it stays exact at tied singular values (the rest state
  F = I hits that constantly).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParam, NonInvertible

# Minimum |det| for inversion-like operations.
DET_TOL = 1e-12
# Sign-preserving clamp for SVD adjoint denominators.
SVD_TIE_CLAMP = 1e-8

_JACOBI_PAIRS_3 = ((0, 1), (0, 2), (1, 2))
_MAX_SWEEPS = 24


def _check_mat(m, name="m"):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2] or m.shape[-1] not in (2, 3):
        raise InvalidParam(f"{name} must have shape (..., D, D) with D in {{2, 3}}, got {m.shape}")
    if not np.isfinite(m).all():
        raise InvalidParam(f"{name} contains non-finite entries")
    return m


def transpose(m):
    return np.swapaxes(m, -1, -2)


def det(m):
    """Determinant via explicit cofactor expansion."""
    m = _check_mat(m)
    if m.shape[-1] == 2:
        return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    return (
        m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
        - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
        + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0])
    )


def cofactor(m):
    """Cofactor matrix; equals d(det)/dM and det * inv(M)^T when invertible."""
    m = _check_mat(m)
    c = np.empty_like(m)
    if m.shape[-1] == 2:
        c[..., 0, 0] = m[..., 1, 1]
        c[..., 0, 1] = -m[..., 1, 0]
        c[..., 1, 0] = -m[..., 0, 1]
        c[..., 1, 1] = m[..., 0, 0]
        return c
    for i in range(3):
        for j in range(3):
            r = [k for k in range(3) if k != i]
            s = [k for k in range(3) if k != j]
            minor = (
                m[..., r[0], s[0]] * m[..., r[1], s[1]]
                - m[..., r[0], s[1]] * m[..., r[1], s[0]]
            )
            c[..., i, j] = minor if (i + j) % 2 == 0 else -minor
    return c


def inverse(m):
    """Inverse via adjugate; raises NonInvertible when |det| <= 1e-12."""
    m = _check_mat(m)
    d = det(m)
    if np.any(np.abs(d) <= DET_TOL):
        raise NonInvertible("matrix determinant within 1e-12 of zero")
    return transpose(cofactor(m)) / d[..., None, None]


def det_vjp(m, g):
    """Adjoint of det: dL/dM = g * cofactor(M)."""
    return np.asarray(g)[..., None, None] * cofactor(m)


def inverse_vjp(y, g):
    """Adjoint of Y = M^-1 given Y: dL/dM = -Y^T g Y^T."""
    yt = transpose(y)
    return -yt @ g @ yt


@dataclass
class SvdResult:
    """Rotation-preserving SVD: u @ diag(sigma) @ v^T reconstructs the input.

    u, v are orthogonal with det = +1; sigma is sorted descending and only
    its last entry may be negative (when the input has negative determinant).
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


def _jacobi_sym(a):
    """Eigen-decomposition of symmetric (..., D, D) by cyclic Jacobi.

    Returns (w, v) with a = v @ diag(w) @ v^T, w unsorted.  For D=2 a single
    rotation diagonalizes exactly (the closed form); for D=3 sweeps run until
    the off-diagonal residual hits round-off.
    """
    d = a.shape[-1]
    a = a.copy()
    v = np.zeros_like(a)
    v[..., range(d), range(d)] = 1.0
    pairs = ((0, 1),) if d == 2 else _JACOBI_PAIRS_3
    scale = np.max(np.abs(a)) if a.size else 0.0
    if scale == 0.0:
        return np.zeros(a.shape[:-1]), v
    sweeps = 1 if d == 2 else _MAX_SWEEPS
    for _ in range(sweeps):
        off = 0.0
        for (p, q) in pairs:
            off = max(off, np.max(np.abs(a[..., p, q])))
        if off <= 1e-15 * scale:
            break
        for (p, q) in pairs:
            apq = a[..., p, q].copy()
            active = np.abs(apq) > 1e-300
            safe = np.where(active, apq, 1.0)
            tau = (a[..., q, q] - a[..., p, p]) / (2.0 * safe)
            sign = np.where(tau >= 0.0, 1.0, -1.0)
            with np.errstate(over="ignore"):
                # tau*tau may overflow to inf; t -> 0 is the right limit.
                t = sign / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            t = np.where(active, t, 0.0)
            # diagonal and zeroed pivot
            app = a[..., p, p]
            aqq = a[..., q, q]
            a[..., p, p] = app - t * apq
            a[..., q, q] = aqq + t * apq
            a[..., p, q] = 0.0
            a[..., q, p] = 0.0
            for k in range(d):
                if k in (p, q):
                    continue
                akp = a[..., k, p].copy()
                akq = a[..., k, q].copy()
                a[..., k, p] = c * akp - s * akq
                a[..., p, k] = a[..., k, p]
                a[..., k, q] = s * akp + c * akq
                a[..., q, k] = a[..., k, q]
            vp = v[..., :, p].copy()
            vq = v[..., :, q].copy()
            cc = c[..., None] if np.ndim(c) else c
            ss = s[..., None] if np.ndim(s) else s
            v[..., :, p] = cc * vp - ss * vq
            v[..., :, q] = ss * vp + cc * vq
    w = a[..., range(d), range(d)]
    return w, v


def _complete_orthonormal(m, v, sigma, cutoff):
    """Scalar fallback: rebuild U columns for one rank-deficient matrix."""
    d = m.shape[-1]
    cols = []
    for i in range(d):
        if sigma[i] > cutoff:
            cols.append(m @ v[:, i] / sigma[i])
        else:
            cols.append(None)
    # Gram-Schmidt completion of the missing columns from coordinate axes.
    for i in range(d):
        if cols[i] is not None:
            continue
        if d == 3 and sum(c is not None for c in cols) == 2:
            others = [c for c in cols if c is not None]
            cand = np.cross(others[0], others[1])
        else:
            cand = None
            for axis in range(d):
                trial = np.zeros(d)
                trial[axis] = 1.0
                for c in cols:
                    if c is not None:
                        trial -= (trial @ c) * c
                n = np.linalg.norm(trial)
                if n > 0.5:
                    cand = trial / n
                    break
            if cand is None:  # pragma: no cover - d axes always span
                cand = np.zeros(d)
                cand[i] = 1.0
        cols[i] = cand / np.linalg.norm(cand)
    u = np.stack(cols, axis=-1)
    # Flip a zero-sigma column if needed so det(u) = +1.
    if det(u) < 0.0:
        for i in range(d - 1, -1, -1):
            if sigma[i] <= cutoff:
                u[:, i] = -u[:, i]
                break
        else:
            u[:, -1] = -u[:, -1]
    return u


def svd(m) -> SvdResult:
    """Rotation-preserving SVD of a (..., D, D) matrix.

    Deterministic for identical input bits; degenerate inputs yield valid
    decompositions with zero singular values.
    """
    m = _check_mat(m)
    d = m.shape[-1]
    a = transpose(m) @ m
    w, v = _jacobi_sym(a)
    order = np.argsort(-w, axis=-1)
    v = np.take_along_axis(v, order[..., None, :], axis=-1)
    # sigma from the column norms of m @ v keeps u exactly unit-length even
    # for poorly conditioned inputs (sqrt of Jacobi eigenvalues loses half
    # the digits on the small ones).
    mv = m @ v
    sigma = np.sqrt(np.sum(mv * mv, axis=-2))
    order = np.argsort(-sigma, axis=-1)
    sigma = np.take_along_axis(sigma, order, axis=-1)
    v = np.take_along_axis(v, order[..., None, :], axis=-1)
    mv = np.take_along_axis(mv, order[..., None, :], axis=-1)
    # Column permutation may flip orientation; restore det(v) = +1.
    neg = det(v) < 0.0
    if np.any(neg):
        v = v.copy()
        mv = mv.copy()
        flipcol = np.asarray(neg)[..., None]
        v[..., :, -1] = np.where(flipcol, -v[..., :, -1], v[..., :, -1])
        mv[..., :, -1] = np.where(flipcol, -mv[..., :, -1], mv[..., :, -1])
    smax = np.max(sigma, axis=-1)
    cutoff = np.maximum(smax * 1e-14, 1e-300)
    degenerate = sigma[..., -1] <= cutoff
    safe_sigma = np.where(sigma > cutoff[..., None], sigma, 1.0)
    u = mv / safe_sigma[..., None, :]
    # One modified Gram-Schmidt pass (largest column first) scrubs the
    # residual non-orthogonality the Jacobi tolerance leaves behind.
    for i in range(1, d):
        ui = u[..., :, i].copy()
        for j in range(i):
            uj = u[..., :, j]
            ui = ui - np.sum(ui * uj, axis=-1)[..., None] * uj
        norm = np.sqrt(np.sum(ui * ui, axis=-1))
        ui = ui / np.where(norm > 0.5, norm, 1.0)[..., None]
        u[..., :, i] = ui
    if np.any(degenerate):
        flat_m = m.reshape(-1, d, d)
        flat_v = v.reshape(-1, d, d)
        flat_s = sigma.reshape(-1, d)
        flat_u = u.reshape(-1, d, d)
        flat_deg = np.asarray(degenerate).reshape(-1)
        flat_cut = np.asarray(cutoff).reshape(-1)
        for idx in np.nonzero(flat_deg)[0]:
            flat_u[idx] = _complete_orthonormal(
                flat_m[idx], flat_v[idx], flat_s[idx], flat_cut[idx]
            )
        u = flat_u.reshape(m.shape)
    # Negative-determinant inputs: push the reflection into the last sigma.
    du = det(u)
    flip = np.asarray(du < 0.0)
    if np.any(flip):
        u = u.copy()
        u[..., :, -1] = np.where(flip[..., None], -u[..., :, -1], u[..., :, -1])
        sigma = sigma.copy()
        sigma[..., -1] = np.where(flip, -sigma[..., -1], sigma[..., -1])
    return SvdResult(u=u, sigma=sigma, v=v)


def svd_vjp(u, sigma, v, u_bar=None, sigma_bar=None, v_bar=None):
    """Reverse-mode adjoint of the SVD (the F-matrix formula).

    Denominators sigma_j^2 - sigma_i^2 are clamped to a sign-preserving
    magnitude >= 1e-8; callers that need exactness at ties should use
    polar_rotation_vjp or a composite adjoint instead.
    """
    d = u.shape[-1]
    s2 = sigma * sigma
    denom = s2[..., None, :] - s2[..., :, None]
    sgn = np.where(denom >= 0.0, 1.0, -1.0)
    denom = sgn * np.maximum(np.abs(denom), SVD_TIE_CLAMP)
    f = 1.0 / denom
    f[..., range(d), range(d)] = 0.0
    p = np.zeros_like(u)
    if u_bar is not None:
        g = transpose(u) @ u_bar
        p = p + f * ((g - transpose(g)) * sigma[..., None, :])
    if v_bar is not None:
        h = transpose(v) @ v_bar
        p = p + f * (sigma[..., :, None] * (h - transpose(h)))
    if sigma_bar is not None:
        p = p.copy()
        p[..., range(d), range(d)] += sigma_bar
    return u @ p @ transpose(v)


def polar_decompose(m):
    """Polar decomposition m = r @ s with det(r) = +1 and s symmetric PD.

    Requires det(m) > 1e-12, else NonInvertible.
    """
    m = _check_mat(m)
    d = det(m)
    if np.any(d <= DET_TOL):
        raise NonInvertible("polar_decompose requires det(m) > 1e-12")
    res = svd(m)
    r = res.u @ transpose(res.v)
    s = res.v @ (res.sigma[..., :, None] * transpose(res.v))
    return r, s


def polar_rotation_vjp(r, v, sigma, r_bar):
    """Adjoint of the rotation factor r of the polar decomposition.

    Solves W S + S W = B in the eigenbasis of the stretch; the sigma_i +
    sigma_j denominators keep this exact even at tied singular values.
    """
    k = transpose(r) @ r_bar
    asym = 0.5 * (k - transpose(k))
    a_hat = transpose(v) @ asym @ v
    s_sum = np.maximum(sigma[..., :, None] + sigma[..., None, :], 1e-12)
    c_hat = a_hat / s_sum
    c = v @ c_hat @ transpose(v)
    return 2.0 * (r @ c)
