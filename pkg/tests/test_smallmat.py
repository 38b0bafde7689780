"""Kernel tests: SVD/polar invariants plus adjoint-vs-finite-difference checks."""

import numpy as np
import pytest

from pcnclaws import smallmat as sm
from pcnclaws.errors import NonInvertible


def fd_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += eps
        xm = x.copy()
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


def jacobi_eig_oracle(a, sweeps=30):
    """Plain scalar-loop Jacobi eigendecomposition, independent of smallmat."""
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(sweeps):
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(tau) if tau != 0 else 1.0
                t = t / (abs(tau) + np.hypot(1.0, tau))
                c = 1.0 / np.hypot(1.0, t)
                s = t * c
                j = np.eye(n)
                j[p, p] = j[q, q] = c
                j[p, q] = s
                j[q, p] = -s
                a = j.T @ a @ j
                v = v @ j
    return np.diag(a), v


def random_rotation(rng, d):
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    if np.linalg.det(q) < 0:
        q[:, -1] = -q[:, -1]
    return q


class TestSvd:
    def test_identity(self):
        r = sm.svd(np.eye(3))
        assert np.array_equal(r.u, np.eye(3))
        assert np.array_equal(r.sigma, np.ones(3))
        assert np.array_equal(r.v, np.eye(3))

    def test_diagonal(self):
        r = sm.svd(np.diag([2.0, 1.0, 0.5]))
        assert np.allclose(r.u, np.eye(3))
        assert np.allclose(r.sigma, [2.0, 1.0, 0.5])
        assert np.allclose(r.v, np.eye(3))

    @pytest.mark.parametrize("d", [2, 3])
    def test_reconstruction_against_jacobi_oracle(self, d):
        rng = np.random.default_rng(7)
        for _ in range(100):
            m = rng.normal(size=(d, d))
            r = sm.svd(m)
            rec = r.u @ np.diag(r.sigma) @ r.v.T
            assert np.linalg.norm(rec - m) <= 1e-9 * np.linalg.norm(m)
            # sigma^2 must match the eigenvalues of M^T M from the oracle
            w, _ = jacobi_eig_oracle(m.T @ m)
            assert np.allclose(np.sort(r.sigma**2), np.sort(w), rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize("d", [2, 3])
    def test_orthogonality_and_order(self, d):
        rng = np.random.default_rng(11)
        m = rng.normal(size=(200, d, d))
        r = sm.svd(m)
        eye = np.eye(d)
        assert np.abs(r.u @ sm.transpose(r.u) - eye).max() <= 1e-10
        assert np.abs(r.v @ sm.transpose(r.v) - eye).max() <= 1e-10
        assert np.all(np.diff(r.sigma, axis=-1) <= 1e-12)
        # rotation-preserving convention
        assert np.allclose(sm.det(r.u), 1.0)
        assert np.allclose(sm.det(r.v), 1.0)
        assert np.all(r.sigma[..., :-1] >= -1e-15)

    def test_degenerate_inputs(self):
        for mat in [np.zeros((3, 3)), np.diag([1.0, 1.0, 0.0]), np.diag([2.0, 0.0, 0.0]),
                    np.zeros((2, 2)), np.diag([1.0, 0.0])]:
            r = sm.svd(mat)
            d = mat.shape[0]
            rec = r.u @ np.diag(r.sigma) @ r.v.T
            assert np.abs(rec - mat).max() <= 1e-12
            assert np.abs(r.u @ r.u.T - np.eye(d)).max() <= 1e-10

    def test_negative_determinant_sign_convention(self):
        m = np.diag([1.0, 1.0, -1.0])
        r = sm.svd(m)
        assert sm.det(r.u) == pytest.approx(1.0)
        assert r.sigma[-1] == pytest.approx(-1.0)
        assert np.abs(r.u @ np.diag(r.sigma) @ r.v.T - m).max() <= 1e-12

    def test_determinism_bitwise(self):
        rng = np.random.default_rng(3)
        m = rng.normal(size=(17, 3, 3))
        a = sm.svd(m)
        b = sm.svd(m.copy())
        assert np.array_equal(a.u, b.u)
        assert np.array_equal(a.sigma, b.sigma)
        assert np.array_equal(a.v, b.v)


class TestPolar:
    def test_pure_rotation(self):
        rng = np.random.default_rng(5)
        r0 = random_rotation(rng, 3)
        r, s = sm.polar_decompose(r0)
        assert np.abs(r - r0).max() <= 1e-12
        assert np.abs(s - np.eye(3)).max() <= 1e-12

    def test_pure_stretch(self):
        r, s = sm.polar_decompose(np.diag([3.0, 2.0, 1.0]))
        assert np.abs(r - np.eye(3)).max() <= 1e-12
        assert np.abs(s - np.diag([3.0, 2.0, 1.0])).max() <= 1e-12

    @pytest.mark.parametrize("d", [2, 3])
    def test_matches_svd_composition(self, d):
        rng = np.random.default_rng(9)
        for _ in range(50):
            m = np.eye(d) + 0.4 * rng.normal(size=(d, d))
            if sm.det(m) <= 0.1:
                continue
            r, s = sm.polar_decompose(m)
            res = sm.svd(m)
            assert np.abs(r - res.u @ res.v.T).max() <= 1e-9
            # recompose and symmetry/positive-definiteness of s
            assert np.linalg.norm(r @ s - m) <= 1e-9 * np.linalg.norm(m)
            assert np.abs(s - s.T).max() <= 1e-12
            assert np.all(np.linalg.eigvalsh(s) > 0)

    def test_non_invertible_raises(self):
        with pytest.raises(NonInvertible):
            sm.polar_decompose(np.diag([1.0, 1.0, 0.0]))
        with pytest.raises(NonInvertible):
            sm.polar_decompose(np.diag([1.0, 1.0, -0.5]))


class TestAdjoints:
    """Reverse-mode rules vs central finite differences, 100 random seeds."""

    def test_det_vjp(self):
        rng = np.random.default_rng(21)
        for trial in range(100):
            d = 2 if trial % 2 else 3
            m = np.eye(d) + 0.5 * rng.normal(size=(d, d))
            g = rng.normal()
            assert rel_err(sm.det_vjp(m, g), fd_grad(lambda x: g * sm.det(x), m)) <= 1e-5

    def test_inverse_vjp(self):
        rng = np.random.default_rng(22)
        for trial in range(100):
            d = 2 if trial % 2 else 3
            m = np.eye(d) + 0.4 * rng.normal(size=(d, d))
            if abs(sm.det(m)) < 0.2:
                continue
            gbar = rng.normal(size=(d, d))
            y = sm.inverse(m)
            got = sm.inverse_vjp(y, gbar)
            want = fd_grad(lambda x: np.sum(gbar * sm.inverse(x)), m)
            assert rel_err(got, want) <= 1e-5

    def test_svd_vjp(self):
        rng = np.random.default_rng(23)
        done = 0
        while done < 100:
            d = 2 if done % 2 else 3
            m = rng.normal(size=(d, d))
            s = sm.svd(m).sigma
            # stay away from singular-value ties and from sigma = 0
            if np.min(np.abs(np.diff(s))) < 1e-3 or np.min(np.abs(s)) < 1e-3:
                continue
            ub = rng.normal(size=(d, d))
            sb = rng.normal(size=d)
            vb = rng.normal(size=(d, d))

            def f(x):
                r = sm.svd(x)
                return np.sum(ub * r.u) + np.sum(sb * r.sigma) + np.sum(vb * r.v)

            r = sm.svd(m)
            got = sm.svd_vjp(r.u, r.sigma, r.v, u_bar=ub, sigma_bar=sb, v_bar=vb)
            assert rel_err(got, fd_grad(f, m)) <= 1e-5
            done += 1

    def test_polar_rotation_vjp(self):
        rng = np.random.default_rng(24)
        done = 0
        while done < 100:
            d = 2 if done % 2 else 3
            m = np.eye(d) + 0.3 * rng.normal(size=(d, d))
            if sm.det(m) < 0.2:
                continue
            rbar = rng.normal(size=(d, d))

            def f(x):
                r, _ = sm.polar_decompose(x)
                return np.sum(rbar * r)

            r, _ = sm.polar_decompose(m)
            res = sm.svd(m)
            got = sm.polar_rotation_vjp(r, res.v, res.sigma, rbar)
            assert rel_err(got, fd_grad(f, m)) <= 1e-5
            done += 1

    def test_polar_rotation_vjp_exact_at_tied_sigmas(self):
        # F = c*I is the worst tie case; the Lyapunov form stays exact there.
        rng = np.random.default_rng(25)
        rbar = rng.normal(size=(3, 3))
        m = 1.7 * np.eye(3)
        r, _ = sm.polar_decompose(m)
        res = sm.svd(m)
        got = sm.polar_rotation_vjp(r, res.v, res.sigma, rbar)
        want = (rbar - rbar.T) / (2.0 * 1.7)
        assert np.abs(got - want).max() <= 1e-12
