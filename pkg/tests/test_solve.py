import csv

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from stemrecon.noise import DomainError
from stemrecon.solve import (
    BfgsConfig,
    NotPositiveDefinite,
    SparseOperator,
    TrustRegionConfig,
    as_operator,
    bfgs_minimize,
    tr_subproblem,
    trust_region_minimize,
    write_diagnostics,
)


class Rosenbrock:
    def value(self, x):
        return 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2

    def gradient(self, x):
        return np.array([-400 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]), 200 * (x[1] - x[0] ** 2)])

    def hessian(self, x):
        return np.array([[1200 * x[0] ** 2 - 400 * x[1] + 2, -400 * x[0]], [-400 * x[0], 200.0]])


class Quadratic:
    def __init__(self, Q, b):
        self.Q, self.b = Q, b

    def value(self, x):
        return 0.5 * x @ self.Q @ x - self.b @ x

    def gradient(self, x):
        return self.Q @ x - self.b

    def hessian(self, x):
        return self.Q


class Saddle:
    """x^2 - y^2 + y^4 / 4: strict saddle at the origin, minima at y = +-sqrt(2)."""

    def value(self, x):
        return x[0] ** 2 - x[1] ** 2 + 0.25 * x[1] ** 4

    def gradient(self, x):
        return np.array([2 * x[0], -2 * x[1] + x[1] ** 3])

    def hessian(self, x):
        return np.diag([2.0, -2.0 + 3 * x[1] ** 2])


def test_subproblem_interior_newton():
    g = np.array([1.0, 2.0, 3.0])
    s, lam = tr_subproblem(np.eye(3), g, 10.0)
    assert np.allclose(s, -g) and lam == 0


def test_subproblem_zero_gradient():
    s, _ = tr_subproblem(np.diag([1.0, 2.0]), np.zeros(2), 1.0)
    assert np.all(s == 0)


def test_subproblem_indefinite_boundary_matches_grid():
    H, g = np.diag([1.0, -1.0]), np.array([1.0, 0.0])
    s, _ = tr_subproblem(H, g, 1.0)
    assert np.linalg.norm(s) == pytest.approx(1.0, abs=1e-9)
    th = np.linspace(0, 2 * np.pi, 4001)
    r = np.linspace(0, 1, 401)
    T, R = np.meshgrid(th, r)
    X, Y = R * np.cos(T), R * np.sin(T)
    best = np.min(X + 0.5 * (X * X - Y * Y))
    assert g @ s + 0.5 * s @ H @ s == pytest.approx(best, abs=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 5.0))
def test_subproblem_feasible_and_better_than_cauchy(seed, radius):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(5, 5))
    H = A + A.T
    g = rng.normal(size=5)
    s, _ = tr_subproblem(H, g, radius)
    assert np.linalg.norm(s) <= radius * (1 + 1e-10)
    m = g @ s + 0.5 * s @ H @ s
    d = -g / np.linalg.norm(g)
    curv = d @ H @ d
    t = radius if curv <= 0 else min(radius, -(g @ d) / curv)
    assert m <= g @ (t * d) + 0.5 * t * t * curv + 1e-12


def test_sparse_and_dense_agree():
    A = sp.random(50, 50, density=0.05, random_state=1)
    A = (A + A.T + sp.eye(50) * 0.5).tocsr()
    g = np.ones(50)
    s1, _ = tr_subproblem(A, g, 0.5)
    s2, _ = tr_subproblem(A.toarray(), g, 0.5)
    assert np.allclose(s1, s2, atol=1e-8)
    assert isinstance(as_operator(A), SparseOperator)


def test_factor_rejects_indefinite():
    with pytest.raises(NotPositiveDefinite):
        as_operator(np.diag([1.0, -1.0])).factor(0.0)


def test_convex_quadratic_converges_fast():
    Q = np.array([[4.0, 1, 0], [1, 3, 1], [0, 1, 2]])
    b = np.array([1.0, 2, 3])
    r = trust_region_minimize(Quadratic(Q, b), np.zeros(3), TrustRegionConfig(initial_radius=100, grad_tol=1e-12))
    assert r.converged and r.iterations <= 5
    assert np.allclose(r.x, np.linalg.solve(Q, b), atol=1e-12)
    bf = bfgs_minimize(Quadratic(Q, b), np.zeros(3), BfgsConfig(grad_tol=1e-10))
    assert np.allclose(bf.x, r.x, atol=1e-8)
    one = bfgs_minimize(Quadratic(np.eye(3), b), np.zeros(3))
    assert one.iterations == 1 and np.allclose(one.x, b)


def test_rosenbrock():
    r = trust_region_minimize(Rosenbrock(), [-1.2, 1.0], TrustRegionConfig(grad_tol=1e-9))
    assert r.f < 1e-10 and r.iterations <= 100 and np.allclose(r.x, 1.0, atol=1e-5)
    fs = [d["f"] for d in r.diagnostics if d["accepted"]]
    assert all(b <= a for a, b in zip(fs, fs[1:]))
    bf = bfgs_minimize(Rosenbrock(), [-1.2, 1.0], BfgsConfig(grad_tol=1e-8))
    assert bf.converged and bf.grad_norm < 1e-8 and np.allclose(bf.x, 1.0, atol=1e-6)


def test_saddle_escape():
    for fun in (Saddle(), Quadratic(np.diag([2.0, -2.0]), np.zeros(2))):
        r = trust_region_minimize(fun, [0.0, 0.0], TrustRegionConfig(max_iters=30))
        assert r.f < fun.value(np.zeros(2))
    r = trust_region_minimize(Saddle(), [0.0, 0.0])
    assert r.converged and abs(abs(r.x[1]) - np.sqrt(2)) < 1e-6


class Walled:
    """Quadratic whose domain ends at x0 > 1.5: trial points beyond raise."""

    def value(self, x):
        if x[0] > 1.5:
            raise DomainError("outside")
        return float(np.sum((x - 2.0) ** 2))

    def gradient(self, x):
        if x[0] > 1.5:
            raise DomainError("outside")
        return 2 * (x - 2.0)

    def hessian(self, x):
        return 2 * np.eye(2)


def test_domain_errors_reject_trial_points():
    r = trust_region_minimize(Walled(), np.zeros(2), TrustRegionConfig(initial_radius=10, max_iters=60))
    assert r.x[0] <= 1.5 and r.f < 8.0
    assert any(np.isneginf(d["rho"]) for d in r.diagnostics)
    b = bfgs_minimize(Walled(), np.zeros(2))
    assert b.x[0] <= 1.5 and b.f < 8.0


def test_diagnostics_csv(tmp_path):
    r = trust_region_minimize(Rosenbrock(), [-1.2, 1.0])
    path = tmp_path / "diag.csv"
    write_diagnostics(path, r.diagnostics)
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["iter", "f", "grad_inf", "radius", "rho", "accepted"]
    assert len(rows) == len(r.diagnostics)


def test_config_validation():
    with pytest.raises(ValueError):
        TrustRegionConfig(initial_radius=-1)
    with pytest.raises(ValueError):
        BfgsConfig(c1=0.95, c2=0.9)
