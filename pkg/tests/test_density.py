import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stemrecon import density
from stemrecon.density import Field, ParamBounds, ParamVector, cutoff_radii, read_atoms_csv, write_atoms_csv


def three_atoms(rng):
    return ParamVector(rng.uniform(2, 10, (3, 2)), rng.uniform(10, 50, 3), rng.uniform(1.5, 3), 7.0)


def fd_gradient(f, x, h):
    x = np.asarray(x, dtype=float)
    out = []
    for e in np.eye(x.size):
        out.append((f(x + h * e) - f(x - h * e)) / (2 * h))
    return np.array(out)


def test_eval_examples():
    p = ParamVector([[5.0, 5.0]], [45.0], 3.0, 40.0)
    assert density.eval(p, [5.0, 5.0]) == pytest.approx(85.0)
    assert density.eval(p, [8.0, 5.0]) == pytest.approx(40 + 45 * math.exp(-0.5))
    empty = ParamVector(np.zeros((0, 2)), [], 2.0, 3.5)
    assert np.allclose(density.eval(empty, np.random.default_rng(0).uniform(0, 9, (10, 2))), 3.5)


def test_grad_and_hess_at_peak():
    p = ParamVector([[5.0, 5.0]], [45.0], 3.0, 40.0)
    assert np.allclose(density.grad_x(p, [5.0, 5.0]), 0.0)
    assert np.allclose(density.hess_x(p, [5.0, 5.0]), -(45.0 / 9.0) * np.eye(2))


def test_grad_x_finite_differences(rng):
    p = three_atoms(rng)
    for x in rng.uniform(0, 12, (5, 2)):
        fd = fd_gradient(lambda z: density.eval(p, z), x, 1e-5)
        an = density.grad_x(p, x)
        assert np.max(np.abs(fd - an)) < 1e-6 * max(1.0, np.max(np.abs(an)))
        fdh = np.array([(density.grad_x(p, x + 1e-5 * e) - density.grad_x(p, x - 1e-5 * e)) / 2e-5
                        for e in np.eye(2)])
        assert np.allclose(fdh, density.hess_x(p, x), atol=1e-6 * max(1, np.abs(fdh).max()))


def test_grad_p_examples_and_finite_differences(rng):
    p = ParamVector(rng.uniform(2, 10, (2, 2)), rng.uniform(10, 50, 2), 2.2, 7.0)
    x = rng.uniform(2, 10, 2)
    gp = density.grad_p(p, x)
    assert gp[p.offset_index] == 1.0
    v0 = p.to_vector()
    fd = fd_gradient(lambda v: density.eval(p.with_vector(v), x), v0, 1e-6)
    assert np.max(np.abs(fd - gp)) < 1e-6 * max(1.0, np.max(np.abs(gp)))
    fdh = np.array([(density.grad_p(p.with_vector(v0 + 1e-5 * e), x) - density.grad_p(p.with_vector(v0 - 1e-5 * e), x))
                    / 2e-5 for e in np.eye(v0.size)])
    assert np.allclose(fdh, density.hess_p(p, x), atol=1e-5 * max(1, np.abs(fdh).max()))
    fdx = np.array([(density.grad_p(p, x + 1e-5 * e) - density.grad_p(p, x - 1e-5 * e)) / 2e-5 for e in np.eye(2)])
    assert np.allclose(fdx, density.grad_x_grad_p(p, x), atol=1e-5 * max(1, np.abs(fdx).max()))
    single = ParamVector([[3.0, 3.0]], [20.0], 2.0, 1.0)
    assert density.grad_p(single, [3.0, 3.0])[2] == pytest.approx(1.0)


def test_parameter_order():
    p = ParamVector([[1.0, 2.0], [3.0, 4.0]], [5.0, 6.0], 1.5, 9.0)
    assert p.to_vector().tolist() == [1, 2, 3, 4, 5, 6, 1.5, 9]
    assert p.n_params == 8 and p.width_index == 6 and p.offset_index == 7
    q = p.with_vector(p.to_vector() * 2)
    assert q.heights.tolist() == [10, 12] and q.width == 3.0


def test_field_matches_pointwise(rng):
    p = three_atoms(rng)
    pts = rng.uniform(0, 12, (40, 2))
    f = Field(p, pts, None)
    assert np.allclose(f.u, density.eval(p, pts))
    assert np.allclose(f.grad, np.array([density.grad_x(p, x) for x in pts]))
    w = rng.normal(size=40)
    dense = np.array([density.grad_p(p, x) for x in pts])
    assert np.allclose(f.grad_p_matrix().toarray(), dense)
    assert np.allclose(f.grad_p_weighted(w), w @ dense)
    hw = sum(wi * density.hess_p(p, x) for wi, x in zip(w, pts))
    assert np.allclose(f.weighted_hess_p(w), hw)


def test_cutoff_radius_bounds_contribution():
    p = ParamVector([[0.0, 0.0]], [100.0], 3.0, 0.0)
    r = cutoff_radii(p, 1e-8)[0]
    assert 100 * math.exp(-r * r / 18) == pytest.approx(1e-8, rel=1e-9)
    f = Field(p, np.array([[r + 0.1, 0.0], [r - 0.1, 0.0]]), 1e-8)
    assert f.u[0] == 0.0 and f.u[1] > 0.0


def test_bounds():
    b = ParamBounds()
    assert b.violation(ParamVector([[0, 0]], [1.0], 1.0, 0.0)) is None
    assert "height" in b.violation(ParamVector([[0, 0]], [-1.0], 1.0, 0.0))
    assert "width" in ParamBounds(min_width=2.0).violation(ParamVector([[0, 0]], [1.0], 1.0, 0.0))
    with pytest.raises(ValueError):
        ParamVector([[0, 0]], [1.0], -1.0, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 300), st.floats(-50, 300), st.floats(0, 1e4)), max_size=6),
       st.floats(0.1, 10), st.floats(-100, 100))
def test_atoms_csv_roundtrip(tmp_path_factory, atoms, width, offset):
    c = np.array([a[:2] for a in atoms], dtype=float).reshape(-1, 2)
    h = np.array([a[2] for a in atoms], dtype=float)
    p = ParamVector(c, h, width, offset)
    path = tmp_path_factory.mktemp("csv") / "atoms.csv"
    write_atoms_csv(path, p)
    q = read_atoms_csv(path)
    assert np.array_equal(q.centers, p.centers) and np.array_equal(q.heights, p.heights)
    assert q.width == p.width and q.offset == p.offset
    text = path.read_text().splitlines()
    assert text[0] == "x,y,height" and text[-2].startswith("# sigma_b=") and text[-1].startswith("# offset=")
