import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_instance
from stemrecon import density
from stemrecon.density import ParamVector
from stemrecon.energy import (
    JointState,
    Objective,
    Problem,
    ReconstructionConfig,
    energy,
    energy_rowconstant,
    expand_rows,
    gradient,
    gradient_rowconstant,
    hessian,
)
from stemrecon.noise import Dissimilarity, DomainError, NoiseParams, diss
from stemrecon.scan import FrameStack, ScanGeometry, pixel_grid
from stemrecon.synth import expected_frame

KINDS = [Dissimilarity.parse("kl"), Dissimilarity.parse("mpg", NoiseParams(1.0, 0.0, 0.7))]


def naive_energy(stack, p, shifts, cfg):
    """Independent double-loop evaluation of the full objective."""
    g = stack.geometry
    total = 0.0
    for k in range(stack.K):
        prev = np.zeros(2)
        for l in range(g.n2):
            for m in range(g.n1):
                w = shifts[k, l, m]
                x = np.array([m + 1.0, l + 1.0]) + w
                u = density.eval(p, x, None)
                total += diss(cfg.dissimilarity, u, stack.frames[k, l, m])
                gap = g.dT if (m == 0 and l > 0) else g.dt
                total += np.sum((w - prev) ** 2) / (2 * cfg.epsilon * gap)
                total += 0.5 * (cfg.nu_hor * w[0] ** 2 + cfg.nu_vert * w[1] ** 2)
                prev = w
    if cfg.p_ini is not None:
        for l in np.flatnonzero(~cfg.p_ini.in_domain):
            total += 0.5 * cfg.nu_pen * ((p.heights[l] - cfg.p_ini.heights[l]) ** 2
                                         + np.sum((p.centers[l] - cfg.p_ini.centers[l]) ** 2))
    return total


def fd_check(obj, x, rng, h=1e-6):
    gr = obj.gradient(x)
    fd = np.array([(obj.value(x + h * e) - obj.value(x - h * e)) / (2 * h) for e in np.eye(x.size)])
    gerr = np.max(np.abs(fd - gr)) / max(1.0, np.max(np.abs(gr)))
    H = obj.hessian(x)
    v = rng.normal(size=x.size)
    Hv = H.matvec(v) if hasattr(H, "matvec") else H @ v
    hv = 1e-5
    fdv = (obj.gradient(x + hv * v) - obj.gradient(x - hv * v)) / (2 * hv)
    herr = np.max(np.abs(fdv - Hv)) / max(1.0, np.max(np.abs(Hv)))
    return gerr, herr


def test_data_consistent_point_closed_form():
    g = ScanGeometry(7, 6)
    p = ParamVector([[3.0, 3.5], [5.5, 2.0]], [30.0, 20.0], 1.7, 10.0)
    u = expected_frame(p, None, g)
    stack = FrameStack(u[None], g)
    cfg = ReconstructionConfig(p_ini=p)
    state = JointState(p, np.zeros((1, 6, 7, 2)))
    assert energy(state, stack, cfg) == pytest.approx(np.sum(u - u * np.log(u)), rel=1e-13)
    gp, gw = gradient(state, stack, cfg)
    assert np.max(np.abs(gp)) < 1e-9 and np.max(np.abs(gw)) < 1e-9


def test_constant_shift_brownian_term():
    g = ScanGeometry(5, 4)
    prob = Problem(FrameStack(np.ones((1, 4, 5)), g), ReconstructionConfig(epsilon=0.3))
    v = np.array([0.7, -0.2])
    w = np.broadcast_to(v, (4, 5, 2))
    assert prob.brownian(w) == pytest.approx(np.sum(v * v) / (2 * 0.3 * g.dt))
    assert prob.tikhonov(w) == pytest.approx(20 * 0.5 * (0.1 * 0.49 + 10 * 0.04))


@pytest.mark.parametrize("seed", range(6))
def test_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    stack, p, p_ini = random_instance(rng)
    stack = FrameStack(rng.poisson(20, (2, 8, 8)).astype(float), ScanGeometry(8, 8))
    p = ParamVector(rng.uniform(0, 9, (2, 2)), rng.uniform(5, 40, 2), 2.0, 10.0, [True, False])
    p_ini = ParamVector(p.centers + 0.3, p.heights + 2, 2.0, 10.0, [True, False])
    shifts = rng.normal(0, 0.3, (2, 8, 8, 2))
    for kind in KINDS:
        cfg = ReconstructionConfig(dissimilarity=kind, p_ini=p_ini, cutoff_tol=None)
        got = energy(JointState(p, shifts), stack, cfg)
        want = naive_energy(stack, p, shifts, cfg)
        assert got == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("mode", ["params", "rows", "full"])
@pytest.mark.parametrize("kind", [0, 1])
def test_derivatives_finite_differences(mode, kind):
    rng = np.random.default_rng(100 + kind)
    for _ in range(4):
        stack, p, p_ini = random_instance(rng, max_side=6)
        prob = Problem(stack, ReconstructionConfig(dissimilarity=KINDS[kind], p_ini=p_ini, cutoff_tol=None))
        obj = Objective(prob, p, mode)
        n2, n1 = stack.geometry.shape
        w = rng.normal(0, 0.3, (stack.K, n2, 2) if mode == "rows" else (stack.K, n2, n1, 2))
        gerr, herr = fd_check(obj, obj.pack(p, w), rng)
        assert gerr < 1e-5 and herr < 1e-4


def test_penalty_gradient():
    stack = FrameStack(np.full((1, 4, 4), 10.0), ScanGeometry(4, 4))
    p_ini = ParamVector([[2.0, 2.0]], [5.0], 1.0, 5.0, [False])
    delta = np.array([0.3, -0.4])
    p = ParamVector(p_ini.centers + delta, [5.0], 1.0, 5.0, [False])
    prob = Problem(stack, ReconstructionConfig(nu_pen=0.05, p_ini=p_ini))
    assert np.allclose(prob.penalty_grad(p)[:2], 0.05 * delta)
    assert prob.penalty_grad(p)[2] == 0.0


def test_offset_block_without_atoms():
    g = ScanGeometry(4, 3)
    frames = np.full((1, 3, 4), 6.0)
    p = ParamVector(np.zeros((0, 2)), [], 1.5, 6.0)
    prob = Problem(FrameStack(frames, g), ReconstructionConfig())
    ev = prob.evaluate(p, np.zeros((1, 3, 4, 2)), 2)
    assert ev["C"].shape == (2, 2)
    assert ev["C"][1, 1] == pytest.approx(12 * 6.0 / 36.0)
    assert ev["C"][0, 0] == 0 and ev["C"][0, 1] == 0


def test_shift_sparsity_follows_chain():
    rng = np.random.default_rng(5)
    g = ScanGeometry(4, 3)
    stack = FrameStack(rng.poisson(20, (1, 3, 4)).astype(float), g)
    p = ParamVector([[2.0, 2.0]], [20.0], 1.5, 10.0)
    H = hessian(JointState(p, rng.normal(0, 0.2, (1, 3, 4, 2))), stack, ReconstructionConfig()).to_sparse().toarray()
    S = H[:24, :24]
    assert np.array_equal(S, S.T)
    for a in range(12):
        for b in range(12):
            blk = S[2 * a:2 * a + 2, 2 * b:2 * b + 2]
            if abs(a - b) > 1:
                assert np.all(blk == 0)
            elif abs(a - b) == 1:
                assert np.all(np.diag(blk) != 0) and blk[0, 1] == 0 and blk[1, 0] == 0


def test_arrow_factor_solves():
    rng = np.random.default_rng(9)
    stack, p, p_ini = random_instance(rng, max_side=6)
    H = hessian(JointState(p, rng.normal(0, 0.2, (stack.K,) + stack.geometry.shape + (2,))), stack,
                ReconstructionConfig(p_ini=p_ini))
    S = H.to_sparse().toarray()
    lam = abs(H.gershgorin()[0]) + 1.0
    r = rng.normal(size=S.shape[0])
    x = H.factor(lam).solve(r)
    assert np.allclose(S @ x + lam * x, r, atol=1e-8 * np.abs(r).max())
    v = rng.normal(size=S.shape[0])
    assert np.allclose(H.matvec(v), S @ v) and np.allclose(H.diagonal(), np.diag(S))


def test_rowconstant_consistency():
    rng = np.random.default_rng(2)
    stack, p, p_ini = random_instance(rng, max_side=6)
    cfg = ReconstructionConfig(p_ini=p_ini, cutoff_tol=None)
    n2, n1 = stack.geometry.shape
    v = rng.normal(0, 0.3, (stack.K, n2, 2))
    full = expand_rows(v, n1)
    assert energy_rowconstant(p, v, stack, cfg) == pytest.approx(energy(JointState(p, full), stack, cfg), rel=1e-14)
    gp, gv = gradient_rowconstant(p, v, stack, cfg)
    gp2, gw = gradient(JointState(p, full), stack, cfg)
    assert np.allclose(gp, gp2) and np.allclose(gv, gw.sum(axis=2))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_translation_degeneracy(seed, vx, vy):
    rng = np.random.default_rng(seed)
    g = ScanGeometry(6, 5)
    stack = FrameStack(rng.poisson(20, (1, 5, 6)).astype(float), g)
    p = ParamVector(rng.uniform(1, 6, (2, 2)), rng.uniform(5, 40, 2), 1.8, 8.0)
    w = rng.normal(0, 0.3, (1, 5, 6, 2))
    cfg = ReconstructionConfig(nu_hor=0, nu_vert=0, nu_pen=0, cutoff_tol=None)
    prob = Problem(stack, cfg)
    v = np.array([vx, vy])
    d0 = prob.evaluate(p, w, 0, with_regularizers=False)["terms"].data
    d1 = prob.evaluate(p.translated(v), w + v, 0, with_regularizers=False)["terms"].data
    assert abs(d1 - d0) < 1e-9 * max(1.0, abs(d0))


def test_domain_errors():
    g = ScanGeometry(3, 3)
    stack = FrameStack(np.ones((1, 3, 3)), g)
    prob = Problem(stack, ReconstructionConfig())
    with pytest.raises(DomainError):
        prob.evaluate(ParamVector([[2, 2]], [1.0], 1.0, -5.0), None, 0)
    with pytest.raises(DomainError):
        prob.evaluate(ParamVector([[2, 2]], [-1.0], 1.0, 5.0), None, 0)
    obj = Objective(prob, ParamVector([[2, 2]], [1.0], 1.0, 5.0), "params")
    with pytest.raises(DomainError):
        obj.unpack(np.array([2, 2, 1.0, np.nan, 5.0]))
