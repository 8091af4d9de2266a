"""Trust-region Newton with a Moré–Sorensen subproblem solver, and dense BFGS.

Hessians are passed as operator objects exposing ``n``, ``matvec``,
``gershgorin`` and ``factor(lam)``; ``factor`` returns an object with a
``solve`` method for ``(H + lam I) x = b`` or raises ``NotPositiveDefinite``.
Dense, general sparse and (in ``energy``) arrow-structured operators share
this interface so the subproblem code never forms ``H`` itself.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import line_search
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .noise import DomainError

__all__ = [
    "NotPositiveDefinite",
    "DenseOperator",
    "SparseOperator",
    "TrustRegionConfig",
    "BfgsConfig",
    "TrustRegionResult",
    "BfgsResult",
    "tr_subproblem",
    "trust_region_minimize",
    "bfgs_minimize",
    "write_diagnostics",
]

log = logging.getLogger(__name__)


class NotPositiveDefinite(np.linalg.LinAlgError):
    """``H + lam I`` failed a Cholesky factorization."""


# -- operators ----------------------------------------------------------------


class DenseOperator:
    def __init__(self, H):
        H = np.asarray(H, dtype=float)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ValueError("Hessian must be square")
        self.H = 0.5 * (H + H.T)
        self.n = H.shape[0]

    def matvec(self, v):
        return self.H @ v

    def diagonal(self):
        return np.diag(self.H).copy()

    def gershgorin(self):
        d = np.diag(self.H)
        off = np.abs(self.H).sum(axis=1) - np.abs(d)
        return float(np.min(d - off)), float(np.max(d + off))

    def factor(self, lam: float):
        A = self.H + lam * np.eye(self.n)
        try:
            c = sla.cho_factor(A, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from None
        if not np.all(np.isfinite(c[0])):
            raise NotPositiveDefinite("non-finite factor")
        return _DenseFactor(c)


class _DenseFactor:
    def __init__(self, c):
        self.c = c

    def solve(self, b):
        return sla.cho_solve(self.c, b, check_finite=False)


class SparseOperator:
    """General sparse symmetric Hessian.

    A reverse Cuthill–McKee ordering is computed from the sparsity pattern on
    first use and reused while the pattern is unchanged; factorizations are
    banded Cholesky in that ordering.
    """

    _orderings: dict = {}

    def __init__(self, H):
        H = sp.csr_matrix(H, dtype=float)
        self.H = (0.5 * (H + H.T)).tocsr()
        self.n = H.shape[0]
        key = (self.n, self.H.indptr.tobytes(), self.H.indices.tobytes())
        perm = self._orderings.get(key)
        if perm is None:
            perm = reverse_cuthill_mckee(self.H, symmetric_mode=True)
            self._orderings.clear()
            self._orderings[key] = perm
        self.perm = perm
        P = self.H[perm][:, perm].tocoo()
        self.bw = int(np.max(np.abs(P.row - P.col))) if P.nnz else 0
        ab = np.zeros((self.bw + 1, self.n))
        low = P.row >= P.col
        ab[P.row[low] - P.col[low], P.col[low]] = P.data[low]
        self._ab = ab

    def matvec(self, v):
        return self.H @ v

    def diagonal(self):
        return self.H.diagonal()

    def gershgorin(self):
        d = self.H.diagonal()
        off = np.asarray(abs(self.H).sum(axis=1)).ravel() - np.abs(d)
        return float(np.min(d - off)), float(np.max(d + off))

    def factor(self, lam: float):
        ab = self._ab.copy()
        ab[0] += lam
        try:
            cb = sla.cholesky_banded(ab, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from None
        return _BandedFactor(cb, self.perm)


class _BandedFactor:
    def __init__(self, cb, perm):
        self.cb = cb
        self.perm = perm

    def solve(self, b):
        x = np.empty_like(b, dtype=float)
        x[self.perm] = sla.cho_solve_banded((self.cb, True), b[self.perm], check_finite=False)
        return x


def as_operator(H):
    if hasattr(H, "factor"):
        return H
    if sp.issparse(H):
        return SparseOperator(H)
    return DenseOperator(H)


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class TrustRegionConfig:
    initial_radius: float = 1.0
    max_radius: float = 1e3
    eta_accept: float = 0.1
    shrink: float = 0.25
    grow: float = 2.5
    max_iters: int = 500
    grad_tol: float | None = None  # None: 1e-7 * (1 + |f(x0)|)
    subproblem_tol: float = 1e-3
    subproblem_iters: int = 40
    hard_case_probes: int = 10
    min_radius: float = 1e-12

    def __post_init__(self):
        if not 0 < self.shrink < 1 < self.grow:
            raise ValueError("need 0 < shrink < 1 < grow")
        if not 0 < self.initial_radius <= self.max_radius:
            raise ValueError("need 0 < initial_radius <= max_radius")
        if not 0 <= self.eta_accept < 0.25:
            raise ValueError("eta_accept must lie in [0, 1/4)")
        if self.max_iters < 0 or self.hard_case_probes < 1:
            raise ValueError("iteration counts must be positive")


@dataclass(frozen=True)
class BfgsConfig:
    max_iters: int = 500
    grad_tol: float | None = None  # None: 1e-7 * (1 + |f(x0)|)
    c1: float = 1e-4
    c2: float = 0.9

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("Wolfe constants need 0 < c1 < c2 < 1")


# -- subproblem ---------------------------------------------------------------


def _model(H, g, s):
    return float(g @ s + 0.5 * s @ H.matvec(s))


def _cauchy(H, g, radius):
    gn = np.linalg.norm(g)
    if gn == 0:
        return np.zeros_like(g)
    curv = float(g @ H.matvec(g))
    t = radius / gn
    if curv > 0:
        t = min(t, gn * gn / curv)
    return -t * g


def _boundary_tau(s, z, radius):
    """Root ``tau`` of ``|s + tau z| = radius`` giving the lower model value."""
    a = z @ z
    b = 2.0 * (s @ z)
    c = s @ s - radius * radius
    disc = math.sqrt(max(b * b - 4 * a * c, 0.0))
    return (-b + disc) / (2 * a), (-b - disc) / (2 * a)


def _probe_direction(F, n, probes):
    """Inverse iteration on ``H + lam I``: a unit vector of smallest curvature."""
    z = np.random.default_rng(12345).standard_normal(n)
    z /= np.linalg.norm(z)
    for _ in range(probes):
        y = F.solve(z)
        ny = np.linalg.norm(y)
        if not np.isfinite(ny) or ny == 0:
            break
        z = y / ny
    return z


def tr_subproblem(H, g, radius: float, cfg: TrustRegionConfig | None = None):
    """Approximately minimize ``g's + s'Hs/2`` subject to ``|s| <= radius``.

    Returns ``(s, lam)``.  The step never does worse than the Cauchy point
    and never leaves the ball by more than a relative 1e-10.
    """
    cfg = cfg or TrustRegionConfig()
    H = as_operator(H)
    g = np.asarray(g, dtype=float)
    n = g.size
    tol = cfg.subproblem_tol
    gn = float(np.linalg.norm(g))
    lo, hi = H.gershgorin()
    hnorm = max(abs(lo), abs(hi))
    diag = H.diagonal()
    lam_l = max(0.0, -float(np.min(diag)) if n else 0.0, gn / radius - hi)
    lam_u = max(0.0, gn / radius + hnorm)
    best = None

    def consider(s, lam):
        nonlocal best
        ns = np.linalg.norm(s)
        if ns > radius:
            s = s * (radius / ns)
        m = _model(H, g, s)
        if best is None or m < best[0]:
            best = (m, s, lam)

    lam = 0.0
    for _ in range(cfg.subproblem_iters):
        try:
            F = H.factor(lam)
        except NotPositiveDefinite:
            lam_l = max(lam_l, lam)
            if lam_u <= lam_l:
                lam_u = 2.0 * lam_l + 1e-12 * (1.0 + hnorm)
            lam = max(math.sqrt(max(lam_l * lam_u, 0.0)), lam_l + 0.01 * (lam_u - lam_l))
            continue
        s = -F.solve(g)
        ns = float(np.linalg.norm(s))
        if ns <= radius and (lam == 0.0 or abs(ns - radius) <= tol * radius):
            consider(s, lam)
            break
        if abs(ns - radius) <= tol * radius:
            consider(s, lam)
            break
        if ns < radius:
            lam_u = min(lam_u, lam)
            # possible hard case: push to the boundary along low curvature
            z = _probe_direction(F, n, cfg.hard_case_probes)
            hz = H.matvec(z) + lam * z
            mu = float(z @ hz)
            lam_l = max(lam_l, lam - mu)
            t1, t2 = _boundary_tau(s, z, radius)
            cand = [s + t1 * z, s + t2 * z]
            cand.sort(key=lambda c: _model(H, g, c))
            consider(cand[0], lam)
            hs = float(s @ (H.matvec(s) + lam * s))
            tau = t1 if abs(t1) < abs(t2) else t2
            if tau * tau * mu <= tol * (hs + lam * radius * radius):
                break
        else:
            lam_l = max(lam_l, lam)
            consider(s, lam)
        q = F.solve(s)
        sq = float(s @ q)
        new = lam + (ns * ns / sq) * (ns - radius) / radius if sq > 0 else -1.0
        if not lam_l < new < lam_u:
            new = max(math.sqrt(max(lam_l * lam_u, 0.0)), lam_l + 0.01 * (lam_u - lam_l))
        if lam_u - lam_l <= 1e-14 * max(1.0, lam_u):
            break
        lam = new
    sc = _cauchy(H, g, radius)
    mc = _model(H, g, sc)
    if best is None or mc < best[0]:
        best = (mc, sc, best[2] if best else lam)
    s = best[1]
    ns = np.linalg.norm(s)
    if ns > radius * (1 + 1e-10):
        s = s * (radius / ns)
    return s, best[2]


# -- trust-region loop ----------------------------------------------------------


@dataclass
class TrustRegionResult:
    x: np.ndarray
    f: float
    grad_norm: float
    iterations: int
    converged: bool
    diagnostics: list = field(default_factory=list)
    message: str = ""


def _safe_value(fun, x):
    try:
        v = float(fun.value(x))
    except (DomainError, ValueError, FloatingPointError):
        return -math.inf, math.inf
    return v, v


def _is_minimum(H) -> bool:
    """Second-order test at a stationary point: no detectable negative curvature."""
    try:
        H.factor(0.0)
    except NotPositiveDefinite:
        lo, hi = H.gershgorin()
        scale = max(abs(lo), abs(hi), 1.0)
        try:
            H.factor(1e-8 * scale)
        except NotPositiveDefinite:
            return False
    return True


def trust_region_minimize(fun, x0, cfg: TrustRegionConfig | None = None) -> TrustRegionResult:
    """Minimize ``fun`` with ``value``, ``gradient`` and ``hessian`` methods.

    Trial points raising a domain error count as ``rho = -inf``: the step is
    rejected and the radius shrinks.
    """
    cfg = cfg or TrustRegionConfig()
    x = np.array(x0, dtype=float)
    f = float(fun.value(x))
    if not np.isfinite(f):
        raise DomainError("objective is not finite at the starting point")
    gtol = cfg.grad_tol if cfg.grad_tol is not None else 1e-7 * (1.0 + abs(f))
    radius = cfg.initial_radius
    g = fun.gradient(x)
    gmax = float(np.max(np.abs(g))) if g.size else 0.0
    diags = [dict(iter=0, f=f, grad_inf=gmax, radius=radius, rho=math.nan, accepted=True)]
    H = None
    it = 0
    converged = False
    message = ""
    if gmax < gtol:
        H = as_operator(fun.hessian(x))
        converged = _is_minimum(H)
        message = "gradient below tolerance" if converged else ""
    while not converged and it < cfg.max_iters:
        it += 1
        if H is None:
            H = as_operator(fun.hessian(x))
        s, _ = tr_subproblem(H, g, radius, cfg)
        pred = -_model(H, g, s)
        if not pred > 0:
            message = "no predicted decrease"
            converged = True
            diags.append(dict(iter=it, f=f, grad_inf=gmax, radius=radius, rho=math.nan, accepted=False))
            break
        xt = x + s
        ft, _ = _safe_value(fun, xt)
        rho = (f - ft) / pred if np.isfinite(ft) else -math.inf
        accepted = rho > cfg.eta_accept and ft < f
        ns = float(np.linalg.norm(s))
        if rho < 0.25:
            radius = cfg.shrink * min(radius, ns) if ns > 0 else cfg.shrink * radius
        elif rho > 0.75 and ns >= 0.99 * radius:
            radius = min(cfg.grow * radius, cfg.max_radius)
        if accepted:
            x, f = xt, ft
            g = fun.gradient(x)
            gmax = float(np.max(np.abs(g))) if g.size else 0.0
            H = None
        diags.append(dict(iter=it, f=f, grad_inf=gmax, radius=radius, rho=rho, accepted=accepted))
        log.debug("tr %d f=%.12g |g|=%.3g radius=%.3g rho=%.3g %s", it, f, gmax, radius, rho,
                  "accept" if accepted else "reject")
        if gmax < gtol:
            if H is None:
                H = as_operator(fun.hessian(x))
            if _is_minimum(H):
                converged = True
                message = "gradient below tolerance"
                break
        if radius < cfg.min_radius * (1.0 + np.linalg.norm(x)):
            message = "trust region collapsed"
            break
    if not message:
        message = "iteration limit"
    return TrustRegionResult(x, f, gmax, it, converged, diags, message)


def write_diagnostics(path, rows) -> None:
    """Per-iteration CSV: ``iter, f, grad_inf, radius, rho, accepted``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "f", "grad_inf", "radius", "rho", "accepted"])
        for r in rows:
            w.writerow([r["iter"], repr(float(r["f"])), repr(float(r["grad_inf"])),
                        repr(float(r["radius"])), repr(float(r["rho"])), int(bool(r["accepted"]))])


# -- BFGS ------------------------------------------------------------------------


@dataclass
class BfgsResult:
    x: np.ndarray
    f: float
    grad_norm: float
    iterations: int
    converged: bool
    line_search_failed: bool = False
    history: list = field(default_factory=list)


def _backtrack(f, x, d, fx, slope, c1, max_halvings=40):
    """Armijo backtracking from a unit step; used where the Wolfe search leaves the domain."""
    alpha = 1.0
    for _ in range(max_halvings):
        v = f(x + alpha * d)
        if np.isfinite(v) and v <= fx + c1 * alpha * slope:
            return alpha, v
        alpha *= 0.5
    return None, None


def bfgs_minimize(fun, x0, cfg: BfgsConfig | None = None) -> BfgsResult:
    """Dense BFGS on the inverse Hessian with a strong Wolfe line search.

    ``fun`` needs ``value`` and ``gradient``.  Updates violating the
    curvature condition ``y's > 0`` are skipped.
    """
    cfg = cfg or BfgsConfig()
    x = np.array(x0, dtype=float)

    def f(z):
        v, _ = _safe_value(fun, z)
        return v

    fx = f(x)
    if not np.isfinite(fx):
        raise DomainError("objective is not finite at the starting point")
    g = fun.gradient(x)
    gtol = cfg.grad_tol if cfg.grad_tol is not None else 1e-7 * (1.0 + abs(fx))
    n = x.size
    Hinv = np.eye(n)
    scaled = False
    hist = [fx]
    failed = False
    it = 0
    while it < cfg.max_iters and np.max(np.abs(g), initial=0.0) >= gtol:
        it += 1
        d = -Hinv @ g
        if not g @ d < 0:
            Hinv = np.eye(n)
            d = -g
        try:
            alpha, _, _, fnew, _, gnew = line_search(
                f, fun.gradient, x, d, gfk=g, old_fval=fx, c1=cfg.c1, c2=cfg.c2, maxiter=30
            )
        except (DomainError, ValueError, FloatingPointError):
            alpha = fnew = gnew = None
        if alpha is None or fnew is None or not np.isfinite(fnew):
            alpha, fnew = _backtrack(f, x, d, fx, float(g @ d), cfg.c1)
            gnew = None
        if alpha is None or fnew is None or not np.isfinite(fnew) or fnew > fx:
            if not np.allclose(Hinv, np.eye(n)):
                Hinv = np.eye(n)
                scaled = False
                continue
            failed = True
            break
        s = alpha * d
        x = x + s
        if gnew is None:
            gnew = fun.gradient(x)
        y = gnew - g
        fx = float(fnew)
        g = gnew
        hist.append(fx)
        ys = float(y @ s)
        if ys > 1e-12 * np.linalg.norm(y) * np.linalg.norm(s):
            if not scaled:
                Hinv = np.eye(n) * (ys / float(y @ y))
                scaled = True
            rho = 1.0 / ys
            Hy = Hinv @ y
            Hinv = (Hinv - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                    + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s))
    gmax = float(np.max(np.abs(g), initial=0.0))
    return BfgsResult(x, fx, gmax, it, gmax < gtol, failed, hist)
