"""Convex atom identification by sparse deconvolution over a coarse grid.

Minimizes ``F(h) = sum_i |(B h)_i - g_i|^2 + eta * sum(h)`` over ``h >= 0``
where ``B`` maps coarse-cell masses to pixel intensities by convolution with
the cell-averaged Gaussian bump.  The optimality system
``h - max(0, h - gamma * beta) = 0`` with ``beta = 2 B^T (B h - g) + eta`` is
solved by a semi-smooth Newton method whose linear systems are handled by
restarted GMRES, matrix-free through FFT convolutions.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
import scipy.fft as sfft
from scipy import ndimage, sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import LinearOperator, gmres
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.spatial import cKDTree
from scipy.special import erf

from .density import ParamVector

__all__ = [
    "DeconvConfig",
    "AtomMeasure",
    "BlurOperator",
    "forward_convolve",
    "ssn_residual",
    "objective",
    "solve",
    "extract_atoms",
    "estimate_background",
    "identify_atoms",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeconvConfig:
    """Settings of the convex initializer.

    ``None`` entries are derived from the frame: ``dx = bump_sigma / 2``,
    ``eta = 10 * dx**2 * median(frame)``, ``gamma = 10 / L`` with ``L = 2 ||B||^2``
    the Lipschitz constant of the data-term gradient, ``residual_tol = 1e-8 * max(g)``,
    ``support_eps = 1e-10 * max(g)``, ``height_threshold = 0.45 * (max(frame) - background)``,
    ``merge_radius = 3 * bump_sigma``.
    """

    bump_sigma: float = 3.0
    dx: float | None = None
    eta: float | None = None
    gamma: float | None = None
    max_newton_iters: int = 100
    gmres_iters: int = 20
    gmres_restarts: int = 10
    residual_tol: float | None = None
    support_eps: float | None = None
    height_threshold: float | None = None
    merge_radius: float | None = None
    margin: float | None = None
    background_percentile: float = 10.0
    stall_iters: int = 5
    max_block: int = 1500
    min_step: float = 1e-6
    fallback_steps: int = 200

    def __post_init__(self):
        if not self.bump_sigma > 0:
            raise ValueError("bump_sigma must be positive")
        for name in ("dx", "eta", "gamma", "residual_tol", "support_eps"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        if self.height_threshold is not None and self.height_threshold < 0:
            raise ValueError("height_threshold must be nonnegative")
        if self.max_newton_iters < 1 or self.gmres_iters < 1:
            raise ValueError("iteration counts must be at least 1")

    @property
    def cell(self) -> float:
        return self.dx if self.dx is not None else self.bump_sigma / 2.0

    @property
    def grid_margin(self) -> float:
        return self.margin if self.margin is not None else 2.0 * self.bump_sigma


@dataclass
class AtomMeasure:
    """Nonnegative coarse-grid masses ``coeffs[l, k]`` at ``(xs[k], ys[l])``."""

    coeffs: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    residual: float = 0.0
    iterations: int = 0
    converged: bool = True
    eta: float = 0.0
    gamma: float = 1.0

    @property
    def dx(self) -> float:
        return float(self.xs[1] - self.xs[0]) if self.xs.size > 1 else 1.0

    def mass(self) -> float:
        return float(self.coeffs.sum())


def _fine_step(dx: float, pitch: float = 1.0):
    """Common lattice step of pixel pitch and cell width, as small integers."""
    a = Fraction(dx).limit_denominator(1000)
    b = Fraction(pitch).limit_denominator(1000)
    if abs(float(a) - dx) > 1e-12 * dx or abs(float(b) - pitch) > 1e-12 * pitch:
        raise ValueError(f"cell width {dx} is not commensurate with the pixel pitch")
    step = Fraction(math.gcd(a.numerator * b.denominator, b.numerator * a.denominator),
                    a.denominator * b.denominator)
    return float(step), int(a / step), int(b / step)


def cell_kernel_1d(d, dx: float, sigma: float):
    """Average of ``exp(-t^2 / (2 sigma^2))`` over ``[d - dx/2, d + dx/2]``."""
    s = sigma * math.sqrt(2.0)
    d = np.asarray(d, dtype=float)
    return (sigma * math.sqrt(math.pi / 2.0) / dx) * (erf((d + dx / 2) / s) - erf((d - dx / 2) / s))


class BlurOperator:
    """Cell masses on a coarse grid to intensities at the ``n1 x n2`` pixels.

    Pixels sit at ``1..n1`` and ``1..n2``; coarse cells of width ``dx`` cover
    the pixel range plus ``margin`` on each side.  Both grids are embedded in
    a common fine lattice so the blur becomes an FFT convolution.
    """

    def __init__(self, n1: int, n2: int, dx: float, sigma: float, margin: float = 0.0,
                 truncation: float = 1e-17):
        self.n1, self.n2, self.dx, self.sigma = int(n1), int(n2), float(dx), float(sigma)
        step, sc, sp = _fine_step(self.dx)
        self.step, self.sc, self.sp = step, sc, sp
        lead = int(math.ceil(margin / dx - 1e-12))
        self.lead = lead
        x0 = 1.0 - lead * dx
        m1 = int(math.floor((n1 + margin - x0) / dx + 1e-12)) + 1
        m2 = int(math.floor((n2 + margin - x0) / dx + 1e-12)) + 1
        self.xs = x0 + dx * np.arange(m1)
        self.ys = x0 + dx * np.arange(m2)
        self.shape = (m2, m1)
        # fine-lattice indices of coarse cells and pixels (origin at x0)
        self._cell_idx = (sc * np.arange(m2), sc * np.arange(m1))
        off = lead * sc
        self._pix_idx = (off + sp * np.arange(n2), off + sp * np.arange(n1))
        reach = sigma * math.sqrt(2.0 * math.log(1.0 / truncation)) + dx / 2
        self._axes = [self._axis(self._cell_idx[ax], self._pix_idx[ax], reach) for ax in (0, 1)]

    def _axis(self, cells, pixels, reach):
        fine = max(cells[-1], pixels[-1]) + 1
        r = min(int(math.ceil(reach / self.step)), fine - 1)
        k1 = cell_kernel_1d(self.step * np.arange(-r, r + 1), self.dx, self.sigma)
        n = sfft.next_fast_len(fine + 2 * r, real=True)
        return fine, r, n, sfft.rfft(k1, n)

    def _conv1d(self, arr, axis, src_idx, dst_idx):
        """Upsample along ``axis`` onto the fine lattice, blur, resample."""
        fine, r, n, kf = self._axes[axis]
        shape = list(arr.shape)
        shape[axis] = fine
        up = np.zeros(shape)
        sl = [slice(None), slice(None)]
        sl[axis] = src_idx
        up[tuple(sl)] = arr
        out = sfft.irfft(sfft.rfft(up, n, axis=axis) * np.expand_dims(kf, 1 - axis), n, axis=axis)
        sl[axis] = dst_idx + r
        return out[tuple(sl)]

    # the kernel is a product of 1D factors, so the 2D FFT convolution
    # factors into one FFT convolution per axis
    def forward(self, h):
        """Predicted intensities ``(n2, n1)`` for coarse masses ``h`` of shape ``self.shape``."""
        h = np.asarray(h, dtype=float).reshape(self.shape)
        t = self._conv1d(h, 1, self._cell_idx[1], self._pix_idx[1])
        return self._conv1d(t, 0, self._cell_idx[0], self._pix_idx[0])

    def adjoint(self, r):
        """Correlation of pixel values with the kernel, sampled on the coarse grid."""
        r = np.asarray(r, dtype=float).reshape(self.n2, self.n1)
        t = self._conv1d(r, 1, self._pix_idx[1], self._cell_idx[1])
        return self._conv1d(t, 0, self._pix_idx[0], self._cell_idx[0])

    def gram_1d(self):
        """Per-axis Gram matrices ``(Gy, Gx)``; ``B^T B`` is their Kronecker product."""
        out = []
        for pos, cells in ((np.arange(1, self.n2 + 1), self.ys), (np.arange(1, self.n1 + 1), self.xs)):
            K = cell_kernel_1d(pos[:, None] - cells[None, :], self.dx, self.sigma)
            out.append(K.T @ K)
        return tuple(out)

    def kernel_at(self, dxy) -> np.ndarray:
        """Kernel value for pixel-minus-cell offsets ``dxy`` of shape ``(..., 2)``."""
        dxy = np.asarray(dxy, dtype=float)
        return (cell_kernel_1d(dxy[..., 0], self.dx, self.sigma)
                * cell_kernel_1d(dxy[..., 1], self.dx, self.sigma))

    def norm_sq(self, iters: int = 30) -> float:
        """Power-iteration estimate of ``||B||^2``."""
        v = np.ones(self.shape)
        lam = 1.0
        for _ in range(iters):
            w = self.adjoint(self.forward(v))
            lam = float(np.linalg.norm(w))
            if lam == 0:
                return 0.0
            v = w / lam
        return lam * 1.01


def forward_convolve(h: AtomMeasure, op: BlurOperator):
    return op.forward(h.coeffs)


def objective(h, op: BlurOperator, g, eta: float) -> float:
    r = op.forward(h) - g
    return float(np.sum(r * r) + eta * np.sum(h))


def _beta(h, op, g, eta):
    return 2.0 * op.adjoint(op.forward(h) - g) + eta


def ssn_residual(h, op: BlurOperator, g, eta: float, gamma: float):
    """``F(h) = h - max(0, h - gamma * beta(h))``."""
    h = np.asarray(h, dtype=float).reshape(op.shape)
    return h - np.maximum(0.0, h - gamma * _beta(h, op, g, eta))


def estimate_background(frame, percentile: float = 10.0) -> float:
    return float(np.percentile(frame, percentile))


def _resolve(cfg: DeconvConfig, frame):
    g_max = float(np.max(frame)) if frame.size else 0.0
    eta = cfg.eta if cfg.eta is not None else 10.0 * cfg.cell**2 * float(np.median(frame))
    eta = eta if eta > 0 else 1.0
    tol = cfg.residual_tol if cfg.residual_tol is not None else 1e-8 * max(g_max, 1e-300)
    eps = cfg.support_eps if cfg.support_eps is not None else 1e-10 * max(g_max, 1e-300)
    return eta, tol, eps


def _block_preconditioner(active, grams, scale, max_block):
    """Exact inverse of the Newton matrix restricted to each connected
    cluster of active cells; clusters interact only through kernel tails."""
    gy, gx = grams
    labels, n = ndimage.label(active, structure=np.ones((3, 3), dtype=int))
    lab = labels[active]
    rows, cols = np.nonzero(active)
    blocks = []
    for comp in range(1, n + 1):
        sel = np.flatnonzero(lab == comp)
        if sel.size > max_block:
            d = scale * gy[rows[sel], rows[sel]] * gx[cols[sel], cols[sel]]
            blocks.append((sel, None, d))
            continue
        r, c = rows[sel], cols[sel]
        G = scale * gy[np.ix_(r, r)] * gx[np.ix_(c, c)]
        G[np.diag_indices_from(G)] *= 1.0 + 1e-12
        try:
            blocks.append((sel, cho_factor(G), None))
        except np.linalg.LinAlgError:
            blocks.append((sel, None, np.diag(G).copy()))

    def apply(v):
        out = np.empty_like(v)
        for sel, fac, d in blocks:
            out[sel] = cho_solve(fac, v[sel]) if fac is not None else v[sel] / d
        return out

    na = rows.size
    return LinearOperator((na, na), matvec=apply, dtype=float)


def _quasi_newton(h, op, g, eta, iters, gtol):
    """Bounded L-BFGS steps on the convex objective, used when Newton stalls."""

    def fun(v):
        v = v.reshape(op.shape)
        r = op.forward(v) - g
        return float(np.sum(r * r) + eta * np.sum(v)), (2.0 * op.adjoint(r) + eta).ravel()

    out = minimize(fun, h.ravel(), jac=True, method="L-BFGS-B", bounds=[(0.0, None)] * h.size,
                   options={"maxiter": iters, "gtol": gtol, "ftol": 0.0, "maxcor": 20})
    return np.maximum(out.x.reshape(op.shape), 0.0)


def solve(cfg: DeconvConfig, data, op: BlurOperator | None = None, eta: float | None = None,
          h0=None) -> AtomMeasure:
    """Semi-smooth Newton solve of the optimality system for background-free ``data``.

    ``data`` has shape ``(n2, n1)``.  Returns the projected measure; its
    ``converged`` flag and ``residual`` report the final ``max |F(h)|``.
    """
    g = np.asarray(data, dtype=float)
    if op is None:
        op = BlurOperator(g.shape[1], g.shape[0], cfg.cell, cfg.bump_sigma, cfg.grid_margin)
    eta_d, tol, _ = _resolve(cfg, g)
    eta = eta if eta is not None else eta_d
    lip = None
    gamma = cfg.gamma
    if gamma is None:
        lip = 2.0 * op.norm_sq()
        gamma = 10.0 / lip if lip > 0 else 1.0
    # F scales with gamma on the active set; compare beta itself to the tolerance
    scale = min(1.0, gamma)
    h = np.zeros(op.shape) if h0 is None else np.maximum(np.asarray(h0, dtype=float), 0.0)
    grams = op.gram_1d()
    best = math.inf
    stall = 0
    it = 0
    res = math.inf
    res0 = None
    for it in range(1, cfg.max_newton_iters + 1):
        beta = _beta(h, op, g, eta)
        F = h - np.maximum(0.0, h - gamma * beta)
        res = float(np.max(np.abs(F))) / scale
        if res < tol:
            it -= 1
            break
        if res0 is None:
            res0 = res
        if res < best * (1 - 1e-3):
            best, stall = res, 0
        else:
            stall += 1
        if stall >= cfg.stall_iters:
            log.debug("newton %d: residual %.3g stalled, bounded quasi-Newton", it, res)
            h = _quasi_newton(h, op, g, eta, cfg.fallback_steps, tol * scale / gamma)
            stall = 0
            best = math.inf
            continue
        active = (h - gamma * beta) > 0
        if it == 1 and h0 is None:
            # seed with the local minima of beta(0) (the brightest blobs)
            # instead of every cell where beta < 0
            size = 2 * int(round(cfg.bump_sigma / op.dx)) + 1
            active &= beta == ndimage.minimum_filter(beta, size=size, mode="nearest")
        delta = h.copy()
        na = int(active.sum())
        if na:
            # inactive rows of the generalized Jacobian are identity rows, so
            # delta = h there; the active block is 2 gamma B^T B restricted.
            h_inact = np.where(active, 0.0, h)
            rhs = gamma * beta[active] - 2.0 * gamma * op.adjoint(op.forward(h_inact))[active]

            def mv(v, active=active):
                full = np.zeros(op.shape)
                full[active] = v
                return 2.0 * gamma * op.adjoint(op.forward(full))[active]

            A = LinearOperator((na, na), matvec=mv, dtype=float)
            M = _block_preconditioner(active, grams, 2.0 * gamma, cfg.max_block)
            # inexact Newton: loose solves far from the root, tight ones near it
            rtol = min(0.1, max(1e-13, (res / res0) ** 2))
            delta[active], _ = gmres(A, rhs, restart=cfg.gmres_iters, maxiter=cfg.gmres_restarts,
                                     rtol=rtol, atol=0.0, M=M)
        # projected backtracking on the convex objective keeps the iteration
        # monotone when the active set is still far from the final one
        f0 = objective(h, op, g, eta)
        slack = 1e-13 * max(abs(f0), 1.0)
        t = 1.0
        while t >= cfg.min_step:
            trial = np.maximum(0.0, h - t * delta)
            if objective(trial, op, g, eta) <= f0 + slack:
                h = trial
                log.debug("newton %d: residual %.3g, %d active, step %.3g", it, res, na, t)
                break
            t *= 0.5
        else:
            stall = cfg.stall_iters
    else:
        beta = _beta(h, op, g, eta)
        res = float(np.max(np.abs(h - np.maximum(0.0, h - gamma * beta)))) / scale
    h = np.maximum(h, 0.0)
    converged = res < tol
    if not converged:
        log.warning("convex initializer stopped at residual %.3g (tolerance %.3g)", res, tol)
    return AtomMeasure(h, op.xs.copy(), op.ys.copy(), res, it, converged, eta, gamma)


def extract_atoms(h: AtomMeasure, cfg: DeconvConfig, op: BlurOperator, background: float,
                  height_threshold: float | None = None, support_eps: float | None = None,
                  domain=None) -> ParamVector:
    """Atoms from the 8-connected components of the support of ``h``.

    Components whose centroids lie within ``cfg.merge_radius`` (default
    3 bump widths, 0 disables) of each other are merged into one atom.

    Center is the mass-weighted centroid; height adds back the shrinkage of a
    single delta, ``mass + (eta / 2) / sum_i b(y - x_i)^2``.
    """
    c = h.coeffs
    eps = support_eps if support_eps is not None else 1e-10 * max(float(c.max(initial=0.0)), 1e-300)
    labels, n = ndimage.label(c > eps, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return ParamVector(np.zeros((0, 2)), np.zeros(0), cfg.bump_sigma, background)
    idx = np.arange(1, n + 1)
    mass = ndimage.sum(c, labels, idx)
    X, Y = np.meshgrid(h.xs, h.ys)
    mx = ndimage.sum(c * X, labels, idx)
    my = ndimage.sum(c * Y, labels, idx)
    radius = cfg.merge_radius if cfg.merge_radius is not None else 3.0 * cfg.bump_sigma
    if radius > 0 and n > 1:
        # fragments of one locally stretched atom: join components closer than radius
        pairs = cKDTree(np.column_stack([mx / mass, my / mass])).query_pairs(radius, output_type="ndarray")
        graph = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        n, group = csgraph.connected_components(graph, directed=False)
        mass, mx, my = (np.bincount(group, v, n) for v in (mass, mx, my))
    cx, cy = mx / mass, my / mass
    centers = np.column_stack([cx, cy])
    px = np.arange(1, op.n1 + 1)
    py = np.arange(1, op.n2 + 1)
    s2 = 2.0 * cfg.bump_sigma**2
    bx = np.exp(-((cx[:, None] - px[None, :]) ** 2) / s2)
    by = np.exp(-((cy[:, None] - py[None, :]) ** 2) / s2)
    sum_b2 = (bx**2).sum(1) * (by**2).sum(1)
    heights = mass + (h.eta / 2.0) / sum_b2
    keep = np.ones(n, dtype=bool)
    if height_threshold is not None:
        keep = heights >= height_threshold
    if domain is None:
        domain = (0.0, 0.0, float(op.n1), float(op.n2))
    x0, y0, x1, y1 = domain
    inside = (cx >= x0) & (cx <= x1) & (cy >= y0) & (cy <= y1)
    return ParamVector(centers[keep], heights[keep], cfg.bump_sigma, background, inside[keep])


def identify_atoms(frame, cfg: DeconvConfig | None = None, background: float | None = None):
    """Background removal, solve and extraction on a raw frame.

    Returns ``(ParamVector, AtomMeasure)``.
    """
    cfg = cfg or DeconvConfig()
    frame = np.asarray(frame, dtype=float)
    bg = background if background is not None else estimate_background(frame, cfg.background_percentile)
    data = np.maximum(frame - bg, 0.0)
    eta, tol, eps = _resolve(cfg, frame)
    op = BlurOperator(frame.shape[1], frame.shape[0], cfg.cell, cfg.bump_sigma, cfg.grid_margin)
    if cfg.residual_tol is None:
        cfg = replace(cfg, residual_tol=tol)
    h = solve(cfg, data, op, eta=eta)
    thr = cfg.height_threshold
    if thr is None:
        thr = 0.45 * (float(frame.max()) - bg) if frame.size else 0.0
    p = extract_atoms(h, cfg, op, bg, thr, eps)
    return p, h
