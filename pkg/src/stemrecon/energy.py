"""Multi-frame reconstruction energy with analytic gradient and Hessian.

``E = sum_k [ D_k + R1[w^k] + R2[w^k] ] + P[p]`` where ``D_k`` compares
``u[p](x_ij + w^k_ij)`` with frame ``k``, ``R1`` is the raster-chain Brownian
penalty, ``R2`` a small Tikhonov term on the shifts and ``P`` keeps atoms
outside the domain near their initial estimate.  All lengths are in pixels.

Variables are laid out shifts first (frame-major, raster order, the two
components of a pixel adjacent) and parameters last, so the Hessian is an
arrow: one banded block per frame, a dense parameter block, and sparse
couplings between them.  ``ArrowHessian`` factors it by block elimination.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .density import Field, ParamBounds, ParamVector
from .noise import Dissimilarity, DomainError, diss_all
from .scan import FrameStack, ScanGeometry, pixel_grid
from .solve import NotPositiveDefinite

__all__ = [
    "ReconstructionConfig",
    "JointState",
    "Problem",
    "EnergyTerms",
    "ArrowHessian",
    "Objective",
    "energy",
    "gradient",
    "hessian",
    "energy_rowconstant",
    "gradient_rowconstant",
    "hessian_rowconstant",
    "expand_rows",
    "Z_FLOOR",
]

Z_FLOOR = 1e-12


@dataclass(frozen=True)
class ReconstructionConfig:
    epsilon: float = 0.1
    nu_pen: float = 0.05
    nu_hor: float = 0.1
    nu_vert: float = 10.0
    dissimilarity: Dissimilarity = field(default_factory=Dissimilarity)
    geometry: ScanGeometry | None = None
    bounds: ParamBounds = field(default_factory=ParamBounds)
    p_ini: ParamVector | None = None
    cutoff_tol: float | None = None  # None: 1e-8 * max frame intensity

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        for name in ("nu_pen", "nu_hor", "nu_vert"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class JointState:
    p: ParamVector
    shifts: np.ndarray  # (K, n2, n1, 2)

    @classmethod
    def zero(cls, p: ParamVector, K: int, geometry: ScanGeometry) -> "JointState":
        return cls(p, np.zeros((K, geometry.n2, geometry.n1, 2)))


@dataclass
class EnergyTerms:
    data: float
    brownian: float
    tikhonov: float
    penalty: float
    clamped: int = 0

    @property
    def total(self) -> float:
        return self.data + self.brownian + self.tikhonov + self.penalty


# -- banded chain blocks --------------------------------------------------------


def _chain_banded(blocks, links, scale, ridge):
    """Lower banded form (3, 2n) of the shift Hessian of one frame.

    ``blocks`` are per-node 2x2 matrices, ``links[m]`` the inverse gap between
    node ``m`` and ``m - 1`` (``links[0]`` anchors node 0 at zero), ``scale``
    multiplies the chain and ``ridge`` is added per component.
    """
    n = blocks.shape[0]
    ab = np.zeros((3, 2 * n))
    lk = scale * np.asarray(links, dtype=float)
    node = lk.copy()
    node[:-1] += lk[1:]
    ab[0, 0::2] = blocks[:, 0, 0] + node + ridge[0]
    ab[0, 1::2] = blocks[:, 1, 1] + node + ridge[1]
    ab[1, 0::2] = blocks[:, 1, 0]
    ab[2, 0:2 * n - 2:2] = -lk[1:]
    ab[2, 1:2 * n - 2:2] = -lk[1:]
    return ab


def _banded_matvec(ab, v):
    out = ab[0] * v
    out[1:] += ab[1, :-1] * v[:-1]
    out[:-1] += ab[1, :-1] * v[1:]
    out[2:] += ab[2, :-2] * v[:-2]
    out[:-2] += ab[2, :-2] * v[2:]
    return out


class ArrowHessian:
    """Symmetric ``[[A_1 .. 0 B_1], ..., [B_1' .. B_K' C]]`` with banded ``A_k``.

    ``factor(lam)`` Cholesky-factors every ``A_k + lam I`` (banded) and the
    dense Schur complement ``C + lam I - sum_k B_k' (A_k + lam I)^-1 B_k``.
    Positive definiteness of all pieces is equivalent to that of the whole.
    """

    def __init__(self, A: list, B: list, C: np.ndarray):
        self.A = A
        self.B = [sp.csr_matrix(b) for b in B]
        self.C = 0.5 * (C + C.T)
        self.sizes = [a.shape[1] for a in A]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.np = C.shape[0]
        self.n = int(self.offsets[-1] + self.np)
        self._Bt = [b.T.tocsr() for b in self.B]

    def _split(self, v):
        return [v[self.offsets[k]:self.offsets[k + 1]] for k in range(len(self.A))], v[self.offsets[-1]:]

    def matvec(self, v):
        ws, q = self._split(np.asarray(v, dtype=float))
        out = np.empty(self.n)
        tail = self.C @ q
        for k, (ab, b, bt) in enumerate(zip(self.A, self.B, self._Bt)):
            out[self.offsets[k]:self.offsets[k + 1]] = _banded_matvec(ab, ws[k]) + b @ q
            tail += bt @ ws[k]
        out[self.offsets[-1]:] = tail
        return out

    def diagonal(self):
        return np.concatenate([ab[0] for ab in self.A] + [np.diag(self.C)])

    def gershgorin(self):
        lo, hi = math.inf, -math.inf
        pc = np.abs(self.C).sum(axis=1) - np.abs(np.diag(self.C))
        for ab, b in zip(self.A, self.B):
            a1 = np.abs(ab[1, :-1])
            a2 = np.abs(ab[2, :-2])
            off = np.zeros(ab.shape[1])
            off[1:] += a1
            off[:-1] += a1
            off[2:] += a2
            off[:-2] += a2
            off += np.asarray(abs(b).sum(axis=1)).ravel()
            lo = min(lo, float(np.min(ab[0] - off)))
            hi = max(hi, float(np.max(ab[0] + off)))
            pc = pc + np.asarray(abs(b).sum(axis=0)).ravel()
        d = np.diag(self.C)
        if d.size:
            lo = min(lo, float(np.min(d - pc)))
            hi = max(hi, float(np.max(d + pc)))
        return lo, hi

    def factor(self, lam: float):
        chol = []
        S = self.C + lam * np.eye(self.np)
        for ab, b, bt in zip(self.A, self.B, self._Bt):
            a = ab.copy()
            a[0] += lam
            try:
                cb = sla.cholesky_banded(a, lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefinite(str(exc)) from None
            chol.append(cb)
            if self.np and b.nnz:
                X = sla.cho_solve_banded((cb, True), b.toarray(), check_finite=False)
                S -= bt @ X
        try:
            cs = sla.cho_factor(0.5 * (S + S.T), lower=True, check_finite=False) if self.np else None
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from None
        return _ArrowFactor(self, chol, cs)

    def to_sparse(self) -> sp.csr_matrix:
        """Assembled matrix, for inspection and small-instance tests."""
        blocks = []
        for ab in self.A:
            n = ab.shape[1]
            blocks.append(sp.diags([ab[2, :-2], ab[1, :-1], ab[0], ab[1, :-1], ab[2, :-2]],
                                   [-2, -1, 0, 1, 2], shape=(n, n)))
        Adiag = sp.block_diag(blocks) if blocks else sp.csr_matrix((0, 0))
        Bs = sp.vstack(self.B) if self.B else sp.csr_matrix((0, self.np))
        return sp.bmat([[Adiag, Bs], [Bs.T, sp.csr_matrix(self.C)]]).tocsr()


class _ArrowFactor:
    def __init__(self, H: ArrowHessian, chol, cs):
        self.H = H
        self.chol = chol
        self.cs = cs

    def solve(self, rhs):
        H = self.H
        ws, q = H._split(np.asarray(rhs, dtype=float))
        y = [sla.cho_solve_banded((cb, True), w, check_finite=False) for cb, w in zip(self.chol, ws)]
        out = np.empty(H.n)
        if H.np:
            r = q.copy()
            for bt, yk in zip(H._Bt, y):
                r -= bt @ yk
            xq = sla.cho_solve(self.cs, r, check_finite=False)
            out[H.offsets[-1]:] = xq
        else:
            xq = np.zeros(0)
        for k, (cb, b) in enumerate(zip(self.chol, H.B)):
            if H.np and b.nnz:
                yk = y[k] - sla.cho_solve_banded((cb, True), b @ xq, check_finite=False)
            else:
                yk = y[k]
            out[H.offsets[k]:H.offsets[k + 1]] = yk
        return out


# -- the problem ------------------------------------------------------------------


def expand_rows(v, n1: int) -> np.ndarray:
    """Row-constant shifts ``(K, n2, 2)`` to a full field ``(K, n2, n1, 2)``."""
    v = np.asarray(v, dtype=float)
    return np.repeat(v[:, :, None, :], n1, axis=2)


class Problem:
    """Frames, geometry and weights; evaluates the energy and its derivatives."""

    def __init__(self, data: FrameStack, cfg: ReconstructionConfig | None = None):
        cfg = cfg or ReconstructionConfig()
        self.cfg = cfg
        self.frames = np.asarray(data.frames, dtype=float)
        g = cfg.geometry or data.geometry
        if g.shape != self.frames.shape[1:]:
            raise ValueError("configured geometry does not match the frames")
        self.geometry = g
        self.K = self.frames.shape[0]
        self.M = g.n_pixels
        self.grid = pixel_grid(g).reshape(-1, 2)
        self.flat = self.frames.reshape(self.K, -1)
        fmax = float(np.max(self.frames)) if self.frames.size else 1.0
        self.cutoff_tol = cfg.cutoff_tol if cfg.cutoff_tol is not None else 1e-8 * max(fmax, 1e-300)
        self.links = np.full(self.M, 1.0 / g.dt)
        self.links[g.n1::g.n1] = 1.0 / g.dT
        self.row_links = np.full(g.n2, 1.0 / g.dT)
        self.row_links[0] = 1.0 / g.dt
        self.nu = np.array([cfg.nu_hor, cfg.nu_vert])

    # -- pieces ------------------------------------------------------------

    def _check(self, p: ParamVector):
        why = self.cfg.bounds.violation(p)
        if why is not None:
            raise DomainError(why)

    def _field(self, p, w_k):
        pts = self.grid if w_k is None else self.grid + w_k.reshape(-1, 2)
        return Field(p, pts, self.cutoff_tol)

    def _diss(self, u, k, order):
        bad = ~(u > 0)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise DomainError(f"predicted intensity {u[i]!r} <= 0 at frame {k}, pixel {i}", i)
        low = u < Z_FLOOR
        z = np.where(low, Z_FLOOR, u)
        val, d1, d2 = diss_all(self.cfg.dissimilarity, z, self.flat[k], order)
        return val, d1, d2, int(low.sum())

    def brownian(self, w_k) -> float:
        w = w_k.reshape(-1, 2)
        d = w.copy()
        d[1:] -= w[:-1]
        return float(0.5 / self.cfg.epsilon * np.sum(self.links * np.sum(d * d, axis=1)))

    def brownian_grad(self, w_k) -> np.ndarray:
        w = w_k.reshape(-1, 2)
        d = w.copy()
        d[1:] -= w[:-1]
        f = self.links[:, None] * d / self.cfg.epsilon
        g = f.copy()
        g[:-1] -= f[1:]
        return g

    def tikhonov(self, w_k) -> float:
        w = w_k.reshape(-1, 2)
        return float(0.5 * np.sum(self.nu * w * w))

    def _penalty_parts(self, p: ParamVector):
        pi = self.cfg.p_ini
        if pi is None or self.cfg.nu_pen == 0:
            return None
        if pi.n_atoms != p.n_atoms:
            raise ValueError("p_ini and p have different atom counts")
        out = ~pi.in_domain
        return pi, out

    def penalty(self, p: ParamVector) -> float:
        parts = self._penalty_parts(p)
        if parts is None:
            return 0.0
        pi, out = parts
        dc = p.heights[out] - pi.heights[out]
        dy = p.centers[out] - pi.centers[out]
        return float(0.5 * self.cfg.nu_pen * (np.sum(dc * dc) + np.sum(dy * dy)))

    def penalty_grad(self, p: ParamVector) -> np.ndarray:
        g = np.zeros(p.n_params)
        parts = self._penalty_parts(p)
        if parts is None:
            return g
        pi, out = parts
        j = p.n_atoms
        idx = np.flatnonzero(out)
        g[2 * idx] = self.cfg.nu_pen * (p.centers[idx, 0] - pi.centers[idx, 0])
        g[2 * idx + 1] = self.cfg.nu_pen * (p.centers[idx, 1] - pi.centers[idx, 1])
        g[2 * j + idx] = self.cfg.nu_pen * (p.heights[idx] - pi.heights[idx])
        return g

    def penalty_diag(self, p: ParamVector) -> np.ndarray:
        d = np.zeros(p.n_params)
        parts = self._penalty_parts(p)
        if parts is None:
            return d
        _, out = parts
        j = p.n_atoms
        idx = np.flatnonzero(out)
        d[2 * idx] = d[2 * idx + 1] = d[2 * j + idx] = self.cfg.nu_pen
        return d

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, p: ParamVector, shifts=None, order: int = 0, with_regularizers: bool = True):
        """Energy terms and, for ``order >= 1``, derivatives.

        ``shifts`` is ``(K, n2, n1, 2)`` or None for zero shifts.  Returns a
        dict with ``terms`` (EnergyTerms), and depending on ``order``:
        ``grad_p``, ``grad_w`` (K, M, 2), ``blocks`` (K, M, 2, 2 data parts of
        the shift Hessian), ``cross`` (list of sparse (2M, n_f)), ``C``.
        """
        self._check(p)
        K, M = self.K, self.M
        data = brown = tik = 0.0
        clamped = 0
        out: dict = {}
        if order >= 1:
            grad_p = np.zeros(p.n_params)
            grad_w = np.zeros((K, M, 2))
        if order >= 2:
            blocks = np.zeros((K, M, 2, 2))
            cross = []
            C = np.zeros((p.n_params, p.n_params))
        for k in range(K):
            w_k = None if shifts is None else np.asarray(shifts[k], dtype=float)
            fld = self._field(p, w_k)
            val, d1, d2, nc = self._diss(fld.u, k, order)
            clamped += nc
            data += float(np.sum(val))
            if w_k is not None and with_regularizers:
                brown += self.brownian(w_k)
                tik += self.tikhonov(w_k)
            if order >= 1:
                grad_p += fld.grad_p_weighted(d1)
                grad_w[k] = d1[:, None] * fld.grad
                if w_k is not None and with_regularizers:
                    grad_w[k] += self.brownian_grad(w_k) + self.nu * w_k.reshape(-1, 2)
            if order >= 2:
                gx = fld.grad
                blocks[k] = d2[:, None, None] * gx[:, :, None] * gx[:, None, :] + d1[:, None, None] * fld.hess
                cross.append(fld.cross_matrix(d2, d1))
                G = fld.grad_p_matrix()
                C += (G.T @ G.multiply(d2[:, None])).toarray() + fld.weighted_hess_p(d1)
        pen = self.penalty(p)
        out["terms"] = EnergyTerms(data, brown, tik, pen, clamped)
        if order >= 1:
            out["grad_p"] = grad_p + self.penalty_grad(p)
            out["grad_w"] = grad_w
        if order >= 2:
            C = 0.5 * (C + C.T)
            C[np.diag_indices_from(C)] += self.penalty_diag(p)
            out["blocks"] = blocks
            out["cross"] = cross
            out["C"] = C
        return out

    # -- assembled Hessians --------------------------------------------------

    def arrow_full(self, ev, with_regularizers: bool = True) -> ArrowHessian:
        scale = 1.0 / self.cfg.epsilon if with_regularizers else 0.0
        ridge = self.nu if with_regularizers else np.zeros(2)
        A = [_chain_banded(ev["blocks"][k], self.links, scale, ridge) for k in range(self.K)]
        return ArrowHessian(A, ev["cross"], ev["C"])

    def row_sum_matrix(self) -> sp.csr_matrix:
        """``(2 n2, 2M)`` matrix summing each row's pixels per component."""
        n1, n2 = self.geometry.n1, self.geometry.n2
        m = np.arange(self.M)
        row = m // n1
        r = np.concatenate([2 * row, 2 * row + 1])
        c = np.concatenate([2 * m, 2 * m + 1])
        return sp.csr_matrix((np.ones(2 * self.M), (r, c)), shape=(2 * n2, 2 * self.M))

    def arrow_rows(self, ev) -> ArrowHessian:
        n1, n2 = self.geometry.n1, self.geometry.n2
        S = self.row_sum_matrix()
        A, B = [], []
        for k in range(self.K):
            blocks = ev["blocks"][k].reshape(n2, n1, 2, 2).sum(axis=1)
            A.append(_chain_banded(blocks, self.row_links, 1.0 / self.cfg.epsilon, n1 * self.nu))
            B.append(S @ ev["cross"][k])
        return ArrowHessian(A, B, ev["C"])


# -- functional API ---------------------------------------------------------------


def energy(state: JointState, data: FrameStack, cfg: ReconstructionConfig | None = None) -> float:
    return Problem(data, cfg).evaluate(state.p, state.shifts, 0)["terms"].total


def gradient(state: JointState, data: FrameStack, cfg: ReconstructionConfig | None = None):
    """``(grad_p, grad_w)`` with ``grad_w`` shaped like ``state.shifts``."""
    ev = Problem(data, cfg).evaluate(state.p, state.shifts, 1)
    return ev["grad_p"], ev["grad_w"].reshape(np.shape(state.shifts))


def hessian(state: JointState, data: FrameStack, cfg: ReconstructionConfig | None = None) -> ArrowHessian:
    prob = Problem(data, cfg)
    return prob.arrow_full(prob.evaluate(state.p, state.shifts, 2))


def energy_rowconstant(p: ParamVector, v, data: FrameStack, cfg: ReconstructionConfig | None = None) -> float:
    prob = Problem(data, cfg)
    return prob.evaluate(p, expand_rows(v, prob.geometry.n1), 0)["terms"].total


def gradient_rowconstant(p: ParamVector, v, data: FrameStack, cfg: ReconstructionConfig | None = None):
    """``(grad_p, grad_v)``; ``grad_v`` is the per-row sum of the full shift gradient."""
    prob = Problem(data, cfg)
    g = prob.geometry
    ev = prob.evaluate(p, expand_rows(v, g.n1), 1)
    return ev["grad_p"], ev["grad_w"].reshape(prob.K, g.n2, g.n1, 2).sum(axis=2)


def hessian_rowconstant(p: ParamVector, v, data: FrameStack, cfg: ReconstructionConfig | None = None) -> ArrowHessian:
    prob = Problem(data, cfg)
    return prob.arrow_rows(prob.evaluate(p, expand_rows(v, prob.geometry.n1), 2))


# -- flat-vector objectives for the optimizers ------------------------------------


class Objective:
    """Energy as a function of one flat vector, for the generic optimizers.

    ``mode`` selects the free variables:
      * ``"params"``: p only, shifts held at zero, no shift regularizers;
      * ``"rows"``: row-constant shifts ``(K, n2, 2)`` then p;
      * ``"full"``: full shifts ``(K, n2, n1, 2)`` then p.
    ``free`` optionally masks which parameter entries vary (others stay at
    the template values); the masked Hessian is the corresponding submatrix.
    """

    def __init__(self, problem: Problem, template: ParamVector, mode: str = "full", free=None):
        if mode not in ("params", "rows", "full"):
            raise ValueError(f"unknown mode {mode!r}")
        self.prob = problem
        self.template = template
        self.mode = mode
        g = problem.geometry
        self.n_shift = {"params": 0, "rows": problem.K * g.n2 * 2, "full": problem.K * problem.M * 2}[mode]
        pv = template.to_vector()
        self.free = np.ones(pv.size, bool) if free is None else np.asarray(free, bool)
        self._pbase = pv
        self._cache_key = None
        self._cache = None
        self.evaluations = 0

    @property
    def n(self) -> int:
        return self.n_shift + int(self.free.sum())

    def pack(self, p: ParamVector, shifts=None) -> np.ndarray:
        pv = p.to_vector()[self.free]
        if self.mode == "params":
            return pv
        g = self.prob.geometry
        if shifts is None:
            s = np.zeros(self.n_shift)
        elif self.mode == "rows":
            s = np.asarray(shifts, dtype=float).reshape(self.prob.K, g.n2, 2).ravel()
        else:
            s = np.asarray(shifts, dtype=float).ravel()
        return np.concatenate([s, pv])

    def unpack(self, x):
        """``(ParamVector, full shifts or None)``."""
        x = np.asarray(x, dtype=float)
        pv = self._pbase.copy()
        pv[self.free] = x[self.n_shift:]
        if not (np.all(np.isfinite(pv)) and pv[self.template.width_index] > 0):
            raise DomainError("parameter vector outside the model domain")
        p = self.template.with_vector(pv)
        g = self.prob.geometry
        if self.mode == "params":
            return p, None
        if self.mode == "rows":
            v = x[:self.n_shift].reshape(self.prob.K, g.n2, 2)
            return p, expand_rows(v, g.n1)
        return p, x[:self.n_shift].reshape(self.prob.K, g.n2, g.n1, 2)

    def _eval(self, x, order):
        key = np.asarray(x, dtype=float).tobytes()
        if self._cache_key == key and self._cache[0] >= order:
            return self._cache[1]
        p, w = self.unpack(x)
        ev = self.prob.evaluate(p, w, order, with_regularizers=self.mode != "params")
        self.evaluations += 1
        self._cache_key, self._cache = key, (order, ev)
        return ev

    def terms(self, x) -> EnergyTerms:
        return self._eval(x, 0)["terms"]

    def value(self, x) -> float:
        return self._eval(x, 0)["terms"].total

    def gradient(self, x) -> np.ndarray:
        ev = self._eval(x, 1)
        gp = ev["grad_p"][self.free]
        if self.mode == "params":
            return gp
        gw = ev["grad_w"]
        if self.mode == "rows":
            g = self.prob.geometry
            gw = gw.reshape(self.prob.K, g.n2, g.n1, 2).sum(axis=2)
        return np.concatenate([gw.ravel(), gp])

    def hessian(self, x):
        ev = self._eval(x, 2)
        idx = np.flatnonzero(self.free)
        C = ev["C"][np.ix_(idx, idx)]
        if self.mode == "params":
            return C
        if self.mode == "rows":
            H = self.prob.arrow_rows(ev)
        else:
            H = self.prob.arrow_full(ev)
        if idx.size != self.free.size:
            H = ArrowHessian(H.A, [b[:, idx] for b in H.B], C)
        return H
