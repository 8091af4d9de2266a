"""Gaussian-bump material density and its analytic derivatives.

``u[p](x) = sum_l c_l * exp(-|x - y_l|^2 / (2 s^2)) + o`` with a single shared
width ``s``.  Parameters are flattened in the fixed order
``(y_1, ..., y_J, c_1, ..., c_J, s, o)`` so that ``n_params = 3J + 2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import kernels

__all__ = [
    "ParamVector",
    "ParamBounds",
    "Field",
    "cutoff_radii",
    "eval",
    "grad_x",
    "hess_x",
    "grad_p",
    "hess_p",
    "grad_x_grad_p",
    "write_atoms_csv",
    "read_atoms_csv",
]


def _frozen(a, dtype=float, shape=None):
    a = np.array(a, dtype=dtype)
    if shape is not None:
        a = a.reshape(shape)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ParamVector:
    """Atom centers/heights, shared bump width and background offset."""

    centers: np.ndarray
    heights: np.ndarray
    width: float
    offset: float
    in_domain: np.ndarray = None

    def __post_init__(self):
        centers = _frozen(self.centers, shape=(-1, 2))
        heights = _frozen(self.heights).reshape(-1)
        if centers.shape[0] != heights.shape[0]:
            raise ValueError("centers and heights differ in length")
        in_domain = self.in_domain
        if in_domain is None:
            in_domain = np.ones(heights.shape[0], dtype=bool)
        in_domain = _frozen(in_domain, dtype=bool).reshape(-1)
        if in_domain.shape[0] != heights.shape[0]:
            raise ValueError("in_domain flags differ in length from the atom list")
        if not self.width > 0:
            raise ValueError(f"bump width must be positive, got {self.width}")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "heights", heights)
        object.__setattr__(self, "in_domain", in_domain)
        object.__setattr__(self, "width", float(self.width))
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def n_atoms(self) -> int:
        return self.heights.shape[0]

    @property
    def n_params(self) -> int:
        return 3 * self.n_atoms + 2

    @property
    def width_index(self) -> int:
        return 3 * self.n_atoms

    @property
    def offset_index(self) -> int:
        return 3 * self.n_atoms + 1

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.centers.ravel(), self.heights, [self.width, self.offset]]
        )

    def with_vector(self, vec) -> "ParamVector":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        j = self.n_atoms
        return ParamVector(
            vec[: 2 * j].reshape(j, 2), vec[2 * j: 3 * j], vec[3 * j], vec[3 * j + 1],
            self.in_domain,
        )

    def translated(self, shift) -> "ParamVector":
        return replace(self, centers=self.centers + np.asarray(shift, dtype=float))

    def subset(self, keep) -> "ParamVector":
        keep = np.asarray(keep)
        return ParamVector(
            self.centers[keep], self.heights[keep], self.width, self.offset, self.in_domain[keep]
        )


@dataclass(frozen=True)
class ParamBounds:
    """Box constraints on the parameters.

    By default only ``width >= min_width`` and ``heights >= 0`` are imposed.
    """

    min_width: float = 1e-3
    min_height: float = 0.0
    center_box: tuple | None = None  # (xmin, ymin, xmax, ymax)
    offset_range: tuple = (-math.inf, math.inf)
    max_height: float = math.inf
    max_width: float = math.inf

    def __post_init__(self):
        if not self.min_width > 0:
            raise ValueError("min_width must be positive")
        if self.min_height > self.max_height or self.min_width > self.max_width:
            raise ValueError("lower bound exceeds upper bound")
        if self.offset_range[0] > self.offset_range[1]:
            raise ValueError("lower bound exceeds upper bound")

    def violation(self, p: ParamVector) -> str | None:
        """Describe the first violated bound, or None when ``p`` is feasible."""
        if not self.min_width <= p.width <= self.max_width:
            return f"width {p.width:.6g} outside [{self.min_width}, {self.max_width}]"
        if p.n_atoms and (p.heights.min() < self.min_height or p.heights.max() > self.max_height):
            return "atom height outside bounds"
        if not self.offset_range[0] <= p.offset <= self.offset_range[1]:
            return "offset outside bounds"
        if self.center_box is not None and p.n_atoms:
            x0, y0, x1, y1 = self.center_box
            c = p.centers
            if (c[:, 0] < x0).any() or (c[:, 0] > x1).any() or (c[:, 1] < y0).any() or (c[:, 1] > y1).any():
                return "atom center outside box"
        return None


def cutoff_radii(p: ParamVector, tol: float | None) -> np.ndarray:
    """Distance beyond which atom ``l`` contributes less than ``tol``.

    ``tol=None`` disables the cutoff (every atom reaches every point).
    """
    if tol is None:
        return np.full(p.n_atoms, np.inf)
    h = np.asarray(p.heights)
    out = np.zeros(p.n_atoms)
    big = h > tol
    out[big] = p.width * np.sqrt(2.0 * np.log(h[big] / tol))
    return out


class Field:
    """Density, spatial derivatives and parameter derivatives at many points.

    All parameter-space outputs use the ordering of ``ParamVector.to_vector``.
    """

    def __init__(self, p: ParamVector, points, cutoff_tol: float | None = None, backend=None):
        self.p = p
        self.points = np.ascontiguousarray(points, dtype=float).reshape(-1, 2)
        radii = cutoff_radii(p, cutoff_tol)
        radii = np.where(np.isinf(radii), 1e300, radii)
        (self.u, self.grad, h3, self.pix, self.atom, self.r, self.e) = kernels.local_field(
            self.points, p.centers, p.heights, p.width, p.offset, radii, backend=backend
        )
        self.hess = np.empty((self.u.size, 2, 2))
        self.hess[:, 0, 0] = h3[:, 0]
        self.hess[:, 0, 1] = h3[:, 1]
        self.hess[:, 1, 0] = h3[:, 1]
        self.hess[:, 1, 1] = h3[:, 2]
        s = p.width
        self.q = self.r[:, 0] ** 2 + self.r[:, 1] ** 2
        self.ce = p.heights[self.atom] * self.e
        # d u / d s at each point
        self.du_ds = np.bincount(self.pix, self.ce * self.q / s**3, minlength=self.n_points)

    @property
    def n_points(self) -> int:
        return self.u.size

    # -- parameter gradient -------------------------------------------------

    def grad_p_matrix(self) -> sp.csr_matrix:
        """Sparse ``(n_points, n_params)`` matrix of ``grad_p u``."""
        p, s = self.p, self.p.width
        j = p.n_atoms
        m = self.n_points
        pts = np.arange(m)
        rows = np.concatenate([self.pix, self.pix, self.pix, pts, pts])
        cols = np.concatenate(
            [2 * self.atom, 2 * self.atom + 1, 2 * j + self.atom,
             np.full(m, 3 * j), np.full(m, 3 * j + 1)]
        )
        vals = np.concatenate(
            [self.ce * self.r[:, 0] / s**2, self.ce * self.r[:, 1] / s**2, self.e,
             self.du_ds, np.ones(m)]
        )
        return sp.csr_matrix((vals, (rows, cols)), shape=(m, p.n_params))

    def grad_p_weighted(self, w) -> np.ndarray:
        """``sum_m w_m grad_p u(z_m)`` without forming the sparse matrix."""
        p, s = self.p, self.p.width
        j = p.n_atoms
        w = np.asarray(w, dtype=float)
        wp = w[self.pix]
        out = np.empty(p.n_params)
        out[0:2 * j:2] = np.bincount(self.atom, wp * self.ce * self.r[:, 0], minlength=j) / s**2
        out[1:2 * j:2] = np.bincount(self.atom, wp * self.ce * self.r[:, 1], minlength=j) / s**2
        out[2 * j:3 * j] = np.bincount(self.atom, wp * self.e, minlength=j)
        out[3 * j] = np.dot(w, self.du_ds)
        out[3 * j + 1] = w.sum()
        return out

    # -- parameter Hessian --------------------------------------------------

    def weighted_hess_p(self, w) -> np.ndarray:
        """Dense ``sum_m w_m hess_p u(z_m)``; symmetric by construction."""
        p, s = self.p, self.p.width
        j = p.n_atoms
        n = p.n_params
        w = np.asarray(w, dtype=float)
        wp = w[self.pix]
        ce, e, r, q, a = self.ce, self.e, self.r, self.q, self.atom
        H = np.zeros((n, n))
        ix = 2 * np.arange(j)
        iy = ix + 1
        ic = 2 * j + np.arange(j)
        isg = 3 * j

        def acc(vals):
            return np.bincount(a, wp * vals, minlength=j)

        hxx = acc(ce * (r[:, 0] ** 2 / s**4 - 1.0 / s**2))
        hxy = acc(ce * (r[:, 0] * r[:, 1] / s**4))
        hyy = acc(ce * (r[:, 1] ** 2 / s**4 - 1.0 / s**2))
        H[ix, ix] = hxx
        H[iy, iy] = hyy
        H[ix, iy] = hxy
        H[iy, ix] = hxy
        hxc = acc(e * r[:, 0] / s**2)
        hyc = acc(e * r[:, 1] / s**2)
        H[ix, ic] = hxc
        H[ic, ix] = hxc
        H[iy, ic] = hyc
        H[ic, iy] = hyc
        fac = q / s**5 - 2.0 / s**3
        hxs = acc(ce * r[:, 0] * fac)
        hys = acc(ce * r[:, 1] * fac)
        H[ix, isg] = hxs
        H[isg, ix] = hxs
        H[iy, isg] = hys
        H[isg, iy] = hys
        hcs = acc(e * q / s**3)
        H[ic, isg] = hcs
        H[isg, ic] = hcs
        H[isg, isg] = np.sum(wp * ce * (q**2 / s**6 - 3.0 * q / s**4))
        return H

    # -- mixed derivatives --------------------------------------------------

    def cross_matrix(self, a, b) -> sp.csr_matrix:
        """Sparse ``(2 n_points, n_params)`` matrix with rows ``2m, 2m+1`` equal to

        ``a_m * grad_x u(z_m) (x) grad_p u(z_m) + b_m * grad_x grad_p u(z_m)``.
        """
        p, s = self.p, self.p.width
        j = p.n_atoms
        m = self.n_points
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        pix, atom, r, ce, e, q = self.pix, self.atom, self.r, self.ce, self.e, self.q
        ap = a[pix]
        bp = b[pix]
        gxp = self.grad[pix]
        gpy0 = ce * r[:, 0] / s**2  # d u / d y_l (first comp.)
        gpy1 = ce * r[:, 1] / s**2
        # d/dx d/dy_l = ce * (I / s^2 - r r^T / s^4)
        m00 = ce * (1.0 / s**2 - r[:, 0] ** 2 / s**4)
        m01 = -ce * r[:, 0] * r[:, 1] / s**4
        m11 = ce * (1.0 / s**2 - r[:, 1] ** 2 / s**4)
        row0 = 2 * pix
        row1 = 2 * pix + 1
        cy0 = 2 * atom
        cy1 = 2 * atom + 1
        cc = 2 * j + atom
        pts = np.arange(m)
        # d/dx d/ds
        fac = ce * (2.0 / s**3 - q / s**5)
        dxs0 = np.bincount(pix, fac * r[:, 0], minlength=m)
        dxs1 = np.bincount(pix, fac * r[:, 1], minlength=m)
        rows = np.concatenate([row0, row0, row1, row1, row0, row1,
                               2 * pts, 2 * pts + 1, 2 * pts, 2 * pts + 1])
        cols = np.concatenate([cy0, cy1, cy0, cy1, cc, cc,
                               np.full(m, 3 * j), np.full(m, 3 * j),
                               np.full(m, 3 * j + 1), np.full(m, 3 * j + 1)])
        vals = np.concatenate([
            ap * gxp[:, 0] * gpy0 + bp * m00,
            ap * gxp[:, 0] * gpy1 + bp * m01,
            ap * gxp[:, 1] * gpy0 + bp * m01,
            ap * gxp[:, 1] * gpy1 + bp * m11,
            ap * gxp[:, 0] * e - bp * e * r[:, 0] / s**2,
            ap * gxp[:, 1] * e - bp * e * r[:, 1] / s**2,
            a * self.grad[:, 0] * self.du_ds + b * dxs0,
            a * self.grad[:, 1] * self.du_ds + b * dxs1,
            a * self.grad[:, 0],
            a * self.grad[:, 1],
        ])
        return sp.csr_matrix((vals, (rows, cols)), shape=(2 * m, p.n_params))


# -- single-point API ---------------------------------------------------------


def _point_field(p, x, cutoff_tol):
    x = np.asarray(x, dtype=float)
    return Field(p, x.reshape(-1, 2), cutoff_tol), x.ndim == 1


def eval(p: ParamVector, x, cutoff_tol: float | None = None):
    """Density at one point ``x`` (shape (2,)) or many points (shape (M, 2))."""
    f, single = _point_field(p, x, cutoff_tol)
    return float(f.u[0]) if single else f.u


def grad_x(p: ParamVector, x, cutoff_tol: float | None = None):
    f, single = _point_field(p, x, cutoff_tol)
    return f.grad[0] if single else f.grad


def hess_x(p: ParamVector, x, cutoff_tol: float | None = None):
    f, single = _point_field(p, x, cutoff_tol)
    return f.hess[0] if single else f.hess


def grad_p(p: ParamVector, x, cutoff_tol: float | None = None) -> np.ndarray:
    f = Field(p, np.asarray(x, dtype=float).reshape(1, 2), cutoff_tol)
    return f.grad_p_matrix().toarray()[0]


def hess_p(p: ParamVector, x, cutoff_tol: float | None = None) -> np.ndarray:
    f = Field(p, np.asarray(x, dtype=float).reshape(1, 2), cutoff_tol)
    return f.weighted_hess_p(np.ones(1))


def grad_x_grad_p(p: ParamVector, x, cutoff_tol: float | None = None) -> np.ndarray:
    """``2 x n_params`` matrix of mixed second derivatives at ``x``."""
    f = Field(p, np.asarray(x, dtype=float).reshape(1, 2), cutoff_tol)
    return f.cross_matrix(np.zeros(1), np.ones(1)).toarray()


# -- atom table ---------------------------------------------------------------


def write_atoms_csv(path, p: ParamVector) -> None:
    """Write ``x,y,height`` rows followed by ``# sigma_b=`` / ``# offset=`` lines."""
    lines = ["x,y,height"]
    for (x, y), c in zip(p.centers, p.heights):
        lines.append(f"{float(x)!r},{float(y)!r},{float(c)!r}")
    lines.append(f"# sigma_b={float(p.width)!r}")
    lines.append(f"# offset={float(p.offset)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_atoms_csv(path) -> ParamVector:
    centers, heights = [], []
    meta = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, val = line[1:].partition("=")
            meta[key.strip()] = float(val)
            continue
        if line.lower().startswith("x,"):
            continue
        x, y, c = (float(v) for v in line.split(","))
        centers.append((x, y))
        heights.append(c)
    if "sigma_b" not in meta or "offset" not in meta:
        raise ValueError(f"{path}: missing '# sigma_b=' or '# offset=' metadata")
    return ParamVector(np.array(centers).reshape(-1, 2), heights, meta["sigma_b"], meta["offset"])
