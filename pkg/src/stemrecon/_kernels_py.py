"""Pure numpy fallback for the compiled point/atom interaction kernel."""
import numpy as np

_CHUNK = 8192


def local_field(points, centers, heights, width, offset, radii):
    """Sum Gaussian bumps at ``points`` using only atoms within ``radii``.

    Returns ``(u, grad, hess3, pix, atom, r, e)``: the field, its spatial
    gradient, the Hessian packed as ``(xx, xy, yy)``, and for every
    interacting (point, atom) pair the point index, atom index, offset
    ``point - center`` and ``exp(-|r|^2 / (2 width^2))``.  Pairs are
    point-major with ascending atom index.
    """
    points = np.ascontiguousarray(points, dtype=float)
    centers = np.ascontiguousarray(centers, dtype=float).reshape(-1, 2)
    heights = np.asarray(heights, dtype=float)
    radii = np.asarray(radii, dtype=float)
    m = points.shape[0]
    u = np.full(m, float(offset))
    grad = np.zeros((m, 2))
    hess = np.zeros((m, 3))
    if centers.shape[0] == 0 or not np.any(radii > 0):
        empty = np.zeros(0, dtype=np.int64)
        return u, grad, hess, empty, empty.copy(), np.zeros((0, 2)), np.zeros(0)

    r2 = radii * radii
    pix_parts, atom_parts = [], []
    for start in range(0, m, _CHUNK):
        blk = points[start:start + _CHUNK]
        d = blk[:, None, :] - centers[None, :, :]
        q = d[..., 0] ** 2 + d[..., 1] ** 2
        pi, ai = np.nonzero(q <= r2[None, :])
        pix_parts.append(pi + start)
        atom_parts.append(ai)
    pix = np.concatenate(pix_parts).astype(np.int64)
    atom = np.concatenate(atom_parts).astype(np.int64)
    r = points[pix] - centers[atom]
    q = r[:, 0] ** 2 + r[:, 1] ** 2
    s2 = width * width
    s4 = s2 * s2
    e = np.exp(-0.5 * q / s2)
    ce = heights[atom] * e
    u += np.bincount(pix, ce, minlength=m)
    grad[:, 0] = -np.bincount(pix, ce * r[:, 0], minlength=m) / s2
    grad[:, 1] = -np.bincount(pix, ce * r[:, 1], minlength=m) / s2
    hess[:, 0] = np.bincount(pix, ce * (r[:, 0] ** 2 / s4 - 1.0 / s2), minlength=m)
    hess[:, 1] = np.bincount(pix, ce * (r[:, 0] * r[:, 1] / s4), minlength=m)
    hess[:, 2] = np.bincount(pix, ce * (r[:, 1] ** 2 / s4 - 1.0 / s2), minlength=m)
    return u, grad, hess, pix, atom, r, e
