# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled point/atom interaction kernel.

Mirrors ``stemrecon._kernels_py.local_field``; both must return the same
pairs in the same order (point-major, atom index ascending).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor

cnp.import_array()


def local_field(const double[:, ::1] points, const double[:, ::1] centers, const double[::1] heights,
                double width, double offset, const double[::1] radii):
    cdef Py_ssize_t M = points.shape[0]
    cdef Py_ssize_t J = centers.shape[0]
    cdef Py_ssize_t i, j, l, a, b, n, cnt, ncx, ncy, cx, cy, cell_id, slot, k
    cdef double rmax = 0.0, xmin, ymin, xmax, ymax, cell, dx, dy, q, ev, ce, s2, s4
    cdef double px, py

    u_arr = np.full(M, offset, dtype=np.float64)
    g_arr = np.zeros((M, 2), dtype=np.float64)
    h_arr = np.zeros((M, 3), dtype=np.float64)
    cdef double[::1] u = u_arr
    cdef double[:, ::1] gx = g_arr
    cdef double[:, ::1] hx = h_arr

    for l in range(J):
        if radii[l] > rmax:
            rmax = radii[l]
    if J == 0 or rmax <= 0.0:
        empty_i = np.zeros(0, dtype=np.int64)
        return (u_arr, g_arr, h_arr, empty_i, empty_i.copy(),
                np.zeros((0, 2)), np.zeros(0))

    xmin = centers[0, 0]; xmax = xmin; ymin = centers[0, 1]; ymax = ymin
    for l in range(J):
        if centers[l, 0] < xmin: xmin = centers[l, 0]
        if centers[l, 0] > xmax: xmax = centers[l, 0]
        if centers[l, 1] < ymin: ymin = centers[l, 1]
        if centers[l, 1] > ymax: ymax = centers[l, 1]
    cell = rmax
    ncx = <Py_ssize_t>floor((xmax - xmin) / cell) + 1
    ncy = <Py_ssize_t>floor((ymax - ymin) / cell) + 1

    # counting sort of atoms into cells; atoms stay ascending within a cell
    start_arr = np.zeros(ncx * ncy + 1, dtype=np.int64)
    order_arr = np.empty(J, dtype=np.int64)
    cdef long long[::1] start = start_arr
    cdef long long[::1] order = order_arr
    cdef long long[::1] atom_cell = np.empty(J, dtype=np.int64)
    for l in range(J):
        cx = <Py_ssize_t>floor((centers[l, 0] - xmin) / cell)
        cy = <Py_ssize_t>floor((centers[l, 1] - ymin) / cell)
        atom_cell[l] = cy * ncx + cx
        start[atom_cell[l] + 1] += 1
    for k in range(ncx * ncy):
        start[k + 1] += start[k]
    cdef long long[::1] fill = start_arr[:-1].copy()
    for l in range(J):
        order[fill[atom_cell[l]]] = l
        fill[atom_cell[l]] += 1

    cdef long long[::1] cand = np.empty(J, dtype=np.int64)

    # pass 1: count pairs
    cnt = 0
    for i in range(M):
        px = points[i, 0]; py = points[i, 1]
        cx = <Py_ssize_t>floor((px - xmin) / cell)
        cy = <Py_ssize_t>floor((py - ymin) / cell)
        for b in range(cy - 1, cy + 2):
            if b < 0 or b >= ncy:
                continue
            for a in range(cx - 1, cx + 2):
                if a < 0 or a >= ncx:
                    continue
                cell_id = b * ncx + a
                for slot in range(start[cell_id], start[cell_id + 1]):
                    l = order[slot]
                    dx = px - centers[l, 0]; dy = py - centers[l, 1]
                    if dx * dx + dy * dy <= radii[l] * radii[l]:
                        cnt += 1

    pix_arr = np.empty(cnt, dtype=np.int64)
    atom_arr = np.empty(cnt, dtype=np.int64)
    r_arr = np.empty((cnt, 2), dtype=np.float64)
    e_arr = np.empty(cnt, dtype=np.float64)
    cdef long long[::1] pix = pix_arr
    cdef long long[::1] atom = atom_arr
    cdef double[:, ::1] rr = r_arr
    cdef double[::1] ee = e_arr

    s2 = width * width
    s4 = s2 * s2
    cnt = 0
    for i in range(M):
        px = points[i, 0]; py = points[i, 1]
        cx = <Py_ssize_t>floor((px - xmin) / cell)
        cy = <Py_ssize_t>floor((py - ymin) / cell)
        n = 0
        for b in range(cy - 1, cy + 2):
            if b < 0 or b >= ncy:
                continue
            for a in range(cx - 1, cx + 2):
                if a < 0 or a >= ncx:
                    continue
                cell_id = b * ncx + a
                for slot in range(start[cell_id], start[cell_id + 1]):
                    l = order[slot]
                    dx = px - centers[l, 0]; dy = py - centers[l, 1]
                    if dx * dx + dy * dy <= radii[l] * radii[l]:
                        # insertion keeps candidates ascending by atom index
                        j = n
                        while j > 0 and cand[j - 1] > l:
                            cand[j] = cand[j - 1]
                            j -= 1
                        cand[j] = l
                        n += 1
        for j in range(n):
            l = cand[j]
            dx = px - centers[l, 0]; dy = py - centers[l, 1]
            q = dx * dx + dy * dy
            ev = exp(-0.5 * q / s2)
            ce = heights[l] * ev
            u[i] += ce
            gx[i, 0] -= ce * dx / s2
            gx[i, 1] -= ce * dy / s2
            hx[i, 0] += ce * (dx * dx / s4 - 1.0 / s2)
            hx[i, 1] += ce * (dx * dy / s4)
            hx[i, 2] += ce * (dy * dy / s4 - 1.0 / s2)
            pix[cnt] = i
            atom[cnt] = l
            rr[cnt, 0] = dx
            rr[cnt, 1] = dy
            ee[cnt] = ev
            cnt += 1
    return u_arr, g_arr, h_arr, pix_arr, atom_arr, r_arr, e_arr
