# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled ray casting and rasterization kernels.

Behaviour is identical to ``_pykernels``; see that module for the contracts.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, cos, sin, floor, fabs, INFINITY

cnp.import_array()

cdef double PARALLEL_EPS = 1e-12


cdef inline double _ray_circle(double ox, double oy, double ux, double uy,
                               double cx, double cy, double r) nogil:
    cdef double fx = ox - cx
    cdef double fy = oy - cy
    cdef double b = fx * ux + fy * uy
    cdef double c = fx * fx + fy * fy - r * r
    cdef double disc = b * b - c
    cdef double sq, t1, t2
    if disc < 0.0:
        return INFINITY
    sq = sqrt(disc)
    t1 = -b - sq
    t2 = -b + sq
    if t1 >= 0.0:
        return t1
    if t2 >= 0.0:
        return t2
    return INFINITY


cdef inline double _ray_segment(double ox, double oy, double ux, double uy,
                                double ax, double ay, double bx, double by) nogil:
    cdef double sx = bx - ax
    cdef double sy = by - ay
    cdef double qx = ax - ox
    cdef double qy = ay - oy
    cdef double denom = ux * sy - uy * sx
    cdef double q_cross_u = qx * uy - qy * ux
    cdef double t, lam, ta, tb, lo, hi
    if fabs(denom) < PARALLEL_EPS:
        if fabs(q_cross_u) >= PARALLEL_EPS:
            return INFINITY
        ta = qx * ux + qy * uy
        tb = (bx - ox) * ux + (by - oy) * uy
        lo = ta if ta < tb else tb
        hi = tb if ta < tb else ta
        if lo >= 0.0:
            return lo
        if hi >= 0.0:
            return 0.0
        return INFINITY
    t = (qx * sy - qy * sx) / denom
    lam = q_cross_u / denom
    if t >= 0.0 and lam >= 0.0 and lam <= 1.0:
        return t
    return INFINITY


def cast_rays(double ox, double oy, angles, circles, segments):
    cdef const double[:] ang = np.ascontiguousarray(angles, dtype=np.float64)
    cdef const double[:, :] circ = np.ascontiguousarray(circles, dtype=np.float64).reshape(-1, 3)
    cdef const double[:, :] seg = np.ascontiguousarray(segments, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = ang.shape[0]
    cdef Py_ssize_t nc = circ.shape[0]
    cdef Py_ssize_t ns = seg.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[:] res = out
    cdef Py_ssize_t i, j
    cdef double ux, uy, best, t
    with nogil:
        for i in range(n):
            ux = cos(ang[i])
            uy = sin(ang[i])
            best = INFINITY
            for j in range(nc):
                t = _ray_circle(ox, oy, ux, uy, circ[j, 0], circ[j, 1], circ[j, 2])
                if t < best:
                    best = t
            for j in range(ns):
                t = _ray_segment(ox, oy, ux, uy, seg[j, 0], seg[j, 1], seg[j, 2], seg[j, 3])
                if t < best:
                    best = t
            res[i] = best
    return out


cdef void _rasterize_into(const double[:] rng, const double[:] ang, double max_range,
                          double rx, double ry, double rt, Py_ssize_t height,
                          Py_ssize_t width, double resolution, float[:, :] grid,
                          Py_ssize_t pool) nogil:
    cdef Py_ssize_t i, row, col
    cdef double c = cos(rt)
    cdef double s = sin(rt)
    cdef double px, py, x, y
    for i in range(rng.shape[0]):
        if not (rng[i] < max_range):
            continue
        px = rng[i] * cos(ang[i])
        py = rng[i] * sin(ang[i])
        x = rx + c * px - s * py
        y = ry + s * px + c * py
        row = (height - 1) - <Py_ssize_t>floor(x / resolution + 0.5)
        col = (width // 2) - <Py_ssize_t>floor(y / resolution + 0.5)
        if row >= 0 and row < height and col >= 0 and col < width:
            grid[row // pool, col // pool] = 1.0


def rasterize(ranges, beam_angles, double max_range, double rel_x, double rel_y,
              double rel_theta, Py_ssize_t height, Py_ssize_t width, double resolution,
              out=None):
    if out is None:
        out = np.zeros((height, width), dtype=np.float32)
    cdef const double[:] rng = np.ascontiguousarray(ranges, dtype=np.float64)
    cdef const double[:] ang = np.ascontiguousarray(beam_angles, dtype=np.float64)
    cdef float[:, :] grid = out
    with nogil:
        _rasterize_into(rng, ang, max_range, rel_x, rel_y, rel_theta, height, width,
                        resolution, grid, 1)
    return out


def rasterize_stack(ranges, beam_angles, double max_range, rel_poses,
                    Py_ssize_t height, Py_ssize_t width, double resolution, Py_ssize_t pool=1):
    cdef const double[:, :] rng = np.ascontiguousarray(ranges, dtype=np.float64)
    cdef const double[:] ang = np.ascontiguousarray(beam_angles, dtype=np.float64)
    cdef const double[:, :] rp = np.ascontiguousarray(rel_poses, dtype=np.float64)
    if pool < 1 or height % pool or width % pool:
        raise ValueError(f"pool {pool} must divide the grid {height}x{width}")
    out = np.zeros((rng.shape[0], height // pool, width // pool), dtype=np.float32)
    cdef float[:, :, :] grids = out
    cdef Py_ssize_t k
    with nogil:
        for k in range(rng.shape[0]):
            _rasterize_into(rng[k], ang, max_range, rp[k, 0], rp[k, 1], rp[k, 2],
                            height, width, resolution, grids[k], pool)
    return out
