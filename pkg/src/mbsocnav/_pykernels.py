"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` one for one and are used when the compiled
extension is unavailable (or disabled with ``MBSOCNAV_NO_EXT=1``).
"""
import numpy as np

_PARALLEL_EPS = 1e-12


def cast_rays(ox, oy, angles, circles, segments):
    """Nearest non-negative hit distance per beam, ``inf`` where nothing is hit.

    ``circles`` is (k, 3) of (cx, cy, r); ``segments`` is (m, 4) of (ax, ay, bx, by).
    """
    angles = np.asarray(angles, dtype=np.float64)
    circles = np.asarray(circles, dtype=np.float64).reshape(-1, 3)
    segments = np.asarray(segments, dtype=np.float64).reshape(-1, 4)
    ux = np.cos(angles)[:, None]
    uy = np.sin(angles)[:, None]
    best = np.full(angles.shape[0], np.inf)

    if len(circles):
        fx = (ox - circles[:, 0])[None, :]
        fy = (oy - circles[:, 1])[None, :]
        b = fx * ux + fy * uy
        c = fx * fx + fy * fy - (circles[:, 2] ** 2)[None, :]
        disc = b * b - c
        ok = disc >= 0.0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t1 = -b - sq
        t2 = -b + sq
        t = np.where(t1 >= 0.0, t1, np.where(t2 >= 0.0, t2, np.inf))
        t = np.where(ok, t, np.inf)
        best = np.minimum(best, t.min(axis=1))

    if len(segments):
        ax = segments[:, 0][None, :]
        ay = segments[:, 1][None, :]
        sx = (segments[:, 2] - segments[:, 0])[None, :]
        sy = (segments[:, 3] - segments[:, 1])[None, :]
        qx = ax - ox
        qy = ay - oy
        denom = ux * sy - uy * sx
        q_cross_s = qx * sy - qy * sx
        q_cross_u = qx * uy - qy * ux
        safe = np.where(np.abs(denom) < _PARALLEL_EPS, 1.0, denom)
        t = q_cross_s / safe
        lam = q_cross_u / safe
        hit = (np.abs(denom) >= _PARALLEL_EPS) & (t >= 0.0) & (lam >= 0.0) & (lam <= 1.0)
        t = np.where(hit, t, np.inf)

        # collinear: the nearest endpoint (or the origin itself) along the ray
        collinear = (np.abs(denom) < _PARALLEL_EPS) & (np.abs(q_cross_u) < _PARALLEL_EPS)
        if collinear.any():
            ta = qx * ux + qy * uy
            tb = (ax + sx - ox) * ux + (ay + sy - oy) * uy
            lo = np.minimum(ta, tb)
            hi = np.maximum(ta, tb)
            tc = np.where(lo >= 0.0, lo, np.where(hi >= 0.0, 0.0, np.inf))
            t = np.where(collinear, tc, t)
        best = np.minimum(best, t.min(axis=1))
    return best


def rasterize(ranges, beam_angles, max_range, rel_x, rel_y, rel_theta,
              height, width, resolution, out=None):
    """Mark the cells hit by every beam shorter than ``max_range``.

    Beam endpoints are expressed in the scan frame and moved into the target
    frame by the relative pose. The robot sits at the bottom-middle cell,
    forward is up (decreasing row), left is decreasing column.
    """
    if out is None:
        out = np.zeros((height, width), dtype=np.float32)
    ranges = np.asarray(ranges, dtype=np.float64)
    beam_angles = np.asarray(beam_angles, dtype=np.float64)
    m = ranges < max_range
    if not m.any():
        return out
    r = ranges[m]
    a = beam_angles[m]
    px = r * np.cos(a)
    py = r * np.sin(a)
    c, s = np.cos(rel_theta), np.sin(rel_theta)
    x = rel_x + c * px - s * py
    y = rel_y + s * px + c * py
    row = (height - 1) - np.floor(x / resolution + 0.5).astype(np.int64)
    col = (width // 2) - np.floor(y / resolution + 0.5).astype(np.int64)
    ok = (row >= 0) & (row < height) & (col >= 0) & (col < width)
    out[row[ok], col[ok]] = 1.0
    return out


def rasterize_stack(ranges, beam_angles, max_range, rel_poses,
                    height, width, resolution, pool=1):
    """Rasterize K scans, each with its own relative pose, into a (K, H, W) stack.

    With ``pool > 1`` the stack is (K, H/pool, W/pool) and equals the
    pool x pool max-pooling of the full-resolution stack.
    """
    if pool < 1 or height % pool or width % pool:
        raise ValueError(f"pool {pool} must divide the grid {height}x{width}")
    ranges = np.asarray(ranges, dtype=np.float64)
    rel_poses = np.asarray(rel_poses, dtype=np.float64)
    out = np.zeros((ranges.shape[0], height, width), dtype=np.float32)
    for k in range(ranges.shape[0]):
        rasterize(ranges[k], beam_angles, max_range, rel_poses[k, 0], rel_poses[k, 1],
                  rel_poses[k, 2], height, width, resolution, out=out[k])
    if pool == 1:
        return out
    k = out.shape[0]
    return out.reshape(k, height // pool, pool, width // pool, pool).max(axis=(2, 4))
