"""Compiled inner loops (numba). Sequential and deterministic."""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def splat_discs(u, v, rpx, z, plane_d, n_cam, world_r, ids, fx, fy, cx, cy, width, height, same_surface):
    """Z-buffered disc splatting.

    Discs whose depths agree within ``same_surface * z`` are treated as the
    same surface: the one whose centre is nearest the pixel wins (then the
    lowest id). Returns per-pixel ``(depth, id)`` buffers (``id = -1`` where
    empty).
    """
    depth = np.full(width * height, np.inf)
    owner = np.full(width * height, -1, dtype=np.int64)
    cdist = np.full(width * height, np.inf)
    for s in range(len(ids)):
        r = rpx[s]
        r2 = r * r + 1e-9
        ri = int(np.ceil(r - 1e-9))
        iu = int(np.rint(u[s]))
        iv = int(np.rint(v[s]))
        nx, ny, nz = n_cam[s, 0], n_cam[s, 1], n_cam[s, 2]
        for py in range(iv - ri, iv + ri + 1):
            if py < 0 or py >= height:
                continue
            dyy = (py - v[s]) * (py - v[s])
            ry = (py - cy) / fy
            for px in range(iu - ri, iu + ri + 1):
                if px < 0 or px >= width:
                    continue
                if (px - u[s]) * (px - u[s]) + dyy > r2:
                    continue
                rx = (px - cx) / fx
                denom = nx * rx + ny * ry + nz
                ray_len = np.sqrt(rx * rx + ry * ry + 1.0)
                zp = z[s]
                if abs(denom) > 0.02 * ray_len:
                    cand = plane_d[s] / denom
                    if cand > 0.0:
                        zp = cand
                p = py * width + px
                d2 = (px - u[s]) * (px - u[s]) + dyy
                tol = same_surface * zp
                if zp < depth[p] - tol:
                    take = True
                elif zp <= depth[p] + tol:
                    take = d2 < cdist[p] or (d2 == cdist[p] and ids[s] < owner[p])
                else:
                    take = False
                if take:
                    depth[p] = zp
                    owner[p] = ids[s]
                    cdist[p] = d2
    return depth, owner


@numba.njit(cache=True)
def point_zbuffer(pix, z, ids, n_pix):
    depth = np.full(n_pix, np.inf)
    owner = np.full(n_pix, -1, dtype=np.int64)
    for i in range(len(pix)):
        p = pix[i]
        if z[i] < depth[p] or (z[i] == depth[p] and ids[i] < owner[p]):
            depth[p] = z[i]
            owner[p] = ids[i]
    return depth, owner


@numba.njit(cache=True)
def _accumulate(hess, grad, jac, r, wgt):
    for a in range(6):
        ja = jac[a] * wgt
        grad[a] += ja * r
        for b in range(a, 6):
            hess[a, b] += ja * jac[b]


@numba.njit(cache=True)
def _symmetrize(hess):
    for a in range(6):
        for b in range(a):
            hess[a, b] = hess[b, a]


@numba.njit(cache=True)
def icp_normal_equations(pts, nrm, zlive, rot, trans, mvert, mnorm, mnvalid, mdepth,
                         fx, fy, cx, cy, width, height, dist_gate, cos_gate, huber_k):
    """Point-to-plane normal equations under projective association.

    ``mvert``/``mnorm`` are flattened (h*w, 3) model maps. Returns
    ``(H, g, sum_sq, count)`` in fixed pixel order.
    """
    hess = np.zeros((6, 6))
    grad = np.zeros(6)
    jac = np.zeros(6)
    sse = 0.0
    count = 0
    for i in range(pts.shape[0]):
        px, py, pz = pts[i, 0], pts[i, 1], pts[i, 2]
        qx = rot[0, 0] * px + rot[0, 1] * py + rot[0, 2] * pz + trans[0]
        qy = rot[1, 0] * px + rot[1, 1] * py + rot[1, 2] * pz + trans[1]
        qz = rot[2, 0] * px + rot[2, 1] * py + rot[2, 2] * pz + trans[2]
        if qz <= 0.05:
            continue
        iu = np.rint(fx * qx / qz + cx)
        iv = np.rint(fy * qy / qz + cy)
        if iu < 0 or iu >= width or iv < 0 or iv >= height:
            continue
        p = int(iv) * width + int(iu)
        if not mnvalid[p] or mdepth[p] <= 0:
            continue
        dx, dy, dz = qx - mvert[p, 0], qy - mvert[p, 1], qz - mvert[p, 2]
        if dx * dx + dy * dy + dz * dz >= dist_gate * dist_gate:
            continue
        ax, ay, az = nrm[i, 0], nrm[i, 1], nrm[i, 2]
        rnx = rot[0, 0] * ax + rot[0, 1] * ay + rot[0, 2] * az
        rny = rot[1, 0] * ax + rot[1, 1] * ay + rot[1, 2] * az
        rnz = rot[2, 0] * ax + rot[2, 1] * ay + rot[2, 2] * az
        nx, ny, nz = mnorm[p, 0], mnorm[p, 1], mnorm[p, 2]
        if rnx * nx + rny * ny + rnz * nz <= cos_gate:
            continue
        r = nx * dx + ny * dy + nz * dz
        jac[0], jac[1], jac[2] = nx, ny, nz
        jac[3] = qy * nz - qz * ny
        jac[4] = qz * nx - qx * nz
        jac[5] = qx * ny - qy * nx
        delta = huber_k * zlive[i]
        w = 1.0 if abs(r) <= delta else delta / abs(r)
        _accumulate(hess, grad, jac, r, w)
        sse += r * r
        count += 1
    _symmetrize(hess)
    return hess, grad, sse, count


@numba.njit(cache=True)
def _cr(t, out, dout):
    t2 = t * t
    t3 = t2 * t
    out[0] = 0.5 * (-t3 + 2 * t2 - t)
    out[1] = 0.5 * (3 * t3 - 5 * t2 + 2)
    out[2] = 0.5 * (-3 * t3 + 4 * t2 + t)
    out[3] = 0.5 * (t3 - t2)
    dout[0] = 0.5 * (-3 * t2 + 4 * t - 1)
    dout[1] = 0.5 * (9 * t2 - 10 * t)
    dout[2] = 0.5 * (-9 * t2 + 8 * t + 1)
    dout[3] = 0.5 * (3 * t2 - 2 * t)


@numba.njit(cache=True)
def rgb_normal_equations(pts, inten, rot, trans, mint, mdepth, support,
                         fx, fy, cx, cy, width, height, depth_gate, huber, lam):
    """Photometric normal equations with Catmull-Rom sampling of the model intensity.

    ``mint``, ``mdepth`` and ``support`` are (h, w) maps. The returned
    ``H``/``g`` already carry the ``lam`` weighting; ``sum_sq`` does not.
    """
    hess = np.zeros((6, 6))
    grad = np.zeros(6)
    jac = np.zeros(6)
    wx = np.zeros(4)
    dwx = np.zeros(4)
    wy = np.zeros(4)
    dwy = np.zeros(4)
    sse = 0.0
    count = 0
    for i in range(pts.shape[0]):
        px, py, pz = pts[i, 0], pts[i, 1], pts[i, 2]
        qx = rot[0, 0] * px + rot[0, 1] * py + rot[0, 2] * pz + trans[0]
        qy = rot[1, 0] * px + rot[1, 1] * py + rot[1, 2] * pz + trans[1]
        qz = rot[2, 0] * px + rot[2, 1] * py + rot[2, 2] * pz + trans[2]
        if qz <= 0.05:
            continue
        u = fx * qx / qz + cx
        v = fy * qy / qz + cy
        x0 = np.floor(u)
        y0 = np.floor(v)
        if x0 < 1 or x0 > width - 3 or y0 < 1 or y0 > height - 3:
            continue
        ix, iy = int(x0), int(y0)
        if not support[iy, ix]:
            continue
        ru = min(max(int(np.rint(u)), 0), width - 1)
        rv = min(max(int(np.rint(v)), 0), height - 1)
        if abs(mdepth[rv, ru] - qz) >= depth_gate * qz:
            continue
        _cr(u - x0, wx, dwx)
        _cr(v - y0, wy, dwy)
        val = 0.0
        gu = 0.0
        gv = 0.0
        for a in range(4):
            sx = 0.0
            sdx = 0.0
            for b in range(4):
                tap = mint[iy - 1 + a, ix - 1 + b]
                sx += tap * wx[b]
                sdx += tap * dwx[b]
            val += wy[a] * sx
            gv += dwy[a] * sx
            gu += wy[a] * sdx
        r = val - inten[i]
        gx = gu * fx / qz
        gy = gv * fy / qz
        gz = -(gu * fx * qx + gv * fy * qy) / (qz * qz)
        jac[0], jac[1], jac[2] = gx, gy, gz
        jac[3] = qy * gz - qz * gy
        jac[4] = qz * gx - qx * gz
        jac[5] = qx * gy - qy * gx
        w = lam * (1.0 if abs(r) <= huber else huber / abs(r))
        _accumulate(hess, grad, jac, r, w)
        sse += r * r
        count += 1
    _symmetrize(hess)
    return hess, grad, sse, count
