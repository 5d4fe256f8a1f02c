"""Frame-to-model tracking: joint point-to-plane ICP and photometric alignment.

The estimated increment ``T`` maps live-camera points into the model camera:
``p_model = T @ p_live``. Updates are applied on the left, ``T <- exp(d) T``,
so Jacobians are taken with respect to a twist ``d = (v, w)`` at ``d = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ._kernels import icp_normal_equations, rgb_normal_equations
from .config import FrameConfig, OdometryConfig
from .frame import (FramePyramid, PyramidLevel, _GAUSS_5x5, build_pyramid_from_maps, intensity_of,
                    make_level, median_downsample)
from .geometry import Z_MIN, RigidTransform, exp_se3
from .surfelmap import ModelView

N_LEVELS = 3


@dataclass(frozen=True)
class TrackingResult:
    increment: RigidTransform
    final_error: float
    inlier_count: int
    hessian_spectrum: np.ndarray  # ascending, normal equations divided by inlier count
    converged: bool
    icp_error: float = 0.0
    rgb_error: float = 0.0
    rgb_count: int = 0
    status: str = "ok"  # ok | diverged | degenerate | worse-than-init
    image_size: tuple = (160, 120)
    iterations: int = 0

    @property
    def condition_number(self) -> float:
        lo = float(self.hessian_spectrum[0]) if len(self.hessian_spectrum) else 0.0
        hi = float(self.hessian_spectrum[-1]) if len(self.hessian_spectrum) else 0.0
        return math.inf if lo <= 0 else hi / lo


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str

    def __bool__(self) -> bool:
        return self.accepted


def check_constrained(r: TrackingResult, config: OdometryConfig | None = None) -> Verdict:
    """Accept an alignment only if it converged and every degree of freedom is observed."""
    cfg = config or OdometryConfig()
    if not r.converged:
        return Verdict(False, f"not converged ({r.status})")
    spec = r.hessian_spectrum
    if spec[0] <= cfg.eps_eig:
        return Verdict(False, f"smallest eigenvalue {spec[0]:.3g} <= {cfg.eps_eig:g}")
    if r.condition_number >= cfg.kappa_max:
        return Verdict(False, f"condition number {r.condition_number:.3g} >= {cfg.kappa_max:g}")
    if r.final_error >= cfg.eps_err:
        return Verdict(False, f"final error {r.final_error:.3g} >= {cfg.eps_err:g}")
    n_min = cfg.n_min_for(*r.image_size)
    if r.inlier_count <= n_min:
        return Verdict(False, f"{r.inlier_count} inliers <= {n_min}")
    return Verdict(True, "accepted")


# ---------------------------------------------------------------------------
# Model pyramid


def _masked_blur_downsample(image: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Gaussian downsample that ignores invalid pixels (normalized convolution)."""
    m = valid.astype(float)
    num = ndimage.convolve(image * m, _GAUSS_5x5, mode="nearest")
    den = ndimage.convolve(m, _GAUSS_5x5, mode="nearest")
    out = np.where(den > 1e-6, num / np.maximum(den, 1e-6), 0.0)
    return out[::2, ::2]


def _depth_edges(depth: np.ndarray, jump: float) -> np.ndarray:
    """Pixels with an invalid or discontinuous 4-neighbour (splats overreach there)."""
    p = np.pad(depth, 1)
    c = depth
    edge = np.zeros(depth.shape, dtype=bool)
    for nb in (p[:-2, 1:-1], p[2:, 1:-1], p[1:-1, :-2], p[1:-1, 2:]):
        edge |= (nb <= 0) | (np.abs(nb - c) > jump * c)
    return edge


def _creases(normals: np.ndarray, cos_max: float) -> np.ndarray:
    """Pixels whose normal disagrees with a 4-neighbour by more than ``acos(cos_max)``."""
    p = np.pad(normals, ((1, 1), (1, 1), (0, 0)))
    crease = np.zeros(normals.shape[:2], dtype=bool)
    for nb in (p[:-2, 1:-1], p[2:, 1:-1], p[1:-1, :-2], p[1:-1, 2:]):
        crease |= np.sum(nb * normals, axis=-1) < cos_max
    return crease


def model_pyramid(view: ModelView, config: FrameConfig | None = None, n_levels: int = N_LEVELS) -> FramePyramid:
    """Pyramid of a predicted view; level 0 keeps the splatted surfel normals."""
    cfg = config or FrameConfig()
    k = view.intrinsics
    valid = view.index >= 0
    intensity = np.where(valid, intensity_of(view.color), 0.0)
    depth = np.where(valid, view.depth, 0.0)
    nrm = np.where(valid[..., None], view.normals, 0.0)
    nvalid = valid & (np.linalg.norm(nrm, axis=-1) > 0.5) & ~_depth_edges(depth, cfg.normal_discontinuity)
    nvalid &= ~_creases(nrm, math.cos(math.radians(30.0)))
    levels = [PyramidLevel(intensity, depth, np.where(valid[..., None], view.vertices, 0.0), nrm, nvalid, k)]
    for lvl in range(1, n_levels):
        ok = depth > 0
        intensity = _masked_blur_downsample(intensity, ok)
        depth = median_downsample(depth)
        levels.append(make_level(intensity, depth, k.scaled(lvl), cfg.normal_discontinuity))
    return FramePyramid(tuple(levels))


def pyramid_from_view_maps(intensity, depth, k, config: FrameConfig | None = None) -> FramePyramid:
    cfg = config or FrameConfig()
    return build_pyramid_from_maps(intensity, depth, k, discontinuity=cfg.normal_discontinuity)


# ---------------------------------------------------------------------------
# Bicubic (Catmull-Rom) sampling with analytic derivatives


def _cr_weights(t):
    t2, t3 = t * t, t * t * t
    w = np.stack([(-t3 + 2 * t2 - t), (3 * t3 - 5 * t2 + 2), (-3 * t3 + 4 * t2 + t), (t3 - t2)], -1) * 0.5
    dw = np.stack([(-3 * t2 + 4 * t - 1), (9 * t2 - 10 * t), (-9 * t2 + 8 * t + 1), (3 * t2 - 2 * t)], -1) * 0.5
    return w, dw


def sample_bicubic(image: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Catmull-Rom interpolation at ``(u, v)``; returns ``(value, d/du, d/dv)``.

    Callers must keep ``floor(u)`` in ``[1, w-3]`` and ``floor(v)`` in ``[1, h-3]``.
    """
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    wx, dwx = _cr_weights(u - x0)
    wy, dwy = _cr_weights(v - y0)
    val = np.zeros(len(u))
    du = np.zeros(len(u))
    dv = np.zeros(len(u))
    flat = image.reshape(-1)
    w = image.shape[1]
    for i in range(4):
        base = (y0 - 1 + i) * w + x0 - 1
        taps = np.stack([flat[base + j] for j in range(4)], -1)
        sx = np.sum(taps * wx, -1)
        val += wy[:, i] * sx
        dv += dwy[:, i] * sx
        du += wy[:, i] * np.sum(taps * dwx, -1)
    return val, du, dv


def _tap_support(valid: np.ndarray) -> np.ndarray:
    """``S[y, x]`` is true when the 4x4 Catmull-Rom footprint at floor ``(x, y)`` is valid."""
    h, w = valid.shape
    s = np.zeros((h, w), dtype=bool)
    if h < 4 or w < 4:
        return s
    acc = np.ones((h - 3, w - 3), dtype=bool)
    for dy in range(4):
        for dx in range(4):
            acc &= valid[dy:dy + h - 3, dx:dx + w - 3]
    s[1:h - 2, 1:w - 2] = acc
    return s


# ---------------------------------------------------------------------------
# Residuals


@dataclass(frozen=True, eq=False)
class _LevelData:
    model: PyramidLevel
    live: PyramidLevel
    icp_pts: np.ndarray
    icp_nrm: np.ndarray
    icp_z: np.ndarray
    rgb_pts: np.ndarray
    rgb_int: np.ndarray
    support: np.ndarray
    mvert: np.ndarray  # flattened contiguous copies for the compiled kernels
    mnorm: np.ndarray
    mnvalid: np.ndarray
    mdepth: np.ndarray
    cos_gate: float = field(default=math.cos(math.radians(30.0)))


def _prepare(model: PyramidLevel, live: PyramidLevel, cfg: OdometryConfig) -> _LevelData:
    if model.intrinsics.shape != live.intrinsics.shape:
        raise ValueError("model and live pyramids differ in resolution")
    lv = live.valid & live.normal_valid
    rv = live.valid
    c = np.ascontiguousarray
    return _LevelData(model, live, c(live.vertices[lv]), c(live.normals[lv]), c(live.depth[lv]),
                      c(live.vertices[rv]), c(live.intensity[rv]), _tap_support((model.depth > 0) & model.normal_valid),
                      c(model.vertices.reshape(-1, 3)), c(model.normals.reshape(-1, 3)),
                      c(model.normal_valid.reshape(-1)), c(model.depth.reshape(-1)),
                      math.cos(math.radians(cfg.normal_gate_deg)))


def _project(q, k):
    z = q[:, 2]
    zs = np.where(z > Z_MIN, z, 1.0)
    return k.fx * q[:, 0] / zs + k.cx, k.fy * q[:, 1] / zs + k.cy, z > Z_MIN


def icp_correspondences(d: _LevelData, t: RigidTransform, cfg: OdometryConfig):
    """Projective data association; returns ``(live_idx, model_pixel_flat)``."""
    k = d.model.intrinsics
    h, w = k.shape
    q = d.icp_pts @ t.rotation.T + t.translation
    u, v, front = _project(q, k)
    iu, iv = np.rint(u), np.rint(v)
    ok = front & (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
    idx = np.flatnonzero(ok)
    pix = iv[idx].astype(np.int64) * w + iu[idx].astype(np.int64)
    mvalid = d.model.normal_valid.reshape(-1)[pix] & (d.model.depth.reshape(-1)[pix] > 0)
    idx, pix = idx[mvalid], pix[mvalid]
    vm = d.model.vertices.reshape(-1, 3)[pix]
    nm = d.model.normals.reshape(-1, 3)[pix]
    close = np.linalg.norm(q[idx] - vm, axis=1) < cfg.dist_gate
    aligned = np.sum((d.icp_nrm[idx] @ t.rotation.T) * nm, axis=1) > d.cos_gate
    keep = close & aligned
    return idx[keep], pix[keep]


def icp_residuals(d: _LevelData, t: RigidTransform, corr):
    """Point-to-plane residuals ``n_m . (T p - v_m)`` and their (n, 6) Jacobian."""
    idx, pix = corr
    q = d.icp_pts[idx] @ t.rotation.T + t.translation
    vm = d.model.vertices.reshape(-1, 3)[pix]
    nm = d.model.normals.reshape(-1, 3)[pix]
    r = np.sum(nm * (q - vm), axis=1)
    jac = np.concatenate([nm, np.cross(q, nm)], axis=1)
    return r, jac


def rgb_correspondences(d: _LevelData, t: RigidTransform, cfg: OdometryConfig):
    """Live pixels whose warp lands on a fully supported, depth-consistent model patch."""
    k = d.model.intrinsics
    h, w = k.shape
    q = d.rgb_pts @ t.rotation.T + t.translation
    u, v, front = _project(q, k)
    x0, y0 = np.floor(u), np.floor(v)
    ok = front & (x0 >= 1) & (x0 <= w - 3) & (y0 >= 1) & (y0 <= h - 3)
    idx = np.flatnonzero(ok)
    sup = d.support[y0[idx].astype(np.int64), x0[idx].astype(np.int64)]
    idx = idx[sup]
    iu = np.clip(np.rint(u[idx]), 0, w - 1).astype(np.int64)
    iv = np.clip(np.rint(v[idx]), 0, h - 1).astype(np.int64)
    zm = d.model.depth[iv, iu]
    consistent = np.abs(zm - q[idx, 2]) < cfg.rgb_depth_gate * q[idx, 2]
    return idx[consistent]


def rgb_residuals(d: _LevelData, t: RigidTransform, idx):
    """Photometric residuals ``I_m(pi(T p)) - I_l`` and their (n, 6) Jacobian."""
    k = d.model.intrinsics
    q = d.rgb_pts[idx] @ t.rotation.T + t.translation
    x, y, z = q[:, 0], q[:, 1], q[:, 2]
    u = k.fx * x / z + k.cx
    v = k.fy * y / z + k.cy
    val, gu, gv = sample_bicubic(d.model.intensity, u, v)
    r = val - d.rgb_int[idx]
    # d(intensity)/dq through the pinhole projection
    gq = np.stack([gu * k.fx / z, gv * k.fy / z, -(gu * k.fx * x + gv * k.fy * y) / (z * z)], axis=1)
    jac = np.concatenate([gq, np.cross(q, gq)], axis=1)
    return r, jac


def level_data(model: FramePyramid, live: FramePyramid, level: int, config: OdometryConfig | None = None):
    return _prepare(model[level], live[level], config or OdometryConfig())


def _huber(r, delta):
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


@dataclass
class _Eval:
    error: float
    icp_error: float
    rgb_error: float
    n_icp: int
    n_rgb: int
    hessian: np.ndarray
    gradient: np.ndarray


def evaluate_reference(d: _LevelData, t: RigidTransform, cfg: OdometryConfig) -> _Eval:
    """Vectorized numpy evaluation of the normal equations (oracle for the compiled path)."""
    hess = np.zeros((6, 6))
    grad = np.zeros(6)
    icp_err = rgb_err = 0.0
    corr = icp_correspondences(d, t, cfg)
    n_icp = len(corr[0])
    if n_icp:
        r, j = icp_residuals(d, t, corr)
        wgt = _huber(r, cfg.huber_icp * d.icp_z[corr[0]])
        hess += j.T @ (j * wgt[:, None])
        grad += j.T @ (wgt * r)
        icp_err = float(np.mean(r * r))
    idx = rgb_correspondences(d, t, cfg)
    n_rgb = len(idx)
    if n_rgb and cfg.lambda_rgb > 0:
        r, j = rgb_residuals(d, t, idx)
        wgt = cfg.lambda_rgb * _huber(r, cfg.huber_rgb)
        hess += j.T @ (j * wgt[:, None])
        grad += j.T @ (wgt * r)
        rgb_err = float(np.mean(r * r))
    return _Eval(icp_err + cfg.lambda_rgb * rgb_err, icp_err, rgb_err, n_icp, n_rgb, hess, grad)


def _evaluate(d: _LevelData, t: RigidTransform, cfg: OdometryConfig) -> _Eval:
    k = d.model.intrinsics
    h, w = k.shape
    rot = np.ascontiguousarray(t.rotation)
    m = d.model
    hi, gi, sse_i, n_icp = icp_normal_equations(
        d.icp_pts, d.icp_nrm, d.icp_z, rot, t.translation, d.mvert, d.mnorm, d.mnvalid, d.mdepth,
        k.fx, k.fy, k.cx, k.cy, w, h, cfg.dist_gate, d.cos_gate, cfg.huber_icp)
    hess, grad = hi, gi
    rgb_err = 0.0
    n_rgb = 0
    if cfg.lambda_rgb > 0:
        hr, gr, sse_r, n_rgb = rgb_normal_equations(
            d.rgb_pts, d.rgb_int, rot, t.translation, m.intensity, m.depth, d.support,
            k.fx, k.fy, k.cx, k.cy, w, h, cfg.rgb_depth_gate, cfg.huber_rgb, cfg.lambda_rgb)
        hess = hess + hr
        grad = grad + gr
        rgb_err = sse_r / n_rgb if n_rgb else 0.0
    icp_err = sse_i / n_icp if n_icp else 0.0
    return _Eval(icp_err + cfg.lambda_rgb * rgb_err, icp_err, rgb_err, n_icp, n_rgb, hess, grad)


def _solve(hess: np.ndarray, grad: np.ndarray) -> np.ndarray:
    damp = 1e-9 * max(np.trace(hess) / 6.0, 1e-12)
    return -np.linalg.solve(hess + damp * np.eye(6), grad)


def _as_pyramid(x, n_levels=N_LEVELS) -> FramePyramid:
    if isinstance(x, FramePyramid):
        return x
    if isinstance(x, ModelView):
        return model_pyramid(x, n_levels=n_levels)
    raise TypeError(f"expected FramePyramid or ModelView, got {type(x).__name__}")


def track(model, live, init: RigidTransform | None = None,
          config: OdometryConfig | None = None) -> TrackingResult:
    """Coarse-to-fine Gauss-Newton over the pyramid (levels 2, 1, 0)."""
    cfg = config or OdometryConfig()
    model = _as_pyramid(model)
    live = _as_pyramid(live)
    t = init or RigidTransform.identity()
    n_levels = min(len(model), len(live), len(cfg.iterations))
    size = (live[0].intrinsics.width, live[0].intrinsics.height)

    fine = _prepare(model[0], live[0], cfg)
    at_init = _evaluate(fine, t, cfg)
    if not len(fine.icp_pts) or not np.any(fine.model.depth > 0):
        return _result(t, at_init, False, "degenerate", size, 0)

    total_iters = 0
    best_t, best = t, at_init
    for level in reversed(range(n_levels)):
        d = fine if level == 0 else _prepare(model[level], live[level], cfg)
        increases = 0
        prev = math.inf
        for it in range(cfg.iterations[level] + (1 if level == 0 else 0)):
            ev = at_init if (level == 0 and t is best_t and best is at_init) else _evaluate(d, t, cfg)
            if level == 0 and ev.n_icp + ev.n_rgb >= 6 and ev.error <= best.error:
                best_t, best = t, ev
            if ev.n_icp + ev.n_rgb < 6:
                break
            increases = increases + 1 if ev.error > prev * (1.0 + cfg.increase_tol) else 0
            if increases >= cfg.divergence_patience:
                return _result(best_t, best, False, "diverged", size, total_iters)
            prev = ev.error
            if level == 0 and it == cfg.iterations[0]:
                break  # final evaluation only
            step = _solve(ev.hessian, ev.gradient)
            t = exp_se3(step) @ t
            total_iters += 1
            if np.max(np.abs(step)) < cfg.step_tol:
                if level == 0:
                    last = _evaluate(d, t, cfg)
                    if last.n_icp + last.n_rgb >= 6 and last.error <= best.error:
                        best_t, best = t, last
                break

    if best.n_icp < cfg.min_inliers:
        return _result(best_t, best, False, "degenerate", size, total_iters)
    return _result(best_t, best, True, "ok", size, total_iters)


def _result(t, ev: _Eval, converged, status, size, iters) -> TrackingResult:
    n = max(ev.n_icp, 1)
    spectrum = np.sort(np.linalg.eigvalsh(0.5 * (ev.hessian + ev.hessian.T) / n))
    return TrackingResult(t, ev.error, ev.n_icp, spectrum, converged, ev.icp_error, ev.rgb_error,
                          ev.n_rgb, status, size, iters)
