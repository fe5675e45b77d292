"""Camera tracking: point-to-plane ICP, photometric alignment and SDF
refinement over image pyramids.

All trackers estimate the camera-to-world transform ``M = (R_M, t_M)`` with
a camera-centred update: a twist ``(w, v)`` maps ``R_M <- exp(w) R_M`` and
``t_M <- t_M + v``.  Rotation-only levels therefore leave the camera centre
untouched.  Accumulation runs sequentially in a fixed pixel order, so
results are reproducible bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .math_core import Intrinsics, Pose, orthonormalize, rodrigues
from .raycast import trilinear

MIN_PAIRS = 6 * 10
MAX_CONDITION = 1e8


@dataclass(frozen=True)
class TrackerSettings:
    tracker_type: str = "icp"
    num_hierarchy_levels: int = 5
    num_rotation_only_levels: int = 2
    icp_distance_threshold: float = 0.1
    skip_points: bool = False
    ren_sigma: float = 10.0
    max_iterations: int = 20
    convergence_epsilon: float = 1e-5
    colour_outlier_threshold: float = 60.0

    def __post_init__(self):
        if self.tracker_type not in ("icp", "color", "icp+ren"):
            raise ValueError(f"unknown tracker type {self.tracker_type!r}")
        if not 1 <= self.num_rotation_only_levels <= self.num_hierarchy_levels:
            raise ValueError("need 1 <= rotation-only levels <= hierarchy levels")


@dataclass
class TrackingState:
    """Pose plus the model maps rendered at ``render_pose``."""

    pose: Pose = field(default_factory=Pose.identity)
    point_map: np.ndarray = None
    normal_map: np.ndarray = None
    render_pose: Pose = None
    render_intr: Intrinsics = None
    point_list: np.ndarray = None
    colour_list: np.ndarray = None

    @property
    def has_maps(self) -> bool:
        return self.point_map is not None and bool((self.point_map[..., 3] > 0).any())


@dataclass
class TrackingResult:
    pose: Pose
    ok: bool
    iterations: int = 0
    cost: float = 0.0
    reason: str = ""


# ----------------------------------------------------------------------------
# image pyramids


@dataclass
class ImagePyramid:
    """Level 0 is full resolution; each level halves the size (rounding up).
    ``gradients`` holds (gx, gy) per level for intensity pyramids."""

    images: list
    gradients: list = None

    @property
    def levels(self) -> int:
        return len(self.images)


@numba.njit(cache=True)
def _reduce_depth(src):
    h, w = src.shape
    oh, ow = (h + 1) // 2, (w + 1) // 2
    out = np.zeros((oh, ow))
    for y in range(oh):
        for x in range(ow):
            s = 0.0
            n = 0
            for dy in range(2):
                for dx in range(2):
                    yy = 2 * y + dy
                    xx = 2 * x + dx
                    if yy < h and xx < w and src[yy, xx] > 0:
                        s += src[yy, xx]
                        n += 1
            if n > 0:
                out[y, x] = s / n
    return out


def _reduce_mean(src: np.ndarray) -> np.ndarray:
    h, w = src.shape[:2]
    pad = ((0, h % 2), (0, w % 2)) + ((0, 0),) * (src.ndim - 2)
    vals = np.pad(src.astype(np.float64), pad)
    cnt = np.pad(np.ones((h, w)), pad[:2])
    s = vals[0::2, 0::2] + vals[1::2, 0::2] + vals[0::2, 1::2] + vals[1::2, 1::2]
    n = cnt[0::2, 0::2] + cnt[1::2, 0::2] + cnt[0::2, 1::2] + cnt[1::2, 1::2]
    return s / (n if src.ndim == 2 else n[..., None])


def central_gradients(img: np.ndarray):
    """Central differences in x and y; zero on the one-pixel border."""
    gx = np.zeros_like(img, dtype=np.float64)
    gy = np.zeros_like(img, dtype=np.float64)
    gx[1:-1, 1:-1] = 0.5 * (img[1:-1, 2:] - img[1:-1, :-2])
    gy[1:-1, 1:-1] = 0.5 * (img[2:, 1:-1] - img[:-2, 1:-1])
    return gx, gy


def build_pyramid(image: np.ndarray, levels: int, kind: str = "depth") -> ImagePyramid:
    """Depth pyramids average the valid (> 0) samples of each 2x2 cell;
    intensity pyramids (grey or multi-channel) take the plain mean and carry
    central-difference gradients."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if kind == "depth":
        imgs = [np.ascontiguousarray(image, dtype=np.float64)]
        for _ in range(levels - 1):
            imgs.append(_reduce_depth(imgs[-1]))
        return ImagePyramid(imgs)
    if kind == "intensity":
        imgs = [np.asarray(image, dtype=np.float64)]
        for _ in range(levels - 1):
            imgs.append(_reduce_mean(imgs[-1]))
        return ImagePyramid(imgs, [central_gradients(im) for im in imgs])
    raise ValueError(f"unknown pyramid kind {kind!r}")


# ----------------------------------------------------------------------------
# shared helpers


def _to_model(pose: Pose):
    """World-to-camera pose -> camera-to-world (R_M, t_M) arrays."""
    inv = pose.inverse()
    return np.array(inv.rotation), np.array(inv.translation)


def apply_twist(rm: np.ndarray, tm: np.ndarray, twist) -> tuple:
    """Camera-centred update of the camera-to-world transform."""
    twist = np.asarray(twist, dtype=np.float64)
    return orthonormalize(rodrigues(twist[:3]) @ rm), tm + twist[3:]


def _from_model(rm, tm) -> Pose:
    return Pose(rm, tm).inverse()


def perturb(pose: Pose, twist) -> Pose:
    """World-to-camera pose after a camera-centred twist."""
    rm, tm = _to_model(pose)
    return _from_model(*apply_twist(rm, tm, twist))


def _solve(h: np.ndarray, g: np.ndarray, n: int):
    """Solve ``h x = -g``; None when under-determined or ill-conditioned."""
    if n < MIN_PAIRS:
        return None
    if not np.all(np.isfinite(h)) or np.linalg.cond(h) > MAX_CONDITION:
        return None
    try:
        c = np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        return None
    y = np.linalg.solve(c, -g)
    return np.linalg.solve(c.T, y)


# ----------------------------------------------------------------------------
# ICP


@numba.njit(cache=True)
def _icp_terms(depth, fx, fy, cx, cy, rm, tm, ref_rot, ref_trans, rfx, rfy, rcx, rcy,
               vmap, nmap, thresh, out_r, out_j, stride):
    """Residual and Jacobian of every accepted pair (row order = pixel
    order); returns the pair count."""
    h, w = depth.shape
    mh, mw = vmap.shape[0], vmap.shape[1]
    n = 0
    for y in range(0, h, stride):
        for x in range(0, w, stride):
            d = depth[y, x]
            if d <= 0:
                continue
            p0 = (x - cx) / fx * d
            p1 = (y - cy) / fy * d
            a0 = rm[0, 0] * p0 + rm[0, 1] * p1 + rm[0, 2] * d
            a1 = rm[1, 0] * p0 + rm[1, 1] * p1 + rm[1, 2] * d
            a2 = rm[2, 0] * p0 + rm[2, 1] * p1 + rm[2, 2] * d
            q0 = a0 + tm[0]
            q1 = a1 + tm[1]
            q2 = a2 + tm[2]
            zr = ref_rot[2, 0] * q0 + ref_rot[2, 1] * q1 + ref_rot[2, 2] * q2 + ref_trans[2]
            if zr <= 0:
                continue
            xr = ref_rot[0, 0] * q0 + ref_rot[0, 1] * q1 + ref_rot[0, 2] * q2 + ref_trans[0]
            yr = ref_rot[1, 0] * q0 + ref_rot[1, 1] * q1 + ref_rot[1, 2] * q2 + ref_trans[1]
            u = rfx * xr / zr + rcx
            v = rfy * yr / zr + rcy
            if u < -0.5 or v < -0.5 or u >= mw - 0.5 or v >= mh - 0.5:
                continue
            iu = int(u + 0.5)
            iv = int(v + 0.5)
            if vmap[iv, iu, 3] <= 0 or nmap[iv, iu, 3] <= 0:
                continue
            n0 = nmap[iv, iu, 0]
            n1 = nmap[iv, iu, 1]
            n2 = nmap[iv, iu, 2]
            r = ((q0 - vmap[iv, iu, 0]) * n0 + (q1 - vmap[iv, iu, 1]) * n1
                 + (q2 - vmap[iv, iu, 2]) * n2)
            if abs(r) > thresh:
                continue
            if n < out_r.shape[0]:
                out_r[n] = r
                out_j[n, 0] = a1 * n2 - a2 * n1
                out_j[n, 1] = a2 * n0 - a0 * n2
                out_j[n, 2] = a0 * n1 - a1 * n0
                out_j[n, 3] = n0
                out_j[n, 4] = n1
                out_j[n, 5] = n2
            n += 1
    return n


@numba.njit(cache=True)
def _normal_equations(r, j, n, dof):
    h = np.zeros((dof, dof))
    g = np.zeros(dof)
    cost = 0.0
    for k in range(n):
        for a in range(dof):
            g[a] += j[k, a] * r[k]
            for b in range(a, dof):
                h[a, b] += j[k, a] * j[k, b]
        cost += r[k] * r[k]
    for a in range(dof):
        for b in range(a):
            h[a, b] = h[b, a]
    return h, g, cost


def icp_terms(depth, intr: Intrinsics, pose: Pose, state: TrackingState,
              threshold: float = 0.1, stride: int = 1):
    """Residuals (n,) and Jacobians (n, 6) of the point-to-plane pairs of
    ``depth`` seen from world-to-camera ``pose`` against the state maps."""
    rm, tm = _to_model(pose)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    cap = depth.size
    out_r = np.empty(cap)
    out_j = np.empty((cap, 6))
    ri = state.render_intr
    n = _icp_terms(depth, intr.fx, intr.fy, intr.cx, intr.cy, rm, tm,
                   state.render_pose.rotation, state.render_pose.translation,
                   ri.fx, ri.fy, ri.cx, ri.cy, state.point_map, state.normal_map,
                   float(threshold), out_r, out_j, stride)
    return out_r[:n], out_j[:n]


def icp_track(depth_pyramid: ImagePyramid, intr: Intrinsics, state: TrackingState,
              settings: TrackerSettings, init: Pose = None, levels=None) -> TrackingResult:
    """Coarse-to-fine point-to-plane ICP against ``state``'s maps.

    ``intr`` describes level 0 of ``depth_pyramid``; ``levels`` restricts
    the pyramid levels used (default all).  On failure the input pose is
    returned unchanged with ``ok=False``.
    """
    start = init if init is not None else state.pose
    if not state.has_maps:
        return TrackingResult(start, False, reason="no model maps")
    rm, tm = _to_model(start)
    ri, rp = state.render_intr, state.render_pose
    n_levels = depth_pyramid.levels
    if levels is None:
        levels = range(n_levels - 1, -1, -1)
    levels = list(levels)
    total_it = 0
    cost = 0.0
    cap = depth_pyramid.images[0].size
    out_r = np.empty(cap)
    out_j = np.empty((cap, 6))
    for level in levels:
        depth = depth_pyramid.images[level]
        li = intr.downsampled(level)
        rot_only = level >= n_levels - settings.num_rotation_only_levels
        dof = 3 if rot_only else 6
        prev_mean = np.inf
        for _ in range(settings.max_iterations):
            n = _icp_terms(depth, li.fx, li.fy, li.cx, li.cy, rm, tm, rp.rotation,
                           rp.translation, ri.fx, ri.fy, ri.cx, ri.cy, state.point_map,
                           state.normal_map, settings.icp_distance_threshold, out_r, out_j, 1)
            h, g, c = _normal_equations(out_r, out_j, n, dof)
            mean = c / max(n, 1)
            if mean > prev_mean and total_it > 0:
                # the last step made things worse: undo it and leave the level
                rm, tm = prev_rm, prev_tm
                break
            cost = mean
            step = _solve(h, g, n)
            if step is None:
                if level != levels[-1]:
                    break  # too little support this coarse: carry the estimate down
                return TrackingResult(start, False, total_it, cost,
                                      f"degenerate system at level {level} ({n} pairs)")
            twist = np.zeros(6)
            twist[:dof] = step
            prev_rm, prev_tm, prev_mean = rm, tm, mean
            if rot_only:
                rm = orthonormalize(rodrigues(twist[:3]) @ rm)
            else:
                rm, tm = apply_twist(rm, tm, twist)
            total_it += 1
            if np.linalg.norm(twist) < settings.convergence_epsilon:
                break
    return TrackingResult(_from_model(rm, tm), True, total_it, cost)


# ----------------------------------------------------------------------------
# colour tracker


@numba.njit(cache=True, inline="always")
def _bilinear(img, u, v, c):
    x0 = int(np.floor(u))
    y0 = int(np.floor(v))
    a = u - x0
    b = v - y0
    return ((1 - a) * (1 - b) * img[y0, x0, c] + a * (1 - b) * img[y0, x0 + 1, c]
            + (1 - a) * b * img[y0 + 1, x0, c] + a * b * img[y0 + 1, x0 + 1, c])


@numba.njit(cache=True)
def _colour_terms(points, colours, rm, tm, fx, fy, cx, cy, img, gx, gy, thresh, out_r,
                  out_j):
    """Per point and channel residual I(pi(x)) - C and its 6-vector
    Jacobian; returns the number of rows written.  Points whose colour
    difference norm exceeds ``thresh`` are skipped."""
    h, w = img.shape[0], img.shape[1]
    nc = img.shape[2]
    n = 0
    for k in range(points.shape[0]):
        b0 = points[k, 0] - tm[0]
        b1 = points[k, 1] - tm[1]
        b2 = points[k, 2] - tm[2]
        # camera coordinates x = R_M^T (V - t_M)
        x0 = rm[0, 0] * b0 + rm[1, 0] * b1 + rm[2, 0] * b2
        x1 = rm[0, 1] * b0 + rm[1, 1] * b1 + rm[2, 1] * b2
        x2 = rm[0, 2] * b0 + rm[1, 2] * b1 + rm[2, 2] * b2
        if x2 <= 1e-6:
            continue
        u = fx * x0 / x2 + cx
        v = fy * x1 / x2 + cy
        if u < 1 or v < 1 or u > w - 2 or v > h - 2:
            continue
        du0 = fx / x2
        du2 = -fx * x0 / (x2 * x2)
        dv1 = fy / x2
        dv2 = -fy * x1 / (x2 * x2)
        norm2 = 0.0
        for c in range(nc):
            r = _bilinear(img, u, v, c) - colours[k, c]
            norm2 += r * r
        if norm2 > thresh * thresh:
            continue
        for c in range(nc):
            r = _bilinear(img, u, v, c) - colours[k, c]
            iu = _bilinear(gx, u, v, c)
            iv = _bilinear(gy, u, v, c)
            # d residual / d camera point
            e0 = iu * du0
            e1 = iv * dv1
            e2 = iu * du2 + iv * dv2
            # back to world frame: s = R_M e
            s0 = rm[0, 0] * e0 + rm[0, 1] * e1 + rm[0, 2] * e2
            s1 = rm[1, 0] * e0 + rm[1, 1] * e1 + rm[1, 2] * e2
            s2 = rm[2, 0] * e0 + rm[2, 1] * e1 + rm[2, 2] * e2
            # d x / d w = R_M^T [b]x, d x / d v = -R_M^T
            out_r[n] = r
            out_j[n, 0] = s1 * b2 - s2 * b1
            out_j[n, 1] = s2 * b0 - s0 * b2
            out_j[n, 2] = s0 * b1 - s1 * b0
            out_j[n, 3] = -s0
            out_j[n, 4] = -s1
            out_j[n, 5] = -s2
            n += 1
    return n


def _as_channels(img):
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def colour_terms(points, colours, pose: Pose, intr: Intrinsics, image, gradients=None,
                 threshold: float = np.inf):
    """Residuals and Jacobians of the photometric cost at ``pose``."""
    img = _as_channels(image)
    if gradients is None:
        gradients = central_gradients(img)
    gx, gy = (np.ascontiguousarray(_as_channels(g)) for g in gradients)
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    cols = np.ascontiguousarray(colours, dtype=np.float64).reshape(len(pts), -1)
    rm, tm = _to_model(pose)
    cap = len(pts) * img.shape[2]
    out_r = np.empty(cap)
    out_j = np.empty((cap, 6))
    n = _colour_terms(pts, cols, rm, tm, intr.fx, intr.fy, intr.cx, intr.cy,
                      np.ascontiguousarray(img), gx, gy, float(threshold), out_r, out_j)
    return out_r[:n], out_j[:n]


def color_track(points, colours, rgb_pyramid: ImagePyramid, intr: Intrinsics, init: Pose,
                settings: TrackerSettings) -> TrackingResult:
    """Levenberg-Marquardt photometric alignment of model points/colours.

    The point list stays fixed across levels; only the image is reduced.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return TrackingResult(init, False, reason="empty point list")
    cols = np.asarray(colours, dtype=np.float64).reshape(len(pts), -1)
    if settings.skip_points:
        pts, cols = pts[::2], cols[::2]
    rm, tm = _to_model(init)
    total_it = 0
    cost = 0.0
    used_any = False
    for level in range(rgb_pyramid.levels - 1, -1, -1):
        li = intr.downsampled(level)
        img = np.ascontiguousarray(_as_channels(rgb_pyramid.images[level]))
        gx, gy = (np.ascontiguousarray(_as_channels(g)) for g in rgb_pyramid.gradients[level])
        cap = len(pts) * img.shape[2]
        out_r = np.empty(cap)
        out_j = np.empty((cap, 6))

        def evaluate(rm_, tm_):
            n_ = _colour_terms(pts, cols, rm_, tm_, li.fx, li.fy, li.cx, li.cy, img, gx, gy,
                               settings.colour_outlier_threshold, out_r, out_j)
            h_, g_, c_ = _normal_equations(out_r, out_j, n_, 6)
            return n_, h_, g_, c_ / max(n_, 1)

        n, h, g, mean = evaluate(rm, tm)
        if n == 0:
            continue
        used_any = True
        lam = 1e-3
        for _ in range(settings.max_iterations):
            # Marquardt scaling; directions without curvature carry no
            # gradient either, so a tiny floor keeps the solve regular
            d = np.diag(h)
            damped = h + lam * np.diag(np.maximum(d, 1e-12 * max(d.max(), 1e-300)))
            try:
                step = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                break
            c_rm, c_tm = apply_twist(rm, tm, step)
            c_n, c_h, c_g, c_mean = evaluate(c_rm, c_tm)
            total_it += 1
            if c_n > 0 and c_mean < mean:
                rm, tm, n, h, g, mean = c_rm, c_tm, c_n, c_h, c_g, c_mean
                lam = max(lam / 10.0, 1e-9)
            else:
                lam *= 10.0
                if lam > 1e8:
                    break
            if np.linalg.norm(step) < settings.convergence_epsilon:
                break
        cost = mean
    if not used_any:
        return TrackingResult(init, False, total_it, reason="no point projects into the image")
    return TrackingResult(_from_model(rm, tm), True, total_it, cost)


# ----------------------------------------------------------------------------
# SDF refinement


def ren_energy(value, sigma):
    """Per-point robust cost -4 e^{sV} / (e^{sV} + 1)^2, in a form that does
    not overflow: it equals tanh(sV/2)^2 - 1."""
    x = sigma * np.asarray(value, dtype=np.float64)
    return np.tanh(0.5 * x) ** 2 - 1.0


@numba.njit(cache=True)
def _ren_terms(depth, fx, fy, cx, cy, rm, tm, ix, sdf, quantized, vs, sigma, out_r, out_j):
    h, w = depth.shape
    n = 0
    for y in range(h):
        for x in range(w):
            d = depth[y, x]
            if d <= 0:
                continue
            p0 = (x - cx) / fx * d
            p1 = (y - cy) / fy * d
            a0 = rm[0, 0] * p0 + rm[0, 1] * p1 + rm[0, 2] * d
            a1 = rm[1, 0] * p0 + rm[1, 1] * p1 + rm[1, 2] * d
            a2 = rm[2, 0] * p0 + rm[2, 1] * p1 + rm[2, 2] * d
            val, ok, g0, g1, g2 = trilinear(ix, sdf, quantized, vs, a0 + tm[0], a1 + tm[1],
                                            a2 + tm[2])
            if not ok:
                continue
            r = np.tanh(0.5 * sigma * val)
            s = 0.5 * sigma * (1.0 - r * r)
            out_r[n] = r
            out_j[n, 0] = s * (a1 * g2 - a2 * g1)
            out_j[n, 1] = s * (a2 * g0 - a0 * g2)
            out_j[n, 2] = s * (a0 * g1 - a1 * g0)
            out_j[n, 3] = s * g0
            out_j[n, 4] = s * g1
            out_j[n, 5] = s * g2
            n += 1
    return n


def ren_terms(depth, intr: Intrinsics, volume, pose: Pose, sigma: float):
    """Residuals r = tanh(sigma V / 2) (so E = r^2 - 1) and their Jacobians."""
    rm, tm = _to_model(pose)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    out_r = np.empty(depth.size)
    out_j = np.empty((depth.size, 6))
    s = volume.storage
    n = _ren_terms(depth, intr.fx, intr.fy, intr.cx, intr.cy, rm, tm, volume.kernel_index(),
                   s.sdf, s.quantized, volume.voxel_size, float(sigma), out_r, out_j)
    return out_r[:n], out_j[:n]


def ren_refine(depth, intr: Intrinsics, volume, init: Pose,
               settings: TrackerSettings) -> TrackingResult:
    """Gauss-Newton minimisation of the summed robust SDF cost over all
    valid pixels of the full-resolution depth image."""
    rm, tm = _to_model(init)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    out_r = np.empty(depth.size)
    out_j = np.empty((depth.size, 6))
    s = volume.storage
    ix = volume.kernel_index()

    def evaluate(rm_, tm_):
        n_ = _ren_terms(depth, intr.fx, intr.fy, intr.cx, intr.cy, rm_, tm_, ix, s.sdf,
                        s.quantized, volume.voxel_size, float(settings.ren_sigma), out_r,
                        out_j)
        h_, g_, c_ = _normal_equations(out_r, out_j, n_, 6)
        return n_, h_, g_, c_ / max(n_, 1)

    n, h, g, mean = evaluate(rm, tm)
    if n == 0:
        return TrackingResult(init, False, reason="no point inside the fused volume")
    it = 0
    for it in range(1, settings.max_iterations + 1):
        if not np.any(g):
            break  # stationary: nothing to do
        step = _solve(h, g, n)
        if step is None:
            return TrackingResult(init, False, it, mean, "degenerate system")
        c_rm, c_tm = apply_twist(rm, tm, step)
        c_n, c_h, c_g, c_mean = evaluate(c_rm, c_tm)
        if c_n == 0 or c_mean >= mean:
            break
        rm, tm, n, h, g, mean = c_rm, c_tm, c_n, c_h, c_g, c_mean
        if np.linalg.norm(step) < settings.convergence_epsilon:
            break
    return TrackingResult(_from_model(rm, tm), True, it, mean)
