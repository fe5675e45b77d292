"""Raycasting the TSDF into point/normal maps and images.

Rays are parameterised by camera z-depth ``t``: pixel (x, y) samples
``centre + t * R^T ((x - cx)/fx, (y - cy)/fy, 1)``.  Each pixel's search
interval comes from an expected-depth range image built by projecting the
visible blocks; the march itself is a small state machine.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numba
import numpy as np

from .allocation import visible_entries
from .math_core import Intrinsics, Pose
from .volume_index import locate_voxel, observed_voxel
from .voxel_model import read_sdf

FRAGMENT = 16
NEAR = 0.2
FAR = 8.0


class RaycastState(IntEnum):
    SEARCH_BLOCK_COARSE = 0
    SEARCH_BLOCK_FINE = 1
    SEARCH_SURFACE = 2
    BEHIND_SURFACE = 3
    WRONG_SIDE = 4


COARSE, FINE, SURFACE, BEHIND, WRONG = (int(s) for s in RaycastState)


@dataclass
class RangeImage:
    """Per-fragment (min, max) search depths; ``min > max`` marks invalid."""

    frag_min: np.ndarray
    frag_max: np.ndarray
    width: int
    height: int
    fragment: int = FRAGMENT

    @classmethod
    def empty(cls, width: int, height: int, fragment: int = FRAGMENT) -> "RangeImage":
        shape = (-(-height // fragment), -(-width // fragment))
        return cls(np.full(shape, np.inf), np.full(shape, -np.inf), width, height, fragment)

    @classmethod
    def uniform(cls, width, height, zmin, zmax, fragment=FRAGMENT) -> "RangeImage":
        r = cls.empty(width, height, fragment)
        r.frag_min[:] = zmin
        r.frag_max[:] = zmax
        return r

    def pixel_range(self, x: int, y: int):
        f = self.fragment
        return float(self.frag_min[y // f, x // f]), float(self.frag_max[y // f, x // f])

    def expand(self) -> np.ndarray:
        """(h, w, 2) per-pixel ranges."""
        f = self.fragment
        lo = np.repeat(np.repeat(self.frag_min, f, 0), f, 1)[:self.height, :self.width]
        hi = np.repeat(np.repeat(self.frag_max, f, 0), f, 1)[:self.height, :self.width]
        return np.stack([lo, hi], axis=-1)

    @property
    def valid(self) -> np.ndarray:
        return self.expand()[..., 0] <= self.expand()[..., 1]


# ----------------------------------------------------------------------------
# expected depths


@numba.njit(cache=True)
def _block_boxes(pos, entries, block_metres, rot, trans, fx, fy, cx, cy, w, h, near, frag):
    n = entries.shape[0]
    boxes = np.empty((n, 6))  # fx0, fy0, fx1, fy1, zmin, zmax (fragment units)
    counts = np.zeros(n, dtype=np.int64)
    for k in range(n):
        e = entries[k]
        zmin = np.inf
        zmax = -np.inf
        umin = np.inf
        umax = -np.inf
        vmin = np.inf
        vmax = -np.inf
        behind = False
        for c in range(8):
            X = (pos[e, 0] + (c & 1)) * block_metres
            Y = (pos[e, 1] + ((c >> 1) & 1)) * block_metres
            Z = (pos[e, 2] + ((c >> 2) & 1)) * block_metres
            xc = rot[0, 0] * X + rot[0, 1] * Y + rot[0, 2] * Z + trans[0]
            yc = rot[1, 0] * X + rot[1, 1] * Y + rot[1, 2] * Z + trans[1]
            zc = rot[2, 0] * X + rot[2, 1] * Y + rot[2, 2] * Z + trans[2]
            zmin = min(zmin, zc)
            zmax = max(zmax, zc)
            if zc < near:
                behind = True
                continue
            u = fx * xc / zc + cx
            v = fy * yc / zc + cy
            umin = min(umin, u)
            umax = max(umax, u)
            vmin = min(vmin, v)
            vmax = max(vmax, v)
        if zmax < near:
            continue
        if behind:
            # straddles the near plane: conservatively cover the whole image
            umin, vmin, umax, vmax = 0.0, 0.0, w - 1.0, h - 1.0
            zmin = near
        x0 = max(0, int(np.floor(umin)))
        y0 = max(0, int(np.floor(vmin)))
        x1 = min(w - 1, int(np.ceil(umax)))
        y1 = min(h - 1, int(np.ceil(vmax)))
        if x0 > x1 or y0 > y1:
            continue
        boxes[k, 0] = x0 // frag
        boxes[k, 1] = y0 // frag
        boxes[k, 2] = x1 // frag
        boxes[k, 3] = y1 // frag
        boxes[k, 4] = zmin
        boxes[k, 5] = zmax
        counts[k] = (x1 // frag - x0 // frag + 1) * (y1 // frag - y0 // frag + 1)
    return boxes, counts


@numba.njit(cache=True)
def _emit_fragments(boxes, counts, starts, total):
    frags = np.empty((total, 4))  # fragment x, fragment y, zmin, zmax
    for k in range(boxes.shape[0]):
        if counts[k] == 0:
            continue
        j = starts[k]
        for fy in range(int(boxes[k, 1]), int(boxes[k, 3]) + 1):
            for fx in range(int(boxes[k, 0]), int(boxes[k, 2]) + 1):
                frags[j, 0] = fx
                frags[j, 1] = fy
                frags[j, 2] = boxes[k, 4]
                frags[j, 3] = boxes[k, 5]
                j += 1
    return frags


@numba.njit(cache=True)
def _combine_fragments(frags, frag_min, frag_max):
    for j in range(frags.shape[0]):
        fx = int(frags[j, 0])
        fy = int(frags[j, 1])
        if frags[j, 2] < frag_min[fy, fx]:
            frag_min[fy, fx] = frags[j, 2]
        if frags[j, 3] > frag_max[fy, fx]:
            frag_max[fy, fx] = frags[j, 3]


def create_expected_depths(volume, visible_list, pose: Pose, intr: Intrinsics,
                           near: float = NEAR, fragment: int = FRAGMENT) -> RangeImage:
    """Conservative per-fragment search ranges from the visible blocks.

    For a dense volume ``visible_list`` is ignored and the range spans the
    volume bounds.
    """
    rng = RangeImage.empty(intr.width, intr.height, fragment)
    if not volume.is_hashed:
        lo, hi = volume.world_bounds()
        corners = np.array([[(hi if c & 1 << a else lo)[a] for a in range(3)]
                            for c in range(8)])
        z = pose.apply(corners)[:, 2]
        if z.max() >= near:
            rng.frag_min[:] = max(near, z.min())
            rng.frag_max[:] = z.max()
        return rng
    entries = np.asarray(visible_list, dtype=np.int32)
    boxes, counts = _block_boxes(volume.table.pos, entries, 8 * volume.voxel_size,
                                 pose.rotation, pose.translation, intr.fx, intr.fy,
                                 intr.cx, intr.cy, intr.width, intr.height, float(near),
                                 fragment)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]) if len(counts) else counts
    total = int(counts.sum())
    frags = _emit_fragments(boxes, counts, starts.astype(np.int64), total)
    _combine_fragments(frags, rng.frag_min, rng.frag_max)
    return rng


# ----------------------------------------------------------------------------
# SDF sampling


@numba.njit(cache=True, inline="always")
def nearest_sdf(ix, sdf, quantized, vs, px, py, pz):
    """SDF of the voxel containing the point; (value, found)."""
    slot, lin = locate_voxel(ix, np.int64(np.floor(px / vs)), np.int64(np.floor(py / vs)),
                             np.int64(np.floor(pz / vs)))
    if slot < 0:
        return 1.0, False
    return read_sdf(sdf, slot, lin, quantized), True


@numba.njit(cache=True, inline="always")
def block_at(ix, vs, px, py, pz):
    slot, _ = locate_voxel(ix, np.int64(np.floor(px / vs)), np.int64(np.floor(py / vs)),
                           np.int64(np.floor(pz / vs)))
    return slot >= 0


@numba.njit(cache=True)
def trilinear(ix, sdf, quantized, vs, px, py, pz):
    """Trilinear SDF and its gradient (per metre) at a world point.

    Returns (value, valid, gx, gy, gz); invalid if any of the eight
    neighbouring voxel centres is not stored or was never observed.
    """
    qx = px / vs - 0.5
    qy = py / vs - 0.5
    qz = pz / vs - 0.5
    bx = np.floor(qx)
    by = np.floor(qy)
    bz = np.floor(qz)
    fx = qx - bx
    fy = qy - by
    fz = qz - bz
    ibx = np.int64(bx)
    iby = np.int64(by)
    ibz = np.int64(bz)
    val = 0.0
    gx = 0.0
    gy = 0.0
    gz = 0.0
    for c in range(8):
        cx = c & 1
        cy = (c >> 1) & 1
        cz = (c >> 2) & 1
        slot, lin = observed_voxel(ix, ibx + cx, iby + cy, ibz + cz)
        if slot < 0:
            return 1.0, False, 0.0, 0.0, 0.0
        v = read_sdf(sdf, slot, lin, quantized)
        wx = fx if cx else 1.0 - fx
        wy = fy if cy else 1.0 - fy
        wz = fz if cz else 1.0 - fz
        val += wx * wy * wz * v
        gx += (1.0 if cx else -1.0) * wy * wz * v
        gy += (1.0 if cy else -1.0) * wx * wz * v
        gz += (1.0 if cz else -1.0) * wx * wy * v
    return val, True, gx / vs, gy / vs, gz / vs


@numba.njit(cache=True)
def trilinear_color(ix, clr, vs, px, py, pz, out):
    """Trilinear blend of voxel colours into ``out``; False if a neighbour
    is missing."""
    qx = px / vs - 0.5
    qy = py / vs - 0.5
    qz = pz / vs - 0.5
    bx = np.floor(qx)
    by = np.floor(qy)
    bz = np.floor(qz)
    out[:] = 0.0
    for c in range(8):
        cx = c & 1
        cy = (c >> 1) & 1
        cz = (c >> 2) & 1
        slot, lin = observed_voxel(ix, np.int64(bx) + cx, np.int64(by) + cy, np.int64(bz) + cz)
        if slot < 0:
            return False
        w = ((qx - bx) if cx else (1.0 - qx + bx)) * ((qy - by) if cy else (1.0 - qy + by)) \
            * ((qz - bz) if cz else (1.0 - qz + bz))
        for k in range(3):
            out[k] += w * clr[slot, lin, k]
    return True


@numba.njit(cache=True)
def _cast(ix, sdf, quantized, vs, mu, ox, oy, oz, dx, dy, dz, t_min, t_max, trace):
    """March one ray.  Returns (t_hit, found, final state); ``trace`` receives
    the smallest and largest t at which the volume was read.

    All samples lie on the lattice t = k * dt (half a voxel along the ray),
    shared with :func:`naive_raycast`, so both agree on which zero crossing
    of a noisy field is the first one.
    """
    trace[0] = np.inf
    trace[1] = -np.inf
    if not t_min <= t_max:
        return 0.0, False, COARSE
    norm = np.sqrt(dx * dx + dy * dy + dz * dz)
    dt = 0.5 * vs / norm
    k_coarse = 16
    k_lo = np.int64(np.ceil((t_min - mu / norm) / dt))
    k = np.int64(np.ceil(t_min / dt))
    k_end = np.int64(np.floor(t_max / dt))
    state = COARSE
    k_hit = 0
    prev_ok = False
    k_prev = 0
    f_prev = 0.0
    while k <= k_end:
        t = k * dt
        px = ox + t * dx
        py = oy + t * dy
        pz = oz + t * dz
        trace[0] = min(trace[0], t)
        trace[1] = max(trace[1], t)
        present = block_at(ix, vs, px, py, pz)
        if state == COARSE:
            if present:
                state = FINE
                k_hit = k
                k = max(k - k_coarse, k_lo)
            else:
                k += k_coarse
            continue
        if not present:
            if state == FINE and k <= k_hit:
                k += 1
            else:
                state = COARSE
                prev_ok = False
                k += k_coarse
            continue
        f, valid, _, _, _ = trilinear(ix, sdf, quantized, vs, px, py, pz)
        if not valid:
            prev_ok = False
            k += 1
            continue
        if f < 0.0:
            if state == FINE or not prev_ok:
                return t, False, WRONG
            if k - k_prev > 1:
                # jumped past the crossing: back off and re-walk finely
                state = BEHIND
                k = k_prev + 1
                continue
            t0 = k_prev * dt
            return t0 + (t - t0) * f_prev / (f_prev - f), True, BEHIND
        if state == FINE:
            state = SURFACE
        prev_ok = True
        k_prev = k
        f_prev = f
        if state == BEHIND:
            k += 1
        else:
            k += max(np.int64(1), np.int64(0.5 * f * mu / (0.5 * vs)))
    return 0.0, False, state


@numba.njit(cache=True)
def _render(ix, sdf, quantized, vs, mu, rot_cw, centre, fx, fy, cx, cy, ranges,
            vmap, nmap, traces, states):
    h, w = ranges.shape[0], ranges.shape[1]
    trace = np.empty(2)
    for y in range(h):
        for x in range(w):
            rx = (x - cx) / fx
            ry = (y - cy) / fy
            dx = rot_cw[0, 0] * rx + rot_cw[0, 1] * ry + rot_cw[0, 2]
            dy = rot_cw[1, 0] * rx + rot_cw[1, 1] * ry + rot_cw[1, 2]
            dz = rot_cw[2, 0] * rx + rot_cw[2, 1] * ry + rot_cw[2, 2]
            t, found, state = _cast(ix, sdf, quantized, vs, mu, centre[0], centre[1],
                                    centre[2], dx, dy, dz, ranges[y, x, 0], ranges[y, x, 1],
                                    trace)
            traces[y, x, 0] = trace[0]
            traces[y, x, 1] = trace[1]
            states[y, x] = state
            vmap[y, x, :] = 0.0
            nmap[y, x, :] = 0.0
            if not found:
                continue
            px = centre[0] + t * dx
            py = centre[1] + t * dy
            pz = centre[2] + t * dz
            _, ok, gx, gy, gz = trilinear(ix, sdf, quantized, vs, px, py, pz)
            gn = np.sqrt(gx * gx + gy * gy + gz * gz)
            if not ok or gn == 0.0:
                continue
            vmap[y, x, 0] = px
            vmap[y, x, 1] = py
            vmap[y, x, 2] = pz
            vmap[y, x, 3] = 1.0
            nmap[y, x, 0] = gx / gn
            nmap[y, x, 1] = gy / gn
            nmap[y, x, 2] = gz / gn
            nmap[y, x, 3] = 1.0


@numba.njit(cache=True)
def _naive(ix, sdf, quantized, vs, rot_cw, centre, fx, fy, cx, cy, w, h, t_min, t_max,
           depth_out):
    for y in range(h):
        for x in range(w):
            rx = (x - cx) / fx
            ry = (y - cy) / fy
            dx = rot_cw[0, 0] * rx + rot_cw[0, 1] * ry + rot_cw[0, 2]
            dy = rot_cw[1, 0] * rx + rot_cw[1, 1] * ry + rot_cw[1, 2]
            dz = rot_cw[2, 0] * rx + rot_cw[2, 1] * ry + rot_cw[2, 2]
            dt = 0.5 * vs / np.sqrt(dx * dx + dy * dy + dz * dz)
            depth_out[y, x] = 0.0
            prev_ok = False
            t_prev = 0.0
            f_prev = 0.0
            k0 = np.int64(np.ceil(t_min / dt))
            k1 = np.int64(np.floor(t_max / dt))
            for k in range(k0, k1 + 1):
                t = k * dt
                px = centre[0] + t * dx
                py = centre[1] + t * dy
                pz = centre[2] + t * dz
                if not block_at(ix, vs, px, py, pz):
                    prev_ok = False
                    continue
                f, ok, _, _, _ = trilinear(ix, sdf, quantized, vs, px, py, pz)
                if not ok:
                    prev_ok = False
                    continue
                if f < 0.0:
                    if prev_ok:
                        depth_out[y, x] = t_prev + (t - t_prev) * f_prev / (f_prev - f)
                    break
                prev_ok = True
                t_prev = t
                f_prev = f


@dataclass
class RaycastResult:
    """World-space point map V and normal map N, (h, w, 4) with w = validity,
    plus the per-pixel read interval and final march state."""

    points: np.ndarray
    normals: np.ndarray
    read_range: np.ndarray
    states: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.points[..., 3] > 0


def _camera(pose: Pose):
    inv = pose.inverse()
    return np.ascontiguousarray(inv.rotation), np.ascontiguousarray(inv.translation)


def render_maps(volume, pose: Pose, intr: Intrinsics, mu: float,
                ranges: RangeImage = None) -> RaycastResult:
    """Raycast every pixel and return V and N."""
    if ranges is None:
        vis, _ = visible_entries(volume, pose, intr) if volume.is_hashed else (None, None)
        ranges = create_expected_depths(volume, vis, pose, intr)
    rot_cw, centre = _camera(pose)
    h, w = intr.height, intr.width
    vmap = np.zeros((h, w, 4))
    nmap = np.zeros((h, w, 4))
    traces = np.zeros((h, w, 2))
    states = np.zeros((h, w), dtype=np.int8)
    s = volume.storage
    _render(volume.kernel_index(), s.sdf, s.quantized, volume.voxel_size, float(mu),
            rot_cw, centre, intr.fx, intr.fy, intr.cx, intr.cy,
            np.ascontiguousarray(ranges.expand()), vmap, nmap, traces, states)
    return RaycastResult(vmap, nmap, traces, states)


def cast_ray(volume, pixel, depth_range, pose: Pose, intr: Intrinsics, mu: float):
    """Cast a single ray; returns (world point or None, found, state)."""
    rot_cw, centre = _camera(pose)
    rx = (pixel[0] - intr.cx) / intr.fx
    ry = (pixel[1] - intr.cy) / intr.fy
    d = rot_cw @ np.array([rx, ry, 1.0])
    trace = np.empty(2)
    s = volume.storage
    t, found, state = _cast(volume.kernel_index(), s.sdf, s.quantized, volume.voxel_size,
                            float(mu), centre[0], centre[1], centre[2], d[0], d[1], d[2],
                            float(depth_range[0]), float(depth_range[1]), trace)
    point = centre + t * d if found else None
    return point, bool(found), RaycastState(state)


def naive_raycast(volume, pose: Pose, intr: Intrinsics, t_min: float = NEAR,
                  t_max: float = 4.0) -> np.ndarray:
    """Reference raycast with fixed half-voxel steps over [t_min, t_max];
    returns the hit z-depth per pixel (0 = no hit)."""
    rot_cw, centre = _camera(pose)
    out = np.zeros((intr.height, intr.width))
    s = volume.storage
    _naive(volume.kernel_index(), s.sdf, s.quantized, volume.voxel_size, rot_cw, centre,
           intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height, float(t_min),
           float(t_max), out)
    return out


def trilinear_sdf(volume, point):
    """(value, valid) of the trilinear SDF at a world point."""
    s = volume.storage
    v, ok, _, _, _ = trilinear(volume.kernel_index(), s.sdf, s.quantized, volume.voxel_size,
                               float(point[0]), float(point[1]), float(point[2]))
    return float(v), bool(ok)


def sdf_gradient(volume, point):
    """(value, valid, gradient per metre) of the trilinear SDF."""
    s = volume.storage
    v, ok, gx, gy, gz = trilinear(volume.kernel_index(), s.sdf, s.quantized,
                                  volume.voxel_size, float(point[0]), float(point[1]),
                                  float(point[2]))
    return float(v), bool(ok), np.array([gx, gy, gz])


def hit_depths(result: RaycastResult, pose: Pose) -> np.ndarray:
    """Camera z-depth of each valid hit (0 elsewhere)."""
    z = pose.apply(result.points[..., :3])[..., 2]
    return np.where(result.valid, z, 0.0)


# ----------------------------------------------------------------------------
# images and point lists


@numba.njit(cache=True)
def _colour_lookup(ix, clr, vs, vmap, out):
    tmp = np.empty(3)
    h, w = vmap.shape[0], vmap.shape[1]
    for y in range(h):
        for x in range(w):
            if vmap[y, x, 3] <= 0:
                continue
            if trilinear_color(ix, clr, vs, vmap[y, x, 0], vmap[y, x, 1], vmap[y, x, 2], tmp):
                for k in range(3):
                    out[y, x, k] = tmp[k]


def point_colours(volume, points: np.ndarray) -> np.ndarray:
    """Trilinear voxel colours (float, 0..255) at the valid points of a map."""
    out = np.zeros(points.shape[:-1] + (3,))
    if volume.storage.has_color:
        _colour_lookup(volume.kernel_index(), volume.storage.clr, volume.voxel_size,
                       np.ascontiguousarray(points), out)
    return out


def render_image(volume, result: RaycastResult, pose: Pose, mode: str = "shaded") -> np.ndarray:
    """uint8 (h, w, 3) image: ``shaded`` is |n . view| greyscale, ``colour``
    the fused voxel colours.  Pixels without a hit are black."""
    valid = result.valid
    if mode == "shaded":
        view = result.points[..., :3] - pose.centre
        norm = np.linalg.norm(view, axis=-1, keepdims=True)
        view = np.divide(view, norm, out=np.zeros_like(view), where=norm > 0)
        shade = np.abs(np.sum(view * result.normals[..., :3], axis=-1))
        grey = np.where(valid, np.round(255.0 * np.clip(shade, 0.0, 1.0)), 0).astype(np.uint8)
        return np.repeat(grey[..., None], 3, axis=-1)
    if mode == "colour":
        c = point_colours(volume, result.points)
        return np.where(valid[..., None], np.round(c), 0).astype(np.uint8)
    raise ValueError(f"unknown render mode {mode!r}")


def forward_project_points(result: RaycastResult, colours: np.ndarray = None, stride: int = 4):
    """Points (n, 3) and colours (n, 3) of valid hits on a ``stride`` grid."""
    pts = result.points[::stride, ::stride]
    keep = pts[..., 3] > 0
    points = pts[..., :3][keep]
    if colours is None:
        return points, np.zeros((len(points), 3))
    return points, np.asarray(colours, dtype=np.float64)[::stride, ::stride][keep]
