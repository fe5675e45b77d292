"""Fusing depth (and colour) frames into the TSDF.

The per-voxel update is shared by both backends; only the loop differs
(all voxels of the visible blocks for the hash, every voxel for the dense
array).  A voxel centre of integer voxel ``v`` lies at ``(v + 0.5) * voxel_size``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .math_core import Intrinsics, Pose
from .voxel_model import read_sdf, write_sdf


@dataclass(frozen=True)
class SceneParams:
    voxel_size: float = 0.004
    mu: float = 0.02
    max_weight: int = 100
    stop_integrating_at_max: bool = False

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.mu < 2 * self.voxel_size:
            raise ValueError("mu must span at least two voxels")
        if not 1 <= self.max_weight <= 255:
            raise ValueError("max_weight must be in [1, 255]")


@numba.njit(cache=True)
def depth_update(old_f, old_w, px, py, pz, rot, trans, fx, fy, cx, cy, mu, max_w,
                 stop_at_max, depth):
    """One voxel's depth update.  Returns (eta, new_f, new_w, updated)."""
    zc = rot[2, 0] * px + rot[2, 1] * py + rot[2, 2] * pz + trans[2]
    if zc <= 0:
        return -1.0, old_f, old_w, False
    xc = rot[0, 0] * px + rot[0, 1] * py + rot[0, 2] * pz + trans[0]
    yc = rot[1, 0] * px + rot[1, 1] * py + rot[1, 2] * pz + trans[1]
    u = fx * xc / zc + cx
    v = fy * yc / zc + cy
    h, w = depth.shape
    if u < 1 or u > w - 2 or v < 1 or v > h - 2:
        return -1.0, old_f, old_w, False
    depth_measure = depth[int(v + 0.5), int(u + 0.5)]
    if depth_measure <= 0.0:
        return -1.0, old_f, old_w, False
    eta = depth_measure - zc
    if eta < -mu:
        return eta, old_f, old_w, False
    if stop_at_max and old_w >= max_w:
        return eta, old_f, old_w, False
    new_f = min(1.0, eta / mu)
    new_f = old_w * old_f + new_f
    new_w = old_w + 1
    new_f /= new_w
    new_w = min(new_w, max_w)
    return eta, new_f, new_w, True


@numba.njit(cache=True, inline="always")
def color_update(clr, w_color, b, i, eta, px, py, pz, rot, trans, fx, fy, cx, cy, mu,
                 max_w, rgb):
    """Blend the RGB sample seen by voxel (b, i) into its colour; gated to
    voxels within the truncation band.  Returns whether it changed."""
    if abs(eta) > mu:
        return False
    zc = rot[2, 0] * px + rot[2, 1] * py + rot[2, 2] * pz + trans[2]
    if zc <= 0:
        return False
    xc = rot[0, 0] * px + rot[0, 1] * py + rot[0, 2] * pz + trans[0]
    yc = rot[1, 0] * px + rot[1, 1] * py + rot[1, 2] * pz + trans[1]
    u = fx * xc / zc + cx
    v = fy * yc / zc + cy
    h, w = rgb.shape[0], rgb.shape[1]
    if u < 1 or u > w - 2 or v < 1 or v > h - 2:
        return False
    iy = int(v + 0.5)
    ix = int(u + 0.5)
    old_w = np.int64(w_color[b, i])
    for c in range(3):
        clr[b, i, c] = int((old_w * float(clr[b, i, c]) + float(rgb[iy, ix, c])) / (old_w + 1))
    w_color[b, i] = min(old_w + 1, max_w)
    return True


@numba.njit(cache=True)
def _integrate_blocks(entries, pos, ptr, voxel_size, sdf, w_depth, clr, w_color,
                      quantized, has_color, rot, trans, intr, mu, max_w, stop_at_max,
                      depth, rgb_rot, rgb_trans, rgb_intr, rgb):
    fx, fy, cx, cy = intr[0], intr[1], intr[2], intr[3]
    count = 0
    for k in range(entries.shape[0]):
        e = entries[k]
        b = ptr[e]
        if b < 0:
            continue
        ox = pos[e, 0] * 8
        oy = pos[e, 1] * 8
        oz = pos[e, 2] * 8
        for lz in range(8):
            pz = (oz + lz + 0.5) * voxel_size
            for ly in range(8):
                py = (oy + ly + 0.5) * voxel_size
                for lx in range(8):
                    i = lx + ly * 8 + lz * 64
                    px = (ox + lx + 0.5) * voxel_size
                    eta, new_f, new_w, updated = depth_update(
                        read_sdf(sdf, b, i, quantized), np.int64(w_depth[b, i]), px, py, pz,
                        rot, trans, fx, fy, cx, cy, mu, max_w, stop_at_max, depth)
                    if updated:
                        write_sdf(sdf, b, i, new_f, quantized)
                        w_depth[b, i] = new_w
                        count += 1
                    if has_color:
                        color_update(clr, w_color, b, i, eta, px, py, pz, rgb_rot, rgb_trans,
                                     rgb_intr[0], rgb_intr[1], rgb_intr[2], rgb_intr[3], mu,
                                     max_w, rgb)
    return count


@numba.njit(cache=True)
def _integrate_dense(size, offset, voxel_size, sdf, w_depth, clr, w_color, quantized,
                     has_color, rot, trans, intr, mu, max_w, stop_at_max, depth,
                     rgb_rot, rgb_trans, rgb_intr, rgb):
    fx, fy, cx, cy = intr[0], intr[1], intr[2], intr[3]
    count = 0
    sx, sy, sz = size[0], size[1], size[2]
    for z in range(sz):
        pz = (offset[2] + z + 0.5) * voxel_size
        for y in range(sy):
            py = (offset[1] + y + 0.5) * voxel_size
            for x in range(sx):
                px = (offset[0] + x + 0.5) * voxel_size
                i = x + y * sx + z * sx * sy
                eta, new_f, new_w, updated = depth_update(
                    read_sdf(sdf, 0, i, quantized), np.int64(w_depth[0, i]), px, py, pz,
                    rot, trans, fx, fy, cx, cy, mu, max_w, stop_at_max, depth)
                if updated:
                    write_sdf(sdf, 0, i, new_f, quantized)
                    w_depth[0, i] = new_w
                    count += 1
                if has_color:
                    color_update(clr, w_color, 0, i, eta, px, py, pz, rgb_rot, rgb_trans,
                                 rgb_intr[0], rgb_intr[1], rgb_intr[2], rgb_intr[3], mu,
                                 max_w, rgb)
    return count


_NO_RGB = np.zeros((1, 1, 3), dtype=np.uint8)


def integrate_frame(volume, visible_list, depth: np.ndarray, pose: Pose, intr: Intrinsics,
                    params: SceneParams, rgb: np.ndarray = None, rgb_pose: Pose = None,
                    rgb_intr: Intrinsics = None) -> int:
    """Fuse one frame; returns the number of depth-updated voxels.

    ``pose`` maps world to the depth camera.  Colour is fused only for colour
    voxel types and when ``rgb`` is given (``rgb_pose`` defaults to ``pose``).
    """
    s = volume.storage
    has_color = bool(s.has_color and rgb is not None)
    rgb_pose = rgb_pose or pose
    rgb_intr = rgb_intr or intr
    rgb_arr = np.ascontiguousarray(rgb, dtype=np.uint8) if has_color else _NO_RGB
    common = (s.sdf, s.w_depth, s.clr, s.w_color, s.quantized, has_color,
              pose.rotation, pose.translation, intr.params, float(params.mu),
              int(params.max_weight), bool(params.stop_integrating_at_max),
              np.ascontiguousarray(depth, dtype=np.float64), rgb_pose.rotation,
              rgb_pose.translation, rgb_intr.params, rgb_arr)
    if volume.is_hashed:
        entries = np.asarray(visible_list, dtype=np.int32)
        return int(_integrate_blocks(entries, volume.table.pos, volume.table.ptr,
                                     volume.voxel_size, *common))
    idx = volume.index
    return int(_integrate_dense(np.asarray(idx.size, dtype=np.int64),
                                np.asarray(idx.offset, dtype=np.int64),
                                volume.voxel_size, *common))


def update_voxel_depth(voxel, pt_model, pose: Pose, intr: Intrinsics, mu: float,
                       max_w: int, depth: np.ndarray, stop_at_max: bool = False) -> float:
    """Update a single voxel object in place; returns eta (-1 on rejection)."""
    x, y, z = (float(v) for v in pt_model[:3])
    eta, new_f, new_w, updated = depth_update(
        voxel.value_to_float(voxel.sdf), int(voxel.w_depth), x, y, z, pose.rotation,
        pose.translation, intr.fx, intr.fy, intr.cx, intr.cy, float(mu), int(max_w),
        stop_at_max, np.ascontiguousarray(depth, dtype=np.float64))
    if updated:
        voxel.sdf = voxel.float_to_value(new_f)
        voxel.w_depth = int(new_w)
    return float(eta)


def update_voxel_color(voxel, pt_model, pose: Pose, intr: Intrinsics, mu: float,
                       max_w: int, rgb: np.ndarray, eta: float) -> None:
    """Blend colour into a single voxel object; ``eta`` is its depth residual."""
    x, y, z = (float(v) for v in pt_model[:3])
    clr = np.array([[voxel.clr]], dtype=np.uint8)
    w_color = np.array([[voxel.w_color]], dtype=np.uint8)
    color_update(clr, w_color, 0, 0, float(eta), x, y, z, pose.rotation, pose.translation,
                 intr.fx, intr.fy, intr.cx, intr.cy, float(mu), int(max_w),
                 np.ascontiguousarray(rgb, dtype=np.uint8))
    voxel.clr = tuple(int(c) for c in clr[0, 0])
    voxel.w_color = int(w_color[0, 0])
