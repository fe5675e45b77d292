"""Allocation stage for the voxel block hash.

1. ``mark_blocks``: every valid depth sample spans a segment from depth
   d - mu to d + mu; blocks met by the segment are flagged visible if present
   or get an allocation request keyed by their hash bucket (plain writes, the
   last request written into a bucket wins).
2. ``perform_allocations``: serve the requests from the free-block stack.
3. ``build_visible_list``: compact the entries whose blocks lie in the view
   frustum.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .math_core import Intrinsics, Pose
from .volume_index import (ALLOCATED, HASH_FULL, REACTIVATED, VOLUME_FULL,
                           HashFullError, HashTable, VolumeFullError,
                           find_entry, hash_bucket, insert_block)
from .voxel_model import _reset_block

NO_REQUEST, REQUEST_NEW, REQUEST_REACTIVATE = 0, 1, 2


@dataclass
class AllocationScratch:
    """Per-entry request/visibility arrays, sized to the hash table."""

    alloc_requests: np.ndarray
    alloc_pos: np.ndarray
    visibility: np.ndarray
    visible_list: np.ndarray

    @classmethod
    def for_table(cls, table: HashTable) -> "AllocationScratch":
        n = table.entry_count
        return cls(np.zeros(n, dtype=np.int8), np.zeros((n, 3), dtype=np.int16),
                   np.zeros(n, dtype=np.uint8), np.zeros(0, dtype=np.int32))

    def clear(self) -> None:
        self.alloc_requests[:] = NO_REQUEST
        self.visibility[:] = 0


@numba.njit(cache=True)
def segment_blocks(q0, q1, out):
    """Blocks (integer cells in block units) crossed by segment q0 -> q1,
    in traversal order.  Writes into ``out`` and returns the count."""
    cell = np.empty(3, dtype=np.int64)
    last = np.empty(3, dtype=np.int64)
    step = np.empty(3, dtype=np.int64)
    t_max = np.empty(3)
    t_delta = np.empty(3)
    for a in range(3):
        cell[a] = np.int64(np.floor(q0[a]))
        last[a] = np.int64(np.floor(q1[a]))
        d = q1[a] - q0[a]
        if d > 0:
            step[a] = 1
            t_delta[a] = 1.0 / d
            t_max[a] = (cell[a] + 1.0 - q0[a]) / d
        elif d < 0:
            step[a] = -1
            t_delta[a] = -1.0 / d
            t_max[a] = (cell[a] - q0[a]) / d
        else:
            step[a] = 0
            t_delta[a] = np.inf
            t_max[a] = np.inf
    # exactly |last - cell| steps per axis, so rounding in t_max can neither
    # stop short of the end cell nor overshoot it
    remaining = np.empty(3, dtype=np.int64)
    for a in range(3):
        remaining[a] = abs(last[a] - cell[a])
    n = 0
    limit = out.shape[0]
    while n < limit:
        out[n, 0] = cell[0]
        out[n, 1] = cell[1]
        out[n, 2] = cell[2]
        n += 1
        a = -1
        for b in range(3):
            if remaining[b] > 0 and (a < 0 or t_max[b] < t_max[a]):
                a = b
        if a < 0:
            break
        cell[a] += step[a]
        t_max[a] += t_delta[a]
        remaining[a] -= 1
    return n


@numba.njit(cache=True)
def _mark_blocks(depth, rot, trans, fx, fy, cx, cy, mu, block_metres,
                 pos, offset, ptr, mask, bucket_size, n_ordered,
                 alloc_requests, alloc_pos, visibility):
    h, w = depth.shape
    q0 = np.empty(3)
    q1 = np.empty(3)
    cells = np.empty((64, 3), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            d = depth[y, x]
            if d <= 0:
                continue
            dn = d - mu
            if dn < 1e-3:
                dn = 1e-3
            df = d + mu
            rx = (x - cx) / fx
            ry = (y - cy) / fy
            for a in range(3):
                q0[a] = (rot[a, 0] * rx * dn + rot[a, 1] * ry * dn + rot[a, 2] * dn
                         + trans[a]) / block_metres
                q1[a] = (rot[a, 0] * rx * df + rot[a, 1] * ry * df + rot[a, 2] * df
                         + trans[a]) / block_metres
            n = segment_blocks(q0, q1, cells)
            for k in range(n):
                bx = cells[k, 0]
                by = cells[k, 1]
                bz = cells[k, 2]
                e = find_entry(pos, offset, ptr, bx, by, bz, mask, bucket_size, n_ordered)
                if e >= 0:
                    if ptr[e] >= 0:
                        visibility[e] = 1
                    else:
                        alloc_requests[e] = REQUEST_REACTIVATE
                        alloc_pos[e, 0] = bx
                        alloc_pos[e, 1] = by
                        alloc_pos[e, 2] = bz
                else:
                    key = hash_bucket(bx, by, bz, mask) * bucket_size
                    alloc_requests[key] = REQUEST_NEW
                    alloc_pos[key, 0] = bx
                    alloc_pos[key, 1] = by
                    alloc_pos[key, 2] = bz


def mark_blocks(volume, depth: np.ndarray, pose: Pose, intr: Intrinsics, mu: float,
                scratch: AllocationScratch) -> None:
    """Flag present blocks along every depth sample's truncation segment and
    request allocation of missing ones.  No-op for a dense volume."""
    if not volume.is_hashed:
        return
    t, p = volume.table, volume.params
    cam_to_world = pose.inverse()
    _mark_blocks(np.ascontiguousarray(depth, dtype=np.float64),
                 cam_to_world.rotation, cam_to_world.translation,
                 intr.fx, intr.fy, intr.cx, intr.cy, float(mu), 8 * volume.voxel_size,
                 t.pos, t.offset, t.ptr, p.hash_mask, p.bucket_size, p.ordered_count,
                 scratch.alloc_requests, scratch.alloc_pos, scratch.visibility)


@numba.njit(cache=True)
def _perform_allocations(alloc_requests, alloc_pos, visibility, pos, offset, ptr,
                         free_blocks, free_block_count, free_excess, free_excess_count,
                         mask, bucket_size, n_ordered, sdf, w_depth, clr, w_color, init):
    allocated = 0
    for e in range(alloc_requests.shape[0]):
        if alloc_requests[e] == 0:
            continue
        alloc_requests[e] = 0
        entry, status = insert_block(pos, offset, ptr, free_blocks, free_block_count,
                                     free_excess, free_excess_count, alloc_pos[e, 0],
                                     alloc_pos[e, 1], alloc_pos[e, 2], mask, bucket_size,
                                     n_ordered)
        if status < 0:
            return allocated, status
        if status == ALLOCATED or status == REACTIVATED:
            _reset_block(sdf, w_depth, clr, w_color, ptr[entry], init)
            allocated += 1
        visibility[entry] = 1
    return allocated, 0


def perform_allocations(volume, scratch: AllocationScratch) -> int:
    """Serve pending requests; returns the number of blocks made resident."""
    if not volume.is_hashed:
        return 0
    t, p, s = volume.table, volume.params, volume.storage
    n, status = _perform_allocations(
        scratch.alloc_requests, scratch.alloc_pos, scratch.visibility, t.pos, t.offset,
        t.ptr, t.free_blocks, t.free_block_count, t.free_excess, t.free_excess_count,
        p.hash_mask, p.bucket_size, p.ordered_count, s.sdf, s.w_depth, s.clr, s.w_color,
        volume.voxel_type.sdf_initial_value())
    if status == VOLUME_FULL:
        raise VolumeFullError("voxel block array exhausted during allocation")
    if status == HASH_FULL:
        raise HashFullError("excess list exhausted during allocation")
    return int(n)


@numba.njit(cache=True, inline="always")
def block_in_view(bx, by, bz, block_metres, rot, trans, fx, fy, cx, cy, w, h,
                  margin, near, far):
    """Conservative test whether a block's projection overlaps the image
    (grown by ``margin`` pixels) within the depth range [near, far]."""
    zmin = np.inf
    zmax = -np.inf
    umin = np.inf
    umax = -np.inf
    vmin = np.inf
    vmax = -np.inf
    behind = False
    for c in range(8):
        X = (bx + (c & 1)) * block_metres
        Y = (by + ((c >> 1) & 1)) * block_metres
        Z = (bz + ((c >> 2) & 1)) * block_metres
        xc = rot[0, 0] * X + rot[0, 1] * Y + rot[0, 2] * Z + trans[0]
        yc = rot[1, 0] * X + rot[1, 1] * Y + rot[1, 2] * Z + trans[1]
        zc = rot[2, 0] * X + rot[2, 1] * Y + rot[2, 2] * Z + trans[2]
        zmin = min(zmin, zc)
        zmax = max(zmax, zc)
        if zc < 1e-6:
            behind = True
            continue
        u = fx * xc / zc + cx
        v = fy * yc / zc + cy
        umin = min(umin, u)
        umax = max(umax, u)
        vmin = min(vmin, v)
        vmax = max(vmax, v)
    if zmax < near or zmin > far:
        return False
    if behind:
        return True
    return not (umax < -margin or umin > w - 1 + margin
                or vmax < -margin or vmin > h - 1 + margin)


@numba.njit(cache=True)
def _visible_entries(pos, ptr, state_min, block_metres, rot, trans, fx, fy, cx, cy,
                     w, h, margin, near, far, flags):
    count = 0
    for e in range(ptr.shape[0]):
        if ptr[e] < state_min:
            continue
        if block_in_view(pos[e, 0], pos[e, 1], pos[e, 2], block_metres, rot, trans,
                         fx, fy, cx, cy, w, h, margin, near, far):
            flags[e] = 1
            count += 1
    out = np.empty(count, dtype=np.int32)
    k = 0
    for e in range(ptr.shape[0]):
        if flags[e]:
            out[k] = e
            k += 1
    return out


def visible_entries(volume, pose: Pose, intr: Intrinsics, margin: float = 0.0,
                    near: float = 0.1, far: float = 8.0, include_swapped: bool = False):
    """Ascending entry indices whose blocks are in the (grown) frustum."""
    flags = np.zeros(volume.table.entry_count, dtype=np.uint8)
    out = _visible_entries(volume.table.pos, volume.table.ptr, -1 if include_swapped else 0,
                           8 * volume.voxel_size, pose.rotation, pose.translation,
                           intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height,
                           float(margin), float(near), float(far), flags)
    return out, flags


def build_visible_list(volume, pose: Pose, intr: Intrinsics, scratch: AllocationScratch,
                       margin: float = 0.0, near: float = 0.1, far: float = 8.0) -> np.ndarray:
    """Compacted, ascending list of resident entries in the view frustum."""
    out, flags = visible_entries(volume, pose, intr, margin, near, far)
    scratch.visibility[:] = flags
    scratch.visible_list = out
    return out


def allocate_frame(volume, depth, pose, intr, mu, scratch, margin=0.0, near=0.1, far=8.0):
    """Run all three allocation stages; returns (new blocks, visible list)."""
    if not volume.is_hashed:
        return 0, np.zeros(0, dtype=np.int32)
    scratch.clear()
    mark_blocks(volume, depth, pose, intr, mu, scratch)
    n = perform_allocations(volume, scratch)
    vis = build_visible_list(volume, pose, intr, scratch, margin, near, far)
    return n, vis
