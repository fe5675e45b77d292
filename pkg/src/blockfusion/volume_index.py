"""Voxel indexing backends: a dense array and a voxel block hash.

Hash entry states (``ptr``): ``>= 0`` is a slot in the voxel block array,
``-1`` marks a block whose data lives in the host store (swapped out),
``< -1`` is an unused entry.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .voxel_model import VoxelS, VoxelStorage, _reset_block

BLOCK_SIDE = 8
BLOCK_SIZE3 = BLOCK_SIDE ** 3
SWAPPED_OUT = -1
UNALLOCATED = -2

# insert_block status codes
EXISTING, ALLOCATED, REACTIVATED = 0, 1, 2
VOLUME_FULL, HASH_FULL = -1, -2


class VolumeFullError(RuntimeError):
    """No free block left in the voxel block array."""


class HashFullError(RuntimeError):
    """No free entry left in the excess list."""


@numba.njit(cache=True, inline="always")
def hash_bucket(x, y, z, mask):
    h = ((np.uint32(x) * np.uint32(73856093))
         ^ (np.uint32(y) * np.uint32(19349669))
         ^ (np.uint32(z) * np.uint32(83492791)))
    return np.int64(h & np.uint32(mask))


def hash_index(block_pos, hash_mask: int) -> int:
    """Bucket index of a block position (32-bit wrap-around arithmetic)."""
    x, y, z = (int(v) for v in block_pos)
    return int(hash_bucket(x, y, z, hash_mask))


def voxel_to_block(point):
    """Split integer voxel coordinates into (block position, linear index)."""
    p = np.asarray(point, dtype=np.int64)
    block = np.floor_divide(p, BLOCK_SIDE)
    local = p - BLOCK_SIDE * block
    linear = local[..., 0] + local[..., 1] * BLOCK_SIDE + local[..., 2] * BLOCK_SIDE * BLOCK_SIDE
    if p.ndim == 1:
        return tuple(int(v) for v in block), int(linear)
    return block, linear


@dataclass(frozen=True)
class DenseArrayIndex:
    size: tuple = (512, 512, 512)
    offset: tuple = (-256, -256, 0)

    @property
    def num_voxel_blocks(self) -> int:
        return 1

    @property
    def voxel_block_size(self) -> int:
        sx, sy, sz = self.size
        return sx * sy * sz


def dense_lookup(index: DenseArrayIndex, point):
    """Row-major offset of a voxel, or ``None`` outside the volume."""
    rel = [int(p) - int(o) for p, o in zip(point, index.offset)]
    sx, sy, sz = index.size
    if not all(0 <= r < s for r, s in zip(rel, index.size)):
        return None
    return rel[0] + rel[1] * sx + rel[2] * sx * sy


@dataclass(frozen=True)
class HashParams:
    bucket_count: int = 2 ** 20
    bucket_size: int = 2
    excess_count: int = 2 ** 17
    vba_blocks: int = 2 ** 18

    def __post_init__(self):
        if self.bucket_count & (self.bucket_count - 1):
            raise ValueError("bucket_count must be a power of two")

    @property
    def hash_mask(self) -> int:
        return self.bucket_count - 1

    @property
    def ordered_count(self) -> int:
        return self.bucket_count * self.bucket_size

    @property
    def entry_count(self) -> int:
        return self.ordered_count + self.excess_count


class HashTable:
    """Ordered buckets followed by an unordered excess list, plus the free
    stacks for voxel blocks and excess entries."""

    def __init__(self, params: HashParams = HashParams()):
        self.params = params
        n = params.entry_count
        self.pos = np.zeros((n, 3), dtype=np.int16)
        self.offset = np.zeros(n, dtype=np.int32)
        self.ptr = np.full(n, UNALLOCATED, dtype=np.int32)
        self.free_blocks = np.arange(params.vba_blocks, dtype=np.int32)
        self.free_block_count = np.array([params.vba_blocks], dtype=np.int64)
        self.free_excess = np.arange(params.excess_count, dtype=np.int32)
        self.free_excess_count = np.array([params.excess_count], dtype=np.int64)

    @property
    def entry_count(self) -> int:
        return self.params.entry_count

    def allocated_entries(self) -> np.ndarray:
        return np.flatnonzero(self.ptr >= 0)

    def known_entries(self) -> np.ndarray:
        """Entries holding a block, on either side of the swap boundary."""
        return np.flatnonzero(self.ptr >= SWAPPED_OUT)

    def find(self, block_pos) -> int:
        """Entry index for ``block_pos`` (active or swapped out), or -1."""
        p = self.params
        x, y, z = (int(v) for v in block_pos)
        return int(find_entry(self.pos, self.offset, self.ptr, x, y, z,
                              p.hash_mask, p.bucket_size, p.ordered_count))


class HashVolume:
    """Voxel block hash: hash table plus voxel block array."""

    is_hashed = True

    def __init__(self, voxel_type=VoxelS, voxel_size: float = 0.004,
                 params: HashParams = HashParams()):
        self.voxel_type = voxel_type
        self.voxel_size = float(voxel_size)
        self.params = params
        self.table = HashTable(params)
        self.storage = VoxelStorage(voxel_type, params.vba_blocks, BLOCK_SIZE3)
        self._dense_dummy = np.zeros(3, dtype=np.int64)

    def kernel_index(self):
        t, p = self.table, self.params
        return (True, t.pos, t.offset, t.ptr, p.hash_mask, p.bucket_size,
                p.ordered_count, self._dense_dummy, self._dense_dummy, self.storage.w_depth)

    @property
    def allocated_block_count(self) -> int:
        return int(self.params.vba_blocks - self.table.free_block_count[0])


class DenseVolume:
    """Fixed-size dense voxel array (a single block of all voxels)."""

    is_hashed = False

    def __init__(self, voxel_type=VoxelS, voxel_size: float = 0.004,
                 index: DenseArrayIndex = DenseArrayIndex()):
        self.voxel_type = voxel_type
        self.voxel_size = float(voxel_size)
        self.index = index
        self.storage = VoxelStorage(voxel_type, 1, index.voxel_block_size)
        self.storage.reset_all()
        self._dummy_pos = np.zeros((1, 3), dtype=np.int16)
        self._dummy_i32 = np.zeros(1, dtype=np.int32)

    def kernel_index(self):
        return (False, self._dummy_pos, self._dummy_i32, self._dummy_i32, 0, 1, 0,
                np.asarray(self.index.size, dtype=np.int64),
                np.asarray(self.index.offset, dtype=np.int64), self.storage.w_depth)

    def world_bounds(self):
        lo = np.asarray(self.index.offset, dtype=np.float64) * self.voxel_size
        hi = lo + np.asarray(self.index.size, dtype=np.float64) * self.voxel_size
        return lo, hi


# ----------------------------------------------------------------------------
# compiled hash operations


@numba.njit(cache=True)
def find_entry(pos, offset, ptr, x, y, z, mask, bucket_size, n_ordered):
    """Entry holding block (x, y, z) with ptr >= -1, else -1."""
    base = hash_bucket(x, y, z, mask) * bucket_size
    link = 0
    for k in range(bucket_size):
        e = base + k
        if pos[e, 0] == x and pos[e, 1] == y and pos[e, 2] == z and ptr[e] >= -1:
            return e
        link = offset[e] - 1
    while link >= 0:
        e = n_ordered + link
        if pos[e, 0] == x and pos[e, 1] == y and pos[e, 2] == z and ptr[e] >= -1:
            return e
        link = offset[e] - 1
    return -1


@numba.njit(cache=True)
def find_block(pos, offset, ptr, x, y, z, mask, bucket_size, n_ordered):
    """Voxel block array slot of block (x, y, z), or -1 if not resident."""
    base = hash_bucket(x, y, z, mask) * bucket_size
    link = 0
    for k in range(bucket_size):
        e = base + k
        if pos[e, 0] == x and pos[e, 1] == y and pos[e, 2] == z and ptr[e] >= 0:
            return ptr[e]
        link = offset[e] - 1
    while link >= 0:
        e = n_ordered + link
        if pos[e, 0] == x and pos[e, 1] == y and pos[e, 2] == z and ptr[e] >= 0:
            return ptr[e]
        link = offset[e] - 1
    return -1


@numba.njit(cache=True)
def pop_block(free_blocks, free_block_count):
    if free_block_count[0] <= 0:
        return -1
    free_block_count[0] -= 1
    return free_blocks[free_block_count[0]]


@numba.njit(cache=True)
def push_block(free_blocks, free_block_count, slot):
    free_blocks[free_block_count[0]] = slot
    free_block_count[0] += 1


@numba.njit(cache=True)
def insert_block(pos, offset, ptr, free_blocks, free_block_count, free_excess,
                 free_excess_count, x, y, z, mask, bucket_size, n_ordered):
    """Make block (x, y, z) resident.  Returns (entry, status)."""
    e = find_entry(pos, offset, ptr, x, y, z, mask, bucket_size, n_ordered)
    if e >= 0:
        if ptr[e] >= 0:
            return e, EXISTING
        slot = pop_block(free_blocks, free_block_count)
        if slot < 0:
            return e, VOLUME_FULL
        ptr[e] = slot
        return e, REACTIVATED
    base = hash_bucket(x, y, z, mask) * bucket_size
    for k in range(bucket_size):
        e = base + k
        if ptr[e] < -1:
            slot = pop_block(free_blocks, free_block_count)
            if slot < 0:
                return -1, VOLUME_FULL
            pos[e, 0] = x
            pos[e, 1] = y
            pos[e, 2] = z
            ptr[e] = slot
            return e, ALLOCATED
    tail = base + bucket_size - 1
    while offset[tail] >= 1:
        tail = n_ordered + offset[tail] - 1
    if free_excess_count[0] <= 0:
        return -1, HASH_FULL
    slot = pop_block(free_blocks, free_block_count)
    if slot < 0:
        return -1, VOLUME_FULL
    free_excess_count[0] -= 1
    ex = free_excess[free_excess_count[0]]
    e = n_ordered + ex
    pos[e, 0] = x
    pos[e, 1] = y
    pos[e, 2] = z
    ptr[e] = slot
    offset[e] = 0
    offset[tail] = ex + 1
    return e, ALLOCATED


@numba.njit(cache=True, inline="always")
def locate_voxel(ix, vx, vy, vz):
    """(block slot, linear index) of integer voxel (vx, vy, vz); slot -1 if
    the voxel is not stored."""
    if ix[0]:
        bx = vx // 8
        by = vy // 8
        bz = vz // 8
        slot = find_block(ix[1], ix[2], ix[3], bx, by, bz, ix[4], ix[5], ix[6])
        lin = (vx - 8 * bx) + (vy - 8 * by) * 8 + (vz - 8 * bz) * 64
        return slot, lin
    size = ix[7]
    off = ix[8]
    rx = vx - off[0]
    ry = vy - off[1]
    rz = vz - off[2]
    if rx < 0 or ry < 0 or rz < 0 or rx >= size[0] or ry >= size[1] or rz >= size[2]:
        return -1, 0
    return 0, rx + ry * size[0] + rz * size[0] * size[1]


@numba.njit(cache=True, inline="always")
def observed_voxel(ix, vx, vy, vz):
    """Like :func:`locate_voxel` but slot -1 also for voxels that were never
    updated (weight 0): their SDF is the initial value, not a measurement."""
    slot, lin = locate_voxel(ix, vx, vy, vz)
    if slot >= 0 and ix[9][slot, lin] == 0:
        return -1, lin
    return slot, lin


@numba.njit(cache=True, inline="always")
def block_present(ix, vx, vy, vz):
    """Whether the block containing voxel (vx, vy, vz) is resident."""
    slot, _ = locate_voxel(ix, vx, vy, vz)
    return slot >= 0


# ----------------------------------------------------------------------------
# Python-level operations


def retrieve(volume, point):
    """Voxel at integer voxel coordinates ``point`` and whether it was found.

    Misses return a default-constructed voxel.
    """
    x, y, z = (int(v) for v in point)
    slot, lin = locate_voxel(volume.kernel_index(), x, y, z)
    if slot < 0:
        return volume.voxel_type(), False
    return volume.storage.get(slot, lin), True


def insert(volume: HashVolume, block_pos) -> int:
    """Allocate ``block_pos`` (idempotent) and return its voxel block slot."""
    t, p = volume.table, volume.params
    x, y, z = (int(v) for v in block_pos)
    e, status = insert_block(t.pos, t.offset, t.ptr, t.free_blocks, t.free_block_count,
                             t.free_excess, t.free_excess_count, x, y, z,
                             p.hash_mask, p.bucket_size, p.ordered_count)
    if status == VOLUME_FULL:
        raise VolumeFullError(f"no free voxel block for {block_pos}")
    if status == HASH_FULL:
        raise HashFullError(f"excess list exhausted inserting {block_pos}")
    slot = int(t.ptr[e])
    if status != EXISTING:
        s = volume.storage
        _reset_block(s.sdf, s.w_depth, s.clr, s.w_color, slot, volume.voxel_type.sdf_initial_value())
    return slot


def write_voxel(volume, point, voxel) -> None:
    """Store ``voxel`` at integer voxel coordinates (block must be resident)."""
    x, y, z = (int(v) for v in point)
    slot, lin = locate_voxel(volume.kernel_index(), x, y, z)
    if slot < 0:
        raise KeyError(f"voxel {point} is not stored")
    volume.storage.set(slot, lin, voxel)


def make_volume(backend: str, voxel_type=VoxelS, voxel_size: float = 0.004,
                hash_params: HashParams = HashParams(),
                dense_index: DenseArrayIndex = DenseArrayIndex()):
    if backend == "hash":
        return HashVolume(voxel_type, voxel_size, hash_params)
    if backend == "dense":
        return DenseVolume(voxel_type, voxel_size, dense_index)
    raise ValueError(f"unknown backend {backend!r}")
