"""Paging voxel blocks between the active block array and a host store.

The host store has one slot per hash entry, so a block is addressed by its
entry index alone.  Each frame at most ``budget`` blocks move in each
direction.  A block whose swapped-out entry is hit by new depth gets a fresh
active slot at allocation time; when its host data comes back both copies
are fused by weight (secondary integration).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .allocation import visible_entries
from .math_core import Intrinsics, Pose
from .volume_index import BLOCK_SIZE3, SWAPPED_OUT, pop_block, push_block
from .voxel_model import VOXEL_TYPES_BY_TAG


class SwapState(IntEnum):
    INACTIVE = 0
    NEEDS_SWAP_IN = 1
    IN_TRANSFER = 2
    ACTIVE = 3
    NEEDS_SWAP_OUT = 4


# ----------------------------------------------------------------------------
# host stores

MAGIC = b"BFHS"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


def host_record_dtype(voxel_type) -> np.dtype:
    return np.dtype([("entry", "<i4"), ("voxels", voxel_type.record_dtype(), (BLOCK_SIZE3,))])


class MemoryHostStore:
    """Host slots kept in a dict (entry index -> voxel records)."""

    def __init__(self, voxel_type, entry_count: int):
        self.voxel_type = voxel_type
        self.entry_count = int(entry_count)
        self._slots = {}

    def write(self, entries, records) -> None:
        for e, rec in zip(entries, records):
            self._slots[int(e)] = np.array(rec, copy=True)

    def read(self, entries) -> np.ndarray:
        out = np.zeros((len(entries), BLOCK_SIZE3), dtype=self.voxel_type.record_dtype())
        for k, e in enumerate(entries):
            out[k] = self._slots[int(e)]
        return out

    def close(self) -> None:
        pass


class FileHostStore:
    """Host slots in a fixed-layout, memory-mapped file.

    Layout: a 16-byte header (magic, version, voxel type tag, entry count)
    followed by ``entry_count`` little-endian records of (entry index, 512
    voxels).  The file is created sparse, so untouched slots cost no disk.
    """

    def __init__(self, path, voxel_type, entry_count: int):
        self.path = Path(path)
        self.voxel_type = voxel_type
        self.entry_count = int(entry_count)
        self.dtype = host_record_dtype(voxel_type)
        size = _HEADER.size + self.entry_count * self.dtype.itemsize
        with open(self.path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, voxel_type.tag, self.entry_count))
            fh.truncate(size)
        self._map = np.memmap(self.path, dtype=self.dtype, mode="r+", offset=_HEADER.size,
                              shape=(self.entry_count,))

    @staticmethod
    def read_header(path):
        with open(path, "rb") as fh:
            magic, version, tag, count = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a host block store")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported store version {version}")
        return VOXEL_TYPES_BY_TAG[tag], count

    def write(self, entries, records) -> None:
        entries = np.asarray(entries, dtype=np.int64)
        order = np.argsort(entries, kind="stable")
        for k in order:
            self._map["entry"][entries[k]] = entries[k]
            self._map["voxels"][entries[k]] = records[k]

    def read(self, entries) -> np.ndarray:
        entries = np.asarray(entries, dtype=np.int64)
        recs = self._map[entries]
        if np.any(recs["entry"] != entries):
            raise ValueError("host store record does not match its entry index")
        return np.array(recs["voxels"])

    def close(self) -> None:
        self._map.flush()
        del self._map


# ----------------------------------------------------------------------------
# cache and metrics


@dataclass
class SwapMetrics:
    swapped_in: int = 0
    swapped_out: int = 0
    deferred: int = 0
    bytes_in: int = 0
    bytes_out: int = 0

    def merged(self, other: "SwapMetrics") -> "SwapMetrics":
        return SwapMetrics(self.swapped_in + other.swapped_in,
                           self.swapped_out + other.swapped_out,
                           self.deferred + other.deferred,
                           self.bytes_in + other.bytes_in,
                           self.bytes_out + other.bytes_out)


@dataclass
class GlobalCache:
    """Host-side block store plus per-entry bookkeeping."""

    host: object
    budget: int = 100
    margin: float = 48.0
    has_stored_data: np.ndarray = field(default=None, repr=False)
    swap_states: np.ndarray = field(default=None, repr=False)
    total: SwapMetrics = field(default_factory=SwapMetrics)

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("transfer budget must be at least one block")
        n = self.host.entry_count
        if self.has_stored_data is None:
            self.has_stored_data = np.zeros(n, dtype=bool)
        if self.swap_states is None:
            self.swap_states = np.zeros(n, dtype=np.int8)

    @classmethod
    def for_volume(cls, volume, budget: int = 100, margin: float = 48.0, path=None):
        n = volume.table.entry_count
        host = (FileHostStore(path, volume.voxel_type, n) if path is not None
                else MemoryHostStore(volume.voxel_type, n))
        return cls(host, budget, margin)

    @property
    def record_bytes(self) -> int:
        return host_record_dtype(self.host.voxel_type).itemsize


def fuse_records(host, active, max_w: int, quantized: bool):
    """Weighted fusion F = (F_h W_h + F_a W_a) / (W_h + W_a), W capped.

    Quantized values are combined in the integer domain with truncation,
    so a zero-weight side leaves the other bit-identical.
    """
    out = np.array(active, copy=True)
    wh = host["w_depth"].astype(np.int64)
    wa = active["w_depth"].astype(np.int64)
    den = wh + wa
    safe = np.maximum(den, 1)
    if quantized:
        num = host["sdf"].astype(np.int64) * wh + active["sdf"].astype(np.int64) * wa
        fused = np.trunc(num / safe).astype(np.int16)
    else:
        num = host["sdf"].astype(np.float64) * wh + active["sdf"].astype(np.float64) * wa
        fused = (num / safe).astype(np.float32)
    out["sdf"] = np.where(den > 0, fused, host["sdf"])
    out["w_depth"] = np.minimum(den, max_w)
    if "clr" in host.dtype.names:
        ch = host["w_color"].astype(np.int64)
        ca = active["w_color"].astype(np.int64)
        cden = ch + ca
        cnum = (host["clr"].astype(np.int64) * ch[..., None]
                + active["clr"].astype(np.int64) * ca[..., None])
        mixed = (cnum // np.maximum(cden, 1)[..., None]).astype(np.uint8)
        out["clr"] = np.where((cden > 0)[..., None], mixed, host["clr"])
        out["w_color"] = np.minimum(cden, max_w)
    return out


def _frustum_flags(volume, pose, intr, margin):
    _, flags = visible_entries(volume, pose, intr, margin=margin, include_swapped=True)
    return flags.astype(bool)


def request_swap_ins(volume, cache: GlobalCache, pose: Pose, intr: Intrinsics,
                     flags=None) -> int:
    """Mark entries with host data inside the enlarged frustum.

    Requests are recomputed from scratch every frame, so requests for blocks
    that left the frustum before being served are dropped.
    """
    if flags is None:
        flags = _frustum_flags(volume, pose, intr, cache.margin)
    st = cache.swap_states
    st[st == SwapState.NEEDS_SWAP_IN] = SwapState.INACTIVE
    want = flags & cache.has_stored_data & (volume.table.ptr >= SWAPPED_OUT)
    st[want] = SwapState.NEEDS_SWAP_IN
    return int(want.sum())


def execute_swap_in(volume, cache: GlobalCache, max_w: int, budget: int = None) -> SwapMetrics:
    """Serve up to ``budget`` swap-in requests in entry order."""
    budget = cache.budget if budget is None else budget
    t, s = volume.table, volume.storage
    pending = np.flatnonzero(cache.swap_states == SwapState.NEEDS_SWAP_IN)
    m = SwapMetrics()
    batch = pending[:budget]
    if len(batch) == 0:
        return m
    cache.swap_states[batch] = SwapState.IN_TRANSFER
    records = cache.host.read(batch)
    served = []
    for k, e in enumerate(batch):
        if t.ptr[e] < 0:
            slot = pop_block(t.free_blocks, t.free_block_count)
            if slot < 0:
                # no room in the active array: keep the request for later
                cache.swap_states[batch[k:]] = SwapState.NEEDS_SWAP_IN
                m.deferred = len(batch) - k
                break
            t.ptr[e] = slot
            s.reset_block(slot)
        served.append(k)
    if served:
        idx = np.asarray(served)
        entries = batch[idx]
        slots = t.ptr[entries]
        fused = fuse_records(records[idx], s.block_records(slots), max_w, s.quantized)
        s.store_records(slots, fused)
        cache.has_stored_data[entries] = False
        cache.swap_states[entries] = SwapState.ACTIVE
    m.swapped_in = len(served)
    m.bytes_in = m.swapped_in * cache.record_bytes
    return m


def request_swap_outs(volume, cache: GlobalCache, pose: Pose, intr: Intrinsics,
                      flags=None) -> int:
    """Mark resident blocks that are outside the enlarged frustum."""
    if flags is None:
        flags = _frustum_flags(volume, pose, intr, cache.margin)
    st = cache.swap_states
    st[st == SwapState.NEEDS_SWAP_OUT] = SwapState.ACTIVE
    want = ~flags & (volume.table.ptr >= 0) & (st != SwapState.NEEDS_SWAP_IN)
    st[want] = SwapState.NEEDS_SWAP_OUT
    return int(want.sum())


def execute_swap_out(volume, cache: GlobalCache, max_w: int, budget: int = None) -> SwapMetrics:
    """Move up to ``budget`` marked blocks to the host, in entry order."""
    budget = cache.budget if budget is None else budget
    t, s = volume.table, volume.storage
    batch = np.flatnonzero(cache.swap_states == SwapState.NEEDS_SWAP_OUT)[:budget]
    m = SwapMetrics()
    if len(batch) == 0:
        return m
    slots = t.ptr[batch].copy()
    records = s.block_records(slots)
    old = cache.has_stored_data[batch]
    if old.any():
        records[old] = fuse_records(cache.host.read(batch[old]), records[old], max_w,
                                    s.quantized)
    cache.host.write(batch, records)
    cache.has_stored_data[batch] = True
    for e, slot in zip(batch, slots):
        push_block(t.free_blocks, t.free_block_count, slot)
        t.ptr[e] = SWAPPED_OUT
    cache.swap_states[batch] = SwapState.INACTIVE
    m.swapped_out = len(batch)
    m.bytes_out = m.swapped_out * cache.record_bytes
    return m


def swap_frame(volume, cache: GlobalCache, pose: Pose, intr: Intrinsics,
               max_w: int) -> SwapMetrics:
    """One frame of swapping: requests and transfers in both directions."""
    flags = _frustum_flags(volume, pose, intr, cache.margin)
    request_swap_ins(volume, cache, pose, intr, flags)
    m_in = execute_swap_in(volume, cache, max_w)
    request_swap_outs(volume, cache, pose, intr, flags)
    m_out = execute_swap_out(volume, cache, max_w)
    m = m_in.merged(m_out)
    cache.total = cache.total.merged(m)
    return m


def flush(volume, cache: GlobalCache, max_w: int) -> SwapMetrics:
    """Bring every block with host data back into the active array,
    ignoring the per-frame budget."""
    st = cache.swap_states
    st[:] = np.where(cache.has_stored_data, SwapState.NEEDS_SWAP_IN, st)
    st[(st == SwapState.NEEDS_SWAP_OUT)] = SwapState.ACTIVE
    m = execute_swap_in(volume, cache, max_w, budget=max(1, int(cache.has_stored_data.sum())))
    cache.total = cache.total.merged(m)
    return m


def forbidden_pairs(volume, cache: GlobalCache) -> int:
    """Entries in an inconsistent state: queued for swap-in with nothing on
    the host, queued for swap-out while not resident, or swapped out with
    no host data."""
    ptr, st, has = volume.table.ptr, cache.swap_states, cache.has_stored_data
    bad = ((st == SwapState.NEEDS_SWAP_IN) & ~has)
    bad |= (st == SwapState.NEEDS_SWAP_OUT) & (ptr < 0)
    bad |= (ptr == SWAPPED_OUT) & ~has
    return int(bad.sum())


__all__ = ["SwapState", "SwapMetrics", "GlobalCache", "MemoryHostStore", "FileHostStore",
           "host_record_dtype", "fuse_records", "request_swap_ins", "execute_swap_in",
           "request_swap_outs", "execute_swap_out", "swap_frame", "flush",
           "forbidden_pairs"]
