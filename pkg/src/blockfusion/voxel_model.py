"""Voxel payload types, SDF quantization and block storage.

A volume stores voxels structure-of-arrays style so that compiled kernels can
work on plain numpy buffers: ``sdf`` and ``w_depth`` always, ``clr`` and
``w_color`` only for colour voxel types (zero-width otherwise).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import ClassVar

import numba
import numpy as np

SDF_SCALE = 32767.0
SDF_INITIAL_VALUE = 32767


def sdf_value_to_float(q):
    """Dequantize a stored 16-bit SDF value."""
    if np.ndim(q) == 0:
        return float(q) / SDF_SCALE
    return np.asarray(q, dtype=np.float64) / SDF_SCALE


def sdf_float_to_value(f):
    """Quantize an SDF value; clamped to [-1, 1], truncated toward zero."""
    if np.ndim(f) == 0:
        return int(min(1.0, max(-1.0, float(f))) * SDF_SCALE)
    f = np.clip(np.asarray(f, dtype=np.float64), -1.0, 1.0)
    return np.trunc(f * SDF_SCALE).astype(np.int16)


@dataclass
class VoxelS:
    sdf: int = SDF_INITIAL_VALUE
    w_depth: int = 0

    has_color_information: ClassVar[bool] = False
    quantized: ClassVar[bool] = True
    tag: ClassVar[int] = 0
    sdf_dtype: ClassVar[type] = np.int16

    @classmethod
    def sdf_initial_value(cls):
        return SDF_INITIAL_VALUE if cls.quantized else 1.0

    @classmethod
    def value_to_float(cls, v) -> float:
        return sdf_value_to_float(v) if cls.quantized else float(v)

    @classmethod
    def float_to_value(cls, f):
        if cls.quantized:
            return sdf_float_to_value(f)
        return float(np.float32(min(1.0, max(-1.0, f))))

    @property
    def sdf_float(self) -> float:
        return self.value_to_float(self.sdf)

    @classmethod
    def record_dtype(cls) -> np.dtype:
        """Packed little-endian layout of one voxel on disk."""
        fields = [("sdf", "<i2" if cls.quantized else "<f4"), ("w_depth", "u1")]
        if cls.has_color_information:
            fields += [("clr", "u1", (3,)), ("w_color", "u1")]
        return np.dtype(fields)


@dataclass
class VoxelF(VoxelS):
    sdf: float = 1.0

    quantized: ClassVar[bool] = False
    tag: ClassVar[int] = 1
    sdf_dtype: ClassVar[type] = np.float32


@dataclass
class VoxelSRgb(VoxelS):
    clr: tuple = (0, 0, 0)
    w_color: int = 0

    has_color_information: ClassVar[bool] = True
    tag: ClassVar[int] = 2


@dataclass
class VoxelFRgb(VoxelF):
    clr: tuple = (0, 0, 0)
    w_color: int = 0

    has_color_information: ClassVar[bool] = True
    tag: ClassVar[int] = 3


VOXEL_TYPES = {"s": VoxelS, "f": VoxelF, "s_rgb": VoxelSRgb, "f_rgb": VoxelFRgb}
VOXEL_TYPES_BY_TAG = {cls.tag: cls for cls in VOXEL_TYPES.values()}


@dataclass
class VoxelStorage:
    """``block_count`` blocks of ``block_size`` voxels of ``voxel_type``.

    Buffers start zero-filled (lazily committed by the OS); a block must be
    reset with :meth:`reset_block` before first use.
    """

    voxel_type: type
    block_count: int
    block_size: int
    sdf: np.ndarray = field(init=False, repr=False)
    w_depth: np.ndarray = field(init=False, repr=False)
    clr: np.ndarray = field(init=False, repr=False)
    w_color: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n, m = self.block_count, self.block_size
        self.sdf = np.zeros((n, m), dtype=self.voxel_type.sdf_dtype)
        self.w_depth = np.zeros((n, m), dtype=np.uint8)
        c = m if self.voxel_type.has_color_information else 0
        self.clr = np.zeros((n, c, 3), dtype=np.uint8)
        self.w_color = np.zeros((n, c), dtype=np.uint8)

    @property
    def quantized(self) -> bool:
        return self.voxel_type.quantized

    @property
    def has_color(self) -> bool:
        return self.voxel_type.has_color_information

    def reset_all(self) -> None:
        self.sdf[:] = self.voxel_type.sdf_initial_value()
        self.w_depth[:] = 0
        self.clr[:] = 0
        self.w_color[:] = 0

    def reset_block(self, b: int) -> None:
        _reset_block(self.sdf, self.w_depth, self.clr, self.w_color, b,
                     self.voxel_type.sdf_initial_value())

    def get(self, b: int, i: int):
        if self.has_color:
            return self.voxel_type(self.sdf[b, i].item(), int(self.w_depth[b, i]),
                                   tuple(int(c) for c in self.clr[b, i]),
                                   int(self.w_color[b, i]))
        return self.voxel_type(self.sdf[b, i].item(), int(self.w_depth[b, i]))

    def set(self, b: int, i: int, voxel) -> None:
        self.sdf[b, i] = voxel.sdf
        self.w_depth[b, i] = voxel.w_depth
        if self.has_color:
            self.clr[b, i] = voxel.clr
            self.w_color[b, i] = voxel.w_color

    def block_records(self, blocks) -> np.ndarray:
        """Gather whole blocks into an (n, block_size) record array."""
        blocks = np.asarray(blocks, dtype=np.int64)
        out = np.zeros((len(blocks), self.block_size), dtype=self.voxel_type.record_dtype())
        out["sdf"] = self.sdf[blocks]
        out["w_depth"] = self.w_depth[blocks]
        if self.has_color:
            out["clr"] = self.clr[blocks]
            out["w_color"] = self.w_color[blocks]
        return out

    def store_records(self, blocks, records: np.ndarray) -> None:
        blocks = np.asarray(blocks, dtype=np.int64)
        self.sdf[blocks] = records["sdf"]
        self.w_depth[blocks] = records["w_depth"]
        if self.has_color:
            self.clr[blocks] = records["clr"]
            self.w_color[blocks] = records["w_color"]


@numba.njit(cache=True)
def _reset_block(sdf, w_depth, clr, w_color, b, init):
    for i in range(sdf.shape[1]):
        sdf[b, i] = init
        w_depth[b, i] = 0
    for i in range(clr.shape[1]):
        clr[b, i, 0] = 0
        clr[b, i, 1] = 0
        clr[b, i, 2] = 0
        w_color[b, i] = 0


@numba.njit(cache=True, inline="always")
def read_sdf(sdf, b, i, quantized):
    if quantized:
        return sdf[b, i] / 32767.0
    return np.float64(sdf[b, i])


@numba.njit(cache=True, inline="always")
def write_sdf(sdf, b, i, f, quantized):
    if f > 1.0:
        f = 1.0
    elif f < -1.0:
        f = -1.0
    if quantized:
        sdf[b, i] = int(f * 32767.0)
    else:
        sdf[b, i] = f
