"""Calibration files, raw Kinect-style frames and synthetic test scenes."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .math_core import Intrinsics, Pose, orthonormalize

INVALID_DISPARITY = 65535
DEFAULT_MAX_DEPTH = 8.0


class CalibrationError(ValueError):
    pass


class FormatError(ValueError):
    """Malformed PPM/PGM data."""


# ----------------------------------------------------------------------------
# calibration


@dataclass(frozen=True, eq=False)
class Calibration:
    """Two pinhole cameras, the rgb-to-depth extrinsic and the disparity model.

    ``extrinsic`` keeps the 3x4 matrix exactly as read so that writing and
    re-reading a file is lossless; :attr:`rgb_to_depth` is its
    re-orthonormalized rigid transform.
    """

    rgb_intrinsics: Intrinsics
    depth_intrinsics: Intrinsics
    extrinsic: np.ndarray
    disparity_a: float
    disparity_b: float
    rgb_to_depth: Pose = field(init=False)

    def __post_init__(self):
        m = np.array(self.extrinsic, dtype=np.float64).reshape(3, 4)
        r = m[:, :3]
        if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-3 or np.linalg.det(r) <= 0:
            raise CalibrationError("extrinsic rotation is not orthonormal")
        object.__setattr__(self, "extrinsic", m)
        object.__setattr__(self, "rgb_to_depth", Pose(orthonormalize(r), m[:, 3]))

    def __eq__(self, other):
        if not isinstance(other, Calibration):
            return NotImplemented
        return (self.rgb_intrinsics == other.rgb_intrinsics
                and self.depth_intrinsics == other.depth_intrinsics
                and np.array_equal(self.extrinsic, other.extrinsic)
                and self.disparity_a == other.disparity_a
                and self.disparity_b == other.disparity_b)

    @classmethod
    def for_camera(cls, intr: Intrinsics, disparity_a: float = 1135.09,
                   disparity_b: float = 0.0819141) -> "Calibration":
        """Co-located RGB and depth cameras sharing ``intr``."""
        return cls(intr, intr, np.hstack([np.eye(3), np.zeros((3, 1))]),
                   disparity_a, disparity_b)


_BLOCKS = (
    ("rgb intrinsics", (2, 2, 2)),
    ("depth intrinsics", (2, 2, 2)),
    ("extrinsic", (4, 4, 4)),
    ("disparity", (2,)),
)


def parse_calibration(text: str) -> Calibration:
    lines = [(n, ln.split()) for n, ln in enumerate(text.splitlines(), 1) if ln.strip()]
    values = []
    cursor = 0
    for block_no, (name, shape) in enumerate(_BLOCKS, 1):
        rows = []
        for want in shape:
            if cursor >= len(lines):
                raise CalibrationError(f"block {block_no} ({name}): unexpected end of file")
            line_no, tokens = lines[cursor]
            cursor += 1
            if len(tokens) != want:
                raise CalibrationError(
                    f"block {block_no} ({name}), line {line_no}: expected {want} values, "
                    f"got {len(tokens)}")
            try:
                rows.append([float(t) for t in tokens])
            except ValueError as exc:
                raise CalibrationError(
                    f"block {block_no} ({name}), line {line_no}: {exc}") from None
        values.append(rows)
    if cursor != len(lines):
        raise CalibrationError(f"line {lines[cursor][0]}: trailing data")

    def intrinsics(rows, block_no):
        (w, h), (fx, fy), (cx, cy) = rows
        if w != int(w) or h != int(h):
            raise CalibrationError(f"block {block_no}: image size must be integral")
        try:
            return Intrinsics(fx, fy, cx, cy, int(w), int(h))
        except ValueError as exc:
            raise CalibrationError(f"block {block_no}: {exc}") from None

    rgb = intrinsics(values[0], 1)
    depth = intrinsics(values[1], 2)
    a, b = values[3][0]
    return Calibration(rgb, depth, np.array(values[2]), a, b)


def serialize_calibration(calib: Calibration) -> str:
    def cam(i: Intrinsics):
        return (f"{i.width} {i.height}\n{i.fx!r} {i.fy!r}\n{i.cx!r} {i.cy!r}\n")

    rows = "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in calib.extrinsic)
    return (cam(calib.rgb_intrinsics) + "\n" + cam(calib.depth_intrinsics) + "\n"
            + rows + "\n" + f"{calib.disparity_a!r} {calib.disparity_b!r}\n")


def load_calibration(path) -> Calibration:
    return parse_calibration(Path(path).read_text())


# ----------------------------------------------------------------------------
# disparity model: depth = 8 * b * fx / (a - d)


def disparity_to_depth(d, a: float, b: float, fx: float,
                       max_depth: float = DEFAULT_MAX_DEPTH):
    """Metric depth for raw disparity ``d``; invalid samples map to 0."""
    d = np.asarray(d, dtype=np.float64)
    denom = a - d
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(denom > 0, 8.0 * b * fx / denom, 0.0)
    depth = np.where((depth > 0) & (depth <= max_depth), depth, 0.0)
    return float(depth) if depth.ndim == 0 else depth


def depth_to_disparity(depth, a: float, b: float, fx: float) -> np.ndarray:
    """Inverse model rounded to 16 bit; invalid depths become 65535."""
    depth = np.asarray(depth, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.rint(a - 8.0 * b * fx / np.where(depth > 0, depth, 1.0))
    ok = (depth > 0) & (d >= 0) & (d < a)
    return np.where(ok, d, INVALID_DISPARITY).astype(np.uint16)


def convert_disparity(raw: np.ndarray, calib: Calibration,
                      max_depth: float = DEFAULT_MAX_DEPTH) -> np.ndarray:
    return disparity_to_depth(raw, calib.disparity_a, calib.disparity_b,
                              calib.depth_intrinsics.fx, max_depth)


# ----------------------------------------------------------------------------
# binary PPM / PGM


def _read_header(data: bytes, magic: bytes):
    if data[:2] != magic:
        raise FormatError(f"bad magic {data[:2]!r}, expected {magic!r}")
    tokens = []
    i = 2
    while len(tokens) < 3:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise FormatError("truncated header")
        try:
            tokens.append(int(data[start:i]))
        except ValueError:
            raise FormatError(f"bad header token {data[start:i]!r}") from None
    if i >= len(data) or not data[i:i + 1].isspace():
        raise FormatError("truncated header")
    width, height, maxval = tokens
    if width <= 0 or height <= 0:
        raise FormatError("non-positive image size")
    return width, height, maxval, i + 1


def read_pgm_disparity(data: bytes) -> np.ndarray:
    """16-bit big-endian binary PGM (P5, maxval 65535) as a uint16 image."""
    w, h, maxval, start = _read_header(data, b"P5")
    if maxval != 65535:
        raise FormatError(f"expected maxval 65535, got {maxval}")
    n = w * h * 2
    if len(data) - start < n:
        raise FormatError(f"short payload: {len(data) - start} of {n} bytes")
    return np.frombuffer(data, dtype=">u2", count=w * h, offset=start).reshape(h, w).astype(np.uint16)


def read_ppm_rgb(data: bytes) -> np.ndarray:
    """8-bit binary PPM (P6, maxval 255) as an (h, w, 3) uint8 image."""
    w, h, maxval, start = _read_header(data, b"P6")
    if maxval != 255:
        raise FormatError(f"expected maxval 255, got {maxval}")
    n = w * h * 3
    if len(data) - start < n:
        raise FormatError(f"short payload: {len(data) - start} of {n} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=start).reshape(h, w, 3).copy()


def encode_ppm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def encode_pgm16(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.uint16)
    h, w = img.shape
    return b"P5\n%d %d\n65535\n" % (w, h) + img.astype(">u2").tobytes()


def write_ppm(path, image) -> None:
    Path(path).write_bytes(encode_ppm(image))


def write_pgm16(path, image) -> None:
    Path(path).write_bytes(encode_pgm16(image))


# ----------------------------------------------------------------------------
# recorded sequences


def _pattern_regex(pattern: str):
    head, sep, tail = pattern.partition("{")
    spec, sep2, rest = tail.partition("}")
    if not sep or not sep2:
        raise ValueError(f"pattern {pattern!r} needs one '{{}}' index field")
    return re.compile(re.escape(head) + r"(\d+)" + re.escape(rest) + "$")


@dataclass
class FrameSequence:
    """RGB (PPM) and disparity (PGM) files paired by frame index."""

    directory: Path
    rgb_pattern: str = "{:04d}.ppm"
    depth_pattern: str = "{:04d}.pgm"
    indices: list = field(default_factory=list)
    rgb_only: list = field(default_factory=list)
    depth_only: list = field(default_factory=list)

    @classmethod
    def discover(cls, directory, rgb_pattern="{:04d}.ppm", depth_pattern="{:04d}.pgm"):
        directory = Path(directory)
        rgb_re, depth_re = _pattern_regex(rgb_pattern), _pattern_regex(depth_pattern)
        rgb, depth = set(), set()
        for p in directory.iterdir():
            if m := depth_re.match(p.name):
                depth.add(int(m.group(1)))
            elif m := rgb_re.match(p.name):
                rgb.add(int(m.group(1)))
        return cls(directory, rgb_pattern, depth_pattern, sorted(rgb & depth),
                   sorted(rgb - depth), sorted(depth - rgb))

    def rgb_path(self, index: int) -> Path:
        return self.directory / self.rgb_pattern.format(index)

    def depth_path(self, index: int) -> Path:
        return self.directory / self.depth_pattern.format(index)

    def load(self, index: int):
        rgb = read_ppm_rgb(self.rgb_path(index).read_bytes())
        raw = read_pgm_disparity(self.depth_path(index).read_bytes())
        return rgb, raw


# ----------------------------------------------------------------------------
# synthetic scenes


def _smooth_texture(points: np.ndarray, phase: float) -> np.ndarray:
    dirs = np.array([[9.0, 4.0, 2.0], [-3.0, 8.0, 5.0], [4.0, -2.0, 10.0]])
    return 127.5 + 90.0 * np.sin(points @ dirs.T + phase)


@dataclass(frozen=True)
class Sphere:
    centre: tuple
    radius: float
    phase: float = 0.0

    def intersect(self, origin, dirs):
        """Smallest positive ray parameter per direction (inf on miss)."""
        oc = origin - np.asarray(self.centre, dtype=np.float64)
        a = np.einsum("...i,...i->...", dirs, dirs)
        b = 2.0 * (dirs @ oc)
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        s0 = (-b - sq) / (2 * a)
        s1 = (-b + sq) / (2 * a)
        s = np.where(s0 > 0, s0, np.where(s1 > 0, s1, np.inf))
        return np.where(disc >= 0, s, np.inf)

    def distance(self, points):
        return np.linalg.norm(points - np.asarray(self.centre), axis=-1) - self.radius

    def colour(self, points):
        return _smooth_texture(points, self.phase)


@dataclass(frozen=True)
class Plane:
    """Plane through ``point`` with ``normal``; a disc if ``radius`` is set."""

    point: tuple
    normal: tuple
    radius: float = None
    phase: float = 1.0

    def intersect(self, origin, dirs):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((np.asarray(self.point) - origin) @ n) / denom
        s = np.where(np.isfinite(s) & (s > 0), s, np.inf)
        if self.radius is not None:
            hit = origin + s[..., None] * dirs
            r = np.linalg.norm(np.where(np.isfinite(hit), hit, 0.0) - np.asarray(self.point), axis=-1)
            s = np.where(r <= self.radius, s, np.inf)
        return s

    def distance(self, points):
        n = np.asarray(self.normal, dtype=np.float64)
        return (points - np.asarray(self.point)) @ (n / np.linalg.norm(n))

    def colour(self, points):
        return _smooth_texture(points, self.phase)


def _camera_rays(pose: Pose, intr: Intrinsics):
    """Camera centre and per-pixel world directions scaled so that the ray
    parameter equals camera z-depth."""
    ys, xs = np.mgrid[0:intr.height, 0:intr.width].astype(np.float64)
    d_cam = np.stack([(xs - intr.cx) / intr.fx, (ys - intr.cy) / intr.fy, np.ones_like(xs)], -1)
    return pose.centre, d_cam @ pose.rotation


def synth_frame(scene, pose: Pose, intr: Intrinsics):
    """Exact z-depth (0 where nothing is hit), RGB and hit-primitive index."""
    if not scene:
        raise ValueError("scene has no primitives")
    origin, dirs = _camera_rays(pose, intr)
    hits = np.stack([prim.intersect(origin, dirs) for prim in scene])
    which = np.argmin(hits, axis=0)
    depth = np.take_along_axis(hits, which[None], 0)[0]
    valid = np.isfinite(depth)
    depth = np.where(valid, depth, 0.0)
    points = origin + depth[..., None] * dirs
    rgb = np.zeros(depth.shape + (3,))
    for k, prim in enumerate(scene):
        m = valid & (which == k)
        rgb[m] = prim.colour(points[m])
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return depth, rgb, np.where(valid, which, -1)


def synth_depth(scene, pose: Pose, intr: Intrinsics) -> np.ndarray:
    return synth_frame(scene, pose, intr)[0]


def demo_scene():
    """Large sphere resting on a ground disc plus two smaller spheres that
    break the rotational symmetry (world y is up)."""
    return (
        Sphere((0.0, 0.5, 0.0), 0.5, phase=0.0),
        Sphere((0.62, 0.15, 0.35), 0.15, phase=2.0),
        Sphere((-0.45, 0.2, -0.6), 0.2, phase=4.0),
        Plane((0.0, 0.0, 0.0), (0.0, 1.0, 0.0), radius=1.3, phase=1.0),
    )


def orbit_poses(n: int, radius: float = 1.6, height: float = 0.9,
                target=(0.0, 0.35, 0.0), arc: float = 2 * np.pi, start: float = 0.0):
    """World-to-camera poses on a horizontal circle looking at ``target``."""
    from .math_core import look_at
    poses = []
    for k in range(n):
        ang = start + arc * k / n
        eye = (radius * np.sin(ang), height, -radius * np.cos(ang))
        poses.append(look_at(eye, target))
    return poses


def ring_scene(count: int = 12, radius: float = 1.5, ball: float = 0.25):
    """Spheres on a horizontal ring around the origin; a camera panning at
    the centre sees only a few of them at a time."""
    out = []
    for k in range(count):
        ang = 2 * np.pi * k / count
        out.append(Sphere((radius * np.sin(ang), 0.0, radius * np.cos(ang)), ball,
                          phase=float(k)))
    return tuple(out)


def pan_poses(n: int, arc: float = 2 * np.pi, start: float = 0.0):
    """World-to-camera poses at the origin rotating about world y."""
    from .math_core import look_at
    return [look_at((0.0, 0.0, 0.0), (np.sin(start + arc * k / n), 0.0,
                                       np.cos(start + arc * k / n)))
            for k in range(n)]


def write_sequence(directory, scene, poses, calib: Calibration,
                   rgb_pattern="{:04d}.ppm", depth_pattern="{:04d}.pgm") -> None:
    """Render ``poses`` and store them as PPM + raw-disparity PGM pairs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    intr = calib.depth_intrinsics
    for k, pose in enumerate(poses):
        depth, rgb, _ = synth_frame(scene, pose, intr)
        raw = depth_to_disparity(depth, calib.disparity_a, calib.disparity_b, intr.fx)
        write_ppm(directory / rgb_pattern.format(k), rgb)
        write_pgm16(directory / depth_pattern.format(k), raw)
