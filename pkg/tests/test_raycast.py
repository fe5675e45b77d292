import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blockfusion.allocation import AllocationScratch, allocate_frame, visible_entries
from blockfusion.integration import SceneParams, integrate_frame
from blockfusion.math_core import Intrinsics, Pose, look_at
from blockfusion.raycast import (RangeImage, RaycastState, cast_ray, create_expected_depths,
                                 forward_project_points, hit_depths, naive_raycast,
                                 render_image, render_maps, sdf_gradient, trilinear_sdf)
from blockfusion.view_io import Plane, Sphere, synth_depth
from blockfusion.volume_index import DenseArrayIndex, DenseVolume, HashVolume, insert

from conftest import SMALL_HASH

INTR = Intrinsics(100.0, 100.0, 49.5, 49.5, 100, 100)
SMALL = Intrinsics(125.0, 125.0, 79.5, 59.5, 160, 120)


def test_empty_visible_list_gives_invalid_ranges():
    vol = HashVolume(voxel_size=0.0125, params=SMALL_HASH)
    r = create_expected_depths(vol, [], Pose.identity(), INTR)
    assert not r.valid.any()
    assert r.expand().shape == (100, 100, 2)


def test_single_block_range():
    # voxel 12.5 mm: block (0, 0, 10) spans z in [1.0, 1.1]
    vol = HashVolume(voxel_size=0.0125, params=SMALL_HASH)
    r = create_expected_depths(vol, [new_entry(vol, (0, 0, 10))], Pose.identity(), INTR)
    # x, y project to [49.5, 59.5] pixels: fragment (3, 3) only
    valid = r.frag_min <= r.frag_max
    assert np.argwhere(valid).tolist() == [[3, 3]]
    assert r.frag_min[3, 3] == pytest.approx(1.0) and r.frag_max[3, 3] == pytest.approx(1.1)


def new_entry(vol, block):
    insert(vol, block)
    return vol.table.find(block)


def test_overlapping_blocks_combine_min_max():
    vol = HashVolume(voxel_size=0.0125, params=SMALL_HASH)
    entries = [new_entry(vol, b) for b in [(0, 0, 10), (0, 0, 5)]]
    r = create_expected_depths(vol, entries, Pose.identity(), INTR)
    assert r.pixel_range(55, 55) == pytest.approx((0.5, 1.1))
    # the near block alone reaches u = 69.5, fragment 4
    assert r.pixel_range(66, 52) == pytest.approx((0.5, 0.6))
    assert r.pixel_range(5, 5)[0] > r.pixel_range(5, 5)[1]


def test_range_image_helpers():
    r = RangeImage.uniform(33, 17, 0.5, 2.0)
    assert r.frag_min.shape == (2, 3)
    assert r.valid.all()
    assert r.pixel_range(32, 16) == (0.5, 2.0)


def fuse(vol, scene, poses, intr, params):
    sc = AllocationScratch.for_table(vol.table)
    for p in poses:
        d = synth_depth(scene, p, intr)
        while allocate_frame(vol, d, p, intr, params.mu, sc)[0]:
            pass
        _, vis = allocate_frame(vol, d, p, intr, params.mu, sc)
        integrate_frame(vol, vis, d, p, intr, params)


PARAMS = SceneParams(voxel_size=0.01, mu=0.04)
SPHERE = (Sphere((0.0, 0.0, 2.0), 0.5),)


@pytest.fixture(scope="module")
def sphere_volume():
    vol = HashVolume(voxel_size=0.01, params=SMALL_HASH)
    poses = [look_at((1.5 * np.sin(a), 0.3, 2.0 - 1.5 * np.cos(a)), (0.0, 0.0, 2.0))
             for a in np.linspace(0.0, 2 * np.pi, 8, endpoint=False)]
    fuse(vol, SPHERE, poses, SMALL, PARAMS)
    return vol


def test_ray_through_empty_space(sphere_volume):
    point, found, _ = cast_ray(sphere_volume, (2.0, 2.0), (0.2, 4.0), Pose.identity(), SMALL,
                               PARAMS.mu)
    assert not found and point is None


def test_invalid_range_is_not_found(sphere_volume):
    _, found, _ = cast_ray(sphere_volume, (79.5, 59.5), (3.0, 1.0), Pose.identity(), SMALL,
                           PARAMS.mu)
    assert not found


def test_sphere_centre_pixel(sphere_volume):
    pose = Pose.identity()
    vis, _ = visible_entries(sphere_volume, pose, SMALL)
    rng = create_expected_depths(sphere_volume, vis, pose, SMALL)
    point, found, state = cast_ray(sphere_volume, (79.5, 59.5), rng.pixel_range(79, 59), pose,
                                   SMALL, PARAMS.mu)
    assert found and state == RaycastState.BEHIND_SURFACE
    assert abs(point[2] - 1.5) <= 0.01


@pytest.mark.parametrize("pixel", [(79.5, 59.5), (20.0, 20.0), (150.0, 100.0)])
def test_inside_sphere_sees_wrong_side(sphere_volume, pixel):
    inside = look_at((0.0, 0.0, 2.0), (0.0, 0.0, 0.0))
    point, found, state = cast_ray(sphere_volume, pixel, (0.2, 3.0), inside, SMALL, PARAMS.mu)
    assert not found and state == RaycastState.WRONG_SIDE


def test_sphere_hits_and_map_validity(sphere_volume):
    res = render_maps(sphere_volume, Pose.identity(), SMALL, PARAMS.mu)
    gt = synth_depth(SPHERE, Pose.identity(), SMALL)
    # stay off the silhouette, which no orbit view observed head-on
    ys, xs = np.mgrid[0:120, 0:160]
    core = res.valid & (np.hypot(xs - 79.5, ys - 59.5) < 25)
    assert core.sum() > 1500
    assert np.abs(hit_depths(res, Pose.identity())[core] - gt[core]).max() < 0.01
    n = np.linalg.norm(res.normals[..., :3][res.valid], axis=1)
    assert np.allclose(n, 1.0, atol=1e-9)
    assert (res.points[~res.valid] == 0).all() and (res.normals[~res.valid] == 0).all()


def test_sphere_normals_are_radial():
    # Depth is looked up at the nearest pixel, so the fused field is a
    # staircase at pixel scale; pixels must be finer than voxels and a few
    # sub-pixel shifted views average the steps out.  Projective distances
    # still bend normals on oblique parts, so the tight bound is checked
    # where the surface faces the camera.
    intr = Intrinsics(500.0, 500.0, 319.5, 239.5, 640, 480)
    shifts = np.linspace(-0.01, 0.01, 4)
    views = [Pose(np.eye(3), [dx, dy, 0.0]) for dx in shifts for dy in shifts]
    vol = HashVolume(voxel_size=0.01, params=SMALL_HASH)
    fuse(vol, SPHERE, views, intr, PARAMS)
    res = render_maps(vol, Pose.identity(), intr, PARAMS.mu)
    pts = res.points[..., :3][res.valid]
    radial = (pts - SPHERE[0].centre) / np.linalg.norm(pts - SPHERE[0].centre, axis=1)[:, None]
    view = pts / np.linalg.norm(pts, axis=1)[:, None]
    incidence = np.degrees(np.arccos(np.clip(-np.sum(radial * view, axis=1), -1, 1)))
    err = np.degrees(np.arccos(np.clip(np.sum(radial * res.normals[..., :3][res.valid], axis=1),
                                       -1, 1)))
    facing = incidence < 30
    assert facing.sum() > 10000
    assert err[facing].max() < 3.0
    assert np.median(err) < 3.0


def test_plane_normals_and_shading():
    vol = HashVolume(voxel_size=0.01, params=SMALL_HASH)
    scene = (Plane((0.0, 0.0, 1.0), (0.0, 0.0, -1.0)),)
    fuse(vol, scene, [Pose.identity()], INTR, PARAMS)
    res = render_maps(vol, Pose.identity(), INTR, PARAMS.mu)
    inner = np.zeros((100, 100), bool)
    inner[10:90, 10:90] = True
    assert res.valid[inner].all()
    cosang = -res.normals[..., 2][inner]
    assert np.degrees(np.arccos(np.clip(cosang, -1, 1))).max() < 2.0
    img = render_image(vol, res, Pose.identity())
    assert img.dtype == np.uint8 and img.shape == (100, 100, 3)
    # |n . view| falls off only with the viewing angle (about 0.93 at the corners)
    centre = img[45:55, 45:55, 0].astype(int)
    assert centre.max() - centre.min() <= 1 and centre.min() >= 250
    assert (img[~res.valid] == 0).all()


def test_all_invalid_maps():
    vol = HashVolume(voxel_size=0.01, params=SMALL_HASH)
    res = render_maps(vol, Pose.identity(), INTR, PARAMS.mu)
    assert not res.valid.any()
    assert not render_image(vol, res, Pose.identity()).any()
    pts, cols = forward_project_points(res)
    assert len(pts) == 0 and len(cols) == 0


def test_forward_projection_stride(sphere_volume):
    res = render_maps(sphere_volume, Pose.identity(), SMALL, PARAMS.mu)
    pts, cols = forward_project_points(res, np.ones((120, 160, 3)), stride=4)
    assert 0 < len(pts) <= 40 * 30
    assert len(cols) == len(pts)
    assert len(pts) == res.valid[::4, ::4].sum()


def test_state_machine_matches_naive(sphere_volume):
    pose = look_at((0.4, 0.5, 0.6), (0.0, 0.0, 2.0))
    vis, _ = visible_entries(sphere_volume, pose, SMALL)
    rng = create_expected_depths(sphere_volume, vis, pose, SMALL)
    res = render_maps(sphere_volume, pose, SMALL, PARAMS.mu, rng)
    z = hit_depths(res, pose)
    zn = naive_raycast(sphere_volume, pose, SMALL, 0.2, 4.0)
    assert ((z > 0) == (zn > 0)).mean() >= 0.999
    both = (z > 0) & (zn > 0)
    assert np.abs(z - zn)[both].max() <= 0.01
    e = rng.expand()
    assert np.all((zn == 0) | ((zn >= e[..., 0]) & (zn <= e[..., 1])))
    # reads stay within the search interval grown by mu
    m = e[..., 0] <= e[..., 1]
    lo, hi = res.read_range[..., 0], res.read_range[..., 1]
    assert np.all(~m | (lo >= e[..., 0] - PARAMS.mu - 1e-9))
    assert np.all(~m | ~np.isfinite(hi) | (hi <= e[..., 1] + PARAMS.mu + 1e-9))


def make_linear_field():
    """Dense volume whose stored SDF is an affine function of position."""
    vol = DenseVolume(index=DenseArrayIndex((16, 16, 16), (-8, -8, -8)), voxel_size=0.01)
    zz, yy, xx = np.mgrid[-8:8, -8:8, -8:8]
    coeff = np.array([0.02, -0.03, 0.05])
    centres = (np.stack([xx, yy, zz], -1) + 0.5) * 0.01
    vol.storage.sdf[0] = np.round((centres @ coeff + 0.1) * 32767).astype(np.int16).ravel()
    vol.storage.w_depth[0] = 1
    return vol, coeff


@pytest.fixture
def linear_field():
    return make_linear_field()


def test_trilinear_at_voxel_centre(linear_field):
    vol, _ = linear_field
    value, ok = trilinear_sdf(vol, (0.035, -0.015, 0.005))  # centre of voxel (3, -2, 0)
    assert ok and value == vol.storage.sdf[0][3 + 8 + (-2 + 8) * 16 + 8 * 256] / 32767


LINEAR = make_linear_field()


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.floats(-0.07, 0.07)] * 3))
def test_trilinear_exact_on_linear_field(p):
    vol, coeff = LINEAR
    value, ok, grad = sdf_gradient(vol, p)
    assert ok
    # the stored samples are rounded to one LSB
    assert value == pytest.approx(np.dot(p, coeff) + 0.1, abs=1.5 / 32767)
    assert np.allclose(grad, coeff, atol=2 / 32767 / 0.01)


def test_trilinear_missing_neighbour(linear_field):
    vol, _ = linear_field
    assert not trilinear_sdf(vol, (0.079, 0.0, 0.0))[1]  # past the last voxel centre
    vol.storage.w_depth[0, 8 + 8 * 16 + 8 * 256] = 0  # voxel (0, 0, 0) never observed
    assert not trilinear_sdf(vol, (0.004, 0.004, 0.004))[1]
    hv = HashVolume(voxel_size=0.01, params=SMALL_HASH)
    assert not trilinear_sdf(hv, (0.0, 0.0, 0.0))[1]
