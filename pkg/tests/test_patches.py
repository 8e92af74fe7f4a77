import numpy as np
import pytest
from scipy import ndimage
from scipy.spatial.transform import Rotation

from meshes import blank_texture, grid_mesh, ico_mesh, quad_mesh
from texlet.corpus import icosphere
from texlet.mesh import face_attributes, make_mesh
from texlet.metrics import psnr
from texlet.partition import CostWeights, PartitionContext, PatchClustering, clustering_from_labels, partition_mesh
from texlet.patches import (
    PasteOperator,
    PatchLayout,
    anchors_array,
    load_patches,
    paste_patches,
    patch_anchor,
    save_patches,
    unwrap_all,
    unwrap_patch,
    uv_coverage,
)


def checkerboard(size, cells):
    i, j = np.mgrid[0:size, 0:size]
    c = ((i * cells // size + j * cells // size) % 2).astype(np.float64)
    return np.repeat((40 + 170 * c)[..., None], 3, axis=2).astype(np.uint8)


def smooth_texture(size, seed=0):
    rng = np.random.default_rng(seed)
    y, x = (np.mgrid[0:size, 0:size] + 0.5) / size
    chans = []
    for _ in range(3):
        k = rng.integers(1, 4, size=2)
        ph = rng.uniform(0, 2 * np.pi, size=2)
        chans.append(0.5 + 0.2 * np.sin(2 * np.pi * k[0] * x + ph[0]) * np.cos(2 * np.pi * k[1] * y + ph[1]))
    return np.stack(chans, axis=2)


def single_cluster(mesh):
    ctx = PartitionContext(mesh)
    return clustering_from_labels(ctx, np.zeros(mesh.n_faces, dtype=np.int64), 1, CostWeights())


def test_constant_color_patch():
    mesh = ico_mesh(2, tex=32)
    mesh = mesh.with_texture(np.full((32, 32, 3), (10, 200, 90), dtype=np.uint8))
    cl = partition_mesh(mesh, None, 12)
    for p in unwrap_all(mesh, cl, 16):
        assert np.allclose(p.image[p.valid_mask], np.array([10, 200, 90]) / 255.0, atol=1e-12)


def test_square_checkerboard_matches_direct_crop():
    R = 64
    tex = checkerboard(128, 8)
    mesh = grid_mesh(4, texture=tex)
    cl = single_cluster(mesh)
    p = unwrap_patch(mesh, cl.clusters[0], R)
    # the unit square fills [1, R-1]^2; sample the texture there directly
    t = (np.arange(R) + 0.5 - 1.0) / (R - 2)
    best = -np.inf
    for k in range(4):
        for flip in (False, True):
            u, v = np.meshgrid(t, t)
            if flip:
                u = 1 - u
            for _ in range(k):
                u, v = v, 1 - u
            rows = (1 - v) * 128 - 0.5
            cols = u * 128 - 0.5
            ref = np.stack(
                [ndimage.map_coordinates(tex[..., c].astype(float) / 255, [rows, cols], order=1, mode="nearest") for c in range(3)],
                axis=2,
            )
            best = max(best, psnr(p.image, ref, p.valid_mask))
    assert best >= 40.0


def test_face_maps_inside_image():
    mesh = ico_mesh(3)
    cl = partition_mesh(mesh, None, 30)
    for p in unwrap_all(mesh, cl, 32):
        assert p.face_map.min() >= 1.0 - 1e-9 and p.face_map.max() <= 31.0 + 1e-9
        assert p.valid_mask.any()


def test_rigid_motion_gives_identical_patches():
    mesh = ico_mesh(3)
    mesh = mesh.with_texture((smooth_texture(64) * 255).astype(np.uint8))
    cl = partition_mesh(mesh, None, 24)
    rot = Rotation.from_euler("xyz", [0.3, -1.1, 2.0]).as_matrix()
    moved_v = mesh.vertices @ rot.T + np.array([0.25, -0.5, 0.125])
    moved, _ = make_mesh(moved_v, mesh.faces, mesh.face_uvs, mesh.texture, normalize=False)
    cl2 = clustering_from_labels(PartitionContext(moved), cl.face_to_cluster, 24, cl.weights)
    for a, b in zip(unwrap_all(mesh, cl, 32), unwrap_all(moved, cl2, 32)):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.valid_mask, b.valid_mask)


def test_valid_mask_contains_exact_footprint():
    mesh = ico_mesh(3)
    cl = partition_mesh(mesh, None, 20)
    R = 24
    c = (np.mgrid[0:R, 0:R][::-1] + 0.5).reshape(2, -1).T
    for p in unwrap_all(mesh, cl, R):
        inside = np.zeros(R * R, dtype=bool)
        for a, b, d in p.face_map:
            m = np.array([b - a, d - a]).T
            l1, l2 = np.linalg.solve(m, (c - a).T)
            inside |= (l1 > 1e-6) & (l2 > 1e-6) & (1 - l1 - l2 > 1e-6)
        assert not np.any(inside.reshape(R, R) & ~p.valid_mask)


def test_single_face_anchor():
    mesh = quad_mesh()
    ctx = PartitionContext(mesh)
    fa = face_attributes(mesh)
    a = patch_anchor(mesh, ctx.cluster([1]))
    assert np.allclose(a.position, fa.centroid[1])
    assert np.allclose(a.normal, fa.normal[1])


def test_two_face_anchor_is_midpoint():
    mesh = quad_mesh()
    ctx = PartitionContext(mesh)
    fa = face_attributes(mesh)
    a = patch_anchor(mesh, ctx.cluster([0, 1]))
    assert np.allclose(a.position, fa.centroid.mean(axis=0), atol=1e-15)
    assert abs(np.linalg.norm(a.normal) - 1) < 1e-6


def test_sphere_anchors_near_surface():
    v, f, uv = icosphere(6)
    mesh, _ = make_mesh(v, f, uv, blank_texture())
    cl = partition_mesh(mesh, None, 8192)
    anchors = anchors_array(cl)
    assert anchors.shape == (8192, 6)
    radius = np.linalg.norm(mesh.vertices, axis=1).max()
    rel = np.linalg.norm(anchors[:, :3], axis=1) / radius
    assert rel.min() >= 0.9 and rel.max() <= 1.0
    assert np.allclose(np.linalg.norm(anchors[:, 3:], axis=1), 1.0, atol=1e-6)
    for c, row in zip(cl.clusters, anchors):
        pts = mesh.vertices[mesh.faces[c.face_ids]].reshape(-1, 3)
        assert np.all(row[:3] >= pts.min(0) - 1e-12) and np.all(row[:3] <= pts.max(0) + 1e-12)


def test_roundtrip_within_source_range():
    mesh = ico_mesh(3, tex=64)
    rng = np.random.default_rng(0)
    tex = rng.integers(30, 220, size=(64, 64, 3), dtype=np.uint8)
    mesh = mesh.with_texture(tex)
    cl = partition_mesh(mesh, None, 40)
    out = paste_patches(mesh, cl, unwrap_all(mesh, cl, 16))
    cov = uv_coverage(mesh)
    for ch in range(3):
        lo, hi = tex[..., ch].min() / 255, tex[..., ch].max() / 255
        assert out[cov, ch].min() >= lo - 1e-12 and out[cov, ch].max() <= hi + 1e-12


def test_constant_patches_paste_constant():
    mesh = ico_mesh(2, tex=64)
    cl = partition_mesh(mesh, None, 10)
    patches = unwrap_all(mesh, cl, 16)
    for p in patches:
        p.image[...] = 0.25
    out = paste_patches(mesh, cl, patches)
    assert np.allclose(out[uv_coverage(mesh)], 0.25, atol=1e-12)


def test_paste_is_left_inverse_up_to_resampling():
    size = 256
    tex = smooth_texture(size, seed=4)
    # one continuous UV chart, so dilated patch texels stay next to their source
    mesh = grid_mesh(24, texture=(tex * 255).astype(np.uint8), z=lambda x, y: 0.1 * np.sin(3 * x + 2 * y))
    cl = partition_mesh(mesh, None, 64)
    layout = PatchLayout(mesh, cl, 64)
    op = layout.paste_operator(size, size)
    out = op.apply(layout.sample(tex), dilation=None)
    gy, gx = np.gradient(tex, axis=(0, 1))
    grad = np.sqrt(gx ** 2 + gy ** 2).max()
    err = np.abs(out - tex)[op.covered]
    assert err.max() <= 2 * grad


def test_psnr_grows_with_resolution(smooth_ico4):
    mesh = smooth_ico4
    cl = partition_mesh(mesh, None, 256)
    tex = mesh.texture.astype(np.float64) / 255
    cov = uv_coverage(mesh)
    vals = [psnr(paste_patches(mesh, cl, unwrap_all(mesh, cl, R)), tex, cov) for R in (16, 64)]
    assert vals[1] > vals[0]


def test_layout_matches_standalone_unwrap():
    mesh = ico_mesh(3, tex=64)
    mesh = mesh.with_texture((smooth_texture(64, 2) * 255).astype(np.uint8))
    cl = partition_mesh(mesh, None, 16)
    layout = PatchLayout(mesh, cl, 32)
    for a, b in zip(layout.patches(), unwrap_all(mesh, cl, 32)):
        assert np.array_equal(a.valid_mask, b.valid_mask)
        assert np.array_equal(a.face_map, b.face_map)
        assert np.allclose(a.image[a.valid_mask], b.image[b.valid_mask], atol=1e-12)


def test_missing_face_is_an_error():
    mesh = ico_mesh(2)
    cl = partition_mesh(mesh, None, 6)
    patches = unwrap_all(mesh, cl, 16)
    short = PatchClustering(cl.clusters[:-1], cl.face_to_cluster, 5, cl.n_cap, cl.weights)
    with pytest.raises(ValueError, match="missing from all face maps"):
        PasteOperator(mesh, short, [p.face_map for p in patches[:-1]], 16, 32, 32)
    with pytest.raises(ValueError):
        paste_patches(mesh, cl, patches[:-1])


def test_small_resolution_rejected():
    mesh = ico_mesh(1)
    cl = partition_mesh(mesh, None, 4)
    with pytest.raises(ValueError):
        unwrap_patch(mesh, cl.clusters[0], 4)


def test_patch_set_roundtrip(tmp_path):
    mesh = ico_mesh(2, tex=32)
    mesh = mesh.with_texture((smooth_texture(32, 1) * 255).astype(np.uint8))
    cl = partition_mesh(mesh, None, 7)
    patches = unwrap_all(mesh, cl, 16)
    save_patches(patches, tmp_path / "p.png")
    back = load_patches(tmp_path / "p.json")
    assert len(back) == 7
    for a, b in zip(patches, back):
        assert np.array_equal(a.face_ids, b.face_ids)
        assert np.array_equal(a.face_map, b.face_map)
        assert np.array_equal(a.valid_mask, b.valid_mask)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-12


def test_sliver_cluster_reads_texture_at_closest_points():
    tex = np.zeros((16, 16, 3), np.uint8)
    tex[:, :8] = (200, 40, 90)
    tex[:, 8:] = (10, 220, 30)
    v = [(0, 0, 0), (1, 0, 0), (0.5, 0.002, 0)]
    uv = [[(0.1, 0.5), (0.9, 0.5), (0.5, 0.502)]]
    mesh, _ = make_mesh(v, [(0, 1, 2)], uv, tex, normalize=False)
    layout = PatchLayout(mesh, single_cluster(mesh), 16)
    assert not layout.valid[0].any()
    img = layout.sample(mesh.texture)[0]
    # left texel columns read the left half of the texture, right columns the right half
    assert np.allclose(img[:, 1], np.array([200, 40, 90]) / 255)
    assert np.allclose(img[:, -2], np.array([10, 220, 30]) / 255)
