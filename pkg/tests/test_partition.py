import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshes import blank_texture, cube_mesh, grid_mesh, ico_mesh
from texlet.corpus import icosphere
from texlet.mesh import build_dual_graph, make_mesh
from texlet.partition import (
    INF,
    CostWeights,
    PartitionContext,
    PatchClustering,
    clustering_from_labels,
    e_count,
    e_dir,
    e_fit,
    e_shape,
    folds_over,
    is_connected,
    merge_cost,
    partition_mesh,
)


def ctx_of(mesh):
    return PartitionContext(mesh)


def brute_fit_error(ctx, ids):
    a = ctx.area[ids]
    c = ctx.centroid[ids]
    mu = (a[:, None] * c).sum(0) / a.sum()
    d = c - mu
    cov = (a[:, None, None] * d[:, :, None] * d[:, None, :]).sum(0)
    return float(np.linalg.eigvalsh(cov)[0]) if len(ids) > 1 else 0.0


def check_partition(ctx, clustering):
    seen = np.zeros(len(ctx.area), dtype=int)
    for k, c in enumerate(clustering.clusters):
        seen[c.face_ids] += 1
        assert np.all(clustering.face_to_cluster[c.face_ids] == k)
        assert is_connected(ctx, c.face_ids)
    assert np.all(seen == 1)


# --- e_fit -------------------------------------------------------------------


def test_e_fit_coplanar_is_zero():
    ctx = ctx_of(grid_mesh(4))
    a, b = ctx.cluster(range(0, 8)), ctx.cluster(range(8, 16))
    assert abs(e_fit(a, b)) <= 1e-12


def test_e_fit_cube_edge_pair_equals_union_fit():
    mesh = cube_mesh()
    ctx = ctx_of(mesh)
    g = build_dual_graph(mesh)
    n = ctx.normal
    u, v = next((int(u), int(v)) for u, v in g.edges if abs(n[u] @ n[v]) < 1e-9)
    a, b = ctx.cluster([u]), ctx.cluster([v])
    assert a.fit_error == 0.0 and b.fit_error == 0.0
    assert e_fit(a, b) == a.union(b).fit_error


def test_e_fit_cube_corner_matches_eigen_oracle():
    mesh = cube_mesh()
    ctx = ctx_of(mesh)
    # the three sides touching vertex 0 (six faces) plus one more side
    corner = {f for f in range(mesh.n_faces) if 0 in mesh.faces[f]}
    sides = {f - f % 2 for f in corner} | {f - f % 2 + 1 for f in corner}
    extra = next(k for k in range(0, mesh.n_faces, 2) if k not in sides)
    ids = np.array(sorted(sides | {extra, extra + 1}))
    assert len(ids) == 8 and is_connected(ctx, ids)
    a, b = ctx.cluster(ids[:4]), ctx.cluster(ids[4:])
    expected = brute_fit_error(ctx, ids) - brute_fit_error(ctx, ids[:4]) - brute_fit_error(ctx, ids[4:])
    assert e_fit(a, b) == pytest.approx(expected, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(0, 2**31))
def test_fit_error_matches_oracle_random_clusters(size, seed):
    mesh = ico_mesh(2)
    ctx = ctx_of(mesh)
    rng = np.random.default_rng(seed)
    ids = rng.choice(mesh.n_faces, size=size, replace=False)
    assert ctx.cluster(ids).fit_error == pytest.approx(brute_fit_error(ctx, np.sort(ids)), rel=1e-9, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_e_fit_nonnegative(seed):
    mesh = ico_mesh(2)
    ctx = ctx_of(mesh)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(mesh.n_faces)
    k = rng.integers(1, 40)
    a, b = ctx.cluster(perm[:k]), ctx.cluster(perm[k : k + rng.integers(1, 40)])
    assert e_fit(a, b) >= -1e-12


# --- e_dir -------------------------------------------------------------------


def test_e_dir_shared_normal_zero():
    ctx = ctx_of(grid_mesh(3))
    assert e_dir(ctx.cluster([0, 1]), ctx.cluster([2, 3])) == pytest.approx(0.0, abs=1e-12)


def test_e_dir_right_angle_pair():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    f = np.array([[0, 1, 2], [0, 3, 1]])
    uv = np.tile(np.array([[0.0, 0], [1, 0], [0, 1]]), (2, 1, 1))
    mesh, _ = make_mesh(v, f, uv, blank_texture(), normalize=False)
    ctx = ctx_of(mesh)
    assert ctx.normal[0] @ ctx.normal[1] == pytest.approx(0.0, abs=1e-15)
    assert e_dir(ctx.cluster([0]), ctx.cluster([1])) == pytest.approx(math.pi / 4, abs=1e-12)


def test_e_dir_random_cluster_matches_direct_average():
    mesh = ico_mesh(2)
    ctx = ctx_of(mesh)
    ids = np.random.default_rng(3).choice(mesh.n_faces, 20, replace=False)
    n = ctx.normal[ids]
    a = ctx.area[ids]
    m = (a[:, None] * n).sum(0)
    m /= np.linalg.norm(m)
    expected = sum(ai * math.acos(max(-1.0, min(1.0, float(ni @ m)))) for ai, ni in zip(a, n)) / a.sum()
    assert e_dir(ctx.cluster(ids[:7]), ctx.cluster(ids[7:])) == pytest.approx(expected, abs=1e-9)


# --- e_shape -----------------------------------------------------------------


def test_e_shape_square():
    ctx = ctx_of(grid_mesh(4))
    f = ctx.mesh.n_faces
    assert e_shape(ctx.cluster(range(f // 2)), ctx.cluster(range(f // 2, f))) == pytest.approx(4 / math.pi - 1, abs=1e-12)


def test_e_shape_disk_approaches_zero():
    values = []
    for n in (16, 64, 256):
        t = np.linspace(0, 2 * math.pi, n, endpoint=False)
        v = np.concatenate([[[0.0, 0, 0]], np.stack([np.cos(t), np.sin(t), 0 * t], 1)])
        f = np.array([[0, 1 + k, 1 + (k + 1) % n] for k in range(n)])
        uv = np.tile(np.array([[0.5, 0.5], [1, 0.5], [0.5, 1]]), (n, 1, 1))
        mesh, _ = make_mesh(v, f, uv, blank_texture(), normalize=False)
        ctx = ctx_of(mesh)
        values.append(e_shape(ctx.cluster(range(n // 2)), ctx.cluster(range(n // 2, n))))
    assert values[0] > values[1] > values[2]
    assert values[2] < 1e-3


def test_e_shape_strip_exceeds_blob():
    mesh = grid_mesh(10)
    ctx = ctx_of(mesh)
    # faces 2k, 2k+1 form quad (row r, col c) with k = r*10 + c
    strip = list(range(10))
    blob = [0, 1, 2, 3, 4, 5, 20, 21, 22, 23]
    assert is_connected(ctx, strip) and is_connected(ctx, blob)
    s = e_shape(ctx.cluster(strip[:5]), ctx.cluster(strip[5:]))
    b = e_shape(ctx.cluster(blob[:5]), ctx.cluster(blob[5:]))
    assert s > b


# --- e_count / merge_cost ----------------------------------------------------


class _Sized:
    def __init__(self, count):
        self.count = count


@pytest.mark.parametrize(
    "counts,n_cap,expected",
    [((32, 32), 64, 0.0), ((30, 29), 64, 5 / 64), ((35, 35), 64, 6 / 64), ((1, 0), 1, 0.0)],
)
def test_e_count_examples(counts, n_cap, expected):
    assert e_count(_Sized(counts[0]), _Sized(counts[1]), n_cap) == expected


def test_e_count_rejects_bad_cap():
    with pytest.raises(ValueError):
        e_count(_Sized(1), _Sized(1), 0)


def test_merge_cost_fit_only_coplanar():
    ctx = ctx_of(grid_mesh(4))
    w = CostWeights(1, 0, 0, 0)
    assert merge_cost(ctx.cluster(range(8)), ctx.cluster(range(8, 16)), w, 64) == pytest.approx(0, abs=1e-12)


def test_merge_cost_count_only_half_caps():
    mesh = grid_mesh(8)
    ctx = ctx_of(mesh)
    w = CostWeights(0, 0, 0, 1, count_mode="union")
    assert merge_cost(ctx.cluster(range(32)), ctx.cluster(range(32, 64)), w, 64) == 0.0


def test_merge_cost_foldover_sliver_is_infinite():
    # nearly flat closed tetrahedron: the base faces down, the sides face up
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0.3, 0.3, 0.01]])
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    uv = np.tile(np.array([[0.0, 0], [1, 0], [0, 1]]), (4, 1, 1))
    mesh, _ = make_mesh(v, f, uv, blank_texture(), normalize=False)
    ctx = ctx_of(mesh)
    a, b = ctx.cluster([0]), ctx.cluster([1, 2])
    assert folds_over(a.union(b))
    assert merge_cost(a, b, CostWeights(), 4) == INF


def test_weights_validation():
    with pytest.raises(ValueError):
        CostWeights(0, 0, 0, 0)
    with pytest.raises(ValueError):
        CostWeights(-1, 1, 1, 1)
    with pytest.raises(ValueError):
        CostWeights(count_mode="sum")


# --- incremental statistics --------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_union_stats_match_scratch(seed):
    mesh = ico_mesh(2)
    ctx = ctx_of(mesh)
    perm = np.random.default_rng(seed).permutation(mesh.n_faces)
    a, b = ctx.cluster(perm[:50]), ctx.cluster(perm[50:120])
    inc = a.union(b)
    ref = ctx.cluster(perm[:120])
    assert np.array_equal(inc.face_ids, ref.face_ids)
    assert inc.area == pytest.approx(ref.area, rel=1e-12)
    assert inc.boundary_len == pytest.approx(ref.boundary_len, rel=1e-9, abs=1e-12)
    assert inc.fit_error == pytest.approx(ref.fit_error, rel=1e-8, abs=1e-14)
    assert np.allclose(inc.mean_normal, ref.mean_normal, atol=1e-12)
    assert abs(inc.plane_normal @ ref.plane_normal) == pytest.approx(1.0, abs=1e-9)


def test_single_face_cluster_has_zero_fit():
    ctx = ctx_of(ico_mesh(1))
    c = ctx.cluster([5])
    assert c.fit_error == 0.0 and c.count == 1


def test_overlapping_union_rejected():
    ctx = ctx_of(grid_mesh(2))
    with pytest.raises(ValueError):
        ctx.cluster([0, 1]).union(ctx.cluster([1, 2]))


# --- partition_mesh ----------------------------------------------------------


def test_n_target_equal_face_count_is_identity():
    mesh = ico_mesh(1)
    cl = partition_mesh(mesh, None, mesh.n_faces)
    assert len(cl) == mesh.n_faces
    assert all(c.count == 1 for c in cl.clusters)


def test_n_target_one_on_flat_grid():
    mesh = grid_mesh(5)
    cl = partition_mesh(mesh, None, 1)
    assert len(cl) == 1 and cl.clusters[0].count == mesh.n_faces


def test_n_target_range_checked():
    mesh = grid_mesh(2)
    with pytest.raises(ValueError):
        partition_mesh(mesh, None, 0)
    with pytest.raises(ValueError):
        partition_mesh(mesh, None, mesh.n_faces + 1)


def test_unmergeable_returns_best_effort_with_warning():
    # a closed tetrahedron: any merge of two faces folds over with fit-plane normal check
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    uv = np.tile(np.array([[0.0, 0], [1, 0], [0, 1]]), (4, 1, 1))
    mesh, _ = make_mesh(v, f, uv, blank_texture(), normalize=False)
    cl = partition_mesh(mesh, None, 1)
    assert len(cl) > 1 and cl.warning
    check_partition(ctx_of(mesh), cl)


def test_deterministic():
    mesh = ico_mesh(3)
    a = partition_mesh(mesh, None, 40)
    b = partition_mesh(mesh, None, 40)
    assert np.array_equal(a.face_to_cluster, b.face_to_cluster)


@pytest.mark.parametrize("mode", ["change", "union"])
def test_partition_valid_and_fold_free(mode):
    mesh = ico_mesh(3)
    ctx = ctx_of(mesh)
    cl = partition_mesh(mesh, ctx.graph, 64, CostWeights(count_mode=mode))
    assert len(cl) == 64 and cl.warning is None
    check_partition(ctx, cl)
    for c in cl.clusters:
        assert np.all(ctx.normal[c.face_ids] @ c.plane_normal > 0)


def test_greedy_choice_against_full_scan():
    """Replay every recorded contraction, rescoring all live edges with the reference cost functions."""
    mesh = grid_mesh(9, z=lambda x, y: 0.3 * np.sin(4 * x) * np.cos(3 * y))
    ctx = ctx_of(mesh)
    w = CostWeights()
    n_target = 12
    cl = partition_mesh(mesh, ctx.graph, n_target, w, record=True)
    n_cap = cl.n_cap
    clusters = {f: ctx.cluster([f]) for f in range(mesh.n_faces)}
    owner = np.arange(mesh.n_faces)
    cache = {}

    def cost(i, j):
        key = (i, j, clusters[i].count, clusters[j].count)
        if key not in cache:
            cache[key] = merge_cost(clusters[i], clusters[j], w, n_cap)
        return cache[key]

    e = ctx.graph.edges
    for lo, hi, c in cl.merges:
        lo, hi = int(lo), int(hi)
        pairs = {tuple(sorted((int(owner[u]), int(owner[v])))) for u, v in e if owner[u] != owner[v]}
        best = min(cost(i, j) for i, j in pairs)
        assert (lo, hi) in pairs
        ref = cost(lo, hi)
        assert c == pytest.approx(ref, rel=1e-7, abs=1e-12)
        assert ref <= best + 1e-9 * max(1.0, abs(best))
        clusters[lo] = clusters[lo].union(clusters.pop(hi))
        owner[owner == hi] = lo
    assert len(clusters) == n_target


def test_weighted_count_never_increases_size_variance():
    mesh = ico_mesh(3)
    graph = build_dual_graph(mesh)
    variances = []
    for wc in (0.0, 0.25, 1.0, 4.0, 16.0):
        cl = partition_mesh(mesh, graph, 80, CostWeights(w_count=wc))
        variances.append(np.var([c.count for c in cl.clusters]))
    assert all(b <= a + 1e-12 for a, b in zip(variances, variances[1:])), variances


@pytest.mark.parametrize("n_target", [2048, 4096, 8192])
def test_level6_icosphere_sizes_balanced(n_target):
    v, f, uv = icosphere(6)
    mesh, _ = make_mesh(v, f, uv, blank_texture())
    cl = partition_mesh(mesh, None, n_target)
    assert len(cl) == n_target
    sizes = np.array([c.count for c in cl.clusters])
    assert sizes.std() / sizes.mean() < 0.5


def test_large_mesh_runtime():
    v, f, uv = icosphere(6)
    mesh, _ = make_mesh(v, f, uv, blank_texture())
    graph = build_dual_graph(mesh)
    partition_mesh(grid_mesh(2), None, 1)  # warm the compiled kernels
    t0 = time.perf_counter()
    cl = partition_mesh(mesh, graph, 1024)
    assert time.perf_counter() - t0 < 10.0
    assert len(cl) == 1024


def test_clustering_json_roundtrip(tmp_path):
    mesh = ico_mesh(2)
    cl = partition_mesh(mesh, None, 20)
    cl.save(tmp_path / "c.json")
    back = PatchClustering.load(tmp_path / "c.json", mesh)
    assert np.array_equal(back.face_to_cluster, cl.face_to_cluster)
    assert back.weights == cl.weights and back.n_cap == cl.n_cap
    for a, b in zip(cl.clusters, back.clusters):
        assert a.fit_error == b.fit_error and np.array_equal(a.plane_normal, b.plane_normal)


def test_clustering_load_face_count_mismatch(tmp_path):
    cl = partition_mesh(ico_mesh(1), None, 10)
    cl.save(tmp_path / "c.json")
    with pytest.raises(ValueError):
        PatchClustering.load(tmp_path / "c.json", ico_mesh(2))


def test_labels_renumbered_by_smallest_face():
    mesh = grid_mesh(2)
    ctx = ctx_of(mesh)
    cl = clustering_from_labels(ctx, [7, 7, 3, 3, 5, 5, 5, 5], 3, CostWeights())
    assert cl.face_to_cluster.tolist() == [0, 0, 1, 1, 2, 2, 2, 2]
