import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atmrn.mesh import (MeshError, NormalStats, TriMesh, build_adjacency, connected_components, edges,
                        euler_characteristic, face_normals, icosphere, is_closed_manifold, is_watertight,
                        load_obj, mean_template, merge, sample_surface, save_obj, signed_volume,
                        split_components, surface_area, taubin_smooth, uniform_laplacian,
                        uniform_laplacian_smooth_residual, vertex_normals)

TRI = TriMesh([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]], [[0, 1, 2]])


def hex_grid(n=5):
    """Triangulated planar grid of equilateral triangles."""
    pts, idx = [], {}
    for j in range(n):
        for i in range(n):
            idx[i, j] = len(pts)
            pts.append([i + 0.5 * (j % 2), j * np.sqrt(3) / 2, 0.0])
    faces = []
    for j in range(n - 1):
        for i in range(n - 1):
            if j % 2 == 0:
                faces += [(idx[i, j], idx[i + 1, j], idx[i, j + 1]), (idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1])]
            else:
                faces += [(idx[i, j], idx[i + 1, j + 1], idx[i, j + 1]), (idx[i, j], idx[i + 1, j], idx[i + 1, j + 1])]
    return TriMesh(np.array(pts), np.array(faces)), idx


def test_trimesh_validation():
    with pytest.raises(MeshError):
        TriMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(MeshError):
        TriMesh(np.zeros((3, 3)), [[0, 1, 1]])


@pytest.mark.parametrize("k,nv", [(0, 12), (1, 42), (2, 162), (3, 642), (4, 2562)])
def test_icosphere_counts_and_topology(k, nv):
    m = icosphere(k)
    assert m.n_vertices == nv and m.n_faces == 2 * nv - 4
    assert euler_characteristic(m) == 2
    assert is_watertight(m) and is_closed_manifold(m)
    assert signed_volume(m) > 0
    assert np.allclose(np.linalg.norm(m.vertices, axis=1), 1.0)


def test_adjacency_single_triangle():
    a = build_adjacency(TRI).to_dense()
    assert np.allclose(a, np.full((3, 3), 1 / 3), atol=1e-15)


def test_adjacency_isolated_vertex():
    m = TriMesh(np.vstack([TRI.vertices, [[5, 5, 5]]]), TRI.faces)
    a = build_adjacency(m)
    rows = a.row_idx == 3
    assert list(a.col_idx[rows]) == [3] and list(a.values[rows]) == [1.0]


def dense_adjacency_oracle(m):
    n = m.n_vertices
    a = np.eye(n)
    for f in m.faces:
        for i in range(3):
            for j in range(3):
                if i != j:
                    a[f[i], f[j]] = 1.0
    d = a.sum(axis=1)
    return a / np.sqrt(np.outer(d, d))


@pytest.mark.parametrize("k", [0, 1])
def test_adjacency_matches_dense_oracle_and_is_symmetric(k):
    m = icosphere(k)
    m = TriMesh(m.vertices + np.random.default_rng(k).normal(0, 0.05, m.vertices.shape), m.faces)
    a = build_adjacency(m)
    dense = a.to_dense()
    assert np.allclose(dense, dense_adjacency_oracle(m), atol=1e-7, rtol=0)
    assert np.array_equal(dense, dense.T)
    key = a.row_idx * a.cols + a.col_idx
    assert np.all(np.diff(key) > 0)


def test_residual_zero_at_hex_interior():
    m, idx = hex_grid(5)
    r = uniform_laplacian_smooth_residual(m)
    for j in range(1, 4):
        for i in range(1, 4):
            assert np.allclose(r[idx[i, j]], 0.0, atol=1e-12)


def test_residual_equilateral_triangle():
    r = uniform_laplacian_smooth_residual(TRI)
    v = TRI.vertices
    for i in range(3):
        others = [j for j in range(3) if j != i]
        mid = v[others].mean(axis=0)
        assert np.allclose(r[i], v[i] - mid, atol=1e-15)
    mags = np.linalg.norm(r, axis=1)
    assert np.allclose(mags, mags[0], atol=1e-15)


def test_residual_translation_invariant(rng):
    m = icosphere(2)
    t = rng.standard_normal(3)
    assert np.allclose(uniform_laplacian_smooth_residual(m), uniform_laplacian_smooth_residual(m.translated(t)),
                       atol=1e-12)


def test_laplacian_isolated_vertex_errors():
    m = TriMesh(np.vstack([TRI.vertices, [[5, 5, 5]]]), TRI.faces)
    with pytest.raises(MeshError):
        uniform_laplacian(m)


def test_square_normals():
    sq = TriMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])
    assert np.allclose(face_normals(sq), [[0, 0, 1]] * 2)
    assert np.allclose(vertex_normals(sq), [[0, 0, 1]] * 4)


def _max_normal_angle(k):
    m = icosphere(k)
    n = vertex_normals(m)
    return np.arccos(np.clip(np.sum(n * m.vertices, axis=1), -1, 1)).max()


def test_icosphere_vertex_normals_radial():
    # area weighting on the slightly irregular geodesic faces: error halves per subdivision
    assert _max_normal_angle(4) < 1e-2
    errs = [_max_normal_angle(k) for k in (2, 3, 4)]
    assert errs[1] < 0.55 * errs[0] and errs[2] < 0.55 * errs[1]


def test_flipping_winding_flips_normal():
    m = icosphere(1)
    f = m.faces.copy()
    f[5] = f[5, ::-1]
    n0, n1 = face_normals(m), face_normals(TriMesh(m.vertices, f))
    assert np.allclose(n1[5], -n0[5])
    assert np.allclose(np.delete(n1, 5, 0), np.delete(n0, 5, 0))


def test_zero_area_face_counted():
    m = TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], [[0, 1, 2], [0, 1, 3]])
    before = NormalStats.skipped_faces
    n = face_normals(m)
    assert NormalStats.skipped_faces == before + 1
    assert np.array_equal(n[0], [0, 0, 0]) and np.allclose(n[1], [0, 0, 1])


def test_mean_template_examples(rng):
    m = icosphere(2)
    assert np.array_equal(mean_template([m]).vertices, m.vertices)
    refl = TriMesh(-m.vertices, m.faces)
    assert np.array_equal(mean_template([m, refl]).vertices, np.zeros_like(m.vertices))
    t = rng.standard_normal(3)
    assert np.allclose(mean_template([m.translated(t), m.translated(-t)]).vertices, m.vertices, atol=1e-15)


def test_mean_template_mismatch_lists_offenders():
    a, b = icosphere(1), icosphere(2)
    with pytest.raises(MeshError, match=r"\[1, 3\]"):
        mean_template([a, b, a, b])


def test_taubin_examples():
    m = icosphere(3)
    assert np.array_equal(taubin_smooth(m, 0).vertices, m.vertices)
    r = np.random.default_rng(0)
    noisy = TriMesh(m.vertices * (1 + r.uniform(-0.05, 0.05, (m.n_vertices, 1))), m.faces)
    sm = taubin_smooth(noisy, 50)
    std0 = np.linalg.norm(noisy.vertices, axis=1).std()
    std1 = np.linalg.norm(sm.vertices, axis=1).std()
    assert std1 <= 0.5 * std0
    assert np.array_equal(sm.faces, noisy.faces)
    # shrink-resistant: mean radius stays close to 1
    assert abs(np.linalg.norm(sm.vertices, axis=1).mean() - 1) < 0.05


def test_obj_round_trip_bit_exact(tmp_path, rng):
    m = icosphere(2)
    m = TriMesh(m.vertices + rng.normal(0, 1e-3, m.vertices.shape), m.faces)
    back = load_obj(save_obj(m, tmp_path / "m.obj"))
    assert np.array_equal(back.vertices, m.vertices) and np.array_equal(back.faces, m.faces)
    text = (tmp_path / "m.obj").read_text().split("\n")
    assert text[m.n_vertices].startswith("f ") and min(int(x) for x in text[m.n_vertices].split()[1:]) >= 1


def test_components_and_merge():
    a = icosphere(1)
    b = icosphere(0).translated([3, 0, 0])
    m = merge([a, b])
    lab = connected_components(m)
    assert lab.max() == 1 and (lab == 0).sum() == 42 and (lab == 1).sum() == 12
    parts = split_components(m)
    assert np.array_equal(parts[1].vertices, b.vertices) and np.array_equal(parts[1].faces, b.faces)


def test_open_mesh_not_closed():
    sq = TriMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])
    assert not is_watertight(sq) and not is_closed_manifold(sq)


def test_sample_surface_area_uniform():
    # two squares, one with 4x the area -> ~4x the samples
    a = TriMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])
    b = TriMesh([[0, 0, 1], [2, 0, 1], [2, 2, 1], [0, 2, 1]], [[0, 1, 2], [0, 2, 3]])
    pts, nrm, fid = sample_surface(merge([a, b]), 20000, np.random.default_rng(0))
    frac = np.mean(pts[:, 2] > 0.5)
    assert abs(frac - 0.8) < 0.02
    assert np.allclose(nrm, [0, 0, 1])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_derived_structures_rigid_invariance(seed):
    """Area, edges and normals transform consistently under random rotations + translations."""
    r = np.random.default_rng(seed)
    m = icosphere(1)
    m = TriMesh(m.vertices * r.uniform(0.5, 1.5, (m.n_vertices, 1)), m.faces)
    q, _ = np.linalg.qr(r.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    t = r.standard_normal(3)
    moved = TriMesh(m.vertices @ q.T + t, m.faces)
    assert surface_area(moved) == pytest.approx(surface_area(m), rel=1e-12)
    assert np.array_equal(edges(moved), edges(m))
    assert np.allclose(face_normals(moved), face_normals(m) @ q.T, atol=1e-12)
    assert signed_volume(moved) == pytest.approx(signed_volume(m), rel=1e-9)
