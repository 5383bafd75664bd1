import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pariconv.errors import EstimationError, ParameterError
from pariconv.geom import (
    SHAPE_KINDS, NeighborGraph, PointCloud, Rotation, apply_rotation, estimate_normals_pca,
    generate_shape, knn, local_barycenter, random_rotation, sample_surface, surface_residual,
)

coords = st.floats(-10, 10, allow_nan=False, width=64)


def brute_knn(points, queries, k, exclude_self=False):
    out = []
    for qi, q in enumerate(queries):
        d = ((points - q) ** 2).sum(1)
        cand = [(d[j], j) for j in range(len(points)) if not (exclude_self and j == qi)]
        out.append([j for _, j in sorted(cand)[:k]])
    return np.array(out)


# -- containers ---------------------------------------------------------------

def test_pointcloud_rejects_bad_input():
    with pytest.raises(ParameterError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    with pytest.raises(ParameterError):
        PointCloud(np.zeros((2, 3)), normals=np.array([[1.0, 0, 0], [0, 0.5, 0]]))
    with pytest.raises(ParameterError):
        PointCloud(np.zeros((0, 3)))


def test_rotation_validates():
    with pytest.raises(ParameterError):
        Rotation(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ParameterError):
        Rotation(2 * np.eye(3))
    r = Rotation(np.eye(3))
    assert np.array_equal((r @ r.T).m, np.eye(3))


# -- knn ----------------------------------------------------------------------

def test_knn_small_example():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]])
    g = knn(pts, queries=pts[:1], k=2)
    assert g.indices.tolist() == [[0, 1]]


def test_knn_tie_goes_to_lower_index():
    pts = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 2, 0]])
    g = knn(pts, queries=np.zeros((1, 3)), k=1)
    assert g.indices.tolist() == [[0]]
    pts = np.array([[-1.0, 0, 0], [1, 0, 0], [0, 0, 1]])
    assert knn(pts, queries=np.zeros((1, 3)), k=3).indices.tolist() == [[0, 1, 2]]


def test_knn_matches_brute_force(rng):
    pts = rng.normal(size=(200, 3))
    g = knn(pts, k=16)
    assert np.array_equal(g.indices, brute_knn(pts, pts, 16))
    g = knn(pts, k=16, exclude_self=True)
    assert np.array_equal(g.indices, brute_knn(pts, pts, 16, exclude_self=True))


def test_knn_grid_ties_match_brute_force():
    # integer grid: many exactly tied distances
    g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    assert np.array_equal(knn(g, k=10).indices, brute_knn(g, g, 10))


def test_knn_high_dimensional_features(rng):
    x = rng.normal(size=(100, 40))
    assert np.array_equal(knn(x, k=7, exclude_self=True).indices, brute_knn(x, x, 7, exclude_self=True))


def test_knn_k_range():
    pts = np.zeros((5, 3)) + np.arange(5)[:, None]
    with pytest.raises(ParameterError):
        knn(pts, k=6)
    with pytest.raises(ParameterError):
        knn(pts, k=5, exclude_self=True)
    with pytest.raises(ParameterError):
        knn(pts, k=0)


@given(arrays(np.float64, (30, 3), elements=coords), st.integers(1, 29), st.randoms())
def test_knn_permutation_consistent(pts, k, r):
    perm = np.array(r.sample(range(30), 30))
    a = knn(pts, k=k).indices
    b = knn(pts[perm], k=k).indices
    d = ((pts[:, None] - pts[None]) ** 2).sum(-1)
    # neighbour distance profiles agree regardless of point order
    da = np.sort(np.take_along_axis(d, a, 1), 1)
    db = np.sort(np.take_along_axis(d[perm][:, perm], b, 1), 1)
    assert np.array_equal(da[perm], db)


# -- rotations ----------------------------------------------------------------

def test_z_rotation_fixes_vertical(rng):
    for _ in range(20):
        r = random_rotation(rng, "z").m
        assert np.array_equal(np.array([0.0, 0, 1]) @ r, [0.0, 0, 1])


def test_rotation_group_membership(rng):
    for mode in ("z", "so3"):
        for _ in range(50):
            m = random_rotation(rng, mode).m
            assert np.abs(m @ m.T - np.eye(3)).max() < 1e-10
            assert abs(np.linalg.det(m) - 1) < 1e-10


def test_so3_haar_trace_mean():
    rng = np.random.default_rng(7)
    tr = [np.trace(random_rotation(rng, "so3").m) for _ in range(100_000)]
    assert abs(np.mean(tr)) < 0.02


def test_unknown_rotation_mode(rng):
    with pytest.raises(ParameterError):
        random_rotation(rng, "x")


def test_apply_rotation(rng):
    c = generate_shape("box", 64, rng)
    assert np.array_equal(apply_rotation(c, np.eye(3)).positions, c.positions)
    r = random_rotation(rng, "so3")
    rc = apply_rotation(c, r)
    assert rc.label == c.label
    d0 = np.linalg.norm(c.positions[:, None] - c.positions[None], axis=-1)
    d1 = np.linalg.norm(rc.positions[:, None] - rc.positions[None], axis=-1)
    assert np.abs(d0 - d1).max() < 1e-10
    back = apply_rotation(rc, r.T)
    assert np.abs(back.positions - c.positions).max() < 1e-10
    assert np.abs(back.normals - c.normals).max() < 1e-10


# -- barycenter and normals ---------------------------------------------------

def test_local_barycenter_examples(rng):
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0]])
    g = NeighborGraph(np.array([[1, 2], [0, 0], [0, 0]]), 2)
    m = local_barycenter(pts, g)
    assert np.array_equal(m[0], [0.0, 0, 0])
    assert np.array_equal(m[1], pts[0])
    c = generate_shape("torus", 128, rng)
    g = knn(c.positions, k=10, exclude_self=True)
    r = random_rotation(rng, "so3").m
    assert np.abs(local_barycenter(c.positions @ r, g) - local_barycenter(c, g) @ r).max() < 1e-12


def test_plane_normals():
    rng = np.random.default_rng(3)
    pts = np.c_[rng.uniform(-1, 1, (50, 2)), np.zeros(50)]
    n = estimate_normals_pca(PointCloud(pts), k=8)
    assert np.abs(np.abs(n[:, 2]) - 1).max() < 1e-8


def test_sphere_normals_radial():
    rng = np.random.default_rng(4)
    c = generate_shape("sphere", 1024, rng)
    n = estimate_normals_pca(c, k=16)
    radial = c.positions / np.linalg.norm(c.positions, axis=1, keepdims=True)
    ang = np.degrees(np.arccos(np.clip(np.abs((n * radial).sum(1)), 0, 1)))
    assert np.mean(ang < 5.0) >= 0.99


def test_normals_rotate_with_cloud(rng):
    c = generate_shape("cylinder", 256, rng, noise_sigma=0.003)
    n0 = estimate_normals_pca(c, k=12)
    r = random_rotation(rng, "so3").m
    n1 = estimate_normals_pca(apply_rotation(c, r), k=12)
    gap = np.minimum(np.abs(n1 - n0 @ r).max(1), np.abs(n1 + n0 @ r).max(1))
    assert gap.max() < 1e-8
    # the orientation rule is equivariant itself, so signs agree except at exact ties
    assert np.mean(np.abs(n1 - n0 @ r).max(1) < 1e-8) > 0.99


def test_normals_oriented_away_from_barycenter(rng):
    c = generate_shape("sphere", 256, rng)
    g = knn(c.positions, k=16)
    n = estimate_normals_pca(c, k=16)
    assert np.all(((c.positions - local_barycenter(c, g)) * n).sum(1) >= -1e-12)


def test_normals_errors():
    with pytest.raises(ParameterError):
        estimate_normals_pca(PointCloud(np.eye(3)), k=2)
    pts = np.zeros((10, 3))
    pts[5:] = 1.0
    with pytest.raises(EstimationError) as err:
        estimate_normals_pca(PointCloud(pts), k=3)
    assert err.value.index == 0


# -- synthetic shapes ---------------------------------------------------------

@pytest.mark.parametrize("kind", SHAPE_KINDS)
def test_surface_residual(kind, rng):
    pts, nrm, params = sample_surface(kind, 2000, rng)
    assert np.abs(surface_residual(kind, params, pts)).max() < 1e-9
    assert np.abs(np.linalg.norm(nrm, axis=1) - 1).max() < 1e-12


@pytest.mark.parametrize("kind", SHAPE_KINDS)
def test_generate_shape_contract(kind):
    a = generate_shape(kind, 300, np.random.default_rng(5))
    b = generate_shape(kind, 300, np.random.default_rng(5))
    assert np.array_equal(a.positions, b.positions)
    assert len(a) == 300 and a.label == SHAPE_KINDS.index(kind)
    assert abs(np.linalg.norm(a.positions, axis=1).max() - 1) < 1e-12


def test_sphere_radius_and_normals(rng):
    c = generate_shape("sphere", 500, rng)
    r = np.linalg.norm(c.positions, axis=1)
    assert np.ptp(r) < 1e-9
    assert np.abs(c.normals - c.positions / r[:, None]).max() < 1e-9


def test_noise_and_dropout(rng):
    clean = generate_shape("cone", 1024, np.random.default_rng(1))
    noisy = generate_shape("cone", 1024, np.random.default_rng(1), noise_sigma=0.02)
    assert not np.array_equal(clean.positions, noisy.positions)
    thin = generate_shape("cone", 1024, rng, dropout=0.5)
    assert len(thin) >= 512
    with pytest.raises(ParameterError):
        generate_shape("cone", 8, rng)
    with pytest.raises(ParameterError):
        generate_shape("cone", 64, rng, dropout=1.0)
