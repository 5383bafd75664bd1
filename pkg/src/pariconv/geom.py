"""Point clouds, rotations, exact kNN, normals and synthetic shapes.

Points are row vectors throughout: a cloud ``P`` of shape (N, 3) is rotated
as ``P @ R``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EstimationError, ParameterError

SHAPE_KINDS = ("sphere", "box", "cylinder", "cone", "torus", "pyramid", "capsule", "helix")

# direct differences are used up to this dimension, Gram expansion beyond
_DIRECT_DIM = 8
_CHUNK_ELEMS = 1 << 22


@dataclass
class PointCloud:
    positions: np.ndarray
    normals: np.ndarray | None = None
    label: int | None = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ParameterError(f"positions must be (N, 3), got {self.positions.shape}")
        if len(self.positions) < 1:
            raise ParameterError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise ParameterError("positions contain non-finite values")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.positions.shape:
                raise ParameterError(
                    f"normals shape {self.normals.shape} != positions shape {self.positions.shape}"
                )
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ParameterError("normals must have unit length (tolerance 1e-6)")

    def __len__(self):
        return len(self.positions)

    def subset(self, keep: np.ndarray) -> "PointCloud":
        normals = None if self.normals is None else self.normals[keep]
        return PointCloud(self.positions[keep], normals, self.label)


@dataclass(frozen=True)
class Rotation:
    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ParameterError(f"rotation must be 3x3, got {m.shape}")
        if np.abs(m @ m.T - np.eye(3)).max() > 1e-10 or abs(np.linalg.det(m) - 1.0) > 1e-10:
            raise ParameterError("matrix is not a proper rotation")
        object.__setattr__(self, "m", m)

    @property
    def T(self) -> "Rotation":
        return Rotation(self.m.T)

    def __matmul__(self, other):
        if isinstance(other, Rotation):
            return Rotation(self.m @ other.m)
        return self.m @ other


@dataclass
class NeighborGraph:
    indices: np.ndarray
    k: int
    metric: str = "euclidean"
    exclude_self: bool = field(default=False)


def _as_matrix(r) -> np.ndarray:
    return r.m if isinstance(r, Rotation) else np.asarray(r, dtype=np.float64)


def pairwise_sqdist(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Squared distances, shape (..., M, N), batched over leading axes."""
    if points.shape[-1] <= _DIRECT_DIM:
        diff = queries[..., :, None, :] - points[..., None, :, :]
        return (diff * diff).sum(-1)
    qq = (queries * queries).sum(-1)[..., :, None]
    pp = (points * points).sum(-1)[..., None, :]
    d2 = qq + pp - 2.0 * (queries @ np.swapaxes(points, -1, -2))
    return np.maximum(d2, 0.0)


def select_k(d2: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries per row, ordered by (value, index).

    Works on arrays of shape (..., M, N). Boundary ties are resolved towards the
    lowest index, so the result does not depend on the selection algorithm.
    """
    n = d2.shape[-1]
    if k == n:
        cand = np.broadcast_to(np.arange(n), d2.shape).copy()
    else:
        cand = np.argpartition(d2, k - 1, axis=-1)[..., :k]
        cd = np.take_along_axis(d2, cand, -1)
        kth = cd.max(-1, keepdims=True)
        tied = (d2 <= kth).sum(-1) > k
        if np.any(tied):
            rows = d2[tied]
            cand[tied] = np.argsort(rows, axis=-1, kind="stable")[..., :k]
    cd = np.take_along_axis(d2, cand, -1)
    order = np.lexsort((cand, cd), axis=-1)
    return np.take_along_axis(cand, order, -1)


def knn(points, queries=None, k: int = 20, exclude_self: bool = False,
        metric: str = "euclidean") -> NeighborGraph:
    """Exact k nearest neighbours by squared Euclidean distance.

    With ``exclude_self`` the queries must be the points themselves and each
    point's own index is never returned (duplicates of it still can be).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] < 1:
        raise ParameterError(f"points must be (N, d) with d >= 1, got {points.shape}")
    if queries is None:
        queries = points
    queries = np.asarray(queries, dtype=np.float64)
    n = len(points)
    limit = n - 1 if exclude_self else n
    if not 1 <= k <= limit:
        raise ParameterError(f"k={k} out of range [1, {limit}] for N={n}")
    if exclude_self and len(queries) != n:
        raise ParameterError("exclude_self requires queries to be the point set itself")

    out = np.empty((len(queries), k), dtype=np.int64)
    step = max(1, _CHUNK_ELEMS // max(1, n * points.shape[1]))
    for s in range(0, len(queries), step):
        d2 = pairwise_sqdist(queries[s:s + step], points)
        if exclude_self:
            rows = np.arange(d2.shape[0])
            d2[rows, s + rows] = np.inf
        out[s:s + step] = select_k(d2, k)
    return NeighborGraph(out, k, metric, exclude_self)


def random_rotation(rng: np.random.Generator, mode: str = "so3") -> Rotation:
    if mode == "z":
        a = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(a), np.sin(a)
        return Rotation(np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]]))
    if mode == "so3":
        return Rotation(quaternion_to_matrix(rng.standard_normal(4)))
    if mode in ("none", None):
        return Rotation(np.eye(3))
    raise ParameterError(f"unknown rotation mode {mode!r}")


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    m = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    # re-orthonormalize away the last ulps so the Rotation check is comfortable
    u, _, vt = np.linalg.svd(m)
    return u @ vt


def apply_rotation(cloud: PointCloud, r) -> PointCloud:
    m = _as_matrix(r)
    normals = None if cloud.normals is None else cloud.normals @ m
    return PointCloud(cloud.positions @ m, normals, cloud.label)


def local_barycenter(cloud: PointCloud | np.ndarray, graph: NeighborGraph) -> np.ndarray:
    pos = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud)
    return pos[graph.indices].mean(axis=1)


def canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip rows so their largest-magnitude component is positive."""
    pick = np.argmax(np.abs(v), axis=-1)
    s = np.sign(np.take_along_axis(v, pick[..., None], -1))
    s[s == 0] = 1.0
    return v * s


def pca_normals(positions: np.ndarray, neighborhoods: np.ndarray) -> np.ndarray:
    """Oriented PCA normals from explicit neighbourhood index rows (N, m).

    The smallest-eigenvalue eigenvector of each neighbourhood covariance is
    flipped so that it points from the neighbourhood mean towards the point.
    """
    nb = positions[neighborhoods]
    mean = nb.mean(axis=1)
    centered = nb - mean[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / neighborhoods.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    scale = np.maximum(np.abs(centered).max(axis=(1, 2)), np.abs(positions).max())
    bad = np.nonzero(evals[:, -1] <= (1e-12 * scale) ** 2)[0]
    if len(bad):
        i = int(bad[0])
        raise EstimationError(f"degenerate (rank-0) neighbourhood at point {i}", index=i)
    normals = canonical_sign(evecs[:, :, 0])
    side = np.einsum("ni,ni->n", normals, positions - mean)
    normals[side < 0] *= -1.0
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def estimate_normals_pca(cloud: PointCloud, k: int = 16) -> np.ndarray:
    """Unit normals from the k nearest neighbours (the point itself included)."""
    if k < 3:
        raise ParameterError(f"PCA normals need k >= 3, got {k}")
    if k > len(cloud):
        raise ParameterError(f"k={k} exceeds cloud size {len(cloud)}")
    graph = knn(cloud.positions, k=k)
    return pca_normals(cloud.positions, graph.indices)


# --------------------------------------------------------------------------
# synthetic shapes
# --------------------------------------------------------------------------

def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _split(n, areas, rng):
    """Distribute n samples over surface patches proportionally to area."""
    areas = np.asarray(areas, dtype=np.float64)
    return rng.multinomial(n, areas / areas.sum())


def _ring_angle(n, rng):
    return rng.uniform(0.0, 2.0 * np.pi, n)


def _sample_disk(n, radius, z, up, rng):
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    t = _ring_angle(n, rng)
    pts = np.stack([r * np.cos(t), r * np.sin(t), np.full(n, z)], axis=1)
    nrm = np.tile([0.0, 0.0, 1.0 if up else -1.0], (n, 1))
    return pts, nrm


def _sample_triangle(n, a, b, c, rng):
    u = rng.uniform(0.0, 1.0, (n, 2))
    flip = u.sum(1) > 1
    u[flip] = 1.0 - u[flip]
    pts = a + u[:, :1] * (b - a) + u[:, 1:] * (c - a)
    nrm = np.tile(_unit(np.cross(b - a, c - a)), (n, 1))
    return pts, nrm


def _sphere(n, rng):
    pts = _unit(rng.standard_normal((n, 3)))
    return pts, pts.copy(), {"radius": 1.0}


def _box(n, rng):
    h = rng.uniform(0.5, 1.0, 3)
    areas = [h[1] * h[2]] * 2 + [h[0] * h[2]] * 2 + [h[0] * h[1]] * 2
    counts = _split(n, areas, rng)
    pts, nrm = [], []
    for face, m in enumerate(counts):
        axis, sign = face // 2, (1.0 if face % 2 == 0 else -1.0)
        p = rng.uniform(-1.0, 1.0, (m, 3)) * h
        p[:, axis] = sign * h[axis]
        q = np.zeros((m, 3))
        q[:, axis] = sign
        pts.append(p)
        nrm.append(q)
    return np.concatenate(pts), np.concatenate(nrm), {"half_extents": h}


def _cylinder(n, rng):
    r, h = rng.uniform(0.4, 0.6), rng.uniform(0.8, 1.2)
    side, top, bottom = _split(n, [2 * np.pi * r * 2 * h, np.pi * r * r, np.pi * r * r], rng)
    t = _ring_angle(side, rng)
    ps = np.stack([r * np.cos(t), r * np.sin(t), rng.uniform(-h, h, side)], axis=1)
    ns = np.stack([np.cos(t), np.sin(t), np.zeros(side)], axis=1)
    pt, nt = _sample_disk(top, r, h, True, rng)
    pb, nb = _sample_disk(bottom, r, -h, False, rng)
    return (np.concatenate([ps, pt, pb]), np.concatenate([ns, nt, nb]),
            {"radius": r, "half_height": h})


def _cone(n, rng):
    rad, height = rng.uniform(0.5, 0.8), rng.uniform(1.0, 1.5)
    slant = np.hypot(rad, height)
    lateral, base = _split(n, [np.pi * rad * slant, np.pi * rad * rad], rng)
    s = np.sqrt(rng.uniform(0.0, 1.0, lateral))  # fraction of the way from apex to rim
    t = _ring_angle(lateral, rng)
    rho = rad * s
    pl = np.stack([rho * np.cos(t), rho * np.sin(t), height / 2 - height * s], axis=1)
    nl = np.stack([height * np.cos(t), height * np.sin(t), np.full(lateral, rad)], axis=1) / slant
    pb, nb = _sample_disk(base, rad, -height / 2, False, rng)
    return (np.concatenate([pl, pb]), np.concatenate([nl, nb]),
            {"radius": rad, "height": height})


def _torus(n, rng):
    big, small = 1.0, rng.uniform(0.2, 0.4)
    vs = np.empty(0)
    while len(vs) < n:
        v = rng.uniform(0.0, 2.0 * np.pi, 2 * n)
        keep = rng.uniform(0.0, big + small, 2 * n) < big + small * np.cos(v)
        vs = np.concatenate([vs, v[keep]])
    v = vs[:n]
    u = _ring_angle(n, rng)
    nrm = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    ring = np.stack([big * np.cos(u), big * np.sin(u), np.zeros(n)], axis=1)
    return ring + small * nrm, nrm, {"major": big, "minor": small}


def _pyramid(n, rng):
    a, height = rng.uniform(0.6, 0.9), rng.uniform(1.0, 1.5)
    apex = np.array([0.0, 0.0, height / 2])
    z0 = -height / 2
    corners = [np.array(c) for c in ([a, a, z0], [-a, a, z0], [-a, -a, z0], [a, -a, z0])]
    tri_area = a * np.hypot(height, a)
    counts = _split(n, [tri_area] * 4 + [4 * a * a], rng)
    pts, nrm = [], []
    for i in range(4):
        p, q = _sample_triangle(counts[i], corners[i], corners[(i + 1) % 4], apex, rng)
        pts.append(p)
        nrm.append(q)
    m = counts[4]
    pb = np.column_stack([rng.uniform(-a, a, (m, 2)), np.full(m, z0)])
    pts.append(pb)
    nrm.append(np.tile([0.0, 0.0, -1.0], (m, 1)))
    return np.concatenate(pts), np.concatenate(nrm), {"half_base": a, "height": height}


def _capsule(n, rng):
    r, h = rng.uniform(0.35, 0.5), rng.uniform(0.5, 0.8)
    side, caps = _split(n, [2 * np.pi * r * 2 * h, 4 * np.pi * r * r], rng)
    t = _ring_angle(side, rng)
    ps = np.stack([r * np.cos(t), r * np.sin(t), rng.uniform(-h, h, side)], axis=1)
    ns = np.stack([np.cos(t), np.sin(t), np.zeros(side)], axis=1)
    d = _unit(rng.standard_normal((caps, 3)))
    centers = np.zeros((caps, 3))
    centers[:, 2] = np.where(d[:, 2] >= 0, h, -h)
    return (np.concatenate([ps, centers + r * d]), np.concatenate([ns, d]),
            {"radius": r, "half_length": h})


def _helix(n, rng):
    # helicoid ribbon x = s cos t, y = s sin t, z = pitch * t
    turns = rng.uniform(1.0, 1.5)
    s0, s1 = 0.25, rng.uniform(0.7, 0.9)
    t_max = 2.0 * np.pi * turns
    pitch = 2.0 / t_max
    ss = np.empty(0)
    cap = np.hypot(pitch, s1)
    while len(ss) < n:
        s = rng.uniform(s0, s1, 2 * n)
        keep = rng.uniform(0.0, cap, 2 * n) < np.hypot(pitch, s)
        ss = np.concatenate([ss, s[keep]])
    s = ss[:n]
    t = rng.uniform(-t_max / 2, t_max / 2, n)
    pts = np.stack([s * np.cos(t), s * np.sin(t), pitch * t], axis=1)
    nrm = np.stack([pitch * np.sin(t), -pitch * np.cos(t), s], axis=1) / np.hypot(pitch, s)[:, None]
    return pts, nrm, {"pitch": pitch, "inner": s0, "outer": s1, "half_angle": t_max / 2}


_SAMPLERS = {
    "sphere": _sphere, "box": _box, "cylinder": _cylinder, "cone": _cone,
    "torus": _torus, "pyramid": _pyramid, "capsule": _capsule, "helix": _helix,
}


def sample_surface(kind: str, n: int, rng: np.random.Generator):
    """Raw surface samples ``(points, normals, params)`` before normalization."""
    if kind not in _SAMPLERS:
        raise ParameterError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    return _SAMPLERS[kind](n, rng)


def surface_residual(kind: str, params: dict, pts: np.ndarray) -> np.ndarray:
    """Implicit-surface value of each point; zero on the analytic surface."""
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    rho = np.hypot(x, y)
    if kind == "sphere":
        return np.linalg.norm(pts, axis=1) - params["radius"]
    if kind == "box":
        return (np.abs(pts) - params["half_extents"]).max(axis=1)
    if kind == "cylinder":
        return np.maximum(rho - params["radius"], np.abs(z) - params["half_height"])
    if kind == "cone":
        rad, height = params["radius"], params["height"]
        lateral = (rho - rad * (height / 2 - z) / height) * height / np.hypot(rad, height)
        return np.maximum(lateral, -(z + height / 2))
    if kind == "torus":
        return np.hypot(rho - params["major"], z) - params["minor"]
    if kind == "pyramid":
        a, height = params["half_base"], params["height"]
        slant = np.hypot(height, a)
        faces = [(height * c + a * z - a * height / 2) / slant for c in (x, -x, y, -y)]
        return np.max(np.stack(faces + [-(z + height / 2)]), axis=0)
    if kind == "capsule":
        zc = np.clip(z, -params["half_length"], params["half_length"])
        return np.hypot(rho, z - zc) - params["radius"]
    if kind == "helix":
        t = z / params["pitch"]
        return x * np.sin(t) - y * np.cos(t)
    raise ParameterError(f"unknown shape kind {kind!r}")


def generate_shape(kind: str, n: int, rng: np.random.Generator, noise_sigma: float = 0.0,
                   dropout: float = 0.0) -> PointCloud:
    """Sample a labelled synthetic shape normalized into the unit ball.

    The shape is scaled about its analytic center (the origin) so the farthest
    sample lies on the unit sphere, then optionally jittered with isotropic
    Gaussian noise and thinned by dropping ``floor(dropout * n)`` random points.
    Normals stay analytic.
    """
    if n < 16:
        raise ParameterError(f"n must be >= 16, got {n}")
    if noise_sigma < 0:
        raise ParameterError("noise_sigma must be non-negative")
    if not 0.0 <= dropout < 1.0:
        raise ParameterError("dropout must lie in [0, 1)")
    pts, nrm, _ = sample_surface(kind, n, rng)
    pts = pts / np.linalg.norm(pts, axis=1).max()
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    n_drop = int(np.floor(dropout * n))
    if n_drop:
        keep = np.sort(rng.permutation(n)[n_drop:])
        pts, nrm = pts[keep], nrm[keep]
    return PointCloud(pts, _unit(nrm), SHAPE_KINDS.index(kind))
