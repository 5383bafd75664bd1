"""Per-point local reference frames.

A frame is a 3x3 array whose rows are the axes (d1, d2, d3). For row-vector
points, rotating the cloud by ``R`` rotates every frame to ``F @ R``.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .errors import DegenerateAxesError, ParameterError
from .geom import NeighborGraph, PointCloud, local_barycenter, pca_normals

DEGENERACY_TOL = 1e-8


class AxisPolicy(str, Enum):
    NORMAL_BARYCENTER = "normal_barycenter"
    NORMAL_GLOBALCENTER = "normal_globalcenter"
    GLOBALCENTER_BARYCENTER = "globalcenter_barycenter"
    BARYCENTER_GLOBALCENTER = "barycenter_globalcenter"
    PCA_BARYCENTER = "pca_barycenter"

    @property
    def needs_normals(self) -> bool:
        return self in (AxisPolicy.NORMAL_BARYCENTER, AxisPolicy.NORMAL_GLOBALCENTER)


POLICIES = tuple(p.value for p in AxisPolicy)


def _cross_norm_ok(d1, e2):
    c = np.cross(d1, e2)
    cn = np.linalg.norm(c, axis=-1)
    en = np.linalg.norm(e2, axis=-1)
    return c, cn, cn > DEGENERACY_TOL * en


def orthonormalize_batch(e1: np.ndarray, e2: np.ndarray):
    """Frames from axis pairs of shape (N, 3); also returns the validity mask."""
    d1 = e1 / np.linalg.norm(e1, axis=-1, keepdims=True)
    c, cn, ok = _cross_norm_ok(d1, e2)
    d3 = c / np.where(ok, cn, 1.0)[..., None]
    d2 = np.cross(d3, d1)
    return np.stack([d1, d2, d3], axis=-2), ok


def orthonormalize(e1, e2) -> np.ndarray:
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if not np.linalg.norm(e1) > 0:
        raise DegenerateAxesError("primal axis has zero length")
    frame, ok = orthonormalize_batch(e1[None], e2[None])
    if not ok[0]:
        raise DegenerateAxesError(f"axes {e1.tolist()} and {e2.tolist()} are parallel")
    return frame[0]


def _axes(policy, pos, normals, bary, center, graph):
    to_bary = bary - pos
    from_center = pos - center
    if policy is AxisPolicy.NORMAL_BARYCENTER:
        return normals, to_bary
    if policy is AxisPolicy.NORMAL_GLOBALCENTER:
        return normals, from_center
    if policy is AxisPolicy.GLOBALCENTER_BARYCENTER:
        return from_center, to_bary
    if policy is AxisPolicy.BARYCENTER_GLOBALCENTER:
        return to_bary, from_center
    hood = np.concatenate([np.arange(len(pos))[:, None], graph.indices], axis=1)
    return pca_normals(pos, hood), to_bary


def build_lrfs(cloud: PointCloud, graph: NeighborGraph, policy="normal_barycenter") -> np.ndarray:
    """One frame per point, shape (N, 3, 3).

    Points whose axis pair is degenerate retry with the global-center
    direction and then with the direction to their lowest-index neighbour that
    is not parallel to the primal axis.
    """
    policy = AxisPolicy(policy)
    pos = cloud.positions
    if policy.needs_normals and cloud.normals is None:
        raise ParameterError(f"policy {policy.value} needs normals")
    center = pos.mean(axis=0)
    bary = local_barycenter(pos, graph)
    e1, e2 = _axes(policy, pos, cloud.normals, bary, center, graph)

    e1n = np.linalg.norm(e1, axis=1)
    scale = max(np.abs(pos).max(), 1.0)
    zero = np.nonzero(~(e1n > 1e-12 * scale))[0]
    if len(zero):
        i = int(zero[0])
        raise DegenerateAxesError(f"zero-length primal axis at point {i}", index=i)

    frames, ok = orthonormalize_batch(e1, e2)
    for i in np.nonzero(~ok)[0]:
        frames[i] = _fallback_frame(i, e1[i], pos, center, graph)
    return frames


def _fallback_frame(i, e1, pos, center, graph):
    candidates = [pos[i] - center]
    candidates += [pos[j] - pos[i] for j in np.sort(graph.indices[i])]
    for e2 in candidates:
        frame, ok = orthonormalize_batch(e1[None], e2[None])
        if ok[0]:
            return frame[0]
    raise DegenerateAxesError(f"no usable secondary axis at point {i}", index=int(i))
