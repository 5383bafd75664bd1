"""Pose-ambiguity probe: rotate each neighbour patch about its own centre.

A centre point sees two arc-shaped patches (mouth corners curving up or down).
Per-patch rotations leave every patch's rotation-invariant descriptor
unchanged, so any aggregation that only sees those descriptors (and the
centre-to-patch distances) cannot tell the configurations apart. PaRI-Conv also
sees the relative pose between the centre frame and each patch frame, which
does change.
"""

from __future__ import annotations

import numpy as np

from .geom import random_rotation
from .lrf import orthonormalize_batch
from .net import PariConv, pari_conv
from .pairfeat import edge_relpose

ARC_POINTS = 5


def _arc(center, bend, m=ARC_POINTS, radius=0.25, span=1.2):
    """Points of a circular arc in the z=0 plane whose midpoint is ``center``."""
    t = np.linspace(-span / 2, span / 2, m)
    local = np.stack([radius * np.sin(t), bend * radius * (1 - np.cos(t)), np.zeros(m)], axis=1)
    return center + local


def patch_descriptor(points, center) -> np.ndarray:
    """Sorted distances to the patch centre and covariance eigenvalues."""
    rel = points - center
    dist = np.sort(np.linalg.norm(rel, axis=1))
    cov = rel.T @ rel / len(rel)
    return np.concatenate([dist, np.linalg.eigvalsh(cov)])


def _scene(rotations):
    centers = np.array([[0.0, 0.0, 0.0], [0.6, 0.2, 0.0], [-0.6, 0.2, 0.0]])
    bends = (1.0, 1.0, -1.0)
    patches, frames = [], []
    for c, bend, r in zip(centers, bends, rotations):
        pts = c + (_arc(c, bend) - c) @ r
        normal = np.array([0.0, 0.0, 1.0]) @ r
        frame, _ = orthonormalize_batch(normal[None], (pts.mean(axis=0) - c)[None])
        patches.append(pts)
        frames.append(frame[0])
    return centers, patches, np.array(frames)


def ambiguity_probe(seed: int, identity: bool = False, width: int = 16) -> dict:
    """Output change of an isotropic aggregation and of one PaRI-Conv layer.

    The centre patch stays fixed; each neighbour patch gets its own random
    rotation about its centre (or the identity when ``identity`` is set).
    """
    rng = np.random.default_rng(seed)
    rots = [np.eye(3)] + [np.eye(3) if identity else random_rotation(rng, "so3").m for _ in range(2)]
    dim = ARC_POINTS + 3
    w_iso = rng.normal(size=(dim, width))
    a_iso = rng.normal(size=width)
    layer = PariConv(dim, width, 8, 32, rng, np.float64)
    layer.eval()
    graph = np.array([[1, 2], [0, 2], [0, 1]])

    def outputs(rotations):
        centers, patches, frames = _scene(rotations)
        h = np.stack([patch_descriptor(p, c) for p, c in zip(patches, centers)])
        dist = np.linalg.norm(centers[1:] - centers[0], axis=1)
        # isotropic kernel: weights depend on the neighbour only through its distance
        iso = (np.tanh(np.outer(dist, a_iso)) * (h[1:] @ w_iso)).max(axis=0)
        rp = edge_relpose(centers, frames, graph, "appf8")
        pari = pari_conv(h, rp, graph, layer).data[0]
        return iso, pari

    iso0, pari0 = outputs([np.eye(3)] * 3)
    iso1, pari1 = outputs(rots)
    return {
        "baseline_delta": float(np.abs(iso1 - iso0).max()),
        "pari_delta": float(np.abs(pari1 - pari0).max()),
    }
