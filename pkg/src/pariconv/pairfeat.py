"""Rotation-invariant relative-pose features between oriented points.

All batch functions broadcast over leading axes: positions are ``(..., 3)``
and frames ``(..., 3, 3)`` with rows (d1, d2, d3). Angles are reported through
cosines and sine/cosine pairs computed from frame-local coordinates, so no
inverse trigonometric function sits on the 8-vector path.
"""

from __future__ import annotations

import csv
import struct

import numpy as np

from .errors import InvalidPairError, ParameterError

RELPOSE_DIMS = {"rt12": 12, "ppf4": 4, "appf_nodir5": 5, "appf8": 8}
AZIMUTH_EPS = 1e-9

_DUMP_MAGIC = b"PAPF"
_DUMP_VERSION = 1


def _local(frames, v):
    return np.einsum("...ij,...j->...i", frames, v)


def vector_angle(a, b):
    """Unsigned angle in [0, pi], accurate near 0 and pi."""
    return np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), (a * b).sum(-1))


def _azimuth_pair(loc, dist):
    """(cos, sin) of the signed azimuth from frame-local coordinates."""
    h = np.hypot(loc[..., 1], loc[..., 2])
    flat = ~(h >= AZIMUTH_EPS * dist) | ~(dist > 0)
    safe = np.where(flat, 1.0, h)
    c = np.where(flat, 1.0, loc[..., 1] / safe)
    s = np.where(flat, 0.0, loc[..., 2] / safe)
    return c, s


def azimuth(d, frame) -> float:
    """Signed angle of d projected on the (d2, d3) plane, measured from d2."""
    d = np.asarray(d, dtype=np.float64)
    loc = np.asarray(frame, dtype=np.float64) @ d
    c, s = _azimuth_pair(loc, np.linalg.norm(d))
    return float(np.arctan2(s, c))


def _cos_to(axis, d, dist):
    safe = np.where(dist > 0, dist, 1.0)
    return np.where(dist > 0, np.clip((axis * d).sum(-1) / safe, -1.0, 1.0), 1.0)


def ppf_batch(pr, Lr, pj, Lj):
    d = pj - pr
    dist = np.linalg.norm(d, axis=-1)
    a1 = np.where(dist > 0, vector_angle(Lr[..., 0, :], d), 0.0)
    a2 = np.where(dist > 0, vector_angle(Lj[..., 0, :], d), 0.0)
    a3 = vector_angle(Lr[..., 0, :], Lj[..., 0, :])
    return np.stack([dist, a1, a2, a3], axis=-1)


def _appf_parts(pr, Lr, pj, Lj):
    d = pj - pr
    dist = np.linalg.norm(d, axis=-1)
    c1 = _cos_to(Lr[..., 0, :], d, dist)
    c2 = _cos_to(Lj[..., 0, :], d, dist)
    c3 = np.clip((Lr[..., 0, :] * Lj[..., 0, :]).sum(-1), -1.0, 1.0)
    cb_rj, sb_rj = _azimuth_pair(_local(Lr, d), dist)
    cb_jr, sb_jr = _azimuth_pair(_local(Lj, -d), dist)
    return d, dist, c1, c2, c3, cb_rj, sb_rj, cb_jr, sb_jr


def appf_batch(pr, Lr, pj, Lj):
    _, dist, c1, c2, c3, cb_rj, sb_rj, cb_jr, sb_jr = _appf_parts(pr, Lr, pj, Lj)
    return np.stack([dist, c1, c2, c3, cb_rj, sb_rj, cb_jr, sb_jr], axis=-1)


def relpose_batch(pr, Lr, pj, Lj, variant: str = "appf8"):
    if variant == "appf8":
        return appf_batch(pr, Lr, pj, Lj)
    if variant == "ppf4":
        return ppf_batch(pr, Lr, pj, Lj)
    if variant == "appf_nodir5":
        _, dist, c1, c2, _, cb, sb, _, _ = _appf_parts(pr, Lr, pj, Lj)
        return np.stack([dist, c1, cb, sb, c2], axis=-1)
    if variant == "rt12":
        rel = Lr @ np.swapaxes(Lj, -1, -2)
        t = _local(Lr, pj - pr)
        return np.concatenate([rel.reshape(*rel.shape[:-2], 9), t], axis=-1)
    raise ParameterError(f"unknown relative pose variant {variant!r}; expected one of {tuple(RELPOSE_DIMS)}")


def _pair_args(p_r, L_r, p_j, L_j):
    p_r, p_j = np.asarray(p_r, np.float64), np.asarray(p_j, np.float64)
    L_r, L_j = np.asarray(L_r, np.float64), np.asarray(L_j, np.float64)
    if np.array_equal(p_r, p_j) and np.array_equal(L_r, L_j):
        raise InvalidPairError("a point paired with itself has no relative pose")
    return p_r, L_r, p_j, L_j


def ppf(p_r, L_r, p_j, L_j) -> np.ndarray:
    """(|d|, alpha1, alpha2, alpha3) with angles in radians."""
    return ppf_batch(*_pair_args(p_r, L_r, p_j, L_j))


def appf(p_r, L_r, p_j, L_j) -> np.ndarray:
    return appf_batch(*_pair_args(p_r, L_r, p_j, L_j))


def relpose(p_r, L_r, p_j, L_j, variant: str = "appf8") -> np.ndarray:
    return relpose_batch(*_pair_args(p_r, L_r, p_j, L_j), variant=variant)


def appf_aligned(p_r, L_r, p_j, L_j) -> np.ndarray:
    """APPF read off after moving the pair into the centre frame.

    Slow reference path: builds the rigid map taking ``L_r`` to the identity,
    applies it to both points and both frames, then reads every component
    from canonical coordinates (distances via hypot, directions via atan2).
    """
    p_r, L_r, p_j, L_j = (np.asarray(a, np.float64) for a in (p_r, L_r, p_j, L_j))
    align = L_r.T  # x @ L_r.T expresses a row vector in the centre frame
    q = (p_j - p_r) @ align
    Fj = L_j @ align
    dist = float(np.sqrt(q @ q))
    if dist == 0:
        return np.array([0.0, 1.0, 1.0, float(Fj[0, 0]), 1.0, 0.0, 1.0, 0.0])
    u = q / dist
    # centre frame is now the identity: d1 = e_x, d2 = e_y, d3 = e_z
    beta_rj = np.arctan2(q[2], q[1]) if np.hypot(q[1], q[2]) >= AZIMUTH_EPS * dist else 0.0
    back = -q @ Fj.T  # -d in the neighbour's own frame
    beta_jr = np.arctan2(back[2], back[1]) if np.hypot(back[1], back[2]) >= AZIMUTH_EPS * dist else 0.0
    return np.array([
        dist, u[0], float(Fj[0] @ u), float(Fj[0, 0]),
        np.cos(beta_rj), np.sin(beta_rj), np.cos(beta_jr), np.sin(beta_jr),
    ])


def input_attributes(positions, frames) -> np.ndarray:
    """(|p|, sin, cos) of the angle between each point and its primal axis."""
    pos = getattr(positions, "positions", positions)
    pos = np.asarray(pos, dtype=np.float64)
    d1 = np.asarray(frames)[..., 0, :]
    r = np.linalg.norm(pos, axis=-1)
    s = np.linalg.norm(np.cross(d1, pos), axis=-1)
    c = (d1 * pos).sum(-1)
    h = np.hypot(s, c)
    zero = ~(h > 0)
    safe = np.where(zero, 1.0, h)
    return np.stack([r, np.where(zero, 0.0, s / safe), np.where(zero, 1.0, c / safe)], axis=-1)


def edge_relpose(positions, frames, indices, variant: str = "appf8") -> np.ndarray:
    """Relative poses for every (point, neighbour) edge of a graph.

    ``indices`` has shape (N, k) or (B, N, k) with positions/frames batched the
    same way. Returns (..., N, k, dim).
    """
    indices = np.asarray(indices)
    n = indices.shape[-2]
    if np.any(indices == np.arange(n)[:, None]):
        raise InvalidPairError("graph contains a self-loop")
    if indices.ndim == 2:
        pj, Lj = positions[indices], frames[indices]
    else:
        b = np.arange(indices.shape[0])[:, None, None]
        pj, Lj = positions[b, indices], frames[b, indices]
    pr = np.expand_dims(positions, -2)
    Lr = np.expand_dims(frames, -3)
    return relpose_batch(pr, Lr, pj, Lj, variant)


def save_edge_dump(path, indices, values) -> None:
    """Binary dump: see README, "Edge feature dump"."""
    indices = np.asarray(indices)
    values = np.asarray(values, dtype="<f8")
    n, k = indices.shape
    dim = values.shape[-1]
    if values.shape != (n, k, dim):
        raise ParameterError(f"values shape {values.shape} does not match graph {(n, k)}")
    with open(path, "wb") as fh:
        fh.write(_DUMP_MAGIC)
        fh.write(struct.pack("<IIII", _DUMP_VERSION, n, k, dim))
        fh.write(indices.astype("<i4").tobytes(order="C"))
        fh.write(values.tobytes(order="C"))


def load_edge_dump(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _DUMP_MAGIC:
        raise ParameterError(f"{path}: not an edge feature dump")
    version, n, k, dim = struct.unpack_from("<IIII", raw, 4)
    if version != _DUMP_VERSION:
        raise ParameterError(f"{path}: unsupported dump version {version}")
    off = 20
    idx = np.frombuffer(raw, "<i4", n * k, off).reshape(n, k).astype(np.int64)
    off += 4 * n * k
    vals = np.frombuffer(raw, "<f8", n * k * dim, off).reshape(n, k, dim).copy()
    return idx, vals


def save_edge_csv(path, indices, values) -> None:
    indices = np.asarray(indices)
    values = np.asarray(values)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["r", "slot", "j"] + [f"f{i}" for i in range(values.shape[-1])])
        for r in range(indices.shape[0]):
            for s in range(indices.shape[1]):
                w.writerow([r, s, int(indices[r, s])] + ["%.17e" % v for v in values[r, s]])
