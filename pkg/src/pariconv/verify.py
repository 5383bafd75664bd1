"""Rotation invariance checks along the whole feature chain.

Each check draws random inputs, applies random SO(3) rotations and reports the
largest deviation between the quantities that should agree. A failing check
writes its worst-case inputs to a JSON file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .geom import SHAPE_KINDS, PointCloud, generate_shape, knn, random_rotation
from .lrf import AxisPolicy, build_lrfs
from .net import Classifier, ClassifierConfig, classifier_forward
from .pairfeat import input_attributes, relpose_batch, vector_angle

PAIR_TOL = 1e-10
FRAME_TOL = 1e-8
E2E_TOL = {"float64": 1e-8, "float32": 1e-4}


@dataclass
class CheckResult:
    name: str
    deviation: float
    threshold: float
    worst: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.deviation < self.threshold)


def _rotations(rng, count):
    return [random_rotation(rng, "so3").m for _ in range(count)]


def _random_frames(rng, n):
    return np.stack([random_rotation(rng, "so3").m for _ in range(n)])


def check_angles(rng, trials, rotations):
    a, b = rng.normal(size=(2, trials, 3))
    ref = vector_angle(a, b)
    worst, dev = {}, 0.0
    for r in _rotations(rng, rotations):
        d = np.abs(vector_angle(a @ r, b @ r) - ref)
        i = int(np.argmax(d))
        if d[i] > dev:
            dev, worst = float(d[i]), {"a": a[i], "b": b[i], "rotation": r}
    return CheckResult("angle_invariance", dev, PAIR_TOL, worst)


def check_distances(rng, trials, rotations):
    p, q = rng.normal(size=(2, trials, 3))
    ref = np.linalg.norm(p - q, axis=1)
    worst, dev = {}, 0.0
    for r in _rotations(rng, rotations):
        d = np.abs(np.linalg.norm(p @ r - q @ r, axis=1) - ref)
        i = int(np.argmax(d))
        if d[i] > dev:
            dev, worst = float(d[i]), {"p": p[i], "q": q[i], "rotation": r}
    return CheckResult("distance_invariance", dev, PAIR_TOL, worst)


def _frame_gap(a, b, sign_free):
    if not sign_free:
        return np.abs(a - b).max(axis=(1, 2))
    # PCA normals carry a data-dependent sign; flipping d1 flips d3 and keeps d2
    flip = np.array([-1.0, 1.0, -1.0])[:, None]
    return np.minimum(np.abs(a - b).max(axis=(1, 2)), np.abs(a - flip * b).max(axis=(1, 2)))


def check_lrf(rng, trials, rotations, policy, n=128, k=16):
    policy = AxisPolicy(policy)
    dev, worst = 0.0, {}
    for t in range(trials):
        kind = SHAPE_KINDS[t % len(SHAPE_KINDS)]
        cloud = generate_shape(kind, n, rng, noise_sigma=0.005)
        graph = knn(cloud.positions, k=k, exclude_self=True)
        ref = build_lrfs(cloud, graph, policy)
        for r in _rotations(rng, rotations):
            rc = PointCloud(cloud.positions @ r, cloud.normals @ r, cloud.label)
            got = build_lrfs(rc, knn(rc.positions, k=k, exclude_self=True), policy)
            gap = _frame_gap(ref @ r, got, policy is AxisPolicy.PCA_BARYCENTER)
            i = int(np.argmax(gap))
            if gap[i] > dev:
                dev, worst = float(gap[i]), {"kind": kind, "positions": cloud.positions,
                                             "normals": cloud.normals, "point": i, "rotation": r}
    return CheckResult(f"lrf_equivariance[{policy.value}]", dev, FRAME_TOL, worst)


def check_relpose(rng, trials, rotations, variant):
    pr, pj = rng.normal(size=(2, trials, 3))
    Lr, Lj = _random_frames(rng, trials), _random_frames(rng, trials)
    ref = relpose_batch(pr, Lr, pj, Lj, variant)
    dev, worst = 0.0, {}
    for r in _rotations(rng, rotations):
        got = relpose_batch(pr @ r, Lr @ r, pj @ r, Lj @ r, variant)
        d = np.abs(got - ref).max(axis=1)
        i = int(np.argmax(d))
        if d[i] > dev:
            dev, worst = float(d[i]), {"p_r": pr[i], "L_r": Lr[i], "p_j": pj[i], "L_j": Lj[i], "rotation": r}
    return CheckResult(f"relpose_invariance[{variant}]", dev, PAIR_TOL, worst)


def check_inputs(rng, trials, rotations):
    p = rng.normal(size=(trials, 3))
    frames = _random_frames(rng, trials)
    ref = input_attributes(p, frames)
    dev, worst = 0.0, {}
    for r in _rotations(rng, rotations):
        d = np.abs(input_attributes(p @ r, frames @ r) - ref).max(axis=1)
        i = int(np.argmax(d))
        if d[i] > dev:
            dev, worst = float(d[i]), {"p": p[i], "frame": frames[i], "rotation": r}
    return CheckResult("input_attribute_invariance", dev, PAIR_TOL, worst)


def end_to_end_deviation(model: Classifier, cloud: PointCloud, rotations):
    """Largest max|logits(PR) - logits(P)| / max|logits(P)| and whether argmax ever changed."""
    cfg = model.cfg
    ref = classifier_forward(cloud, cfg, model)
    scale = max(np.abs(ref).max(), np.finfo(np.float64).tiny)
    dev, same, worst_r = 0.0, True, None
    for r in rotations:
        rc = PointCloud(cloud.positions @ r, None if cloud.normals is None else cloud.normals @ r, cloud.label)
        got = classifier_forward(rc, cfg, model)
        d = float(np.abs(got - ref).max() / scale)
        same &= bool(np.argmax(got) == np.argmax(ref))
        if d > dev or worst_r is None:
            dev, worst_r = d, r
    return dev, same, worst_r


def check_end_to_end(rng, clouds, rotations, precision, policy, variant, model_cfg=None, seed=0):
    cfg = model_cfg or ClassifierConfig(precision=precision, lrf_policy=policy, relpose=variant)
    model = Classifier(cfg, seed=seed).eval()
    dev, worst = 0.0, {}
    for t in range(clouds):
        kind = SHAPE_KINDS[t % len(SHAPE_KINDS)]
        cloud = generate_shape(kind, 256, rng)
        d, _, r = end_to_end_deviation(model, cloud, _rotations(rng, rotations))
        if d >= dev:
            dev, worst = d, {"kind": kind, "positions": cloud.positions, "normals": cloud.normals, "rotation": r}
    return CheckResult(f"end_to_end[{cfg.precision}]", dev, E2E_TOL[cfg.precision], worst)


def run_checks(trials=1000, rotations=10, precision="float64", policy="normal_barycenter",
               variant="appf8", seed=0, clouds=2, frame_trials=None):
    rng = np.random.default_rng(seed)
    frame_trials = frame_trials if frame_trials is not None else max(1, min(trials // 100, 20))
    return [
        check_angles(rng, trials, rotations),
        check_distances(rng, trials, rotations),
        check_lrf(rng, frame_trials, rotations, policy),
        check_relpose(rng, trials, rotations, variant),
        check_inputs(rng, trials, rotations),
        check_end_to_end(rng, clouds, rotations, precision, policy, variant, seed=seed),
    ]


def dump_worst(result: CheckResult, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"verify_failure_{result.name.replace('[', '_').replace(']', '')}.json")
    payload = {"check": result.name, "deviation": result.deviation, "threshold": result.threshold,
               "inputs": {k: np.asarray(v).tolist() for k, v in result.worst.items()}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
    return path
