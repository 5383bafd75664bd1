"""Synthetic labelled datasets of analytic shapes, in memory or on disk."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .geom import SHAPE_KINDS, PointCloud, generate_shape
from .io import load_cloud, save_cloud

TRAIN_FRACTION = 0.75


@dataclass
class Sample:
    cloud: PointCloud
    kind: str
    seed: list
    split: str


def sample_seed(seed: int, label: int, index: int) -> list:
    return [int(seed), int(label), int(index)]


def make_dataset(classes: int = 8, per_class: int = 400, points: int = 512, noise: float = 0.0,
                 dropout: float = 0.0, seed: int = 0, train_fraction: float = TRAIN_FRACTION):
    """Samples ordered by class then index, each with its own seed and split.

    The split is stratified: within every class a seeded permutation sends
    ``round(train_fraction * per_class)`` samples to train and the rest to test.
    """
    if not 1 <= classes <= len(SHAPE_KINDS):
        raise ParameterError(f"classes must lie in [1, {len(SHAPE_KINDS)}], got {classes}")
    if per_class < 2:
        raise ParameterError("per_class must be at least 2 so both splits are populated")
    n_train = int(round(train_fraction * per_class))
    n_train = min(max(n_train, 1), per_class - 1)
    out = []
    for label in range(classes):
        kind = SHAPE_KINDS[label]
        order = np.random.default_rng([seed, label]).permutation(per_class)
        train_ids = set(order[:n_train].tolist())
        for i in range(per_class):
            s = sample_seed(seed, label, i)
            cloud = generate_shape(kind, points, np.random.default_rng(s), noise, dropout)
            out.append(Sample(cloud, kind, s, "train" if i in train_ids else "test"))
    return out


def split(samples, name: str):
    return [s.cloud for s in samples if s.split == name]


def write_dataset(samples, out_dir, meta: dict, fmt: str = "xyz") -> str:
    """Write one file per cloud plus ``manifest.json``; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    ext = {"xyz": "xyz", "ply_ascii": "ply", "off": "off"}[fmt]
    for s in samples:
        name = f"{s.kind}_{s.seed[2]:04d}.{ext}"
        save_cloud(s.cloud, os.path.join(out_dir, name), fmt)
        entries.append({"file": name, "label": int(s.cloud.label), "kind": s.kind,
                        "seed": s.seed, "split": s.split})
    manifest = dict(meta)
    manifest["classes"] = list(SHAPE_KINDS[:len({e["label"] for e in entries})])
    manifest["samples"] = entries
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def read_dataset(data_dir):
    """Load a dataset written by :func:`write_dataset`; returns (samples, manifest)."""
    with open(os.path.join(data_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    samples = []
    for e in manifest["samples"]:
        c = load_cloud(os.path.join(data_dir, e["file"]))
        c = PointCloud(c.positions, c.normals, int(e["label"]))
        samples.append(Sample(c, e["kind"], e["seed"], e["split"]))
    return samples, manifest
