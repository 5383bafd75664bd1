"""SGD training, evaluation under rotation protocols, and metrics output."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, DivergenceError, ParameterError
from .geom import PointCloud, random_rotation
from .net import Classifier, ClassifierConfig, cloud_geometry, stack_geometry

ROTATION_MODES = ("none", "z", "so3")
SCALE_RANGE = (0.8, 1.25)
SHIFT_RANGE = 0.1


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr_max: float = 0.1
    lr_min: float = 0.001
    momentum: float = 0.9
    dropout_rate: float = 0.5
    train_rotation: str = "z"
    test_rotation: str = "so3"
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if not self.lr_max > self.lr_min > 0:
            raise ParameterError(f"need lr_max > lr_min > 0, got {self.lr_max}, {self.lr_min}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ParameterError("batch_size and epochs must be at least 1")
        for mode in (self.train_rotation, self.test_rotation):
            if mode not in ROTATION_MODES:
                raise ParameterError(f"rotation mode must be one of {ROTATION_MODES}, got {mode!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError("dropout_rate must lie in [0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError("momentum must lie in [0, 1)")


@dataclass
class Metrics:
    accuracy: float
    mean_class_accuracy: float
    loss: float
    predictions: np.ndarray | None = None
    history: list = field(default_factory=list)  # one dict per epoch
    epoch_seconds: list = field(default_factory=list)
    initial_loss: float | None = None  # first batch, before any update


def cosine_lr(t: float, cfg: TrainConfig) -> float:
    if not 0 <= t <= cfg.epochs:
        raise ParameterError(f"epoch {t} outside [0, {cfg.epochs}]")
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t / cfg.epochs))


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float) -> dict:
    """Momentum SGD: v <- mu v + g, p <- p - lr v.

    ``params``, ``grads`` and ``velocity`` map names to arrays; velocity is
    updated in place (missing entries start at zero) and the new parameter
    arrays are returned. Nothing is modified if any gradient is non-finite.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if np.shape(g) != np.shape(params[name]):
            raise ParameterError(f"gradient for {name} has shape {np.shape(g)}, expected {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter {name}")
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        v = velocity.get(name)
        v = g.astype(p.dtype) if v is None else momentum * v + g
        v = v.astype(p.dtype, copy=False)
        velocity[name] = v
        out[name] = p - p.dtype.type(lr) * v
    return out


def augment(cloud: PointCloud, cfg: TrainConfig, rng: np.random.Generator,
            scale_range=SCALE_RANGE, shift=SHIFT_RANGE) -> PointCloud:
    """Random rotation (per ``cfg.train_rotation``), isotropic scale and translation."""
    r = random_rotation(rng, cfg.train_rotation).m
    s = rng.uniform(*scale_range)
    t = rng.uniform(-shift, shift, 3)
    pos = s * (cloud.positions @ r) + t
    normals = None if cloud.normals is None else cloud.normals @ r
    return PointCloud(pos, normals, cloud.label)


def _equal_size(clouds, rng):
    """Subsample every cloud of a batch to the smallest point count."""
    n = min(len(c) for c in clouds)
    out = []
    for c in clouds:
        if len(c) > n:
            c = c.subset(np.sort(rng.choice(len(c), n, replace=False)))
        out.append(c)
    return out


def _batches(n, size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _class_accuracy(labels, preds, num_classes):
    accs = [np.mean(preds[labels == c] == c) for c in range(num_classes) if np.any(labels == c)]
    return float(np.mean(accs))


def train(dataset, model_cfg: ClassifierConfig, cfg: TrainConfig, log=None, metrics_path=None):
    """Train a fresh classifier; returns (model, Metrics).

    ``dataset`` is a sequence of labelled PointClouds. The model dropout is
    taken from ``cfg.dropout_rate`` and its precision from ``cfg.precision``.
    """
    clouds = list(dataset)
    if any(c.label is None for c in clouds):
        raise ParameterError("every training cloud needs a label")
    model_cfg = replace(model_cfg, dropout=cfg.dropout_rate, precision=cfg.precision)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    model = Classifier(model_cfg, seed=int(seeds[0].generate_state(1)[0]))
    rng = np.random.default_rng(seeds[1])
    params = dict(model.named_parameters())
    velocity: dict = {}
    history, seconds = [], []
    initial_loss = None
    labels_all = np.array([c.label for c in clouds])

    writer = fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "lr", "loss", "acc", "mean_class_acc"])
    try:
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            lr = cosine_lr(epoch, cfg)
            model.train()
            losses, preds, seen = [], [], []
            for batch in _batches(len(clouds), cfg.batch_size, rng):
                if len(batch) < 2:
                    continue  # batch statistics need more than one sample
                group = _equal_size([augment(clouds[i], cfg, rng) for i in batch], rng)
                geo = stack_geometry([cloud_geometry(c, model_cfg) for c in group])
                logits = model(geo, rng)
                loss = ad.softmax_cross_entropy(logits, geo.labels)
                loss.backward()
                new = sgd_step({n: p.data for n, p in params.items()},
                               {n: p.grad for n, p in params.items()}, velocity, lr, cfg.momentum)
                for n, p in params.items():
                    p.data = new[n]
                    p.grad = None
                if not np.isfinite(loss.data):
                    raise DivergenceError(f"loss became non-finite at epoch {epoch}")
                if initial_loss is None:
                    initial_loss = float(loss.data)
                losses.append(float(loss.data) * len(batch))
                preds.append(np.argmax(logits.data, axis=1))
                seen.append(batch)
            seen = np.concatenate(seen)
            preds = np.concatenate(preds)
            row = {
                "epoch": epoch + 1,
                "lr": lr,
                "loss": sum(losses) / len(seen),
                "acc": float(np.mean(preds == labels_all[seen])),
                "mean_class_acc": _class_accuracy(labels_all[seen], preds, model_cfg.num_classes),
            }
            history.append(row)
            seconds.append(time.perf_counter() - start)
            if writer is not None:
                writer.writerow([row["epoch"]] + ["%.17e" % row[k] for k in ("lr", "loss", "acc", "mean_class_acc")])
                fh.flush()
            if log is not None:
                log(f"epoch {row['epoch']:3d}  lr {lr:.4f}  loss {row['loss']:.4f}  acc {row['acc']:.4f}"
                    f"  ({seconds[-1]:.1f}s)")
    finally:
        if fh is not None:
            fh.close()
    last = history[-1]
    model.eval()
    return model, Metrics(last["acc"], last["mean_class_acc"], last["loss"], None, history, seconds, initial_loss)


def predict(model: Classifier, clouds, batch_size: int = 16) -> np.ndarray:
    """Evaluation-mode logits for clouds that are already in their final pose."""
    model.eval()
    out = []
    for batch in _batches(len(clouds), batch_size):
        group = [clouds[i] for i in batch]
        if len({len(c) for c in group}) > 1:
            # per-point work is independent in eval mode, so mixed sizes run one by one
            out.extend(model(cloud_geometry(c, model.cfg)).data for c in group)
            continue
        geo = stack_geometry([cloud_geometry(c, model.cfg) for c in group])
        out.append(model(geo).data)
    return np.concatenate(out)


def evaluate(dataset, model: Classifier, test_rotation: str = "so3", seed: int = 0,
             batch_size: int = 16, model_cfg: ClassifierConfig | None = None) -> Metrics:
    """Accuracy with one fresh random rotation per sample; geometry is rebuilt after rotating."""
    if test_rotation not in ROTATION_MODES:
        raise ParameterError(f"rotation mode must be one of {ROTATION_MODES}, got {test_rotation!r}")
    if model_cfg is not None and model_cfg.to_dict() != model.cfg.to_dict():
        raise CheckpointError("model configuration does not match the checkpoint")
    clouds = list(dataset)
    rng = np.random.default_rng(seed)
    rotated = []
    for c in clouds:
        r = random_rotation(rng, test_rotation).m
        rotated.append(PointCloud(c.positions @ r, None if c.normals is None else c.normals @ r, c.label))
    logits = predict(model, rotated, batch_size)
    labels = np.array([c.label for c in clouds])
    preds = np.argmax(logits, axis=1)
    logp = ad.log_softmax(logits.astype(np.float64))
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    return Metrics(float(np.mean(preds == labels)), _class_accuracy(labels, preds, model.cfg.num_classes),
                   loss, preds)
