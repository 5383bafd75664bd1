"""PaRI-Conv layers, their ablation variants, and the DGCNN-shaped classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ParameterError, ShapeError
from .geom import PointCloud, knn, pairwise_sqdist, select_k
from .lrf import POLICIES, AxisPolicy, build_lrfs
from .nn import LEAKY_SLOPE, MLP2, BatchNorm, Linear, Module, kaiming_uniform, param
from .pairfeat import RELPOSE_DIMS, edge_relpose, input_attributes

VARIANTS = ("pari", "edgeconv_baseline", "concat_variant", "no_edge_variant", "full_regression_variant")
PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass
class ClassifierConfig:
    variant: str = "pari"
    widths: tuple = (64, 64, 128, 256)
    emb: int = 1024
    head: tuple = (512, 256)
    dropout: float = 0.5
    k: int = 20
    lrf_policy: str = "normal_barycenter"
    relpose: str = "appf8"
    theta_hidden: int = 32
    precision: str = "float32"
    num_classes: int = 8
    normal_k: int = 16

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.head = tuple(int(h) for h in self.head)
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.lrf_policy not in POLICIES:
            raise ParameterError(f"unknown lrf_policy {self.lrf_policy!r}; expected one of {POLICIES}")
        if self.relpose not in RELPOSE_DIMS:
            raise ParameterError(f"unknown relpose {self.relpose!r}; expected one of {tuple(RELPOSE_DIMS)}")
        if self.precision not in PRECISIONS:
            raise ParameterError(f"precision must be float32 or float64, got {self.precision!r}")
        sizes = list(self.widths) + [self.emb, *self.head, self.num_classes, self.k, self.theta_hidden]
        if not self.widths or min(sizes) < 1:
            raise ParameterError("widths, embedding, head, k and class count must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError("dropout must lie in [0, 1)")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def pose_dim(self) -> int:
        return RELPOSE_DIMS[self.relpose]

    @property
    def rotation_invariant(self) -> bool:
        return self.variant != "edgeconv_baseline"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"], d["head"] = list(self.widths), list(self.head)
        return d


# --------------------------------------------------------------------------
# convolution layers; each maps (B, N, c_in) features to (B, N, c_out)
# --------------------------------------------------------------------------

class EdgeMLP(Module):
    """g((a - x_r) (+) x_r) = W_nbr a + (W_ctr - W_nbr) x_r, followed by BN and LeakyReLU.

    The concatenation is split into its two halves so the centre term is
    evaluated once per point instead of once per edge.
    """

    def __init__(self, c_in, c_out, rng, dtype):
        w = kaiming_uniform(rng, 2 * c_in, (2 * c_in, c_out), dtype)
        self.w_nbr = param(w[:c_in])
        self.w_ctr = param(w[c_in:])
        self.bn = BatchNorm(c_out, dtype)

    def center_term(self, x):
        return ad.sub(ad.matmul(x, self.w_ctr), ad.matmul(x, self.w_nbr))

    def __call__(self, edge_nbr, x, k):
        """``edge_nbr`` is W_nbr applied to the neighbour term, shape (B, N, k, c_out)."""
        y = ad.add(edge_nbr, ad.expand(self.center_term(x), 2, k))
        return ad.max_over_axis(ad.leaky_relu(self.bn(y), LEAKY_SLOPE), 2)


class PariConv(Module):
    uses_pose = True

    def __init__(self, c_in, c_out, pose_dim, hidden, rng, dtype):
        self.basis = param(kaiming_uniform(rng, c_in, (c_in, c_in), dtype))
        self.theta = MLP2(pose_dim, hidden, c_in, rng, dtype)
        self.g = EdgeMLP(c_in, c_out, rng, dtype)

    def embed(self, x, idx, relpose):
        theta = self.theta(relpose)
        bx = ad.matmul(x, ad.transpose(self.basis))  # B applied once per point
        return ad.mul(theta, ad.gather(bx, idx))

    def __call__(self, x, idx, relpose):
        xh = self.embed(x, idx, relpose)
        return self.g(ad.matmul(xh, self.g.w_nbr), x, idx.shape[-1])


class EdgeConv(Module):
    uses_pose = False

    def __init__(self, c_in, c_out, pose_dim, hidden, rng, dtype):
        self.g = EdgeMLP(c_in, c_out, rng, dtype)

    def __call__(self, x, idx, relpose=None):
        return self.g(ad.gather(ad.matmul(x, self.g.w_nbr), idx), x, idx.shape[-1])


class ConcatConv(Module):
    """Relative pose concatenated to the EdgeConv input instead of a dynamic kernel."""

    uses_pose = True

    def __init__(self, c_in, c_out, pose_dim, hidden, rng, dtype):
        self.g = EdgeMLP(c_in, c_out, rng, dtype)
        self.w_pose = param(kaiming_uniform(rng, 2 * c_in + pose_dim, (pose_dim, c_out), dtype))

    def __call__(self, x, idx, relpose):
        edge = ad.add(ad.gather(ad.matmul(x, self.g.w_nbr), idx), ad.matmul(relpose, self.w_pose))
        return self.g(edge, x, idx.shape[-1])


class NoEdgeConv(Module):
    """Factorized dynamic kernel straight to c_out channels, then BN, LeakyReLU and MAX."""

    uses_pose = True

    def __init__(self, c_in, c_out, pose_dim, hidden, rng, dtype):
        self.basis = param(kaiming_uniform(rng, c_in, (c_out, c_in), dtype))
        self.theta = MLP2(pose_dim, hidden, c_out, rng, dtype)
        self.bn = BatchNorm(c_out, dtype)

    def __call__(self, x, idx, relpose):
        theta = self.theta(relpose)
        y = ad.mul(theta, ad.gather(ad.matmul(x, ad.transpose(self.basis)), idx))
        return ad.max_over_axis(ad.leaky_relu(self.bn(y), LEAKY_SLOPE), 2)


class FullRegressionConv(Module):
    """Pose MLP regresses the whole c_in x c_in kernel per edge."""

    uses_pose = True

    def __init__(self, c_in, c_out, pose_dim, hidden, rng, dtype):
        self.c_in = c_in
        self.kernel = MLP2(pose_dim, hidden, c_in * c_in, rng, dtype)
        self.g = EdgeMLP(c_in, c_out, rng, dtype)

    def __call__(self, x, idx, relpose):
        w = self.kernel(relpose)
        w = ad.reshape(w, w.shape[:-1] + (self.c_in, self.c_in))
        xh = ad.bmv(w, ad.gather(x, idx))
        return self.g(ad.matmul(xh, self.g.w_nbr), x, idx.shape[-1])


LAYERS = {
    "pari": PariConv,
    "edgeconv_baseline": EdgeConv,
    "concat_variant": ConcatConv,
    "no_edge_variant": NoEdgeConv,
    "full_regression_variant": FullRegressionConv,
}


def theta(relpose, mlp: MLP2):
    """Diagonal kernel entries for a batch of relative poses."""
    relpose = ad.as_tensor(relpose)
    if relpose.shape[-1] != mlp.fc1.w.shape[0]:
        raise ShapeError(f"relpose width {relpose.shape[-1]} != MLP input {mlp.fc1.w.shape[0]}")
    return mlp(relpose)


def fdk_embed(x_j, theta_j, basis):
    """x_hat_j = theta_j * (B x_j) for row-vector batches."""
    x_j, theta_j = ad.as_tensor(x_j), ad.as_tensor(theta_j)
    if x_j.shape != theta_j.shape:
        raise ShapeError(f"fdk_embed: features {x_j.shape} vs theta {theta_j.shape}")
    return ad.mul(theta_j, ad.matmul(x_j, ad.transpose(basis)))


def pari_conv(features, relpose, graph_indices, layer: PariConv):
    """One PaRI-Conv layer on a single cloud: features (N, c_in) -> (N, c_out)."""
    idx = np.asarray(getattr(graph_indices, "indices", graph_indices))
    if np.any(idx == np.arange(idx.shape[0])[:, None]):
        raise ContractError("graph contains self-loops; PaRI-Conv needs neighbours j != r")
    x = ad.reshape(ad.as_tensor(features), (1,) + tuple(np.shape(features)))
    rp = ad.as_tensor(np.asarray(relpose)[None])
    out = layer(x, idx[None], rp)
    return ad.reshape(out, out.shape[1:])


# --------------------------------------------------------------------------
# classifier
# --------------------------------------------------------------------------

@dataclass
class Geometry:
    """Per-cloud precomputation, stacked over a batch on the leading axis."""

    positions: np.ndarray
    graph: np.ndarray
    frames: np.ndarray | None = None
    attrs: np.ndarray | None = None
    relpose: np.ndarray | None = None
    labels: np.ndarray | None = field(default=None)

    def __len__(self):
        return self.positions.shape[0]


def cloud_geometry(cloud: PointCloud, cfg: ClassifierConfig) -> Geometry:
    """Euclidean graph, frames, input attributes and layer-1 relative poses."""
    if len(cloud) < cfg.k + 1:
        raise ParameterError(f"cloud has {len(cloud)} points, needs at least k+1 = {cfg.k + 1}")
    pos = cloud.positions
    graph = knn(pos, k=cfg.k, exclude_self=True)
    label = None if cloud.label is None else np.array([cloud.label])
    if not cfg.rotation_invariant:
        return Geometry(pos[None], graph.indices[None], labels=label)
    if AxisPolicy(cfg.lrf_policy).needs_normals and cloud.normals is None:
        from .geom import estimate_normals_pca
        cloud = PointCloud(pos, estimate_normals_pca(cloud, min(cfg.normal_k, len(cloud))), cloud.label)
    frames = build_lrfs(cloud, graph, cfg.lrf_policy)
    attrs = input_attributes(pos, frames)
    rp = edge_relpose(pos, frames, graph.indices, cfg.relpose)
    return Geometry(pos[None], graph.indices[None], frames[None], attrs[None], rp[None], label)


def stack_geometry(items) -> Geometry:
    def cat(name):
        vals = [getattr(g, name) for g in items]
        return None if vals[0] is None else np.concatenate(vals)
    return Geometry(*(cat(n) for n in ("positions", "graph", "frames", "attrs", "relpose", "labels")))


def feature_graph(x: np.ndarray, k: int) -> np.ndarray:
    """Self-excluding kNN in feature space for a (B, N, C) batch."""
    d2 = pairwise_sqdist(x, x)
    n = x.shape[1]
    d2[:, np.arange(n), np.arange(n)] = np.inf
    return select_k(d2, k)


class Classifier(Module):
    def __init__(self, cfg: ClassifierConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dt = cfg.dtype
        layer_cls = LAYERS[cfg.variant]
        c_in = 3
        self.convs = []
        for w in cfg.widths:
            self.convs.append(layer_cls(c_in, w, cfg.pose_dim, cfg.theta_hidden, rng, dt))
            c_in = w
        self.embed = Linear(sum(cfg.widths), cfg.emb, rng, dt, bias=False)
        self.embed_bn = BatchNorm(cfg.emb, dt)
        self.fc1 = Linear(2 * cfg.emb, cfg.head[0], rng, dt, bias=False)
        self.bn1 = BatchNorm(cfg.head[0], dt)
        self.fc_hidden = []
        self.bn_hidden = []
        for a, b in zip(cfg.head[:-1], cfg.head[1:]):
            self.fc_hidden.append(Linear(a, b, rng, dt))
            self.bn_hidden.append(BatchNorm(b, dt))
        self.out = Linear(cfg.head[-1], cfg.num_classes, rng, dt)

    def conv_features(self, geo: Geometry):
        """Outputs of every convolution layer, each (B, N, c_l)."""
        cfg, dt = self.cfg, self.cfg.dtype
        if cfg.rotation_invariant:
            x = ad.Tensor(geo.attrs.astype(dt))
        else:
            x = ad.Tensor(geo.positions.astype(dt))
        outs = []
        for l, conv in enumerate(self.convs):
            if l == 0:
                idx, rp = geo.graph, geo.relpose
            else:
                idx = feature_graph(x.data, cfg.k)
                rp = None
                if conv.uses_pose:
                    rp = edge_relpose(geo.positions, geo.frames, idx, cfg.relpose)
            if rp is not None:
                rp = ad.Tensor(rp.astype(dt))
            x = conv(x, idx, rp)
            outs.append(x)
        return outs

    def __call__(self, geo: Geometry, rng: np.random.Generator | None = None, return_features=False):
        outs = self.conv_features(geo)
        h = ad.leaky_relu(self.embed_bn(self.embed(ad.concat(outs, -1))), LEAKY_SLOPE)
        pooled = ad.concat([ad.max_over_axis(h, 1), ad.mean_over_axis(h, 1)], -1)
        z = ad.leaky_relu(self.bn1(self.fc1(pooled)), LEAKY_SLOPE)
        z = ad.dropout(z, self.cfg.dropout, self.training, rng)
        for fc, bn in zip(self.fc_hidden, self.bn_hidden):
            z = ad.dropout(ad.leaky_relu(bn(fc(z)), LEAKY_SLOPE), self.cfg.dropout, self.training, rng)
        logits = self.out(z)
        if return_features:
            return logits, outs + [h]
        return logits


def classifier_forward(cloud: PointCloud, cfg: ClassifierConfig, model: Classifier) -> np.ndarray:
    """Class logits of a single cloud in evaluation mode."""
    if model.cfg.to_dict() != cfg.to_dict():
        raise ParameterError("model was built for a different configuration")
    was = model.training
    model.eval()
    try:
        return model(cloud_geometry(cloud, cfg)).data[0]
    finally:
        model.train(was)


# --------------------------------------------------------------------------
# complexity
# --------------------------------------------------------------------------

def _linear_params(a, b, bias=True):
    return a * b + (b if bias else 0)


def _mlp2_params(a, h, b):
    return _linear_params(a, h) + _linear_params(h, b)


def conv_params(variant, c_in, c_out, pose_dim, hidden) -> int:
    edge = 2 * c_in * c_out + 2 * c_out  # g weights + BN scale/shift
    if variant == "pari":
        return c_in * c_in + _mlp2_params(pose_dim, hidden, c_in) + edge
    if variant == "edgeconv_baseline":
        return edge
    if variant == "concat_variant":
        return edge + pose_dim * c_out
    if variant == "no_edge_variant":
        return c_out * c_in + _mlp2_params(pose_dim, hidden, c_out) + 2 * c_out
    if variant == "full_regression_variant":
        return _mlp2_params(pose_dim, hidden, c_in * c_in) + edge
    raise ParameterError(f"unknown variant {variant!r}")


def count_params(cfg: ClassifierConfig) -> int:
    total, c_in = 0, 3
    for w in cfg.widths:
        total += conv_params(cfg.variant, c_in, w, cfg.pose_dim, cfg.theta_hidden)
        c_in = w
    total += _linear_params(sum(cfg.widths), cfg.emb, bias=False) + 2 * cfg.emb
    total += _linear_params(2 * cfg.emb, cfg.head[0], bias=False) + 2 * cfg.head[0]
    for a, b in zip(cfg.head[:-1], cfg.head[1:]):
        total += _linear_params(a, b) + 2 * b
    total += _linear_params(cfg.head[-1], cfg.num_classes)
    return total


def conv_flops(variant, c_in, c_out, pose_dim, hidden, n, k) -> int:
    e = n * k
    mlp = lambda out: e * (pose_dim * hidden + hidden * out)  # noqa: E731
    centre = 2 * n * c_in * c_out
    if variant == "pari":
        return mlp(c_in) + n * c_in * c_in + e * c_in + e * c_in * c_out + centre
    if variant == "edgeconv_baseline":
        return centre
    if variant == "concat_variant":
        return centre + e * pose_dim * c_out
    if variant == "no_edge_variant":
        return mlp(c_out) + n * c_in * c_out + e * c_out
    if variant == "full_regression_variant":
        return mlp(c_in * c_in) + e * c_in * c_in + e * c_in * c_out + centre
    raise ParameterError(f"unknown variant {variant!r}")


def count_flops(cfg: ClassifierConfig, n: int, k: int | None = None) -> int:
    """Multiply-add pairs of one forward pass on an n-point cloud.

    Counts the linear maps, the per-edge kernel products and the pairwise
    distance evaluations of every kNN search; normalization and activations
    are not counted.
    """
    k = cfg.k if k is None else k
    total, c_in = 0, 3
    for w in cfg.widths:
        total += n * n * c_in  # kNN distances (geometric for layer 1)
        total += conv_flops(cfg.variant, c_in, w, cfg.pose_dim, cfg.theta_hidden, n, k)
        c_in = w
    total += n * sum(cfg.widths) * cfg.emb
    total += 2 * cfg.emb * cfg.head[0]
    for a, b in zip(cfg.head[:-1], cfg.head[1:]):
        total += a * b
    total += cfg.head[-1] * cfg.num_classes
    return total
