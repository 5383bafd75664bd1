import math

import numpy as np
import pytest

from pariconv import autodiff as ad
from pariconv.autodiff import Tensor
from pariconv.errors import ContractError, ParameterError, ShapeError
from pariconv.geom import PointCloud, apply_rotation, generate_shape, knn
from pariconv.lrf import build_lrfs
from pariconv.net import (
    VARIANTS, Classifier, ClassifierConfig, PariConv, classifier_forward, cloud_geometry,
    conv_params, count_flops, count_params, fdk_embed, pari_conv, stack_geometry, theta,
)
from pariconv.nn import MLP2, Linear
from pariconv.pairfeat import edge_relpose, input_attributes
from pariconv.probe import ambiguity_probe

from conftest import rotations

SMALL = dict(widths=(8, 8, 16, 16), emb=32, head=(16, 8), k=8, num_classes=4)


def small_cfg(**kw):
    return ClassifierConfig(**{**SMALL, **kw})


# -- theta and the factorized kernel -----------------------------------------

def test_theta_zero_weights(rng):
    mlp = MLP2(8, 32, 5, rng, np.float64)
    for _, p in mlp.named_parameters():
        p.data[...] = 0
    assert np.array_equal(theta(rng.normal(size=(7, 8)), mlp).data, np.zeros((7, 5)))


def test_theta_passthrough(rng):
    mlp = MLP2(8, 8, 8, rng, np.float64)
    mlp.fc1.w.data[...] = np.eye(8)
    mlp.fc2.w.data[...] = np.eye(8)
    mlp.fc1.b.data[...] = 0
    mlp.fc2.b.data[...] = 0
    rp = rng.uniform(0.1, 1, size=(6, 8))  # positive: LeakyReLU passes it through
    assert np.array_equal(theta(rp, mlp).data, rp)


def test_theta_can_be_negative(rng):
    mlp = MLP2(8, 32, 16, rng, np.float64)
    assert (theta(rng.normal(size=(100, 8)), mlp).data < 0).any()


def test_theta_dim_mismatch(rng):
    with pytest.raises(ShapeError):
        theta(np.zeros((3, 5)), MLP2(8, 32, 4, rng, np.float64))


def test_theta_gradient_matches_finite_differences(rng):
    mlp = MLP2(8, 32, 6, rng, np.float64)
    rp = rng.normal(size=(10, 8))

    def mean_theta():
        return float(theta(rp, mlp).data.mean())

    loss = ad.scale(ad.sum_all(theta(rp, mlp)), 1.0 / 60)
    loss.backward()
    for name, p in mlp.named_parameters():
        num = np.zeros_like(p.data)
        for j in np.ndindex(p.shape):
            old = p.data[j]
            p.data[j] = old + 1e-5
            up = mean_theta()
            p.data[j] = old - 1e-5
            num[j] = (up - mean_theta()) / 2e-5
            p.data[j] = old
        assert np.abs(p.grad - num).max() / max(np.abs(num).max(), 1e-8) < 1e-5, name


def test_fdk_embed_examples(rng):
    x = rng.normal(size=(9, 5))
    b = rng.normal(size=(5, 5))
    assert np.allclose(fdk_embed(x, np.ones((9, 5)), b).data, x @ b.T, rtol=0, atol=1e-15)
    t = rng.normal(size=(9, 5))
    assert np.array_equal(fdk_embed(x, t, np.eye(5)).data, t * x)
    with pytest.raises(ShapeError):
        fdk_embed(x, np.ones((9, 4)), b)


def test_fdk_matches_dense_oracle(rng):
    for c in (1, 3, 16, 64):
        x, t = rng.normal(size=(2, 50, c))
        b = rng.normal(size=(c, c))
        dense = np.stack([(np.diag(ti) @ b) @ xi for ti, xi in zip(t, x)])
        assert np.abs(fdk_embed(x, t, b).data - dense).max() < 1e-12


# -- one PaRI-Conv layer -------------------------------------------------------

def _fixed_layer(rng, t, b):
    layer = PariConv(1, 1, 8, 4, rng, np.float64)
    layer.basis.data[...] = b
    for _, p in layer.theta.named_parameters():
        p.data[...] = 0
    layer.theta.fc2.b.data[...] = t
    layer.g.w_nbr.data[...] = 1
    layer.g.w_ctr.data[...] = 1
    return layer.eval()


def test_pari_conv_hand_example(rng):
    pos = np.array([[0.0, 0, 0], [1, 0, 0]])
    frames = np.stack([np.eye(3), np.eye(3)])
    graph = np.array([[1], [0]])
    rp = edge_relpose(pos, frames, graph)
    layer = _fixed_layer(rng, t=-2.0, b=0.5)
    x = np.array([[3.0], [-4.0]])
    out = pari_conv(x, rp, graph, layer).data
    # g((x^_j - x_r) + x_r) = x^_j = t * b * x_j, then eval-mode BN and LeakyReLU
    bn = 1 / math.sqrt(1 + 1e-5)
    pre = np.array([-2.0 * 0.5 * -4.0, -2.0 * 0.5 * 3.0]) * bn
    assert np.allclose(out[:, 0], np.where(pre > 0, pre, 0.2 * pre), rtol=1e-15, atol=0)


def test_pari_conv_symmetric_input_gives_constant_output(rng):
    n, k = 12, 4
    layer = PariConv(6, 10, 8, 32, rng, np.float64).eval()
    x = np.tile(rng.normal(size=6), (n, 1))
    rp = np.tile(rng.normal(size=8), (n, k, 1))
    graph = (np.arange(n)[:, None] + np.arange(1, k + 1)) % n
    out = pari_conv(x, rp, graph, layer).data
    assert np.abs(out - out[0]).max() == 0


def test_pari_conv_rejects_self_loops(rng):
    layer = PariConv(3, 4, 8, 8, rng, np.float64)
    with pytest.raises(ContractError):
        pari_conv(np.zeros((3, 3)), np.zeros((3, 2, 8)), np.array([[0, 1], [0, 2], [0, 1]]), layer)


def test_pari_conv_joint_rotation_bitwise(rng):
    c = generate_shape("torus", 128, rng)
    layer = PariConv(3, 16, 8, 32, rng, np.float64).eval()

    def run(cloud, g):
        f = build_lrfs(cloud, g)
        return pari_conv(input_attributes(cloud.positions, f), edge_relpose(cloud.positions, f, g.indices),
                         g, layer).data

    g = knn(c.positions, k=10, exclude_self=True)
    ref = run(c, g)
    # the layer is a pure function of invariant inputs
    assert np.array_equal(run(c, g), ref)
    for r in rotations(rng, 3):
        assert np.abs(run(apply_rotation(c, r), g) - ref).max() < 1e-12


def test_full_layer_gradient(rng):
    """Every parameter and the input features, training-mode BN, 64-bit."""
    n, k, c_in, c_out = 10, 3, 4, 5
    layer = PariConv(c_in, c_out, 8, 6, rng, np.float64).train()
    x0 = rng.normal(size=(n, c_in))
    rp = rng.normal(size=(n, k, 8))
    graph = (np.arange(n)[:, None] + np.arange(1, k + 1)) % n
    w = rng.normal(size=(n, c_out))
    params = dict(layer.named_parameters())

    def value(x):
        return float((pari_conv(x, rp, graph, layer).data * w).sum())

    xt = Tensor(x0.copy(), requires_grad=True)
    ad.sum_all(ad.mul(pari_conv(xt, rp, graph, layer), Tensor(w))).backward()
    targets = {"input": (x0, xt.grad)} | {n_: (p.data, p.grad) for n_, p in params.items()}
    for name, (arr, grad) in targets.items():
        num = np.zeros_like(arr)
        for j in np.ndindex(arr.shape):
            old = arr[j]
            arr[j] = old + 1e-5
            up = value(x0)
            arr[j] = old - 1e-5
            num[j] = (up - value(x0)) / 2e-5
            arr[j] = old
        assert np.abs(grad - num).max() / max(np.abs(num).max(), 1e-8) < 1e-4, name


# -- classifier ---------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ParameterError):
        ClassifierConfig(variant="pointnet")
    with pytest.raises(ParameterError):
        ClassifierConfig(widths=(64, 0))
    with pytest.raises(ParameterError):
        ClassifierConfig(lrf_policy="shot")
    with pytest.raises(ParameterError):
        ClassifierConfig(relpose="ppf3")
    cfg = ClassifierConfig(widths=[4, 4], head=[3])
    assert cfg.widths == (4, 4) and ClassifierConfig(**cfg.to_dict()) == cfg


def test_zeroed_head_gives_uniform_logits(rng):
    cfg = small_cfg(precision="float64")
    model = Classifier(cfg, seed=1)
    model.out.w.data[...] = 0
    model.out.b.data[...] = 0
    logits = classifier_forward(generate_shape("cone", 64, rng), cfg, model)
    assert np.array_equal(logits, np.zeros(4))
    loss = ad.softmax_cross_entropy(logits[None], np.array([2]))
    assert np.isclose(loss.data, math.log(4), rtol=0, atol=1e-15)


@pytest.mark.parametrize("variant", VARIANTS)
def test_variants_are_drop_in(variant, rng):
    cfg = small_cfg(variant=variant)
    model = Classifier(cfg, seed=0).train()
    geo = stack_geometry([cloud_geometry(generate_shape(k, 48, rng), cfg) for k in ("box", "helix")])
    logits = model(geo, rng)
    assert logits.shape == (2, 4)
    ad.softmax_cross_entropy(logits, np.array([0, 1])).backward()
    assert all(p.grad is not None for _, p in model.named_parameters())
    assert model.num_parameters() == count_params(cfg)


@pytest.mark.parametrize("variant", [v for v in VARIANTS if v != "edgeconv_baseline"])
@pytest.mark.parametrize("precision,tol", [("float64", 1e-8), ("float32", 1e-4)])
def test_classifier_rotation_invariance(variant, precision, tol, rng):
    cfg = small_cfg(variant=variant, precision=precision)
    model = Classifier(cfg, seed=2)
    c = generate_shape("capsule", 96, rng)
    ref = classifier_forward(c, cfg, model)
    for r in rotations(rng, 5):
        got = classifier_forward(apply_rotation(c, r), cfg, model)
        assert np.abs(got - ref).max() / np.abs(ref).max() < tol
        assert np.argmax(got) == np.argmax(ref)


@pytest.mark.parametrize("policy", ["normal_globalcenter", "pca_barycenter"])
def test_classifier_invariance_other_policies(policy, rng):
    cfg = small_cfg(precision="float64", lrf_policy=policy)
    model = Classifier(cfg, seed=3)
    c = generate_shape("cylinder", 96, rng, noise_sigma=0.003)
    if policy == "pca_barycenter":
        c = PointCloud(c.positions, None, c.label)
    ref = classifier_forward(c, cfg, model)
    for r in rotations(rng, 3):
        assert np.abs(classifier_forward(apply_rotation(c, r), cfg, model) - ref).max() < 1e-8 * np.abs(ref).max()


def test_missing_normals_are_estimated(rng):
    cfg = small_cfg(precision="float64")
    c = generate_shape("sphere", 64, rng)
    logits = classifier_forward(PointCloud(c.positions), cfg, Classifier(cfg))
    assert np.all(np.isfinite(logits))


def test_baseline_is_not_invariant(rng):
    cfg = small_cfg(variant="edgeconv_baseline", precision="float64")
    model = Classifier(cfg, seed=4)
    c = generate_shape("cone", 96, rng)
    ref = classifier_forward(c, cfg, model)
    devs = [np.abs(classifier_forward(apply_rotation(c, r), cfg, model) - ref).max() / np.abs(ref).max()
            for r in rotations(rng, 3)]
    assert min(devs) > 1e-2


def test_point_order_does_not_matter(rng):
    cfg = small_cfg()
    model = Classifier(cfg, seed=5)
    c = generate_shape("torus", 96, rng)
    perm = rng.permutation(96)
    a = classifier_forward(c, cfg, model)
    b = classifier_forward(c.subset(perm), cfg, model)
    assert np.abs(a - b).max() < 1e-5


def test_classifier_errors(rng):
    cfg = small_cfg()
    model = Classifier(cfg)
    with pytest.raises(ParameterError):
        classifier_forward(generate_shape("box", 16, rng).subset(np.arange(8)), cfg, model)
    with pytest.raises(ParameterError):
        classifier_forward(generate_shape("box", 64, rng), small_cfg(k=6), model)


# -- complexity ---------------------------------------------------------------

def test_linear_layer_count(rng):
    assert Linear(7, 3, rng).num_parameters() == 7 * 3 + 3
    assert Linear(7, 3, rng, bias=False).num_parameters() == 21


@pytest.mark.parametrize("widths", [(8, 8), (16, 32), (64, 64, 128, 256), (128, 256)])
def test_fdk_cheaper_than_full_regression(widths):
    for c_in, c_out in zip((3,) + widths[:-1], widths):
        assert conv_params("pari", c_in, c_out, 8, 32) < conv_params("full_regression_variant", c_in, c_out, 8, 32)
    pari = count_params(ClassifierConfig(widths=widths))
    full = count_params(ClassifierConfig(widths=widths, variant="full_regression_variant"))
    assert pari < full
    assert count_flops(ClassifierConfig(widths=widths), 256) < \
        count_flops(ClassifierConfig(widths=widths, variant="full_regression_variant"), 256)


def test_paper_scale_counts():
    cfg = ClassifierConfig(num_classes=40)
    assert count_params(cfg) == 1_843_860
    assert count_params(ClassifierConfig(num_classes=40, variant="edgeconv_baseline")) == 1_809_576
    assert Classifier(cfg).num_parameters() == count_params(cfg)


def test_flops_scale_with_points():
    cfg = small_cfg()
    assert count_flops(cfg, 200) > count_flops(cfg, 100) > 0


# -- ambiguity probe ------------------------------------------------------------

def test_probe_identity_rotations():
    rep = ambiguity_probe(0, identity=True)
    assert rep == {"baseline_delta": 0.0, "pari_delta": 0.0}


def test_probe_separates():
    for seed in range(10):
        rep = ambiguity_probe(seed)
        assert rep["baseline_delta"] < 1e-10
        assert rep["pari_delta"] > 1e-3
