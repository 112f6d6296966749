import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from framesynth.errors import InvalidTripletError, ShapeError
from framesynth.losses import (Discriminator, DiscriminatorConfig, FeatureExtractorSpec, LossWeights,
                               build_feature_extractor, discriminator_forward, discriminator_param_count,
                               feature_loss, gan_losses, pixel_loss, temporal_tv_loss, total_objective,
                               transitive_loss, tv_weights)
from framesynth.model import Generator, GeneratorConfig, enumerate_parameters, zero_params

from helpers import check_gradients, interior_generator, linear_stub, px, rand_frames


# -- pixel -------------------------------------------------------------------

def test_pixel_loss_values(rng):
    a = torch.from_numpy(rng.random((3, 4, 4)))
    assert pixel_loss(a, a) == 0
    assert pixel_loss(a + 0.1, a).item() == pytest.approx(0.1, abs=1e-12)
    b = torch.from_numpy(rng.random((3, 4, 4)))
    brute = sum(abs(x - y) for x, y in zip(a.flatten().tolist(), b.flatten().tolist())) / a.numel()
    assert pixel_loss(a, b).item() == pytest.approx(brute, abs=1e-14)


def test_pixel_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        pixel_loss(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))


# -- feature -----------------------------------------------------------------

def test_feature_loss_identity_and_zero_net(rng):
    phi = build_feature_extractor(FeatureExtractorSpec(seed=3))
    a = torch.from_numpy(rng.random((1, 3, 16, 16))).float()
    b = torch.from_numpy(rng.random((1, 3, 16, 16))).float()
    assert feature_loss(a, a, phi).item() == 0
    assert feature_loss(a, b, phi).item() > 0
    zero_params(phi)
    assert feature_loss(a, b, phi).item() == 0


def test_feature_loss_reproducible(rng):
    a = torch.from_numpy(rng.random((2, 3, 16, 16))).float()
    b = torch.from_numpy(rng.random((2, 3, 16, 16))).float()
    v1 = feature_loss(a, b, build_feature_extractor(FeatureExtractorSpec(seed=11)))
    v2 = feature_loss(a, b, build_feature_extractor(FeatureExtractorSpec(seed=11)))
    assert v1.item() == v2.item()


def test_feature_extractor_is_frozen():
    phi = build_feature_extractor(FeatureExtractorSpec())
    assert all(not p.requires_grad for p in phi.parameters())


def test_pretrained_file_mode(tmp_path):
    from framesynth import archive
    src = build_feature_extractor(FeatureExtractorSpec(layer_tap="relu1_2", width_divisor=1, seed=5))
    tensors = {k[len("layers."):]: v for k, v in src.state_dict().items() if k.startswith("layers.")}
    path = tmp_path / "vgg.msfs"
    archive.save(path, tensors, {"kind": "vgg16-features"})
    phi = build_feature_extractor(FeatureExtractorSpec("pretrained_file", "relu1_2", path=str(path)))
    x = torch.rand(1, 3, 8, 8)
    assert torch.equal(phi(x), src(x))
    with pytest.raises(FileNotFoundError):
        build_feature_extractor(FeatureExtractorSpec("pretrained_file", path=str(tmp_path / "missing")))


# -- adversarial -------------------------------------------------------------

def f64(v):
    return torch.tensor(v, dtype=torch.float64)


def test_gan_loss_values():
    d, g = gan_losses(f64(0.0), f64(0.0))
    assert d.item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert g.item() == pytest.approx(math.log(2), abs=1e-12)
    d, _ = gan_losses(f64(40.0), f64(-40.0))
    assert d.item() < 1e-15
    _, g_sat = gan_losses(f64(0.0), f64(0.0), saturating=True)
    assert g_sat.item() == pytest.approx(-math.log(2), abs=1e-12)


def test_gan_loss_stable_for_extreme_logits():
    d, g = gan_losses(torch.tensor([1e4]), torch.tensor([-1e4]))
    assert torch.isfinite(d) and torch.isfinite(g)


def test_discriminator_zero_and_determinism():
    disc = Discriminator(DiscriminatorConfig(), seed=4)
    img = torch.rand(2, 3, 64, 64)
    assert torch.equal(discriminator_forward(img, disc), discriminator_forward(img, disc))
    zero_params(disc)
    logit = discriminator_forward(img, disc)
    assert torch.equal(logit, torch.zeros(2))
    assert torch.sigmoid(logit)[0].item() == 0.5


def test_discriminator_patch_grid_mean():
    disc = Discriminator(DiscriminatorConfig(), seed=2)
    img = torch.rand(1, 3, 128, 128)
    grid = disc.grid(img)
    assert grid.shape == (1, 1, 4, 4)
    brute = sum(grid[0, 0, i, j].item() for i in range(4) for j in range(4)) / 16
    assert disc(img).item() == pytest.approx(brute, rel=1e-6)


def test_discriminator_minimum_size():
    with pytest.raises(ShapeError):
        Discriminator(DiscriminatorConfig())(torch.rand(1, 3, 16, 16))


def test_discriminator_param_count():
    cfg = DiscriminatorConfig()
    assert discriminator_param_count(cfg) == enumerate_parameters(Discriminator(cfg))


# -- transitive --------------------------------------------------------------

def test_transitive_constant_frames_zero():
    c = torch.full((3, 2, 2), 0.3, dtype=torch.float64)
    for variant in ("observed", "predicted"):
        assert transitive_loss(linear_stub, c, c, c, 0, 2, 1, variant).item() == 0


def test_transitive_observed_hand_value():
    val = transitive_loss(linear_stub, px(0.0), px(1.0), px(0.4), 0, 2, 1, "observed")
    assert val.item() == pytest.approx(0.4, abs=1e-12)


def test_transitive_predicted_hand_value():
    val = transitive_loss(linear_stub, px(0.0), px(1.0), px(0.4), 0, 2, 1, "predicted")
    assert val.item() == pytest.approx(0.0, abs=1e-12)


def test_transitive_ratios_passed_to_generator():
    seen = []

    def spy(a, b, r):
        seen.append(float(r))
        return linear_stub(a, b, r)

    transitive_loss(spy, px(0.0), px(1.0), px(0.4), 0, 2, 1, "predicted")
    # main mapping, then G(x1, y, t2) and G(y, x2, t1)
    assert seen == [0.5, 2.0, -1.0]


def test_transitive_per_sample_timestamps():
    x1 = torch.zeros(2, 3, 1, 1, dtype=torch.float64)
    x2 = torch.ones(2, 3, 1, 1, dtype=torch.float64)
    xp = torch.full((2, 3, 1, 1), 0.4, dtype=torch.float64)
    val = transitive_loss(linear_stub, x1, x2, xp, torch.tensor([0.0, 0.0]), torch.tensor([2.0, 2.0]),
                          torch.tensor([1.0, 1.0]), "observed")
    assert val.item() == pytest.approx(0.4, abs=1e-12)


@pytest.mark.parametrize("t", [(0, 2, 0), (0, 2, 2), (2, 0, 1), (1, 1, 0)])
def test_transitive_degenerate_timestamps(t):
    t1, t2, tp = t
    with pytest.raises(InvalidTripletError):
        transitive_loss(linear_stub, px(0), px(1), px(0.5), t1, t2, tp)


def test_transitive_detach_blocks_gradient_through_prediction():
    x1, x2, xp = px(0.2), px(0.9), px(0.5)
    w = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)

    def G(a, b, r):
        return w * linear_stub(a, b, r)

    g_full = torch.autograd.grad(transitive_loss(G, x1, x2, xp, 0, 2, 1, "predicted"), w)[0]
    g_det = torch.autograd.grad(transitive_loss(G, x1, x2, xp, 0, 2, 1, "predicted", detach=True), w)[0]
    assert g_full.item() != g_det.item()


# -- temporal TV -------------------------------------------------------------

def test_tv_values():
    y, x1, x2 = px(0.4), px(0.0), px(1.0)
    assert temporal_tv_loss(y, x1, x2, 0, 2, 1).item() == pytest.approx(1.0, abs=1e-12)
    assert temporal_tv_loss(y, x1, x2, 0, 2, 0.5, weighted=True).item() == pytest.approx(0.9, abs=1e-12)
    assert tv_weights(0, 2, 0.5) == (1.5, 0.5)


def test_weighted_tv_equals_tv_at_midpoint(rng):
    y, x1, x2 = (torch.from_numpy(rng.random((3, 4, 4))) for _ in range(3))
    a = temporal_tv_loss(y, x1, x2, 2, 6, 4)
    b = temporal_tv_loss(y, x1, x2, 2, 6, 4, weighted=True)
    assert a.item() == pytest.approx(b.item(), abs=1e-15)


@given(st.integers(0, 50), st.integers(1, 50), st.integers(-60, 110))
def test_tv_weights_sum_to_two(t1, gap, tp):
    t2 = t1 + gap
    if tp in (t1, t2):
        return
    w1, w2 = tv_weights(t1, t2, tp)
    assert w1 + w2 == pytest.approx(2.0)
    assert w1 >= 0 and w2 >= 0


# -- objective ---------------------------------------------------------------

def test_total_objective():
    assert total_objective(1, 1, 1, 1, LossWeights()) == pytest.approx(1.25002, abs=1e-12)
    assert total_objective(0, 0, 0, 0, LossWeights()) == 0
    w = LossWeights(lambda_tran=0)
    assert total_objective(0.3, 0.5, 0.7, 123.0, w) == total_objective(0.3, 0.5, 0.7, 0.0, w)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 5))
def test_total_objective_affine(p, f, g, t, delta):
    w = LossWeights()
    base = total_objective(p, f, g, t, w)
    assert total_objective(p, f, g, t + delta, w) - base == pytest.approx(w.lambda_tran * delta, abs=1e-9)
    assert total_objective(p, f + delta, g, t, w) - base == pytest.approx(w.lambda_feat * delta, abs=1e-9)
    assert total_objective(p, f, g + delta, t, w) - base == pytest.approx(w.lambda_gan * delta, abs=1e-9)
    assert total_objective(p + delta, f, g, t, w) - base == pytest.approx(delta, abs=1e-9)


def test_loss_weights_non_negative():
    with pytest.raises(ValueError):
        LossWeights(lambda_tran=-1)


@given(st.lists(st.floats(0, 1), min_size=12, max_size=12), st.lists(st.floats(0, 1), min_size=12, max_size=12))
def test_non_negativity(a, b):
    a = torch.tensor(a, dtype=torch.float64).view(3, 2, 2)
    b = torch.tensor(b, dtype=torch.float64).view(3, 2, 2)
    assert pixel_loss(a, b) >= 0
    assert temporal_tv_loss(a, b, b, 0, 2, 1) >= 0
    assert transitive_loss(linear_stub, a, b, a, 0, 2, 1) >= 0


# -- gradient checks (double precision, central differences, h = 1e-5) ------

TOL = 1e-4


def test_grad_pixel():
    a, b = rand_frames(2, 1)
    assert check_gradients(lambda: pixel_loss(a, b), [a, b]) < TOL


def test_grad_feature():
    phi = build_feature_extractor(FeatureExtractorSpec(width_divisor=16, seed=2)).double()
    a, b = rand_frames(2, 2)
    assert check_gradients(lambda: feature_loss(a, b, phi), [a, b]) < TOL


def test_grad_gan_generator():
    disc = Discriminator(DiscriminatorConfig(layers=2, base_filters=4), seed=3).double()
    (a,) = rand_frames(1, 3)

    def fn():
        return gan_losses(torch.zeros((), dtype=torch.float64), disc(a))[1]

    assert check_gradients(fn, [a] + list(disc.parameters())) < TOL


@pytest.mark.parametrize("variant", ["observed", "predicted"])
def test_grad_transitive(variant):
    g = interior_generator(4)
    x1, x2, xp = rand_frames(3, 5)

    def fn():
        return transitive_loss(g, x1, x2, xp, 0, 2, 1, variant)

    with torch.no_grad():
        for r in (0.5, 2.0, -1.0):
            out = g(x1, x2, r)
            assert 0 < out.min() and out.max() < 1
    assert check_gradients(fn, [x1, x2, xp] + list(g.parameters())) < TOL


@pytest.mark.parametrize("weighted", [False, True])
def test_grad_tv(weighted):
    y, x1, x2 = rand_frames(3, 6)
    assert check_gradients(lambda: temporal_tv_loss(y, x1, x2, 0, 3, 1, weighted), [y, x1, x2]) < TOL
