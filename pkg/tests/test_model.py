"""Architecture: bank indexing, head init, extraction, classify, checkpoints."""

import math

import numpy as np
import pytest
import torch

from protoparts.config import ModelConfig, SimilarityConfig
from protoparts.errors import ConfigurationError, DimensionError, NumericalError
from protoparts.model import (ClassifierHead, ProtoPartsModel, PrototypeBank,
                              SimpleCNN, classify, extract_features,
                              extract_latents, flatten_patches, latent_volume,
                              load_checkpoint, patch_coords, save_checkpoint,
                              training_config_digest)
from protoparts.training import initialize
from tests.conftest import tiny_model


def test_bank_class_assignment_and_index():
    bank = PrototypeBank(num_classes=4, per_class=3, depth=5)
    assert bank.tensors.shape == (12, 5)
    np.testing.assert_array_equal(bank.class_of, np.arange(12) // 3)
    for k in range(4):
        for m in range(3):
            p = bank.prototype_index(m, k)
            assert p == k * 3 + m
            assert bank.class_of[p] == k


def test_paper_init_identity_blocks():
    head = ClassifierHead(num_classes=2, num_prototypes=2)
    head.paper_init(per_class=1)
    np.testing.assert_array_equal(head.weight.detach().numpy(),
                                  [[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(head.bias.detach().numpy(), [0.0, 0.0])

    head = ClassifierHead(num_classes=3, num_prototypes=6)
    head.paper_init(per_class=2)
    w = head.weight.detach().numpy()
    for p in range(6):
        for k in range(3):
            assert w[k, p] == (1.0 if p // 2 == k else 0.0)


def test_paper_init_l1_mass_equals_prototype_count():
    head = ClassifierHead(num_classes=6, num_prototypes=18)
    head.paper_init(per_class=3)
    assert float(head.weight.detach().abs().sum()) == 18.0


def test_simple_cnn_rejects_too_small_input():
    with pytest.raises(ConfigurationError):
        SimpleCNN(input_side=3, grid_w=4, grid_h=4)


def test_simple_cnn_output_grid():
    net = SimpleCNN(input_side=28, grid_w=7, grid_h=7)
    out = net(torch.zeros(2, 3, 28, 28))
    assert out.shape == (2, 32, 7, 7)
    net = SimpleCNN(input_side=224, grid_w=7, grid_h=7)
    out = net(torch.zeros(1, 3, 224, 224))
    assert out.shape == (1, 32, 7, 7)


def test_model_validates_config():
    with pytest.raises(ConfigurationError, match="num_classes"):
        ProtoPartsModel(ModelConfig(num_classes=1, backbone_id="simple-cnn",
                                    input_side=8, latent_depth=4,
                                    grid_w=2, grid_h=2))


def test_latents_live_in_open_unit_interval():
    model = tiny_model(seed=0)
    x = torch.tensor(np.random.default_rng(0).normal(size=(2, 3, 8, 8)),
                     dtype=torch.float32)
    with torch.no_grad():
        feats = model.extract(x)
    assert feats.shape == (2, 4, 2, 2)
    assert torch.all(feats > 0.0) and torch.all(feats < 1.0)


def test_initialize_is_seed_deterministic():
    m1 = tiny_model(seed=7)
    m2 = tiny_model(seed=7)
    for (n1, p1), (n2, p2) in zip(m1.state_dict().items(),
                                  m2.state_dict().items()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.numpy(), p2.numpy())
    m3 = tiny_model(seed=8)
    diffs = [not np.array_equal(p1.numpy(), p3.numpy())
             for p1, p3 in zip(m1.state_dict().values(),
                               m3.state_dict().values())]
    assert any(diffs)


def test_initialize_bank_uniform_and_head_paper_init():
    model = tiny_model(seed=3, num_classes=3, per_class=2)
    t = model.bank.tensors.detach().numpy()
    assert np.all(t >= 0.0) and np.all(t <= 1.0)
    assert t.std() > 0.05  # actually randomized, not constant
    w = model.head.weight.detach().numpy()
    for p in range(6):
        np.testing.assert_array_equal(w[:, p],
                                      np.eye(3)[p // 2])


def test_flatten_patches_w_major_order():
    # feats (B, D, H, W): value encodes (h, w) so the order is checkable
    h, w, d = 3, 2, 4
    feats = torch.zeros(1, d, h, w)
    for hh in range(h):
        for ww in range(w):
            feats[0, :, hh, ww] = ww * 10 + hh
    flat = flatten_patches(feats)
    assert flat.shape == (1, w * h, d)
    for l in range(w * h):
        ww, hh = patch_coords(l, h)
        assert l == ww * h + hh
        assert float(flat[0, l, 0]) == ww * 10 + hh


def test_patch_coords_round_trip():
    grid_h = 5
    for l in range(35):
        w, h = patch_coords(l, grid_h)
        assert 0 <= h < grid_h
        assert w * grid_h + h == l


def test_flatten_patches_rejects_wrong_rank():
    with pytest.raises(DimensionError):
        flatten_patches(torch.zeros(2, 3, 4))


def test_latent_volume_axis_transpose():
    d, h, w = 4, 3, 2
    feats = torch.arange(d * h * w, dtype=torch.float32).reshape(d, h, w)
    vol = latent_volume(feats, image_id="img0")
    assert vol.data.shape == (w, h, d)
    assert vol.source_image_id == "img0"
    for dd in range(d):
        for hh in range(h):
            for ww in range(w):
                assert vol.data[ww, hh, dd] == float(feats[dd, hh, ww])
    with pytest.raises(DimensionError):
        latent_volume(torch.zeros(2, 2))


def test_flatten_and_volume_agree():
    model = tiny_model(seed=1)
    x = torch.rand(1, 3, 8, 8)
    feats = extract_latents(model, x)
    flat = flatten_patches(feats)[0].numpy()
    vol = latent_volume(feats[0])
    grid_h = model.cfg.grid_h
    for l in range(flat.shape[0]):
        w, h = patch_coords(l, grid_h)
        np.testing.assert_array_equal(flat[l], vol.data[w, h])


def test_extract_features_contract():
    model = tiny_model(seed=2)
    rng = np.random.default_rng(5)
    img = rng.uniform(-1, 1, (8, 8, 3))
    vol = extract_features(model, img, image_id="x")
    assert vol.data.shape == (2, 2, 4)
    assert np.all((vol.data > 0) & (vol.data < 1))
    # deterministic to the bit on repeated calls
    vol2 = extract_features(model, img)
    np.testing.assert_array_equal(vol.data, vol2.data)
    with pytest.raises(DimensionError):
        extract_features(model, np.zeros((4, 4, 3)))
    bad = img.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(NumericalError):
        extract_features(model, bad)


def test_extract_latents_batching_invariance():
    model = tiny_model(seed=4)
    x = torch.rand(7, 3, 8, 8)
    full = extract_latents(model, x, batch_size=256)
    small = extract_latents(model, x, batch_size=2)
    # conv kernels vectorize differently per batch size, so cross-size
    # agreement is only to float epsilon; a fixed size is bitwise stable
    np.testing.assert_allclose(full.numpy(), small.numpy(), atol=1e-6)
    again = extract_latents(model, x, batch_size=2)
    np.testing.assert_array_equal(small.numpy(), again.numpy())
    assert full.shape == (7, 4, 2, 2)


def test_classify_uniform_pooled_ties_to_class_zero():
    model = tiny_model(seed=0, num_classes=3, per_class=2)
    model.head.paper_init(per_class=2)
    vol = np.full((2, 2, 4), 0.5)
    bank = (np.full((6, 4), 0.5), np.arange(6) // 2)

    class Bank:
        tensors = torch.tensor(bank[0])
        class_of = bank[1]

    pred = classify(vol, Bank(), model.head, SimilarityConfig())
    np.testing.assert_allclose(pred.probabilities, 1.0 / 3.0, atol=1e-12)
    assert pred.predicted_class == 0
    assert pred.probabilities.sum() == pytest.approx(1.0, abs=1e-12)


def test_classify_picks_class_of_matching_prototype():
    rng = np.random.default_rng(6)
    vol = rng.uniform(0.2, 0.8, (3, 3, 5))
    protos = rng.uniform(0.0, 1.0, (4, 5))
    protos[2] = vol[1, 2]  # prototype 2 (class 1 with per_class=2) matches
    head = ClassifierHead(num_classes=2, num_prototypes=4)
    head.paper_init(per_class=2)

    class Bank:
        tensors = torch.tensor(protos)
        class_of = np.arange(4) // 2

    pred = classify(vol, Bank(), head, SimilarityConfig(epsilon=1e-4))
    assert pred.predicted_class == 1
    assert pred.logits[1] > pred.logits[0]
    # the matched prototype contributes its maximal score ln(1/eps)
    assert pred.similarity.pooled[2] == pytest.approx(math.log(1e4), abs=1e-9)


def test_classify_softmax_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    vol = rng.uniform(0, 1, (2, 2, 3))
    protos = rng.uniform(0, 1, (4, 3))
    head = ClassifierHead(2, 4)
    with torch.no_grad():
        head.weight.copy_(torch.tensor(rng.normal(size=(2, 4)),
                                       dtype=torch.float32))
        head.bias.copy_(torch.tensor([0.3, -0.1]))

    class Bank:
        tensors = torch.tensor(protos)
        class_of = np.arange(4) // 2

    pred = classify(vol, Bank(), head, SimilarityConfig())
    w = head.weight.detach().numpy().astype(np.float64)
    b = head.bias.detach().numpy().astype(np.float64)
    logits = w @ pred.similarity.pooled + b
    exp = np.exp(logits - logits.max())
    np.testing.assert_allclose(pred.probabilities, exp / exp.sum(), atol=1e-12)
    np.testing.assert_allclose(pred.logits, logits, atol=1e-12)
    assert pred.predicted_class == int(np.argmax(logits))


def test_classify_probabilities_shift_invariant():
    rng = np.random.default_rng(8)
    vol = rng.uniform(0, 1, (2, 2, 3))
    protos = rng.uniform(0, 1, (4, 3))

    def run(bias_shift):
        head = ClassifierHead(2, 4)
        head.paper_init(per_class=2)
        with torch.no_grad():
            head.bias.add_(bias_shift)

        class Bank:
            tensors = torch.tensor(protos)
            class_of = np.arange(4) // 2

        return classify(vol, Bank(), head, SimilarityConfig())

    p0 = run(0.0)
    p1 = run(50.0)  # uniform logit shift must not change probabilities
    np.testing.assert_allclose(p0.probabilities, p1.probabilities, atol=1e-9)


def test_checkpoint_round_trip_bitwise(tmp_path):
    model = tiny_model(seed=9, num_classes=3, per_class=2)
    model.bank.projection_meta = [
        {"prototype": p, "image_id": f"i{p}", "patch": p, "w": 0, "h": p % 2,
         "distance": 0.5 * p} for p in range(6)]
    meta = {"loss_regime": "CIC", "seed": 9, "class_names": ["a", "b", "c"]}
    extras = {"prototype_crops": np.random.default_rng(0).uniform(
        0, 1, (6, 4, 4, 3))}
    path = tmp_path / "ckpt.npz"
    save_checkpoint(str(path), model, meta, extras)
    loaded, meta2, extras2 = load_checkpoint(str(path))
    for (n1, t1), (n2, t2) in zip(model.state_dict().items(),
                                  loaded.state_dict().items()):
        assert n1 == n2
        np.testing.assert_array_equal(t1.numpy(), t2.numpy())
    assert meta2["loss_regime"] == "CIC"
    assert meta2["class_names"] == ["a", "b", "c"]
    assert meta2["format_version"] >= 1
    assert meta2["model_config"]["num_classes"] == 3
    assert loaded.bank.projection_meta == model.bank.projection_meta
    np.testing.assert_array_equal(extras2["prototype_crops"],
                                  extras["prototype_crops"])


def test_checkpoint_rewrite_is_byte_identical(tmp_path):
    model = tiny_model(seed=10)
    p1, p2 = tmp_path / "a.npz", tmp_path / "b.npz"
    save_checkpoint(str(p1), model, {"seed": 10})
    save_checkpoint(str(p2), model, {"seed": 10})
    assert p1.read_bytes() == p2.read_bytes()


def test_training_config_digest_is_canonical():
    d1 = training_config_digest({"a": 1, "b": [1, 2]})
    d2 = training_config_digest({"b": [1, 2], "a": 1})
    d3 = training_config_digest({"a": 2, "b": [1, 2]})
    assert d1 == d2
    assert d1 != d3
    assert len(d1) == 64 and all(c in "0123456789abcdef" for c in d1)


def test_torchvision_backbone_grid_validation():
    cfg = ModelConfig(backbone_id="vgg16-like", input_side=100,
                      latent_depth=8, grid_w=3, grid_h=3)
    with pytest.raises(ConfigurationError, match="downsamples by 32"):
        ProtoPartsModel(cfg, load_pretrained=False)


def test_torchvision_backbone_needs_weights_when_pretrained():
    cfg = ModelConfig(backbone_id="vgg16-like", input_side=224,
                      latent_depth=8, grid_w=7, grid_h=7)
    with pytest.raises(ConfigurationError, match="pretrained_weights"):
        ProtoPartsModel(cfg, load_pretrained=True)
    # without pretrained loading the architecture builds and runs
    model = ProtoPartsModel(cfg, load_pretrained=False)
    with torch.no_grad():
        out = model.extract(torch.zeros(1, 3, 224, 224))
    assert out.shape == (1, 8, 7, 7)
