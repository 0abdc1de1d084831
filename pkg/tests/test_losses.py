"""Loss components and the four composite regimes."""

import math

import numpy as np
import pytest
import torch

from protoparts.config import LossWeights
from protoparts.errors import DimensionError, ValidationError
from protoparts.losses import (ce_loss, cluster_cost, composite_loss, l1_term,
                               min_same_class_distance, patch_distances,
                               separation_cost)
from tests import oracles


def onehot(labels, k):
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def random_probs(rng, batch, k):
    raw = rng.uniform(0.05, 1.0, (batch, k))
    return raw / raw.sum(axis=1, keepdims=True)


def test_ce_perfect_prediction_is_zero():
    y = onehot([0, 2, 1], 3)
    assert float(ce_loss(y, y)) == pytest.approx(0.0, abs=1e-9)


def test_ce_uniform_over_six_classes():
    probs = np.full((4, 6), 1.0 / 6.0)
    y = onehot([0, 1, 2, 3], 6)
    got = float(ce_loss(probs, y))
    assert got == pytest.approx(math.log(6.0), rel=1e-12)
    assert got == pytest.approx(1.7918, abs=1e-4)


def test_ce_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(40):
        batch, k = int(rng.integers(1, 7)), int(rng.integers(2, 6))
        probs = random_probs(rng, batch, k)
        labels = rng.integers(0, k, batch)
        y = onehot(labels, k)
        got = float(ce_loss(probs, y))
        assert got == pytest.approx(oracles.ce_oracle(probs, y), abs=1e-9)


def test_ce_clamps_zero_probability():
    probs = np.array([[1.0, 0.0]])
    y = onehot([1], 2)
    assert float(ce_loss(probs, y)) == pytest.approx(-math.log(1e-12), rel=1e-9)


def test_ce_validation_errors():
    with pytest.raises(ValidationError, match="sums to"):
        ce_loss(np.array([[0.7, 0.7]]), onehot([0], 2))
    with pytest.raises(ValidationError, match="one-hot"):
        ce_loss(np.full((1, 2), 0.5), np.array([[0.5, 0.5]]))
    with pytest.raises(ValidationError, match="one-hot"):
        ce_loss(np.full((1, 2), 0.5), np.array([[1.0, 1.0]]))
    with pytest.raises(DimensionError):
        ce_loss(np.full((1, 2), 0.5), np.array([1.0, 0.0]))


def test_patch_distances_shape_and_values():
    rng = np.random.default_rng(1)
    patches = torch.tensor(rng.uniform(0, 1, (2, 3, 4)))
    protos = torch.tensor(rng.uniform(0, 1, (5, 4)))
    d = patch_distances(patches, protos)
    assert d.shape == (2, 5, 3)
    for b in range(2):
        for p in range(5):
            for l in range(3):
                expect = oracles.squared_distance_oracle(patches[b, l].numpy(),
                                                         protos[p].numpy())
                assert float(d[b, p, l]) == pytest.approx(expect, rel=1e-12)


def test_patch_distances_dimension_errors():
    with pytest.raises(DimensionError):
        patch_distances(torch.zeros((2, 3)), torch.zeros((4, 3)))
    with pytest.raises(DimensionError):
        patch_distances(torch.zeros((2, 3, 4)), torch.zeros((5, 3)))


def make_case(rng, batch=3, num_classes=3, per_class=2, patches=4, depth=3):
    lat = torch.tensor(rng.uniform(0, 1, (batch, patches, depth)))
    protos = torch.tensor(rng.uniform(0, 1, (num_classes * per_class, depth)))
    class_of = torch.arange(num_classes * per_class) // per_class
    labels = torch.tensor(rng.integers(0, num_classes, batch))
    return lat, protos, class_of, labels


def test_cluster_cost_zero_when_prototype_equals_patch():
    rng = np.random.default_rng(2)
    lat, protos, class_of, labels = make_case(rng)
    labels = torch.tensor([0, 1, 2])  # one image per class, no slot clashes
    protos = protos.clone()
    for b in range(lat.shape[0]):
        own = torch.nonzero(class_of == labels[b])[0, 0]
        protos[own] = lat[b, 0]
    d = patch_distances(lat, protos)
    assert float(cluster_cost(d, labels, class_of)) == pytest.approx(0.0, abs=1e-12)


def test_cluster_and_separation_single_patch_values():
    # one image, one patch; own prototype at d^2 = 4, other at d^2 = 9
    lat = torch.zeros((1, 1, 1))
    protos = torch.tensor([[2.0], [-3.0]])
    class_of = torch.tensor([0, 1])
    labels = torch.tensor([0])
    d = patch_distances(lat, protos)
    assert float(cluster_cost(d, labels, class_of)) == pytest.approx(4.0)
    assert float(separation_cost(d, labels, class_of)) == pytest.approx(-9.0)


def test_separation_zero_when_other_class_prototype_on_patch():
    lat = torch.zeros((1, 2, 2))
    protos = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
    class_of = torch.tensor([0, 1])
    labels = torch.tensor([0])
    d = patch_distances(lat, protos)
    assert float(separation_cost(d, labels, class_of)) == pytest.approx(0.0)


def test_cluster_separation_match_exhaustive_oracle():
    rng = np.random.default_rng(3)
    for _ in range(40):
        lat, protos, class_of, labels = make_case(
            rng, batch=int(rng.integers(1, 5)), patches=int(rng.integers(1, 6)))
        d = patch_distances(lat, protos)
        cls = float(cluster_cost(d, labels, class_of))
        sep = float(separation_cost(d, labels, class_of))
        cls_ref = oracles.cluster_oracle(lat.numpy(), labels.numpy(),
                                         protos.numpy(), class_of.numpy())
        sep_ref = oracles.separation_oracle(lat.numpy(), labels.numpy(),
                                            protos.numpy(), class_of.numpy())
        assert cls == pytest.approx(cls_ref, abs=1e-9)
        assert sep == pytest.approx(sep_ref, abs=1e-9)
        assert cls >= 0.0 and sep <= 0.0


def test_min_same_class_distance_value_and_tie_rule():
    lat = torch.tensor([[[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]]])  # 3 patches
    protos = torch.tensor([[0.0, 0.0], [5.0, 5.0]])
    class_of = torch.tensor([0, 1])
    labels = torch.tensor([0])
    d_min, idx = min_same_class_distance(patch_distances(lat, protos),
                                         labels, class_of)
    assert float(d_min[0]) == 0.0
    assert int(idx[0]) == 0  # patches 0 and 2 tie at 0; lowest index wins


def test_min_same_class_distance_matches_cluster_mean():
    rng = np.random.default_rng(4)
    lat, protos, class_of, labels = make_case(rng, batch=5)
    d = patch_distances(lat, protos)
    d_min, _ = min_same_class_distance(d, labels, class_of)
    assert float(d_min.mean()) == pytest.approx(
        float(cluster_cost(d, labels, class_of)), rel=1e-12)


def test_l1_paper_init_head_counts_ones():
    # paper-init head for K=6, M=3: weight[k, p] = 1 iff p // M == k -> 18 ones
    w = np.zeros((6, 18))
    for p in range(18):
        w[p // 3, p] = 1.0
    assert float(l1_term(w)) == pytest.approx(18.0)
    assert float(l1_term(np.zeros((6, 18)))) == 0.0


def test_l1_includes_extractor_unless_head_only():
    head = torch.ones((2, 4))
    params = [torch.full((3,), -2.0), torch.tensor([[1.5]])]
    assert float(l1_term(head, params)) == pytest.approx(8 + 6 + 1.5)
    assert float(l1_term(head, params, head_only=True)) == pytest.approx(8.0)


def test_l1_accepts_module_with_weight():
    mod = torch.nn.Linear(3, 2, bias=True)
    with torch.no_grad():
        mod.weight.fill_(0.5)
        mod.bias.fill_(100.0)  # bias must not be counted
    assert float(l1_term(mod)) == pytest.approx(3.0)


def test_l1_matches_oracle():
    rng = np.random.default_rng(5)
    head = rng.normal(size=(4, 8))
    params = [rng.normal(size=(3, 3)), rng.normal(size=7)]
    got = float(l1_term(torch.tensor(head), [torch.tensor(p) for p in params]))
    assert got == pytest.approx(oracles.l1_oracle(head, params), rel=1e-12)


def test_composite_protopnet_spec_example():
    report = composite_loss("ProtoPNet", LossWeights(),
                            ce=1.0, cls=2.0, sep=-3.0, l1=10.0)
    assert float(report.total) == pytest.approx(2.361, abs=1e-9)
    # components stay raw (unweighted)
    assert report.components["ce"] == 1.0
    assert report.components["cls"] == 2.0
    assert report.components["sep"] == -3.0
    assert report.components["l1"] == 10.0
    assert report.components["icnn"] == 0.0


def test_composite_cic_reduces_to_ce_when_icnn_loss_zero():
    # icnn score 1 -> loss 0 -> CIC total equals the CE value
    report = composite_loss("CIC", LossWeights(), ce=0.75, icnn=0.0)
    assert float(report.total) == pytest.approx(0.75)


def test_composite_ppic_additivity():
    rng = np.random.default_rng(6)
    for _ in range(20):
        vals = dict(ce=float(rng.uniform(0, 2)), cls=float(rng.uniform(0, 2)),
                    sep=float(-rng.uniform(0, 2)), l1=float(rng.uniform(0, 9)),
                    icnn=float(rng.uniform(0, 3)))
        w = LossWeights(w_icnn=float(rng.uniform(0.1, 2.0)))
        pp = composite_loss("ProtoPNet", w, ce=vals["ce"], cls=vals["cls"],
                            sep=vals["sep"], l1=vals["l1"])
        ppic = composite_loss("PPIC", w, **vals)
        assert float(ppic.total) == pytest.approx(
            float(pp.total) + w.w_icnn * vals["icnn"], rel=1e-12)


def test_composite_matches_oracle_across_regimes():
    rng = np.random.default_rng(7)
    for regime in ("CE", "ProtoPNet", "CIC", "PPIC"):
        vals = dict(ce=float(rng.uniform(0, 2)), cls=float(rng.uniform(0, 2)),
                    sep=float(-rng.uniform(0, 2)), l1=float(rng.uniform(0, 9)),
                    icnn=float(rng.uniform(0, 3)))
        w = LossWeights(w_cls=0.5, w_sep=0.25, w_l1=0.001, w_icnn=1.5)
        report = composite_loss(regime, w, **vals)
        assert float(report.total) == pytest.approx(
            oracles.composite_oracle(regime, w, **vals), rel=1e-12)


def test_composite_ce_regime_has_single_nonzero_component():
    report = composite_loss("CE", LossWeights(), ce=1.25, cls=5.0, icnn=2.0)
    nonzero = [n for n, v in report.components.items() if v != 0.0]
    assert nonzero == ["ce"]
    assert float(report.total) == pytest.approx(1.25)


def test_composite_missing_and_unknown_errors():
    with pytest.raises(ValidationError, match="unknown loss regime"):
        composite_loss("MSE", LossWeights(), ce=1.0)
    with pytest.raises(ValidationError, match=r"requires components.*icnn"):
        composite_loss("CIC", LossWeights(), ce=1.0)
    with pytest.raises(ValidationError, match="requires components"):
        composite_loss("ProtoPNet", LossWeights(), ce=1.0, cls=1.0, sep=-1.0)


def test_composite_total_carries_gradients():
    ce = torch.tensor(1.0, dtype=torch.float64, requires_grad=True)
    icnn = torch.tensor(2.0, dtype=torch.float64, requires_grad=True)
    report = composite_loss("CIC", LossWeights(), ce=ce, icnn=icnn)
    report.total.backward()
    assert float(ce.grad) == pytest.approx(1.0)
    assert float(icnn.grad) == pytest.approx(1.0)  # w_icnn default 1


def finite_difference(fn, tensor, h=1e-5):
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        up = float(fn())
        flat[i] = orig - h
        down = float(fn())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def test_cluster_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    lat, protos, class_of, labels = make_case(rng, batch=2, patches=3)
    protos = protos.clone().requires_grad_(True)

    def value():
        return cluster_cost(patch_distances(lat, protos), labels, class_of)

    loss = value()
    loss.backward()
    fd = finite_difference(lambda: value().detach(), protos.data)
    np.testing.assert_allclose(protos.grad.numpy(), fd.numpy(),
                               rtol=1e-3, atol=1e-6)


def test_separation_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    lat, protos, class_of, labels = make_case(rng, batch=2, patches=3)
    lat = lat.clone().requires_grad_(True)

    def value():
        return separation_cost(patch_distances(lat, protos), labels, class_of)

    loss = value()
    loss.backward()
    fd = finite_difference(lambda: value().detach(), lat.data)
    np.testing.assert_allclose(lat.grad.numpy(), fd.numpy(),
                               rtol=1e-3, atol=1e-6)
