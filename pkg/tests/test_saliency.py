import numpy as np
import pytest

from mire import tensor as T
from mire.errors import ConfigError, ContractError, ShapeError
from mire.nets import ModelBundle
from mire.saliency import (ActivationMap, SaliencyConfig, grad_cam,
                           grad_cam_batch, merge_masks)
from mire.tensor import Tensor


class _GapEncoder:
    """Channel-preserving stand-in: activation = relu(input), feature =
    per-channel spatial mean."""

    def __init__(self):
        self.conv_activations = []

    def encode(self, x, retain_activation=None):
        act = T.relu(x)
        if retain_activation is not None:
            act.retain_grad = True
        self.conv_activations = [act]
        return T.global_avg_pool(act)


class _IdentityHead:
    def __init__(self, out_dim):
        self.out_dim = out_dim

    def classify(self, feats):
        return feats @ Tensor(np.eye(self.out_dim))


class _ConstantHead:
    def __init__(self, out_dim):
        self.out_dim = out_dim

    def classify(self, feats):
        return feats * 0.0


class _StubNets:
    def __init__(self, out_dim, head_cls=_IdentityHead):
        self.encoder = _GapEncoder()
        self.class_head = head_cls(out_dim)
        self.domain_head = head_cls(out_dim)

    def zero_grad(self):
        pass


def minmax(a):
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def test_single_layer_closed_form():
    # mean-pool "network" with an identity head: the map for label c is the
    # min-max normalized input channel c
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(1, 3, 6, 6))
    for label in range(3):
        maps = grad_cam_batch(_StubNets(3), img, np.array([label]), "class")
        assert np.abs(maps[0] - minmax(img[0, label])).max() < 1e-12


def test_constant_logits_zero_map():
    img = np.random.default_rng(1).uniform(size=(2, 3, 6, 6))
    maps = grad_cam_batch(_StubNets(3, _ConstantHead), img,
                          np.array([0, 2]), "class")
    assert np.array_equal(maps, np.zeros_like(maps))


def test_map_range_and_shape():
    nets = ModelBundle(num_classes=4, num_domains=3, feature_dim=8, seed=2)
    imgs = np.random.default_rng(3).uniform(size=(3, 3, 32, 32))
    maps = grad_cam_batch(nets, imgs, np.array([0, 1, 3]), "class")
    assert maps.shape == (3, 32, 32)
    assert maps.min() >= 0.0 and maps.max() <= 1.0


def test_batch_matches_single():
    nets = ModelBundle(num_classes=3, num_domains=2, feature_dim=8, seed=4)
    imgs = np.random.default_rng(5).uniform(size=(3, 3, 32, 32))
    ys = np.array([2, 0, 1])
    batched = grad_cam_batch(nets, imgs, ys, "class")
    for i in range(3):
        single = grad_cam(nets, imgs[i], ys[i], "class")
        assert isinstance(single, ActivationMap)
        assert np.abs(batched[i] - single.values).max() < 1e-12


def test_logit_shift_invariance():
    nets = ModelBundle(num_classes=3, num_domains=2, feature_dim=8, seed=6)
    img = np.random.default_rng(7).uniform(size=(1, 3, 32, 32))
    before = grad_cam_batch(nets, img, np.array([1]), "class")
    nets.class_head.params["b"].data += 7.5
    after = grad_cam_batch(nets, img, np.array([1]), "class")
    assert np.abs(before - after).max() < 1e-12


def test_label_out_of_range():
    nets = _StubNets(3)
    img = np.zeros((1, 3, 4, 4))
    with pytest.raises(ContractError):
        grad_cam_batch(nets, img, np.array([3]), "class")
    with pytest.raises(ContractError):
        grad_cam_batch(nets, img, np.array([0]), "texture")


# -- mask merging -------------------------------------------------------------

def test_merge_zeros():
    out = merge_masks(np.zeros((4, 4)), np.zeros((4, 4)))
    assert np.array_equal(out.values, np.zeros((4, 4)))


def test_merge_saturates_at_one():
    mc = np.zeros((2, 2))
    mc[0, 0] = 1.0
    md = np.full((2, 2), 0.6)
    out = merge_masks(mc, md)
    assert out.values[0, 0] == 1.0


def test_merge_threshold_rule():
    mc = np.array([[0.10, 0.25]])
    md = np.array([[0.05, 0.25]])
    out = merge_masks(mc, md, SaliencyConfig(threshold=0.2))
    assert out.values[0, 0] == 0.0          # 0.15 < 0.2 -> zeroed
    assert out.values[0, 1] == 0.50         # kept soft


def test_merge_values_zero_or_above_threshold():
    rng = np.random.default_rng(8)
    for _ in range(20):
        out = merge_masks(rng.uniform(size=(5, 5)), rng.uniform(size=(5, 5)))
        vals = out.values
        assert np.all((vals == 0.0) | (vals >= out.threshold))
        assert vals.max() <= 1.0


def test_merge_monotone():
    rng = np.random.default_rng(9)
    mc = rng.uniform(size=(4, 4))
    md = rng.uniform(size=(4, 4))
    base = merge_masks(mc, md).values
    for _ in range(10):
        i, j = rng.integers(4), rng.integers(4)
        bumped = mc.copy()
        bumped[i, j] = min(1.0, bumped[i, j] + rng.uniform(0.0, 0.5))
        raised = merge_masks(bumped, md).values
        assert np.all(raised >= base - 1e-15)


def test_merge_shape_mismatch():
    with pytest.raises(ShapeError):
        merge_masks(np.zeros((2, 2)), np.zeros((3, 3)))


def test_bad_threshold_rejected():
    with pytest.raises(ConfigError):
        merge_masks(np.zeros((2, 2)), np.zeros((2, 2)),
                    SaliencyConfig(threshold=1.5))
