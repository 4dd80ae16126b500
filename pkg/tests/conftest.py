import numpy as np
import pytest

from mire import pipeline, synthdata
from mire.pipeline import TrainConfig
from mire.synthdata import DatasetSpec


def finite_difference(f, arrays, eps=1e-6):
    """Central-difference gradients of scalar f() w.r.t. each array, mutated
    in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gf = arr.ravel(), g.ravel()
        for i in range(arr.size):
            old = flat[i]
            flat[i] = old + eps
            fp = f()
            flat[i] = old - eps
            fm = f()
            flat[i] = old
            gf[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


@pytest.fixture(scope="session")
def tiny_spec():
    return DatasetSpec(num_classes=3, num_domains=3, samples_per_domain=18,
                       spurious_strength=0.8, seed=5)


@pytest.fixture(scope="session")
def tiny_bundle(tiny_spec):
    return synthdata.generate(tiny_spec, heldout_domain=2)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TrainConfig(epochs=2, phase0_epochs=5, seeds=(0,))


@pytest.fixture(scope="session")
def tiny_nets(tiny_bundle, tiny_cfg):
    return pipeline.phase0_pretrain(tiny_bundle, tiny_cfg, 0, [0, 1])
