import numpy as np
import pytest

from sgdlab import datagen, netcore


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_spec():
    return netcore.NetSpec(6, (5, 4), 3)


@pytest.fixture
def tiny_data():
    return datagen.generate_gauss_k(12, 6, 3, seed=7)


@pytest.fixture
def gauss10_spec():
    return netcore.NetSpec(50, (10, 30), 10)


@pytest.fixture
def gauss10_data():
    return datagen.generate_gauss_k(100, 50, 10, seed=42)


def sample_kink_free(spec, X, rng, margin=1e-3, scale=0.5, max_tries=200):
    """theta with every hidden pre-activation at least `margin` from zero."""
    for _ in range(max_tries):
        theta = scale * rng.standard_normal(spec.param_count())
        pv = netcore.ParamVector(theta, netcore.build_layout(spec))
        a = X
        ok = True
        for l in range(spec.num_layers - 1):
            z = a @ pv.weights(l).T
            b = pv.bias(l)
            if b is not None:
                z = z + b
            if np.abs(z).min() < margin:
                ok = False
                break
            a = np.maximum(z, 0.0)
        if ok:
            return theta
    raise RuntimeError("could not find a kink-free parameter point")
