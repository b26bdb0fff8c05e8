import numpy as np
import pytest

from dptomo import autodiff as ad
from dptomo.dip import DipNetwork, dip_generate
from helpers import check_gradient, random_like


def small_net(shape=(8, 8, 8), seed=0, **kw):
    kw.setdefault("channels", (4, 6))
    return DipNetwork(shape, seed=seed, **kw)


def test_same_seed_is_bitwise_identical():
    a = dip_generate(small_net(seed=3)).data
    b = dip_generate(small_net(seed=3)).data
    assert np.array_equal(a, b)
    net = small_net(seed=3)
    assert np.array_equal(net.generate().data, net.generate().data)
    assert not np.array_equal(a, dip_generate(small_net(seed=4)).data)


def test_fully_convolutional():
    a = small_net((8, 8, 8))
    b = small_net((16, 16, 16))
    assert a.n_parameters == b.n_parameters
    assert b.generate().shape == (16, 16, 16)
    assert a.generate().shape == (8, 8, 8)


def test_output_is_complex_with_requested_shape_after_padding():
    net = small_net((6, 10, 5))
    assert net.padded_shape == (8, 12, 8)
    v = net.generate()
    assert v.shape == (6, 10, 5)
    assert np.iscomplexobj(v.data)


def test_odd_feature_count_rejected():
    with pytest.raises(ValueError, match="even"):
        small_net(out_features=3)


def test_input_is_fixed_uniform():
    net = small_net()
    assert net.z_input.min() >= 0 and net.z_input.max() <= 0.1
    with pytest.raises(ValueError):
        net.z_input[0, 0, 0, 0] = 1.0


def test_default_architecture():
    net = DipNetwork((16, 16, 16))
    assert net.channels == (16, 32, 64, 128)
    assert net.params["dec3.w"].shape == (4, 16, 3, 3, 3)
    assert net.params["enc3.w"].shape == (128, 64, 3, 3, 3)
    assert net.params["dec0.w"].shape == (64, 128, 3, 3, 3)
    # no skip connections: every decoder conv consumes only the previous block's width
    assert all(net.params[f"dec{i}.w"].shape[1] == c for i, c in enumerate((128, 64, 32, 16)))


def test_initial_output_zero_mean_across_seeds():
    means = np.array([dip_generate(DipNetwork((16, 16, 16), channels=(8, 16), seed=s)).data.real.mean()
                      for s in range(20)])
    assert abs(means.mean()) <= 3 * means.std(ddof=1) / np.sqrt(20)


def test_output_scale_multiplies():
    a = small_net(output_scale=1.0).generate().data
    b = small_net(output_scale=0.5).generate().data
    np.testing.assert_allclose(b, 0.5 * a, rtol=1e-14)


def test_crop_runs_on_patch():
    net = small_net((16, 16, 8))
    p = net.generate(crop=(slice(4, 12), slice(0, 8)))
    assert p.shape == (8, 8, 8)
    with pytest.raises(ValueError, match="multiples"):
        net.generate(crop=(slice(0, 6), slice(0, 8)))


def test_state_dict_roundtrip():
    a = small_net(seed=1)
    b = small_net(seed=2)
    b.load_state_dict(a.state_dict())
    assert np.array_equal(a.generate().data, b.generate().data)


def test_generator_gradient():
    rng = np.random.default_rng(0)
    net = small_net((8, 8, 8), channels=(2, 3), out_features=2)
    names = list(net.params)
    init = [net.params[k].data.copy() for k in names]
    c = random_like(rng, (8, 8, 8), True)

    def loss(*ps):
        for k, p in zip(names, ps):
            net.params[k] = p
        return ad.sum(ad.real(ad.mul(net.generate(), c)))

    assert check_gradient(loss, init, rng) <= 1e-5
