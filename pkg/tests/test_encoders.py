import math

import numpy as np
import pytest

from gtloc.diffnet import max_relative_error, numerical_gradient
from gtloc.encoders import (
    EncoderConfig,
    GTLocModel,
    RffBank,
    encode_image,
    encode_location,
    encode_time,
    rff_encode,
)
from gtloc.errors import InvalidInputError
from gtloc.geotime import EE_X_MAX, EE_Y_MAX

SMALL = EncoderConfig(backbone_dim=12, embed_dim=8, rff_features=6, head_hidden=10, image_hidden=9, seed=4)


def straight_line_head(params, prefix, feats):
    h = feats
    n = len([k for k in params if k.startswith(prefix + ".") and k.endswith(".weight")])
    for i in range(n):
        h = h @ params[f"{prefix}.{i}.weight"].T + params[f"{prefix}.{i}.bias"]
        if i < n - 1:
            h = np.maximum(h, 0)
    return h


def straight_line_fourier(model, prefix, bank, v):
    total = 0
    for k, w in enumerate(bank.matrices):
        z = 2 * math.pi * (w @ v)
        feats = np.concatenate([np.cos(z), np.sin(z)])[None, :].astype(model.params.dtype)
        total = total + straight_line_head(model.params, f"{prefix}.f{k}", feats)[0]
    return total / np.linalg.norm(total)


def test_bank_shapes_and_immutability():
    bank = RffBank((1.0, 16.0, 256.0), 256, seed=3)
    assert len(bank) == 3
    assert all(w.shape == (256, 2) for w in bank.matrices)
    with pytest.raises(ValueError):
        bank.matrices[0][0, 0] = 1.0
    again = RffBank((1.0, 16.0, 256.0), 256, seed=3)
    assert all(np.array_equal(a, b) for a, b in zip(bank.matrices, again.matrices))
    # per-scale std roughly sigma
    assert np.std(bank.matrices[1]) == pytest.approx(16.0, rel=0.1)


def test_rff_examples():
    bank = RffBank((1.0, 16.0), 32, seed=0)
    f0 = rff_encode(bank, np.zeros(2), np.float64)
    for f in f0:
        assert np.all(f[0, :32] == 1.0) and np.all(f[0, 32:] == 0.0)
    v = np.array([0.25, 0.5])
    fp, fn = rff_encode(bank, v, np.float64), rff_encode(bank, -v, np.float64)
    for a, b, w in zip(fp, fn, bank.matrices):
        np.testing.assert_allclose(a[0, :32], b[0, :32], atol=1e-12)
        np.testing.assert_allclose(a[0, 32:], -b[0, 32:], atol=1e-12)
        z = 2 * math.pi * (w @ v)
        np.testing.assert_allclose(a[0], np.concatenate([np.cos(z), np.sin(z)]), atol=1e-12)


def test_location_matches_straight_line():
    model = GTLocModel(SMALL, dtype=np.float64)
    lat, lon = 48.85, 2.35
    emb = encode_location(model, lat, lon)
    from gtloc.geotime import _ee_forward
    x, y = _ee_forward(math.radians(lat), math.radians(lon))
    v = np.array([x / EE_X_MAX, y / EE_Y_MAX])
    np.testing.assert_allclose(emb, straight_line_fourier(model, "loc", model.loc_bank, v), atol=1e-12)


def test_time_matches_straight_line():
    model = GTLocModel(SMALL, dtype=np.float64)
    emb = encode_time(model, 0.3, 0.8)
    want = straight_line_fourier(model, "time", model.time_bank, np.array([0.3, 0.8]))
    np.testing.assert_allclose(emb, want, atol=1e-12)


def test_image_matches_straight_line():
    model = GTLocModel(SMALL, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal(12)
    h = straight_line_head(model.params, "img", x[None, :])[0]
    np.testing.assert_allclose(encode_image(model, x), h / np.linalg.norm(h), atol=1e-12)


def test_unit_norm_and_determinism():
    model = GTLocModel(EncoderConfig(head_hidden=64))
    rng = np.random.default_rng(1)
    ll = np.stack([rng.uniform(-90, 90, 100), rng.uniform(-180, 180, 100)], axis=1)
    L = model.embed_locations(ll)
    T = model.embed_times(rng.uniform(0, 1, (100, 2)))
    V = model.embed_images(rng.standard_normal((100, 768)))
    for E in (L, T, V):
        assert E.shape == (100, 512)
        np.testing.assert_allclose(np.linalg.norm(E, axis=1), 1.0, atol=1e-5)
    assert np.array_equal(L, model.embed_locations(ll))
    # BLAS kernels depend on the batch shape, so chunking agrees only to rounding
    np.testing.assert_allclose(model.embed_locations(ll[:7], chunk=3), L[:7], atol=1e-6)
    # a second model from the same config is identical
    assert np.array_equal(GTLocModel(EncoderConfig(head_hidden=64)).embed_times(np.array([[0.1, 0.2]])),
                          model.embed_times(np.array([[0.1, 0.2]])))


def test_image_zero_input_and_wrong_dim():
    model = GTLocModel(SMALL)
    e = encode_image(model, np.zeros(12))
    assert np.linalg.norm(e) == pytest.approx(1.0, abs=1e-5)
    with pytest.raises(InvalidInputError):
        encode_image(model, np.zeros(11))


def test_separate_temperatures_initialised():
    model = GTLocModel(EncoderConfig(head_hidden=8, tau_loc_init=0.07, tau_time_init=0.5))
    assert model.tau_loc == pytest.approx(0.07)
    assert model.tau_time == pytest.approx(0.5)


@pytest.mark.parametrize("which", ["location", "time"])
def test_fourier_backward_fd(which):
    model = GTLocModel(SMALL, dtype=np.float64)
    enc = getattr(model, which)
    v = np.random.default_rng(2).uniform(-1, 1, (3, 2))
    g = np.random.default_rng(3).standard_normal((3, SMALL.embed_dim))

    def f(_):
        return float(np.sum(enc.forward(model.params, v)[0] * g))

    _, cache = enc.forward(model.params, v)
    grads = enc.backward(cache, g)
    assert set(grads) == set(enc.param_names())
    for name in enc.param_names():
        num = numerical_gradient(f, model.params[name], 1e-6)
        assert max_relative_error(grads[name], num) < 1e-6, name


def test_image_backward_fd_and_backbone_untouched():
    model = GTLocModel(SMALL, dtype=np.float64)
    x = np.random.default_rng(4).standard_normal((3, 12))
    x0 = x.copy()
    g = np.random.default_rng(5).standard_normal((3, 8))
    _, cache = model.image.forward(model.params, x)
    grads = model.image.backward(cache, g)
    for name in model.image.param_names():
        num = numerical_gradient(lambda _: float(np.sum(model.image.forward(model.params, x)[0] * g)),
                                 model.params[name], 1e-6)
        assert max_relative_error(grads[name], num) < 1e-6
    assert np.array_equal(x, x0)
