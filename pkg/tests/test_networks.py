import numpy as np
import pytest

from cdvae.cdm import NOISE_DIM
from cdvae.networks import (DAC, PRESETS, Decoder, Discriminator, Encoder, Model, NetworkSpec, dac_forward,
                            decode, discriminate, encode, reparameterize)
from cdvae.tensor import Tensor, backward, default_dtype, mul, tsum

D = np.float64


@pytest.fixture(autouse=True)
def _f64():
    with default_dtype(D):
        yield


def tiny(**kw):
    base = dict(image_size=16, base=2, z_dim=6, views=4, w_dim=3, fc_dim=8, dfnm_hidden=4, dac_hidden=5,
                fe_widths=(2, 3, 4, 4, 4))
    base.update(kw)
    return NetworkSpec(**base)


def T(a):
    return Tensor(np.asarray(a, dtype=D), dtype=D)


def noise(n, seed=0):
    return np.random.default_rng(seed).standard_normal((n, NOISE_DIM))


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec(image_size=24)
    with pytest.raises(ValueError, match="preset"):
        NetworkSpec(preset="G")
    with pytest.raises(ValueError):
        NetworkSpec(preset="A", decoder_variant="adain_plus_dfnm")
    spec = NetworkSpec.full_scale()
    assert (spec.image_size, spec.channels, spec.cdm_size, spec.fc_dim, spec.views) == (128, 128, 16, 1024, 13)
    assert NetworkSpec.from_dict(tiny().to_dict()) == tiny()


@pytest.mark.parametrize("S", [32, 64, 128])
def test_encode_decode_shapes(S):
    spec = tiny(image_size=S)
    E = Encoder(spec, np.random.default_rng(0))
    G = Decoder(spec, np.random.default_rng(1), encoder=E)
    x = T(np.random.default_rng(2).uniform(-1, 1, (2, 3, S, S)))
    out = encode(E, x, [0, 3], noise(2))
    assert out.mu.shape == out.logvar.shape == (2, 6)
    assert out.cdm.dx.shape == (2, 9, S // 8, S // 8)
    img = decode(G, reparameterize(out, np.zeros((2, 6))), [1, 2], noise(2, 1))
    assert img.shape == (2, 3, S, S)
    assert np.abs(img.data).max() < 1


def test_paper_scale_cdm_size():
    spec = NetworkSpec(image_size=128, base=4, z_dim=8, fc_dim=8, dfnm_hidden=4)
    E = Encoder(spec, np.random.default_rng(0))
    out = E(T(np.zeros((2, 3, 128, 128))), [0, 1], noise(2))
    assert out.cdm.out.shape == (2, 2 * spec.channels, 16, 16)


def test_encoder_rejects_wrong_size():
    E = Encoder(tiny(), np.random.default_rng(0))
    with pytest.raises(ValueError, match="encoder expects"):
        E(T(np.zeros((1, 3, 32, 32))), [0], noise(1))


def test_encoder_zero_weights_gives_biases():
    E = Encoder(tiny(), np.random.default_rng(0))
    for p in E.parameters():
        p.data[:] = 0
    E.mu.bias.data[:] = np.arange(6)
    E.logvar.bias.data[:] = -np.arange(6)
    out = E(T(np.random.default_rng(1).uniform(-1, 1, (2, 3, 16, 16))), [0, 1], noise(2))
    np.testing.assert_array_equal(out.mu.data, np.tile(np.arange(6.0), (2, 1)))
    np.testing.assert_array_equal(out.logvar.data, np.tile(-np.arange(6.0), (2, 1)))


def test_reparameterize_cases_and_moments():
    rng = np.random.default_rng(0)
    mu, lv = rng.standard_normal((1, 3)), rng.standard_normal((1, 3))

    class Out:
        pass

    o = Out()
    o.mu, o.logvar = T(mu), T(lv)
    np.testing.assert_array_equal(reparameterize(o, np.zeros((1, 3))).data, mu)
    o.logvar = T(np.zeros((1, 3)))
    eps = rng.standard_normal((1, 3))
    np.testing.assert_allclose(reparameterize(o, eps).data, mu + eps)
    n = 100_000
    o.mu, o.logvar = T(np.tile(mu, (n, 1))), T(np.tile(lv, (n, 1)))
    z = reparameterize(o, rng.standard_normal((n, 3))).data
    sd = np.exp(0.5 * lv[0])
    assert np.all(np.abs(z.mean(0) - mu[0]) < 0.01 * np.maximum(sd, np.abs(mu[0])))
    assert np.all(np.abs(z.var(0) / np.exp(lv[0]) - 1) < 0.01)


def test_decoder_zero_weights_constant_image():
    spec = tiny()
    G = Decoder(spec, np.random.default_rng(0), encoder=Encoder(spec, np.random.default_rng(1)))
    for p in G.parameters():
        p.data[:] = 0
    G.to_rgb.bias.data[:] = [0.5, -0.2, 0.1]
    img = G(T(np.random.default_rng(2).standard_normal((2, 6))), [0, 1], noise(2)).data
    np.testing.assert_allclose(img, np.tanh(np.array([0.5, -0.2, 0.1]))[None, :, None, None] * np.ones((2, 3, 16, 16)))


def test_discriminator_projection_identity_and_errors():
    spec = tiny()
    Dn = Discriminator(spec, np.random.default_rng(0)).eval()
    x = T(np.random.default_rng(1).uniform(-1, 1, (3, 3, 16, 16)))
    y1, y2 = [0, 1, 2], [3, 3, 0]
    s1, s2 = discriminate(Dn, x, y1).data, discriminate(Dn, x, y2).data
    phi = Dn.features(x).data
    E = Dn.embed(T(np.eye(4))).data  # rows = embed(one_hot(v))
    np.testing.assert_allclose(s1 - s2, ((E[y1] - E[y2]) * phi).sum(1), atol=1e-9)
    with pytest.raises(ValueError):
        Dn(T(np.zeros((1, 3, 16, 16))), [0])


def test_discriminator_128_feature_size():
    spec = NetworkSpec(image_size=128, base=1, views=3)
    Dn = Discriminator(spec, np.random.default_rng(0))
    h = Tensor(np.zeros((2, 3, 128, 128)))
    from cdvae import functional as F
    h = F.lrelu(Dn.conv_in(h))
    for blk in Dn.blocks:
        h = F.resample(blk(h), "down_avg2")
    assert h.shape[2:] == (16, 16)


def test_dac_shapes_and_zero_weights():
    spec = tiny(views=13)
    dac = DAC(spec, np.random.default_rng(0))
    z = T(np.random.default_rng(1).standard_normal((2, 6)))
    assert dac_forward(dac, z).shape == (2, 13)
    for p in dac.parameters():
        p.data[:] = 0
    assert not dac(z).data.any()


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_all_networks_receive_gradients(preset):
    spec = tiny(preset=preset)
    m = Model(spec, seed=3)
    rng = np.random.default_rng(4)
    x = T(rng.uniform(-1, 1, (2, 3, 16, 16)))
    out = m.encoder(x, [0, 1], noise(2))
    z = reparameterize(out, rng.standard_normal((2, 6)))
    img = m.decoder(z, [2, 3], noise(2, 1))
    loss = tsum(mul(m.disc(img, [2, 3]), 1.0))
    if m.has_dac:
        from cdvae.tensor import add
        loss = add(loss, tsum(m.dac(z)))
    backward(loss)
    for name, p in m.named_parameters():
        assert p.grad is not None, name
        # a bias feeding instance norm is cancelled by the centering
        if not name.endswith("bias"):
            assert np.abs(p.grad).max() > 0, name


def test_adain_variant_dfnm_path_identical():
    spec_a = tiny(decoder_variant="dfnm_only")
    spec_b = tiny(decoder_variant="adain_plus_dfnm")
    Ga = Decoder(spec_a, np.random.default_rng(0), encoder=None)
    Gb = Decoder(spec_b, np.random.default_rng(0), encoder=None)
    rng = np.random.default_rng(1)
    h = T(rng.standard_normal((2, spec_a.channels, 2, 2)))
    side = T(rng.standard_normal((2, 2 * spec_a.channels, 2, 2)))
    z = T(rng.standard_normal((2, 6)))
    la, lb = Ga.blocks[0].norm1, Gb.blocks[0].norm1
    for (_, pa), (_, pb) in zip(la.named_parameters(), lb.dfnm.named_parameters()):
        pb.data[:] = pa.data
    np.testing.assert_array_equal(la(h, side).data, lb(h, side, z).data[:, :spec_a.channels])


def test_model_state_roundtrip():
    m1, m2 = Model(tiny(), seed=1), Model(tiny(), seed=2)
    m2.load_state(m1.state_tensors())
    for (n1, p1), (n2, p2) in zip(m1.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    bad = m1.state_tensors()
    bad.pop(next(iter(bad)))
    with pytest.raises(KeyError):
        m2.load_state(bad)
