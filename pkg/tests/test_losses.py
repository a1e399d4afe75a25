import math

import numpy as np
import pytest

from cdvae import losses as L
from cdvae.tensor import Tensor, backward, default_dtype, grad_check

D = np.float64


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=D), requires_grad=grad, dtype=D)


@pytest.fixture(autouse=True)
def _f64():
    with default_dtype(D):
        yield


def test_kl_closed_forms():
    assert L.kl_gaussian(T(np.zeros((2, 3))), T(np.zeros((2, 3)))).item() == 0
    assert L.kl_gaussian(T([[1.0]]), T([[0.0]])).item() == pytest.approx(0.5)
    with pytest.raises(ValueError):
        L.kl_gaussian(T(np.zeros((2, 3))), T(np.zeros((2, 2))))


def test_kl_nonnegative():
    rng = np.random.default_rng(0)
    for _ in range(50):
        mu, lv = rng.standard_normal((4, 5)) * 2, rng.standard_normal((4, 5)) * 2
        assert L.kl_gaussian(T(mu), T(lv)).item() >= 0


def _log_softmax(row):
    m = max(row)
    lse = m + math.log(sum(math.exp(v - m) for v in row))
    return [v - lse for v in row]


def test_dac_E_cases():
    assert L.dac_loss_E(T(np.full((3, 5), 0.7))).item() == pytest.approx(math.log(5), abs=1e-14)
    assert L.dac_loss_E(T([[0.0, 0.0]])).item() == pytest.approx(math.log(2))
    big = L.dac_loss_E(T([[40.0, -40.0]])).item()
    assert big == pytest.approx(40.0, rel=1e-6)  # grows like t
    logits = np.random.default_rng(1).standard_normal((4, 6))
    want = -sum(sum(v / 6 for v in _log_softmax(list(r))) for r in logits) / 4
    assert L.dac_loss_E(T(logits)).item() == pytest.approx(want, abs=1e-12)
    with pytest.raises(ValueError):
        L.dac_loss_E(T(np.zeros((2, 1))))


def test_dac_E_minimized_at_uniform():
    x = T(np.random.default_rng(2).standard_normal((1, 4)) * 3, grad=True)
    for _ in range(2000):
        x.grad = None
        backward(L.dac_loss_E(x))
        x.data -= 1.0 * x.grad
    p = np.exp(x.data - x.data.max())
    p /= p.sum()
    np.testing.assert_allclose(p, 0.25, atol=1e-4)
    assert L.dac_loss_E(x).item() == pytest.approx(math.log(4), abs=1e-7)


def test_dac_cls_cases():
    peaked = np.full((2, 4), -30.0)
    peaked[[0, 1], [1, 3]] = 30.0
    assert L.dac_loss_cls(T(peaked), [1, 3]).item() < 1e-20 + 1e-12
    assert L.dac_loss_cls(T(np.zeros((2, 4))), [0, 2]).item() == pytest.approx(math.log(4))
    logits = np.random.default_rng(3).standard_normal((3, 5))
    y = [4, 0, 2]
    want = -sum(_log_softmax(list(r))[c] for r, c in zip(logits, y)) / 3
    assert L.dac_loss_cls(T(logits), y).item() == pytest.approx(want, abs=1e-12)
    with pytest.raises(ValueError):
        L.dac_loss_cls(T(logits), [5, 0, 0])


def test_perceptual_identity_zero():
    fe = L.FeatureExtractor((2, 3, 4, 4, 4), seed=0)
    x = T(np.random.default_rng(4).uniform(-1, 1, (2, 3, 16, 16)))
    for v in L.perceptual_losses(x, T(x.data.copy()), fe).values():
        assert v.item() == 0


def test_gram_constant_and_psd():
    g = L.gram(T(np.full((1, 1, 3, 3), 1.7))).data
    assert g.shape == (1, 1, 1) and g[0, 0, 0] == pytest.approx(1.7 ** 2)
    f = np.random.default_rng(5).standard_normal((2, 5, 4, 3))
    G = L.gram(T(f)).data
    for n in range(2):
        np.testing.assert_allclose(G[n], G[n].T, atol=1e-15)
        assert np.linalg.eigvalsh(G[n]).min() >= -1e-6
        np.testing.assert_allclose(G[n], f[n].reshape(5, -1) @ f[n].reshape(5, -1).T / 12)


def test_feature_extractor_frozen_and_taps():
    fe = L.FeatureExtractor((2, 3, 4, 4, 4), taps=(2, 3, 4), seed=1)
    assert all(not p.requires_grad for p in fe.parameters())
    feats = fe(T(np.zeros((1, 3, 16, 16))))
    assert [f.shape for f in feats] == [(1, 3, 8, 8), (1, 4, 4, 4), (1, 4, 2, 2)]
    with pytest.raises(ValueError, match="tap"):
        L.FeatureExtractor((2, 3), taps=(3,))
    again = L.FeatureExtractor((2, 3, 4, 4, 4), seed=1)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(fe.parameters(), again.parameters()))


def test_feature_extractor_loader_hook():
    fe = L.FeatureExtractor((2, 3, 4, 4, 4), seed=1)
    table = {n: np.ones(p.shape) for n, p in fe.named_parameters()}
    fe.load_weights(table)
    assert all(np.all(p.data == 1) for p in fe.parameters())
    with pytest.raises(ValueError):
        fe.load_weights({"stages.0.weight": np.ones((1, 1, 1, 1))})


def test_content_style_match_oracle():
    rng = np.random.default_rng(6)
    a = [rng.standard_normal((2, 3, 4, 4)) for _ in range(2)]
    b = [rng.standard_normal((2, 3, 4, 4)) for _ in range(2)]
    c = L.content_loss([T(v) for v in a], [T(v) for v in b]).item()
    assert c == pytest.approx(sum(np.abs(x - y).mean() for x, y in zip(a, b)))

    def gram_np(f):
        fl = f.reshape(f.shape[0], f.shape[1], -1)
        return np.einsum("nci,ndi->ncd", fl, fl) / fl.shape[2]

    s = L.style_loss([T(v) for v in a], [T(v) for v in b]).item()
    assert s == pytest.approx(sum(np.abs(gram_np(x) - gram_np(y)).mean() for x, y in zip(a, b)))


def test_zrec_cases():
    z = np.random.default_rng(7).standard_normal((3, 4))
    assert L.z_reconstruction(T(z), T(z)).item() == 0
    assert L.z_reconstruction(T(z), T(z + 1)).item() == pytest.approx(1)
    r = np.random.default_rng(8).standard_normal((3, 4))
    assert L.z_reconstruction(T(z), T(r)).item() == pytest.approx(np.abs(z - r).mean())
    with pytest.raises(ValueError):
        L.z_reconstruction(T(z), T(z[:2]))


def test_hinge_values():
    two = T(np.full(4, 2.0))
    assert L.hinge_d(two, [T(np.full(4, -2.0))] * 3).item() == 0
    zero = T(np.zeros(4))
    assert L.hinge_d(zero, [zero] * 3).item() == 4
    assert L.hinge_g([two] * 3).item() == 0
    assert L.hinge_g([zero] * 3).item() == 3
    with pytest.raises(ValueError):
        L.hinge_g([zero] * 2)


def test_hinge_saturation_and_boundary_subgradient():
    real = T(np.array([1.5, 3.0]), grad=True)
    backward(L.hinge_d(real, [T(np.zeros(2))] * 3))
    assert not real.grad.any()
    f = T(np.ones(3), grad=True)
    backward(L.hinge_g([f, T(np.full(3, 2.0)), T(np.full(3, 2.0))]))
    assert not f.grad.any()


@pytest.mark.parametrize("seed", range(5))
def test_hinge_grads_away_from_kink(seed):
    rng = np.random.default_rng(seed)

    def away(n):
        s = rng.uniform(-3, 3, n)
        s[np.abs(np.abs(s) - 1) < 0.02] = 0.5
        return s

    fakes = [T(away(4)) for _ in range(3)]
    assert grad_check(lambda t: L.hinge_d(t, fakes), T(away(4))) < 1e-6
    assert grad_check(lambda t: L.hinge_g([t, fakes[1], fakes[2]]), T(away(4))) < 1e-6


def test_total_eg_weights_and_linearity():
    one = {k: T(1.0) for k in L.EG_TERMS}
    assert L.total_eg(one).item() == pytest.approx(114.001)
    assert L.total_eg({k: T(0.0) for k in L.EG_TERMS}).item() == 0
    no_cls = {k: v for k, v in one.items() if k != "cls"}
    assert L.total_eg(no_cls, use_cls=False).item() == pytest.approx(113.001)
    with pytest.raises(KeyError):
        L.total_eg(no_cls)
    coef = {"kl": 1, "adv": 1, "style": 0.001, "content": 10, "pixel": 100, "cls": 1, "zrec": 1}
    rng = np.random.default_rng(9)
    base = {k: float(rng.uniform(0, 2)) for k in L.EG_TERMS}
    t0 = L.total_eg({k: T(v) for k, v in base.items()}).item()
    for k in L.EG_TERMS:
        bumped = dict(base)
        bumped[k] += 0.5
        t1 = L.total_eg({kk: T(v) for kk, v in bumped.items()}).item()
        assert t1 - t0 == pytest.approx(0.5 * coef[k], rel=1e-9)
    paired = dict(one, paired_pixel=T(1.0), paired_content=T(1.0), paired_style=T(1.0))
    assert L.total_eg(paired).item() == pytest.approx(114.001 + 110.001)
    with pytest.raises(KeyError):
        L.total_eg(dict(one, bogus=T(1.0)))


def test_loss_weights_nonnegative():
    with pytest.raises(ValueError):
        L.LossWeights(style=-1)
