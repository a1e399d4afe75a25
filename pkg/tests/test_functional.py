import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdvae import functional as F
from cdvae.tensor import Tensor, grad_check, tsum, mul

D = np.float64


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=D), requires_grad=grad, dtype=D)


def conv_oracle(x, w, b, stride, pad):
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho, Wo = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o] if b is not None else 0.0
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, c, u, v] * xp[n, c, i * stride + u, j * stride + v]
                    out[n, o, i, j] = acc
    return out


def bilinear_oracle(img, X, Y):
    """img (H, W); zero outside."""
    H, W = img.shape
    x0, y0 = int(np.floor(X)), int(np.floor(Y))
    fx, fy = X - x0, Y - y0
    acc = 0.0
    for yy, xx, wt in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x0 + 1, fx * (1 - fy)),
                       (y0 + 1, x0, (1 - fx) * fy), (y0 + 1, x0 + 1, fx * fy)):
        if 0 <= yy < H and 0 <= xx < W:
            acc += wt * img[yy, xx]
    return acc


def deform_oracle(x, dx, dy, w, b):
    N, C, H, W = x.shape
    O = w.shape[0]
    out = np.zeros((N, O, H, W))
    for n in range(N):
        for i in range(H):
            for j in range(W):
                for o in range(O):
                    acc = b[o]
                    for k in range(9):
                        ti, tj = divmod(k, 3)
                        Y = i + ti - 1 + dy[n, k, i, j]
                        X = j + tj - 1 + dx[n, k, i, j]
                        for c in range(C):
                            acc += w[o, c, ti, tj] * bilinear_oracle(x[n, c], X, Y)
                    out[n, o, i, j] = acc
    return out


# conv2d ---------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    np.testing.assert_array_equal(F.conv2d(T(x), T(w)).data, x)


def test_conv_ones_on_constant():
    out = F.conv2d(T(np.full((1, 1, 5, 5), 2.0)), T(np.ones((1, 1, 3, 3))), padding=1).data
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 18.0)
    assert out[0, 0, 0, 0] == pytest.approx(8.0)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 4), (1, 3, 7), (2, 0, 3)])
def test_conv_matches_naive_loops(stride, pad, k):
    rng = np.random.default_rng(k + stride)
    x = rng.standard_normal((2, 5, 9, 8))
    w = rng.standard_normal((4, 5, k, k))
    b = rng.standard_normal(4)
    got = F.conv2d(T(x), T(w), T(b), stride, pad).data
    np.testing.assert_allclose(got, conv_oracle(x, w, b, stride, pad), atol=1e-12)


def test_conv_groups_equals_split():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 4, 5, 5))
    w = rng.standard_normal((6, 2, 3, 3))
    got = F.conv2d(T(x), T(w), padding=1, groups=2).data
    a = conv_oracle(x[:, :2], w[:3], None, 1, 1)
    b = conv_oracle(x[:, 2:], w[3:], None, 1, 1)
    np.testing.assert_allclose(got, np.concatenate([a, b], 1), atol=1e-12)


def test_conv_errors():
    with pytest.raises(ValueError, match="inconsistent"):
        F.conv2d(T(np.ones((1, 3, 4, 4))), T(np.ones((2, 2, 3, 3))))
    with pytest.raises(ValueError):
        F.conv2d(T(np.ones((1, 4, 4, 4))), T(np.ones((3, 2, 3, 3))), groups=2)


def test_conv_transpose_is_adjoint():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((3, 5, 4, 4))
    y = F.conv_transpose2d(T(x), T(w), None, 2, 1).data
    assert y.shape == (2, 5, 8, 8)
    r = rng.standard_normal(y.shape)
    # <convT(x), r> == <x, conv(r)> with the same weight viewed as (Cin, Cout) -> conv weight (Cin... )
    back = F.conv2d(T(r), T(w), None, 2, 1).data
    assert abs((y * r).sum() - (x * back).sum()) < 1e-9


# bilinear sampling -----------------------------------------------------------

def test_bilinear_integer_and_half():
    img = T(np.array([[[[0.0, 1.0], [2.0, 3.0]]]]))
    px = T(np.array([[[[0.5, 1.0]]]]))
    py = T(np.array([[[[0.5, 1.0]]]]))
    out = F.bilinear_sample(img, px, py).data.ravel()
    assert out[0] == pytest.approx(1.5)
    assert out[1] == 3.0


def test_bilinear_random_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 6, 7))
    px = rng.uniform(-2, 8, (2, 4, 5, 5))
    py = rng.uniform(-2, 7, (2, 4, 5, 5))
    got = F.bilinear_sample(T(x), T(px), T(py)).data.reshape(2, 3, 4, 5, 5)
    for n in range(2):
        for c in range(3):
            for k in range(4):
                for i in range(5):
                    for j in range(5):
                        want = bilinear_oracle(x[n, c], px[n, k, i, j], py[n, k, i, j])
                        assert abs(got[n, c, k, i, j] - want) < 1e-12


def test_bilinear_rejects_nonfinite_coords():
    x = T(np.ones((1, 1, 3, 3)))
    bad = T(np.zeros((1, 1, 2, 2)))
    bad.data[0, 0, 0, 0] = np.inf  # bypasses the constructor check on purpose
    with pytest.raises(FloatingPointError):
        F.bilinear_sample(x, T(np.zeros((1, 1, 2, 2))), bad)


def test_bilinear_lipschitz_in_coordinates():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 2, 6, 6))
    px = rng.uniform(0, 5, (1, 3, 4, 4))
    py = rng.uniform(0, 5, (1, 3, 4, 4))
    d = 1e-3
    a = F.bilinear_sample(T(x), T(px), T(py)).data
    b = F.bilinear_sample(T(x), T(px + d), T(py)).data
    assert np.abs(a - b).max() <= 2 * np.abs(x).max() * d + 1e-12


# deformable conv ---------------------------------------------------------------

def _deform_case(seed, N=2, C=3, H=5, W=6, O=4):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((N, C, H, W)), rng.standard_normal((O, C, 3, 3)), rng.standard_normal(O), rng)


def test_deform_zero_flow_is_conv():
    x, w, b, _ = _deform_case(0)
    z = np.zeros((2, 9, 5, 6))
    got = F.deformable_conv3x3(T(x), T(z), T(z), T(w), T(b)).data
    np.testing.assert_allclose(got, F.conv2d(T(x), T(w), T(b), 1, 1).data, atol=1e-12, rtol=0)


def test_deform_integer_flow_is_shifted_conv():
    x, w, b, _ = _deform_case(1)
    dx = np.ones((2, 9, 5, 6))
    got = F.deformable_conv3x3(T(x), T(dx), T(np.zeros_like(dx)), T(w), T(b)).data
    # tap reads column j+1: a padded conv on x extended by one zero column, read one column right
    ext = np.concatenate([x, np.zeros(x.shape[:3] + (1,))], axis=3)
    want = F.conv2d(T(ext), T(w), T(b), 1, 1).data[..., 1:]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_deform_random_flow_matches_oracle():
    x, w, b, rng = _deform_case(2, N=1, C=2, H=4, W=5, O=3)
    dx = rng.uniform(-1.5, 1.5, (1, 9, 4, 5))
    dy = rng.uniform(-1.5, 1.5, (1, 9, 4, 5))
    got = F.deformable_conv3x3(T(x), T(dx), T(dy), T(w), T(b)).data
    np.testing.assert_allclose(got, deform_oracle(x, dx, dy, w, b), atol=1e-10)


def test_deform_shape_errors():
    x, w, b, _ = _deform_case(3)
    with pytest.raises(ValueError, match="flow"):
        F.deformable_conv3x3(T(x), T(np.zeros((2, 9, 4, 6))), T(np.zeros((2, 9, 4, 6))), T(w), T(b))


# kgconv ------------------------------------------------------------------------

def test_kgconv_selection_zero_and_oracle():
    rng = np.random.default_rng(7)
    f = rng.standard_normal((2, 9 * 4, 3, 3))
    onehot = np.zeros(4)
    onehot[2] = 1
    sel = F.kgconv(T(f), T(onehot), 9).data
    np.testing.assert_array_equal(sel, f.reshape(2, 9, 4, 3, 3)[:, :, 2])
    assert not F.kgconv(T(f), T(np.zeros(4)), 9).data.any()
    w = rng.standard_normal(4)
    rep = np.zeros((9, 36, 1, 1))
    for g in range(9):
        rep[g, g * 4:(g + 1) * 4, 0, 0] = w
    np.testing.assert_allclose(F.kgconv(T(f), T(w), 9).data, F.conv2d(T(f), T(rep)).data, atol=1e-12)
    with pytest.raises(ValueError):
        F.kgconv(T(f), T(np.ones(5)), 9)


# normalization -----------------------------------------------------------------

def test_instance_constant_is_zero():
    out = F.normalize(T(np.full((2, 3, 4, 4), 5.0)), "instance").data
    assert not out.any()


def test_pixel_norm_of_twos():
    out = F.normalize(T(np.full((1, 4, 1, 1), 2.0)), "pixel").data
    np.testing.assert_allclose(out, 2 / np.sqrt(4 + 1e-5), rtol=1e-14)


def test_batch_stats_standardizes():
    x = np.random.default_rng(8).standard_normal((4, 3, 5, 5)) * 3 + 1
    y = F.normalize(T(x), "batch_stats").data
    assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-6
    assert np.abs(y.var(axis=(0, 2, 3)) - 1).max() < 1e-3


def test_layer_norm_axes():
    x = np.random.default_rng(9).standard_normal((3, 2, 4, 4))
    y = F.normalize(T(x), "layer").data
    np.testing.assert_allclose(y.mean(axis=(1, 2, 3)), 0, atol=1e-12)


def test_normalize_errors():
    with pytest.raises(ValueError, match="unknown kind"):
        F.normalize(T(np.ones((1, 1, 2, 2))), "group")
    with pytest.raises(ValueError):
        F.normalize(T(np.ones((2, 1, 1, 1))), "instance")


def test_adain_cases():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 3, 4, 4))
    plain = F.normalize(T(x), "instance").data
    np.testing.assert_array_equal(F.adain(T(x), T(np.ones(3)), T(np.zeros(3))).data, plain)
    beta = rng.standard_normal(3)
    np.testing.assert_allclose(F.adain(T(x), T(np.zeros(3)), T(beta)).data,
                               np.broadcast_to(beta[None, :, None, None], x.shape))
    g, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    np.testing.assert_allclose(F.adain(T(x), T(g), T(b)).data,
                               plain * g[:, :, None, None] + b[:, :, None, None], atol=1e-14)
    with pytest.raises(ValueError):
        F.adain(T(x), T(np.ones(2)), T(np.ones(2)))


# spectral norm --------------------------------------------------------------------

def test_sn_scaled_identity():
    w = T(3 * np.eye(4).reshape(4, 4, 1, 1))
    st = F.SpectralState(np.random.default_rng(0).standard_normal(4))
    for _ in range(10):
        out = F.spectral_normalize(w, st)
    np.testing.assert_allclose(out.data.reshape(4, 4), np.eye(4), atol=1e-6)


def test_sn_unit_norm_fixed_point():
    rng = np.random.default_rng(1)
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    w = T(q * np.array([1.0, 0.5, 0.3, 0.2, 0.1]))
    st = F.SpectralState(rng.standard_normal(5))
    for _ in range(30):
        out = F.spectral_normalize(w, st)
    np.testing.assert_allclose(out.data, w.data, atol=1e-4)
    assert abs(np.linalg.norm(st.u) - 1) < 1e-12


@pytest.mark.parametrize("shape", [(8, 3, 3, 3), (16, 40), (64, 64)])
def test_sn_random_sigma(shape):
    rng = np.random.default_rng(2)
    w = T(rng.standard_normal(shape))
    st = F.SpectralState.warm(w.data)
    for _ in range(20):
        out = F.spectral_normalize(w, st)
    s = np.linalg.svd(out.data.reshape(shape[0], -1), compute_uv=False)[0]
    assert 0.99 <= s <= 1.01


def test_sn_cold_start_converges():
    rng = np.random.default_rng(3)
    w = T(rng.standard_normal((32, 32)))
    st = F.SpectralState(rng.standard_normal(32))
    errs = []
    for _ in range(400):
        out = F.spectral_normalize(w, st)
        errs.append(np.linalg.svd(out.data, compute_uv=False)[0] - 1)
    assert errs[-1] < 1e-6
    assert all(e >= -1e-12 for e in errs)  # the estimate never exceeds sigma_max


def test_sn_eval_mode_leaves_u():
    rng = np.random.default_rng(4)
    w = T(rng.standard_normal((6, 5)))
    st = F.SpectralState(rng.standard_normal(6))
    u0 = st.u.copy()
    F.spectral_normalize(w, st, update=False)
    np.testing.assert_array_equal(st.u, u0)


def test_sn_zero_weight_errors():
    with pytest.raises(ValueError):
        F.spectral_normalize(T(np.zeros((2, 2))), F.SpectralState(np.ones(2)))


# minibatch std / resample ------------------------------------------------------------

def test_minibatch_std_cases():
    x = np.random.default_rng(3).standard_normal((1, 2, 3, 3))
    same = F.minibatch_std_concat(T(np.concatenate([x, x]))).data
    assert same.shape == (2, 3, 3, 3) and not same[:, 2].any()
    diff = F.minibatch_std_concat(T(np.concatenate([x, x + 0.8]))).data
    np.testing.assert_allclose(diff[:, 2], 0.4, rtol=1e-12)
    r = np.random.default_rng(4).standard_normal((3, 2, 2, 2))
    stds = [np.sqrt(np.mean([(r[n, c, h, w] - r[:, c, h, w].mean()) ** 2 for n in range(3)]))
            for c in range(2) for h in range(2) for w in range(2)]
    np.testing.assert_allclose(F.minibatch_std_concat(T(r)).data[:, 2], np.mean(stds), rtol=1e-12)
    with pytest.raises(ValueError):
        F.minibatch_std_concat(T(x))


def test_resample_cases():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2, 4, 4))
    np.testing.assert_array_equal(F.resample(F.resample(T(x), "up_nearest2"), "down_avg2").data, x)
    c = F.resample(T(np.full((1, 1, 4, 4), 3.0)), "down_avg2").data
    assert np.all(c == 3.0)
    d = F.resample(T(x), "down_avg2").data
    for i in range(2):
        for j in range(2):
            assert abs(d[0, 0, i, j] - x[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].mean()) < 1e-15
    with pytest.raises(ValueError):
        F.resample(T(np.ones((1, 1, 3, 4))), "down_avg2")
    with pytest.raises(ValueError):
        F.resample(T(x), "bicubic")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_up_down_identity_property(n, c, h, seed):
    x = np.random.default_rng(seed).standard_normal((n, c, h, h))
    np.testing.assert_array_equal(F.resample(F.resample(T(x), "up_nearest2"), "down_avg2").data, x)
