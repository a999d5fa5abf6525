import struct

import numpy as np
import pytest

from relaydiff.blurschedule import ScheduleConfig, truncated_sigma
from relaydiff.denoiser import (
    MAX_PARAMS,
    CheckpointError,
    ConvDenoiser,
    CountingDenoiser,
    GaussianDenoiser,
    GaussianToyPrior,
    GuidedDenoiser,
    analytic_denoiser,
    cfg_combine,
    corrupt,
    decode_checkpoint,
    encode_checkpoint,
    precondition,
    precondition_coeffs,
    rdm_loss,
)
from relaydiff.noise import NoiseSpec, RandomSource, mixed_noise_covariance
from relaydiff.relay import power_law_prior
from relaydiff.verify import fd_gradient_errors


def test_precondition_coefficients():
    c_skip, c_out, c_in = precondition_coeffs(1.5, 0.5)
    assert c_skip == pytest.approx(0.25 / 2.5)
    assert c_out == pytest.approx(1.5 * 0.5 / np.sqrt(2.5))
    assert c_in == pytest.approx(1 / np.sqrt(2.5))
    x = np.ones((3, 3))
    assert np.allclose(precondition(np.zeros((3, 3)), x, 1.5), c_skip)
    with pytest.raises(ValueError):
        precondition_coeffs(0.0)


def test_cfg_combine():
    c, u = np.full((2, 2), 3.0), np.ones((2, 2))
    assert np.allclose(cfg_combine(c, u, 0.0), u)
    assert np.allclose(cfg_combine(c, u, 1.0), c)
    assert np.allclose(cfg_combine(c, u, 2.0), 5.0)
    with pytest.raises(ValueError):
        cfg_combine(np.ones((2, 2)), np.ones((2, 3)), 1.0)


def test_guided_and_counting_wrappers():
    class Fixed:
        def __call__(self, x, sigma, label=None):
            return np.zeros_like(x) + (0.0 if label is None else 1.0)

    g = CountingDenoiser(GuidedDenoiser(Fixed(), 3.0))
    assert np.allclose(g(np.zeros((2, 2)), 1.0, 0), 3.0)
    assert np.allclose(g(np.zeros((2, 2)), 1.0), 0.0)
    assert g.calls == 2


def test_analytic_denoiser_scalar_bayes():
    prior = GaussianToyPrior(np.full((1, 1), 0.3), np.full((1, 1), 2.0))
    u = np.full((1, 1), 1.7)
    # x = 0.3 + 2/(2+0.25) (1.7 - 0.3)
    assert analytic_denoiser(prior, u, 0.5)[0, 0] == pytest.approx(0.3 + 2 / 2.25 * 1.4)


def pixel_posterior_mean(prior, cfg, x_t, sigma, blur):
    """Dense Gaussian conditioning in pixel space."""
    h, w = prior.shape
    n = h * w
    eye = np.eye(n).reshape(n, h, w)
    v = prior.from_freq(eye).reshape(n, n).T  # column f = V e_f
    cov0 = v @ np.diag(prior.var.ravel()) @ v.T
    m0 = prior.pixel_mean().ravel()
    b = blur.apply(eye).reshape(n, n).T
    cn = mixed_noise_covariance(h, w, cfg.unit_noise)
    gain = cov0 @ b.T @ np.linalg.inv(b @ cov0 @ b.T + sigma**2 * cn)
    return (m0 + gain @ (x_t.ravel() - b @ m0)).reshape(h, w)


@pytest.mark.parametrize("alpha", [0.0, 0.15])
def test_gaussian_denoiser_equals_pixel_space_conditioning(alpha):
    rng = RandomSource(1)
    k = 4
    prior = GaussianToyPrior(rng.normal((8, 8)) * 0.2, rng.uniform(0.05, 2.0, (8, 8)), k)
    cfg = ScheduleConfig(patch=k, sigma_b_max=3.0, t_s=0.6, noise=NoiseSpec(1.0, k, alpha))
    den = GaussianDenoiser(prior, cfg)
    t = 0.8
    sigma = truncated_sigma(t, cfg)
    x_t = rng.normal((8, 8))
    ref = pixel_posterior_mean(prior, cfg, x_t, sigma, den.blur_at(sigma))
    assert np.allclose(den(x_t, sigma), ref, atol=1e-10)


def test_gaussian_denoiser_per_item_sigma():
    prior = power_law_prior(8, 8)
    den = GaussianDenoiser(prior, ScheduleConfig())
    x = RandomSource(2).normal((3, 8, 8))
    s = np.array([0.1, 1.0, 5.0])
    out = den(x, s)
    for i in range(3):
        assert np.allclose(out[i], den(x[i], s[i]))


def test_gaussian_denoiser_requires_matching_basis():
    with pytest.raises(ValueError):
        GaussianDenoiser(power_law_prior(8, 8), ScheduleConfig(patch=4, sigma_b_max=1.0))


def test_prior_sampling_variance():
    prior = power_law_prior(8, 8)
    u = prior.to_freq(prior.sample(RandomSource(3), 20000))
    ratio = u.var(axis=0) / prior.var
    assert np.all(np.abs(ratio - 1) < 5 * np.sqrt(2 / 20000))


def test_loss_at_large_sigma_approaches_data_second_moment():
    prior = power_law_prior(8, 8)
    cfg = ScheduleConfig(t_eps=1e-4)
    den = GaussianDenoiser(prior, cfg)
    x = prior.sample(RandomSource(4), 4000)
    loss, grads = rdm_loss(den, x, 1.0, cfg, RandomSource(5))
    second_moment = float(np.mean(x**2))
    assert grads is None
    assert loss == pytest.approx(second_moment, rel=0.03)


def test_corrupt_per_item_times():
    cfg = ScheduleConfig(patch=2, sigma_b_max=2.0)
    x = RandomSource(6).normal((3, 4, 4))
    xt, sig = corrupt(x, np.array([0.1, 0.5, 0.9]), cfg, RandomSource(7))
    assert xt.shape == x.shape and sig.shape == (3,)
    assert np.all(np.diff(sig) > 0)
    with pytest.raises(ValueError):
        corrupt(x, np.array([0.1, 0.2]), cfg, RandomSource(7))


# ---------------------------------------------------------------------------
# conv net


def test_conv_gradients_match_finite_differences():
    for _, _, a, n, rel in fd_gradient_errors(11):
        assert rel < 1e-4, (a, n)


def test_conv_shapes_labels_and_limits():
    net = ConvDenoiser.init(RandomSource(0), channels=4, n_classes=2)
    x = RandomSource(1).normal((3, 8, 8))
    assert net(x, 1.0).shape == x.shape
    assert net(x[0], 1.0).shape == (8, 8)
    assert np.allclose(net(x, 1.0, -1), net(x, 1.0, None))
    assert not np.allclose(net(x, 1.0, 1), net(x, 1.0, None))
    with pytest.raises(ValueError):
        net(x, 1.0, 2)
    with pytest.raises(ValueError):
        ConvDenoiser.init(RandomSource(0), channels=80)
    assert net.n_params < MAX_PARAMS


def test_conv_preconditioning_limit():
    # as sigma -> 0 the output tends to the input (c_skip -> 1, c_out -> 0)
    net = ConvDenoiser.init(RandomSource(0), channels=4)
    x = RandomSource(1).normal((8, 8))
    assert np.allclose(net(x, 1e-9), x, atol=1e-7)


def test_checkpoint_roundtrip(tmp_path):
    net = ConvDenoiser.init(RandomSource(0), channels=4, n_classes=3, sigma_data=0.7)
    p = tmp_path / "net.rdmk"
    net.save(p)
    back = ConvDenoiser.load(p)
    assert back.sigma_data == 0.7
    for k in net.params:
        assert np.array_equal(net.params[k], back.params[k])
    x = RandomSource(2).normal((8, 8))
    assert np.array_equal(net(x, 0.5, 1), back(x, 0.5, 1))


def test_checkpoint_layout():
    data = encode_checkpoint({"a": np.arange(6.0).reshape(2, 3), "s": np.array(2.5)})
    assert data[:4] == b"RDMK"
    version, count, nlen = struct.unpack_from("<III", data, 4)
    assert (version, count, nlen) == (1, 2, 1)
    assert data[16:17] == b"a"
    assert struct.unpack_from("<III", data, 17) == (2, 2, 3)
    assert np.array_equal(np.frombuffer(data, "<f8", 6, 29), np.arange(6.0))
    out = decode_checkpoint(data)
    assert out["s"].shape == () and float(out["s"]) == 2.5


@pytest.mark.parametrize(
    "mutate",
    [lambda d: b"XXXX" + d[4:], lambda d: d[:-3], lambda d: d + b"\0", lambda d: d[:4] + struct.pack("<I", 9) + d[8:]],
)
def test_checkpoint_corruption_detected(mutate):
    data = encode_checkpoint({"w": np.ones(3)})
    with pytest.raises(CheckpointError):
        decode_checkpoint(mutate(data))
