import math
from importlib import resources

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ldenet.autodiff import ops
from ldenet.autodiff.rng import Rng
from ldenet.autodiff.tensor import Tensor
from ldenet.checkpoint import read_tensors
from ldenet.errors import ConfigError, ShapeError
from ldenet.losses import (PSNR_CAP_DB, THETA_PREFIX, THETA_SEED, LossWeights, PerceptualFeatures, SsimParams,
                           content_consistency_loss, contrast_structure_map, disentangle_loss,
                           enhancement_loss, gaussian_window, perceptual_distance, psnr, reconstruction_loss,
                           ssim, ssim_map)


# float64 evaluation of the shipped extractor gives 0.00580291873
PINNED_PERCEPTUAL = 0.005802919


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def rand_img(shape, seed):
    return Rng(seed, "loss").uniform(shape)


# SSIM oracle: one window at a time, straight from the definition ------------------

def _luma(x):
    return 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]


def ssim_oracle(x, y, size=11, sigma=1.5, c1=1e-4, c2=9e-4):
    ax = [math.exp(-((i - (size - 1) / 2) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    total = sum(ax)
    w = np.array([[a * b / (total * total) for b in ax] for a in ax])
    gx, gy = _luma(x), _luma(y)
    vals = []
    for i in range(gx.shape[0] - size + 1):
        for j in range(gx.shape[1] - size + 1):
            px, py = gx[i:i + size, j:j + size], gy[i:i + size, j:j + size]
            mx, my = float(np.sum(w * px)), float(np.sum(w * py))
            vx = float(np.sum(w * (px - mx) ** 2))
            vy = float(np.sum(w * (py - my) ** 2))
            cxy = float(np.sum(w * (px - mx) * (py - my)))
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_window_oracle_on_20_pairs():
    r = Rng(2024, "ssim-oracle")
    worst = 0.0
    for _ in range(20):
        x, y = r.uniform((16, 16, 3)), r.uniform((16, 16, 3))
        worst = max(worst, abs(ssim(x, y) - ssim_oracle(x, y)))
    assert worst < 1e-6


def test_ssim_oracle_agrees_on_correlated_pair():
    x = rand_img((24, 20, 3), 1)
    y = np.clip(0.8 * x + 0.1 + 0.05 * Rng(2).normal(x.shape), 0, 1)
    assert abs(ssim(x, y) - ssim_oracle(x, y)) < 1e-6


def test_ssim_identity_is_one():
    x = rand_img((16, 16, 3), 3)
    assert ssim(x, x) == 1.0


def test_ssim_constant_images_closed_form():
    a, b = np.zeros((16, 16, 3)), np.ones((16, 16, 3))
    expected = 1e-4 / 1.0001
    assert abs(ssim(a, b) - expected) < 1e-12
    assert abs(expected - 9.999e-5) < 1e-8


def test_ssim_symmetric_and_bounded():
    x, y = rand_img((16, 16, 3), 4), rand_img((16, 16, 3), 5)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-15)
    assert -1.0 <= ssim(x, y) <= 1.0


def test_ssim_too_small():
    with pytest.raises(ShapeError):
        ssim(np.zeros((10, 16, 3)), np.zeros((10, 16, 3)))


def test_ssim_map_batched_and_gray():
    x = t64(rand_img((2, 12, 13, 3), 6))
    assert ssim_map(x, x).shape == (2, 2, 3, 1)
    g = rand_img((12, 12, 1), 7)
    assert abs(ssim(g, g * 0.5) - ssim_oracle(np.repeat(g, 3, -1), np.repeat(g * 0.5, 3, -1))) < 1e-6


def test_gaussian_window_normalized():
    w = gaussian_window()
    assert w.shape == (11, 11)
    assert abs(w.sum() - 1.0) < 1e-15
    assert SsimParams().c1 == pytest.approx(1e-4) and SsimParams().c2 == pytest.approx(9e-4)


@given(k=st.floats(-0.1, 0.1), seed=st.integers(0, 1000))
def test_contrast_structure_factor_shift_invariant(k, seed):
    x, y = rand_img((16, 16, 3), seed), rand_img((16, 16, 3), seed + 1)
    a = contrast_structure_map(x, y).data
    b = contrast_structure_map(x + k, y + k).data
    assert np.max(np.abs(a - b)) < 1e-9


def test_full_ssim_luminance_term_not_shift_invariant():
    # the luminance factor depends on the absolute means, so a common offset moves SSIM
    x = np.full((16, 16, 3), 0.2)
    y = np.full((16, 16, 3), 0.3)
    assert abs(ssim(x, y) - ssim(x + 0.1, y + 0.1)) > 1e-3


# PSNR -----------------------------------------------------------------------------

def test_psnr_closed_forms():
    x = rand_img((8, 8, 3), 8) * 0.8
    assert abs(psnr(x, x + 0.1) - 20.0) < 1e-9
    assert abs(psnr(np.zeros((8, 8, 3)), np.ones((8, 8, 3))) - 0.0) < 1e-9
    assert psnr(x, x) == PSNR_CAP_DB == 100.0


def test_psnr_cap_and_symmetry():
    x = rand_img((8, 8, 3), 9)
    assert psnr(x, x + 1e-7) == 100.0
    y = rand_img((8, 8, 3), 10)
    assert psnr(x, y) == psnr(y, x)


def test_psnr_accepts_tensors_and_checks_shape():
    x = rand_img((8, 8, 3), 11)
    assert psnr(t64(x), Tensor((x + 0.1).astype(np.float32))) == pytest.approx(20.0, abs=1e-5)
    with pytest.raises(ShapeError):
        psnr(x, x[:4])


# disentanglement objectives -------------------------------------------------------

def test_content_consistency_cases():
    c = t64(rand_img((4, 4, 8), 12))
    assert content_consistency_loss(c, c).item() == 0.0
    assert content_consistency_loss(c + 0.5, c).item() == pytest.approx(0.5, abs=1e-15)
    d = t64(rand_img((4, 4, 8), 13))
    assert content_consistency_loss(c, d).item() == content_consistency_loss(d, c).item()
    with pytest.raises(ShapeError):
        content_consistency_loss(c, t64(np.zeros((4, 4, 7))))


def _pairs(batched, seed=14):
    shape = (2, 8, 8, 3) if batched else (8, 8, 3)
    r = Rng(seed)
    s_l, s_t = t64(r.uniform(shape)), t64(r.uniform(shape))
    c_l, c_t = t64(r.normal(shape)), t64(r.normal(shape))
    return c_l, c_t, s_l, s_t


@pytest.mark.parametrize("batched", [False, True])
def test_reconstruction_loss_stub_cases(batched):
    c_l, c_t, s_l, s_t = _pairs(batched)
    # the stub ignores Content and echoes the Illumination argument, which is the image itself
    assert reconstruction_loss(c_l, c_t, s_l, s_t, s_l, s_t, lambda c, i: i).item() == 0.0
    shifted = reconstruction_loss(c_l, c_t, s_l, s_t, s_l, s_t, lambda c, i: i + 0.1).item()
    assert shifted == pytest.approx(0.4, abs=1e-12)


@pytest.mark.parametrize("batched", [False, True])
def test_reconstruction_loss_target_follows_illumination(batched):
    c_l, c_t, s_l, s_t = _pairs(batched)
    # echoing the Content argument is right only on the diagonal pairings
    got = reconstruction_loss(s_l, s_t, s_l, s_t, s_l, s_t, lambda c, i: c).item()
    expected = 2 * float(np.mean(np.abs(s_l.data - s_t.data)))
    assert got == pytest.approx(expected, rel=1e-12)


@given(seed=st.integers(0, 500))
def test_reconstruction_loss_swap_symmetry(seed):
    c_l, c_t, s_l, s_t = _pairs(True, seed)
    r = Rng(seed, "i")
    i_l, i_t = t64(r.normal(c_l.shape)), t64(r.normal(c_l.shape))
    w = t64(r.normal((3,)))
    recon = lambda c, i: ops.sigmoid(c * i) * w
    a = reconstruction_loss(c_l, c_t, i_l, i_t, s_l, s_t, recon).item()
    b = reconstruction_loss(c_t, c_l, i_t, i_l, s_t, s_l, recon).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_disentangle_loss_arithmetic():
    assert disentangle_loss(1.0, 0.5, 0.2) == pytest.approx(1.1, abs=1e-15)
    assert disentangle_loss(0.0, 0.0) == 0.0
    assert disentangle_loss(0.3, 0.7, 0.0) == 0.3
    assert disentangle_loss(0.3, 0.8) >= disentangle_loss(0.3, 0.7)
    assert disentangle_loss(0.4, 0.7) >= disentangle_loss(0.3, 0.7)


def test_loss_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.lambda_recon, w.lambda_s, w.lambda_p) == (0.2, 1.0, 1.0)
    with pytest.raises(ConfigError):
        LossWeights(lambda_s=-1.0)


# perceptual stand-in and enhancement loss ------------------------------------------

def test_shipped_theta_matches_seeded_init():
    stored = read_tensors(resources.files("ldenet") / "assets" / "theta.ldec")
    fresh = PerceptualFeatures(THETA_SEED)
    names = [n for n, _ in fresh.named_parameters()]
    assert sorted(THETA_PREFIX + n for n in names) == sorted(stored)
    for name, p in fresh.named_parameters():
        assert np.array_equal(stored[THETA_PREFIX + name], p.data.astype(np.float32))


def test_perceptual_distance_properties():
    x, y = t64(rand_img((16, 16, 3), 15)), t64(rand_img((16, 16, 3), 16))
    assert perceptual_distance(x, x).item() == 0.0
    d = perceptual_distance(x, y).item()
    assert d > 0
    assert d == perceptual_distance(y, x).item()
    with pytest.raises(ShapeError):
        perceptual_distance(x, t64(np.zeros((16, 8, 3))))


def test_perceptual_distance_pinned():
    x = Tensor(rand_img((16, 16, 3), 17).astype(np.float32))
    y = Tensor(rand_img((16, 16, 3), 18).astype(np.float32))
    assert perceptual_distance(x, y).item() == pytest.approx(PINNED_PERCEPTUAL, rel=1e-5)


def test_enhancement_loss_cases():
    x, y = t64(rand_img((16, 16, 3), 19)), t64(rand_img((16, 16, 3), 20))
    assert enhancement_loss(x, x).item() == 0.0
    l1 = float(np.mean(np.abs(x.data - y.data)))
    assert enhancement_loss(x, y, LossWeights(lambda_s=0, lambda_p=0)).item() == pytest.approx(l1, rel=1e-14)
    full = enhancement_loss(x, y).item()
    expected = l1 + (1 - ssim(x, y)) + perceptual_distance(x, y).item()
    assert full == pytest.approx(expected, rel=1e-12)
    assert full >= l1


@given(seed=st.integers(0, 500))
def test_losses_nonnegative(seed):
    x, y = t64(rand_img((12, 12, 3), seed)), t64(rand_img((12, 12, 3), seed + 7))
    assert enhancement_loss(x, y).item() >= 0
    assert content_consistency_loss(x, y).item() >= 0
