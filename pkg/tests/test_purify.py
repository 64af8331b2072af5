"""Purifier tests: identities, tiling geometry, DCT quantization, filters."""

import numpy as np
import pytest

from diffdesk.diffusion import EditConfig, make_linear_schedule, sdedit
from diffdesk.errors import ConfigError
from diffdesk.purify import (
    PurifyConfig,
    box_mean,
    crop_resize,
    grid_pure,
    highfreq_filter_purify,
    jpeg_dct_purify,
    jpeg_quant_table,
    ldm_pure,
    pdm_pure,
    resize_bilinear,
    run_purifier,
    _DCT,
)
from diffdesk.rng import Rng
from stubs import identity_ldm, tiny_unet

SCHED = make_linear_schedule()


# ---------------------------------------------------------------------------
# pdm_pure


def test_pdm_pure_identity_at_zero_depth():
    pdm = tiny_unet(1, (16, 16, 3), sched=SCHED)
    x = Rng(2).uniform(0, 1, (16, 16, 3))
    out = pdm_pure(pdm, x, PurifyConfig(method="pdm_pure", t_star=0, resample_factor=1))
    assert np.array_equal(out, x)


def test_pdm_pure_default_depth_is_tenth_of_chain():
    assert PurifyConfig(method="pdm_pure").t_star == 10
    assert SCHED.T == 100


def test_pdm_pure_resampled_shape_and_range():
    pdm = tiny_unet(3, (8, 8, 3), sched=SCHED)
    x = Rng(4).uniform(0, 1, (16, 16, 3))
    out = pdm_pure(pdm, x, PurifyConfig(method="pdm_pure", t_star=3, resample_factor=2, seed=5))
    assert out.shape == x.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_pdm_pure_seed_deterministic():
    pdm = tiny_unet(5, (16, 16, 3), sched=SCHED)
    x = Rng(6).uniform(0, 1, (16, 16, 3))
    cfg = PurifyConfig(method="pdm_pure", t_star=4, seed=11)
    assert np.array_equal(pdm_pure(pdm, x, cfg), pdm_pure(pdm, x, cfg))


# ---------------------------------------------------------------------------
# grid_pure


def test_grid_degenerate_tiling_equals_sdedit():
    pdm = tiny_unet(7, (16, 16, 3), sched=SCHED)
    x = Rng(8).uniform(0, 1, (16, 16, 3))
    cfg = PurifyConfig(method="grid_pure", t_star=4, grid_cell=8, seed=21)
    via_grid = grid_pure(pdm, x, cfg)
    via_sdedit = np.clip(sdedit(pdm, x, EditConfig(t_star=4, seed=21), SCHED), 0, 1)
    assert np.array_equal(via_grid, via_sdedit)


def test_grid_window_count_32x32_cell8():
    pdm = tiny_unet(9, (16, 16, 3), sched=SCHED)
    x = Rng(10).uniform(0, 1, (32, 32, 3))
    out, info = grid_pure(pdm, x, PurifyConfig(method="grid_pure", t_star=2, grid_cell=8), return_info=True)
    assert info["windows"] == 10  # 9 interior + the assembled four-corner window
    assert np.all(info["coverage"] >= 1)
    assert out.shape == x.shape


def test_grid_rejects_indivisible_extents():
    pdm = tiny_unet(11, (16, 16, 3), sched=SCHED)
    with pytest.raises(ConfigError):
        grid_pure(pdm, Rng(12).uniform(0, 1, (30, 30, 3)), PurifyConfig(method="grid_pure", grid_cell=8))


# ---------------------------------------------------------------------------
# ldm_pure


def test_ldm_pure_zero_depth_is_reconstruction():
    ldm = identity_ldm((16, 16, 3), denoiser_seed=13)
    x = Rng(14).uniform(0, 1, (16, 16, 3))
    out = ldm_pure(ldm, x, PurifyConfig(method="ldm_pure", t_star=0))
    assert np.array_equal(out, x)  # identity autoencoder reconstructs exactly


def test_ldm_pure_output_in_range():
    ldm = identity_ldm((16, 16, 3), denoiser_seed=15)
    x = Rng(16).uniform(0, 1, (16, 16, 3))
    out = ldm_pure(ldm, x, PurifyConfig(method="ldm_pure", t_star=6, seed=2))
    assert out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------------------
# jpeg


def test_jpeg_quant_table_hand_values():
    # scale = 200 - 2*65 = 70; divisor = floor((T*70 + 50) / 100), floored at 1
    t65 = jpeg_quant_table(65)
    assert t65[0, 0] == 11  # floor(16*0.7 + 0.5)
    assert t65[0, 1] == 8  # floor(11*0.7 + 0.5)
    assert t65[7, 7] == 69  # floor(99*0.7 + 0.5)
    assert t65[4, 5] == 76  # floor(109*0.7 + 0.5)
    assert np.all(jpeg_quant_table(100) == 1.0)
    with pytest.raises(ConfigError):
        jpeg_quant_table(0)


def test_jpeg_constant_image_stays_constant():
    x = np.full((16, 16, 3), 0.43)
    out = jpeg_dct_purify(x, 65)
    assert out.max() - out.min() < 1e-12  # DC-only block survives quantization
    # DC shift bounded by half the DC divisor: 11/2 coefficient units = 11/16 levels
    assert np.max(np.abs(out - x)) <= (11 / 16 + 1e-9) / 255


def test_jpeg_quality_100_nearly_exact():
    x = Rng(17).uniform(0, 1, (24, 24, 3))
    out = jpeg_dct_purify(x, 100)
    assert np.max(np.abs(out - x)) <= 2 / 255


def test_jpeg_small_ac_coefficient_zeroed():
    # one unit AC coefficient below half its divisor vanishes entirely
    table = jpeg_quant_table(65)
    coef = np.zeros((8, 8))
    coef[0, 1] = 0.49 * table[0, 1]
    block = _DCT.T @ coef @ _DCT  # inverse DCT of the single coefficient
    x = np.repeat(((block + 128.0) / 255.0)[:, :, None], 3, axis=2)
    out = jpeg_dct_purify(np.clip(x, 0, 1), 65)
    assert out.max() - out.min() < 1e-12  # flattened: the AC ripple is gone


def test_jpeg_pads_odd_extents():
    x = Rng(18).uniform(0, 1, (10, 13, 3))
    out = jpeg_dct_purify(x, 65)
    assert out.shape == x.shape


# ---------------------------------------------------------------------------
# crop & resize


def test_crop_resize_zero_fraction_identity():
    x = Rng(19).uniform(0, 1, (32, 32, 3))
    assert np.array_equal(crop_resize(x, 0.0), x)


def test_crop_resize_rounds_to_nearest():
    # 32 * 0.8 = 25.6 -> crop 26 columns starting at 3; column 28 survives,
    # columns 29..31 do not.
    x = np.zeros((32, 32, 3))
    x[:, 28, 1] = 1.0  # green marker inside the 26-wide crop
    x[:, 29:, 0] = 1.0  # red marker outside it
    out = crop_resize(x, 0.2)
    assert out[:, :, 1].max() > 0.2  # green survived
    assert out[:, :, 0].max() == 0.0  # red cropped away


def test_crop_resize_constant_invariance():
    x = np.full((32, 32, 3), 0.37)
    assert np.allclose(crop_resize(x, 0.2), 0.37, atol=1e-12)


def test_crop_resize_rejects_half():
    with pytest.raises(ConfigError):
        crop_resize(np.zeros((8, 8, 3)), 0.5)


def test_resize_bilinear_identity_and_constant():
    x = Rng(20).uniform(0, 1, (8, 8, 3))
    assert np.array_equal(resize_bilinear(x, 8, 8), x)
    up = resize_bilinear(np.full((4, 4, 3), 0.6), 9, 7)
    assert np.allclose(up, 0.6, atol=1e-12)


# ---------------------------------------------------------------------------
# high-frequency filter


def test_filter_constant_unchanged():
    x = np.full((16, 16, 3), 0.52)
    assert np.allclose(highfreq_filter_purify(x, 2, 0.02), x, atol=1e-12)


def test_filter_huge_eps_is_box_blur():
    x = Rng(21).uniform(0, 1, (16, 16, 3))
    out = highfreq_filter_purify(x, 2, 1e6)
    blur = np.clip(box_mean(x, 2), 0, 1)
    assert np.max(np.abs(out - blur)) <= 1e-3


def test_filter_attenuates_checkerboard():
    yy, xx = np.mgrid[0:32, 0:32]
    checker = ((yy + xx) % 2 * 2.0 - 1.0)[:, :, None] * (8 / 255)
    base = np.full((32, 32, 3), 0.5)
    out = highfreq_filter_purify(base + checker, 2, 0.02)
    base_out = highfreq_filter_purify(base, 2, 0.02)
    residual = np.max(np.abs(out - base_out))
    assert residual <= (8 / 255) / 4


def test_filter_validates_params():
    with pytest.raises(ConfigError):
        highfreq_filter_purify(np.zeros((8, 8, 3)), 0, 0.02)
    with pytest.raises(ConfigError):
        highfreq_filter_purify(np.zeros((8, 8, 3)), 2, 0.0)


# ---------------------------------------------------------------------------
# dispatch, shape/range preservation


def test_run_purifier_all_methods_preserve_shape_and_range():
    pdm = tiny_unet(22, (16, 16, 3), sched=SCHED)
    ldm = identity_ldm((16, 16, 3), denoiser_seed=23)
    x = Rng(24).uniform(0, 1, (16, 16, 3))
    for method in ("pdm_pure", "grid_pure", "ldm_pure", "jpeg_dct", "crop_resize", "highfreq_filter"):
        cfg = PurifyConfig(method=method, t_star=2, grid_cell=8, seed=7)
        out = run_purifier(cfg, x, pdm=pdm, ldm=ldm)
        assert out.shape == x.shape, method
        assert out.min() >= 0.0 and out.max() <= 1.0, method


def test_purify_config_validation():
    for bad in [
        dict(method="nope"),
        dict(method="jpeg_dct", quality=0),
        dict(method="crop_resize", crop_fraction=0.7),
        dict(method="grid_pure", grid_cell=1),
        dict(method="pdm_pure", resample_factor=3),
        dict(method="highfreq_filter", filter_eps=0.0),
    ]:
        with pytest.raises(ConfigError):
            PurifyConfig(**bad).validate()
