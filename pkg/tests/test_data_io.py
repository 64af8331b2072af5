"""Dataset generation, PPM round trips, checkpoint integrity, reports."""

import json
import struct

import numpy as np
import pytest

from diffdesk.data_io import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    Report,
    SyntheticSpec,
    crc64,
    generate_synthetic_dataset,
    load_checkpoint,
    load_image,
    parameter_hash,
    save_checkpoint,
    save_image,
    write_report,
)
from diffdesk.diffusion import make_linear_schedule
from diffdesk.errors import (
    BadChecksumError,
    BadMagicError,
    BadVersionError,
    ConfigError,
    MalformedHeaderError,
    TruncatedPayloadError,
    UnsupportedMaxvalError,
)
from diffdesk.models import Autoencoder, AutoencoderArch
from diffdesk.rng import Rng
from stubs import tiny_unet


# ---------------------------------------------------------------------------
# synthetic dataset


def test_empty_dataset():
    imgs, labels = generate_synthetic_dataset(SyntheticSpec(count=0))
    assert imgs.shape == (0, 32, 32, 3)
    assert labels.size == 0


def test_dataset_deterministic():
    spec = SyntheticSpec(size=16, count=12, seed=99)
    a, la = generate_synthetic_dataset(spec)
    b, lb = generate_synthetic_dataset(spec)
    assert np.array_equal(a, b)
    assert np.array_equal(la, lb)


def test_dataset_class_balance():
    imgs, labels = generate_synthetic_dataset(SyntheticSpec(size=16, count=2000, seed=1))
    assert imgs.shape == (2000, 16, 16, 3)
    counts = np.bincount(labels)
    assert np.array_equal(counts, [500, 500, 500, 500])
    assert imgs.min() >= 0.0 and imgs.max() <= 1.0


def test_dataset_images_differ():
    imgs, _ = generate_synthetic_dataset(SyntheticSpec(size=16, count=8, seed=2))
    assert not np.array_equal(imgs[0], imgs[4])  # same class, different draw


def test_dataset_spec_validation():
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(SyntheticSpec(size=4))
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(SyntheticSpec(classes=("hexagon",)))


# ---------------------------------------------------------------------------
# PPM


def test_load_hand_written_white_pixel(tmp_path):
    p = tmp_path / "white.ppm"
    p.write_bytes(b"P6\n1 1\n255\n\xff\xff\xff")
    img = load_image(p)
    assert img.shape == (1, 1, 3)
    assert np.array_equal(img, np.ones((1, 1, 3)))


def test_ppm_round_trip_error_bound(tmp_path):
    x = Rng(3).uniform(0, 1, (9, 7, 3))
    p = tmp_path / "img.ppm"
    save_image(x, p)
    back = load_image(p)
    assert np.max(np.abs(back - x)) <= 1.0 / 255.0


def test_ppm_save_load_save_idempotent(tmp_path):
    x = Rng(4).uniform(0, 1, (8, 8, 3))
    p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
    save_image(x, p1)
    save_image(load_image(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_ppm_comment_header(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# comment line\n2 1\n255\n" + bytes(6))
    assert load_image(p).shape == (1, 2, 3)


def test_ppm_bad_magic(tmp_path):
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P5\n1 1\n255\n\xff")
    with pytest.raises(MalformedHeaderError):
        load_image(p)


def test_ppm_unsupported_maxval(tmp_path):
    p = tmp_path / "deep.ppm"
    p.write_bytes(b"P6\n1 1\n65535\n\xff\xff\xff\xff\xff\xff")
    with pytest.raises(UnsupportedMaxvalError):
        load_image(p)


def test_ppm_truncated_payload(tmp_path):
    p = tmp_path / "trunc.ppm"
    p.write_bytes(b"P6\n2 2\n255\n\xff\xff")
    with pytest.raises(TruncatedPayloadError):
        load_image(p)


def test_ppm_nonnumeric_header(tmp_path):
    p = tmp_path / "alpha.ppm"
    p.write_bytes(b"P6\nxx 1\n255\n\xff\xff\xff")
    with pytest.raises(MalformedHeaderError):
        load_image(p)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_exact_at_f32(tmp_path):
    sched = make_linear_schedule(T=10, beta_start=0.01, beta_end=0.3)
    model = tiny_unet(5, sched=sched)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path, schedule_betas=sched.betas)
    blob = load_checkpoint(path)
    assert blob["kind"] == "denoiser"
    assert np.array_equal(blob["betas"], sched.betas)
    params = model.parameters()
    assert set(blob["params"]) == set(params)
    for name, arr in blob["params"].items():
        assert np.array_equal(arr, params[name].data.astype(np.float32).astype(np.float64))
    # write back: hash must be stable through a second round trip
    for name, arr in blob["params"].items():
        params[name].data = arr
    save_checkpoint(model, tmp_path / "again.ckpt", schedule_betas=sched.betas)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_descriptor_holds_autoencoder_quality(tmp_path):
    ae = Autoencoder(AutoencoderArch(height=8, width=8, factor=2, hidden=(4, 8), latent_channels=2), Rng(6))
    ae.holdout_mae = 0.0321
    save_checkpoint(ae, tmp_path / "ae.ckpt")
    blob = load_checkpoint(tmp_path / "ae.ckpt")
    assert blob["kind"] == "autoencoder"
    assert blob["descriptor"]["holdout_mae"] == pytest.approx(0.0321)


def test_checkpoint_single_byte_corruption_detected(tmp_path):
    model = tiny_unet(7)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    blob = bytearray(path.read_bytes())
    rng = Rng(8)
    for trial in range(64):
        pos = int(rng.derive(trial).integers(4, len(blob) - 9))
        corrupted = bytearray(blob)
        corrupted[pos] ^= 0xFF
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(corrupted))
        with pytest.raises(BadChecksumError):
            load_checkpoint(bad)


def test_checkpoint_wrong_magic(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"NOPE" + bytes(32))
    with pytest.raises(BadMagicError):
        load_checkpoint(p)


def test_checkpoint_future_version_named(tmp_path):
    model = tiny_unet(9)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    blob = bytearray(path.read_bytes()[:-8])
    struct.pack_into("<H", blob, 4, CHECKPOINT_VERSION + 1)
    blob += struct.pack("<Q", crc64(bytes(blob)))  # keep the checksum valid
    path.write_bytes(bytes(blob))
    with pytest.raises(BadVersionError, match=str(CHECKPOINT_VERSION)):
        load_checkpoint(path)


def test_parameter_hash_tracks_changes():
    a = tiny_unet(10)
    b = tiny_unet(10)
    assert parameter_hash(a) == parameter_hash(b)
    b.parameters()["stem.b"].data += 1.0
    assert parameter_hash(a) != parameter_hash(b)


def test_checkpoint_magic_constant():
    assert CHECKPOINT_MAGIC == b"DADT"


# ---------------------------------------------------------------------------
# reports


def test_report_empty_is_header_only(tmp_path):
    rep = Report(columns=("model", "attack", "metric", "value"))
    write_report(rep, tmp_path / "empty")
    assert (tmp_path / "empty.csv").read_text() == "model,attack,metric,value\n"


def test_report_exact_row(tmp_path):
    rep = Report(columns=("model", "attack", "budget", "metric", "clean", "adv", "delta"))
    rep.add("ldm", "semantic_latent", "16/255", "fid", 12.5, 80.25, 67.75)
    write_report(rep, tmp_path / "one")
    lines = (tmp_path / "one.csv").read_text().splitlines()
    assert lines[1] == "ldm,semantic_latent,16/255,fid,12.5,80.25,67.75"


def test_report_csv_json_cells_identical(tmp_path):
    rep = Report(columns=("a", "b"))
    rep.add("x", 1.0 / 3.0)
    rep.add("y", 2e-17)
    write_report(rep, tmp_path / "dual")
    csv_rows = [line.split(",") for line in (tmp_path / "dual.csv").read_text().splitlines()[1:]]
    json_rows = json.loads((tmp_path / "dual.json").read_text())["rows"]
    assert csv_rows == json_rows


def test_report_rejects_ragged_rows():
    rep = Report(columns=("a", "b"))
    with pytest.raises(ConfigError):
        rep.add("only-one")
