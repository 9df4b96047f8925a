import hashlib

import h5py
import numpy as np
import pytest

from sat2rad.data import (
    MODALITY_ORDER,
    SyntheticStormSpec,
    denormalize,
    generate_synthetic,
    load_archive,
    load_tensor,
    normalize,
    save_tensor,
    split,
    threshold_pixel_counts,
    to_tensors,
    write_fixture,
)
from sat2rad.errors import (
    ArchiveError,
    CorruptRecordError,
    MissingEventError,
    MissingModalityError,
    ValidationError,
)
from sat2rad.metrics import VIL_THRESHOLDS


def spec32(seed=0, **kw):
    return SyntheticStormSpec(seed=seed, height=32, width=32, **kw)


# -- generation ------------------------------------------------------------------


def test_generation_deterministic():
    a = generate_synthetic(spec32(), 4)
    b = generate_synthetic(spec32(), 4)
    for ra, rb in zip(a, b):
        assert ra.event_id == rb.event_id
        np.testing.assert_array_equal(ra.stack, rb.stack)
        np.testing.assert_array_equal(ra.target, rb.target)


def test_generation_raw_range_and_shapes():
    records = generate_synthetic(spec32(seed=3), 6)
    for rec in records:
        assert rec.stack.shape == (4, 32, 32)
        assert rec.target.shape == (32, 32)
        assert rec.stack.min() >= 0.0 and rec.stack.max() <= 255.0
        assert rec.target.min() >= 0.0 and rec.target.max() <= 255.0
        assert np.isfinite(rec.stack).all() and np.isfinite(rec.target).all()


def test_generation_threshold_coverage():
    records = generate_synthetic(spec32(seed=11), 8)
    counts = threshold_pixel_counts(records, VIL_THRESHOLDS)
    values = [counts[t] for t in VIL_THRESHOLDS]
    assert values[-1] > 0  # pixels above 219 exist in every batch of 8
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_generation_validation():
    with pytest.raises(ValidationError):
        generate_synthetic(spec32(), 0)
    with pytest.raises(ValidationError):
        SyntheticStormSpec(amp_range=(100.0, 300.0))
    with pytest.raises(ValidationError):
        SyntheticStormSpec(min_cells=5, max_cells=2)


def test_lightning_sparse_and_cored():
    records = generate_synthetic(spec32(seed=5), 8)
    light = np.stack([r.stack[3] for r in records])
    vil = np.stack([r.target for r in records])
    assert (light > 0).mean() < 0.2  # sparse
    assert light[vil < 140.0].max() == 0.0  # strikes only near cores


# -- archive ---------------------------------------------------------------------


def test_archive_roundtrip_bitwise(tmp_path):
    records = generate_synthetic(spec32(seed=2), 3)
    path = tmp_path / "events.h5"
    write_fixture(records, path)
    loaded = load_archive(path)
    assert [r.event_id for r in loaded] == [r.event_id for r in records]
    for ra, rb in zip(records, loaded):
        np.testing.assert_array_equal(ra.stack, rb.stack)
        np.testing.assert_array_equal(ra.target, rb.target)
        assert ra.timestamp == rb.timestamp


def test_archive_recreation_bitwise(tmp_path):
    records = generate_synthetic(spec32(seed=2), 3)
    p1, p2 = tmp_path / "a.h5", tmp_path / "b.h5"
    write_fixture(records, p1)
    write_fixture(records, p2)
    assert hashlib.sha256(p1.read_bytes()).digest() == hashlib.sha256(p2.read_bytes()).digest()


def test_archive_missing_file():
    with pytest.raises(ArchiveError):
        load_archive("/nonexistent/events.h5")


def test_archive_missing_event(tmp_path):
    path = tmp_path / "events.h5"
    write_fixture(generate_synthetic(spec32(), 2), path)
    with pytest.raises(MissingEventError, match="s0-e0099"):
        load_archive(path, ["s0-e0099"])


def test_archive_missing_modality(tmp_path):
    path = tmp_path / "events.h5"
    write_fixture(generate_synthetic(spec32(), 2), path)
    with h5py.File(path, "r+") as f:
        del f["s0-e0001"]["ir107"]
    with pytest.raises(MissingModalityError, match="ir107"):
        load_archive(path)


def test_archive_corrupt_record(tmp_path):
    path = tmp_path / "events.h5"
    write_fixture(generate_synthetic(spec32(), 1), path)
    with h5py.File(path, "r+") as f:
        g = f["s0-e0000"]
        data = np.asarray(g["vis"])
        data[0, 0] = np.nan
        del g["vis"]
        g.create_dataset("vis", data=data)
    with pytest.raises(CorruptRecordError, match="s0-e0000"):
        load_archive(path)


def test_archive_resamples_to_target_grid(tmp_path):
    path = tmp_path / "events.h5"
    rec = generate_synthetic(spec32(), 1)[0]
    write_fixture([rec], path)
    with h5py.File(path, "r+") as f:
        g = f[rec.event_id]
        coarse = np.asarray(g["vis"])[::2, ::2]
        del g["vis"]
        g.create_dataset("vis", data=coarse.astype("<f4"))
    loaded = load_archive(path)[0]
    assert loaded.stack.shape == (4, 32, 32)  # resampled back to the vil grid


def test_write_refuses_normalized(tmp_path):
    rec = normalize(generate_synthetic(spec32(), 1)[0])
    with pytest.raises(ValidationError):
        write_fixture([rec], tmp_path / "x.h5")


# -- normalization ------------------------------------------------------------------


def test_normalize_endpoints():
    rec = generate_synthetic(spec32(seed=7), 1)[0]
    rec.target[0, 0] = 255.0
    rec.target[0, 1] = 0.0
    norm = normalize(rec)
    assert norm.target[0, 0] == pytest.approx(1.0)
    assert norm.target[0, 1] == pytest.approx(0.0)
    assert norm.is_normalized
    for k in range(4):
        assert norm.stack[k].min() >= 0.0 and norm.stack[k].max() <= 1.0


def test_threshold_masks_commute_with_normalization():
    rec = generate_synthetic(spec32(seed=1), 1)[0]
    norm = normalize(rec)
    raw_mask = rec.target >= 219.0
    norm_mask = norm.target >= 219.0 / 255.0
    np.testing.assert_array_equal(raw_mask, norm_mask)


def test_normalize_roundtrip_identity():
    for rec in generate_synthetic(spec32(seed=9), 3):
        back = denormalize(normalize(rec))
        assert np.abs(back.stack - rec.stack).max() <= 1e-6
        assert np.abs(back.target - rec.target).max() <= 1e-6
        assert not back.is_normalized


def test_normalize_twice_rejected():
    rec = generate_synthetic(spec32(), 1)[0]
    with pytest.raises(ValidationError):
        normalize(normalize(rec))
    with pytest.raises(ValidationError):
        denormalize(rec)


def test_constant_channel_roundtrip(tmp_path):
    rec = generate_synthetic(spec32(), 1)[0]
    rec.stack[3] = 0.0  # no lightning anywhere
    back = denormalize(normalize(rec))
    np.testing.assert_allclose(back.stack[3], 0.0, atol=1e-12)


def test_to_tensors_channel_handling(records16):
    x, y = to_tensors(records16)
    assert x.shape == (8, 4, 16, 16) and y.shape == (8, 1, 16, 16)
    x3, _ = to_tensors(records16, use_vis=False)
    assert x3.shape == (8, 3, 16, 16)
    np.testing.assert_array_equal(x3.numpy(), x[:, 1:].numpy())


# -- split ---------------------------------------------------------------------------


def test_split_sizes():
    records = generate_synthetic(spec32(), 10)
    train, val, test = split(records, (0.8, 0.1, 0.1), seed=0)
    assert (len(train), len(val), len(test)) == (8, 1, 1)


def test_split_deterministic():
    records = generate_synthetic(spec32(), 10)
    a = split(records, (0.5, 0.25, 0.25), seed=3)
    b = split(records, (0.5, 0.25, 0.25), seed=3)
    for pa, pb in zip(a, b):
        assert [r.event_id for r in pa] == [r.event_id for r in pb]


def test_split_partition_properties():
    records = generate_synthetic(spec32(), 11)
    parts = split(records, (0.6, 0.2, 0.2), seed=5)
    ids = [r.event_id for part in parts for r in part]
    assert sorted(ids) == sorted(r.event_id for r in records)
    assert len(set(ids)) == len(ids)


def test_split_bad_fractions():
    records = generate_synthetic(spec32(), 4)
    with pytest.raises(ValidationError):
        split(records, (0.5, 0.2), seed=0)
    with pytest.raises(ValidationError):
        split(records, (0.9, 0.2, -0.1), seed=0)


# -- tensor files ----------------------------------------------------------------------


def test_tensor_roundtrip_bitwise(tmp_path, rng):
    arr = rng.standard_normal((1, 16, 16)).astype(np.float32)
    path = tmp_path / "pred.st"
    save_tensor(path, arr)
    np.testing.assert_array_equal(load_tensor(path), arr)
    blob = path.read_bytes()
    assert len(blob[:16]) == 16 and blob[:16].startswith(b"SAT2RADTENSOR")


def test_tensor_float64_and_bigendian(tmp_path, rng):
    arr = rng.standard_normal((4, 4)).astype(">f8")
    path = tmp_path / "t.st"
    save_tensor(path, arr)
    loaded = load_tensor(path)
    assert loaded.dtype == np.float64
    np.testing.assert_array_equal(loaded, arr.astype("<f8"))


def test_tensor_corrupt_rejected(tmp_path, rng):
    path = tmp_path / "t.st"
    save_tensor(path, rng.standard_normal((4, 4)).astype(np.float32))
    blob = path.read_bytes()
    (tmp_path / "bad_magic.st").write_bytes(b"X" * 16 + blob[16:])
    with pytest.raises(CorruptRecordError):
        load_tensor(tmp_path / "bad_magic.st")
    (tmp_path / "truncated.st").write_bytes(blob[:-8])
    with pytest.raises(CorruptRecordError):
        load_tensor(tmp_path / "truncated.st")


def test_tensor_integer_rejected(tmp_path):
    with pytest.raises(ValidationError):
        save_tensor(tmp_path / "t.st", np.arange(4))
