import numpy as np
import pytest

from somn.epoch_store import SubjectEpochs, read_epoch_store, write_epoch_store
from somn.errors import DataError


def _subject(sid, t=6, c=2, s=10, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 5, size=t).astype(np.uint8)
    labels[-1] = 255
    return SubjectEpochs(
        subject_id=sid,
        epochs=rng.standard_normal((t, c, s)).astype(np.float32),
        labels=labels,
        events=(rng.random((t, 7)) < 0.2).astype(np.uint8),
        clinical=np.array([61.0, 1.0, np.nan], dtype=np.float32),
    )


def test_round_trip_bit_exact(tmp_path):
    subjects = [_subject("s1", seed=1), _subject("s2", t=4, seed=2)]
    path = str(tmp_path / "cohort.epst")
    write_epoch_store(path, subjects)
    loaded = read_epoch_store(path)
    assert [s.subject_id for s in loaded] == ["s1", "s2"]
    for a, b in zip(subjects, loaded):
        assert np.array_equal(a.epochs.view(np.uint8), b.epochs.view(np.uint8))
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.events, b.events)
        assert np.array_equal(a.clinical.view(np.uint8), b.clinical.view(np.uint8))

    # writing the loaded copy reproduces the file byte for byte
    path2 = str(tmp_path / "copy.epst")
    write_epoch_store(path2, loaded)
    assert open(path, "rb").read() == open(path2, "rb").read()


def test_empty_store(tmp_path):
    path = str(tmp_path / "empty.epst")
    write_epoch_store(path, [])
    assert read_epoch_store(path) == []


def test_corrupted_byte_names_subject(tmp_path):
    subjects = [_subject("alpha", seed=3), _subject("beta", seed=4)]
    path = str(tmp_path / "c.epst")
    write_epoch_store(path, subjects)
    blob = bytearray(open(path, "rb").read())
    blob[-20] ^= 0xFF  # inside beta's epoch tensor
    bad = str(tmp_path / "bad.epst")
    open(bad, "wb").write(bytes(blob))
    with pytest.raises(DataError, match="beta"):
        read_epoch_store(bad)


def test_bad_magic_and_version(tmp_path):
    path = str(tmp_path / "x.epst")
    open(path, "wb").write(b"NOPE" + b"\x00" * 8)
    with pytest.raises(DataError, match="magic"):
        read_epoch_store(path)
    open(path, "wb").write(b"EPST" + (2).to_bytes(4, "little") + (0).to_bytes(4, "little"))
    with pytest.raises(DataError, match="version"):
        read_epoch_store(path)


def test_truncated_block(tmp_path):
    path = str(tmp_path / "t.epst")
    write_epoch_store(path, [_subject("s1")])
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-9])
    with pytest.raises(DataError, match="truncated"):
        read_epoch_store(path)


def test_mask_derived_from_labels():
    s = _subject("s1")
    assert s.mask.tolist() == (s.labels != 255).tolist()
    assert not s.mask[-1]


def test_shape_validation():
    with pytest.raises(DataError, match="labels"):
        SubjectEpochs("x", np.zeros((3, 2, 4), np.float32), np.zeros(2, np.uint8),
                      np.zeros((3, 7), np.uint8), np.zeros(3, np.float32))
    with pytest.raises(DataError, match="0..4"):
        SubjectEpochs("x", np.zeros((1, 2, 4), np.float32),
                      np.array([7], np.uint8),
                      np.zeros((1, 7), np.uint8), np.zeros(3, np.float32))
