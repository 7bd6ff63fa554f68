import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polspoof import data
from polspoof.errors import DatasetError, ScheduleError


def test_dataset_validation():
    with pytest.raises(DatasetError):
        data.Dataset(np.zeros(3), np.zeros(3))
    with pytest.raises(DatasetError):
        data.Dataset(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(DatasetError):
        data.Dataset(np.zeros((2, 2)), np.array([0.5, 1.0]))
    with pytest.raises(DatasetError):
        data.Dataset(np.zeros((2, 2)), np.array([-1, 0]))


def test_dataset_copies_and_freezes():
    X = np.zeros((2, 2))
    D = data.Dataset(X, [0, 1])
    X[0, 0] = 5.0
    assert D.features[0, 0] == 0.0
    with pytest.raises(ValueError):
        D.features[0, 0] = 1.0


def test_content_id_is_stable_and_sensitive():
    D = data.make_blobs(50, seed=1)
    assert D.id == data.make_blobs(50, seed=1).id
    assert D.id != data.make_blobs(50, seed=2).id
    X = D.features.copy()
    X[3, 1] = np.nextafter(X[3, 1], np.inf)
    assert data.Dataset(X, D.labels).id != D.id


def test_empty_digest_matches_sha256():
    import hashlib
    assert hashlib.sha256(b"").hexdigest() == data.EMPTY_SHA256


def test_generators_balanced():
    D = data.make_blobs(300, dim=4, classes=3, seed=0)
    assert np.bincount(D.labels).tolist() == [100, 100, 100]
    M = data.make_moons(200, seed=0)
    assert M.dim == 2 and M.n_classes == 2


def test_get_batches_disjoint_and_seeded():
    D = data.make_blobs(100, seed=0)
    a = data.get_batches(D, 6, 16, seed=[3, 0])
    assert len(a) == 6 and all(len(b) == 16 for b in a)
    flat = np.concatenate(a)
    assert len(set(flat.tolist())) == flat.size
    b = data.get_batches(D, 6, 16, seed=[3, 0])
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = data.get_batches(D, 6, 16, seed=[3, 1])
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_get_batches_errors():
    D = data.make_blobs(10, seed=0)
    with pytest.raises(ScheduleError):
        data.get_batches(D, 3, 4, seed=0)
    with pytest.raises(ScheduleError):
        data.get_batches(D, 1, 0, seed=0)


def test_signature_roundtrip_and_tamper():
    D = data.make_blobs(40, seed=0)
    idx = np.array([3, 7, 11])
    h = data.sign_batch(D, idx)
    assert len(h) == 32 and data.verify_signature(D, idx, h)
    assert not data.verify_signature(D, np.array([3, 7, 12]), h)
    assert not data.verify_signature(D, np.array([3, 7, 400]), h)
    y = D.labels.copy()
    y[7] = 1 - y[7]
    assert not data.verify_signature(data.Dataset(D.features, y), idx, h)


@settings(max_examples=50, deadline=None)
@given(frac=st.floats(0.1, 0.9), seed=st.integers(0, 1000))
def test_split_disjoint_property(frac, seed):
    D = data.make_blobs(120, dim=2, classes=3, seed=0)
    a, b = data.split_disjoint(D, frac, seed)
    assert len(a) + len(b) == len(D)
    rows = {tuple(r) for r in D.features}
    ra = {tuple(r) for r in a.features}
    rb = {tuple(r) for r in b.features}
    assert ra.isdisjoint(rb) and ra | rb == rows
    for c in range(3):
        assert abs(np.sum(a.labels == c) - frac * 40) <= 1


def test_split_rejects_bad_fraction():
    with pytest.raises(DatasetError):
        data.split_disjoint(data.make_blobs(10, seed=0), 1.0)


def test_pold_roundtrip(tmp_path):
    D = data.make_blobs(33, dim=5, seed=2)
    p = tmp_path / "d.pold"
    n = data.save_pold(D, p)
    assert n == p.stat().st_size
    E = data.load_pold(p)
    assert E == D and E.id == D.id


def test_pold_corruption(tmp_path):
    D = data.make_blobs(10, seed=0)
    p = tmp_path / "d.pold"
    data.save_pold(D, p)
    raw = p.read_bytes()
    for bad in (raw[:10], b"XXXX" + raw[4:], raw[:-1], raw[:4] + b"\x09\x00" + raw[6:]):
        p.write_bytes(bad)
        with pytest.raises(DatasetError):
            data.load_pold(p)


def test_load_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,label,b\n1.0,0,2.0\n3.0,1,4.0\n")
    D = data.load_dataset(p)
    assert D.features.tolist() == [[1.0, 2.0], [3.0, 4.0]]
    assert D.labels.tolist() == [0, 1]
    for text in ("", "a,b\n1,2\n", "a,label\n", "a,label\nx,0\n"):
        p.write_text(text)
        with pytest.raises(DatasetError):
            data.load_csv(p)
