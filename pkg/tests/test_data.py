import hashlib
import io
import json
import zipfile

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qvit.data import (FetchError, FetchRequiredError, FormatError, IntegrityError, SchemaError, Split,
                       UnknownDatasetError, archive_path, fetch, load_dataset, load_manifest, manifest_entry,
                       minibatches, normalize, parse_npz, read_npy, read_pins, shuffle_order, write_npy)
from conftest import write_archive


def test_manifest():
    manifest = load_manifest()
    assert len(manifest) == 12
    retina = manifest_entry("retinamnist")
    assert retina["num_classes"] == 5 and retina["channels"] == 3
    assert retina["splits"] == {"train": 1080, "val": 120, "test": 400}
    assert manifest_entry("breastmnist")["num_classes"] == 2
    with pytest.raises(UnknownDatasetError):
        manifest_entry("cifar10")


@pytest.mark.parametrize("arr", [np.arange(24, dtype=np.uint8).reshape(2, 3, 4), np.array([[1], [2]], dtype="<i8"),
                                 np.linspace(0, 1, 5), np.zeros((0, 28, 28), dtype=np.uint8)])
def test_npy_round_trip(arr):
    out = read_npy(write_npy(arr))
    assert out.dtype == arr.dtype
    np.testing.assert_array_equal(out, arr)
    buf = io.BytesIO()
    np.save(buf, arr)
    np.testing.assert_array_equal(read_npy(buf.getvalue()), arr)


def test_npy_rejects_bad_input():
    blob = write_npy(np.arange(6, dtype=np.uint8))
    with pytest.raises(FormatError):
        read_npy(b"PK" + blob[2:])
    with pytest.raises(FormatError):
        read_npy(blob[:6] + bytes([2, 0]) + blob[8:])
    with pytest.raises(FormatError):
        read_npy(blob[:-1])
    buf = io.BytesIO()
    np.save(buf, np.asfortranarray(np.ones((2, 3))))
    with pytest.raises(FormatError):
        read_npy(buf.getvalue())
    buf = io.BytesIO()
    np.save(buf, np.array(["a", "b"]))
    with pytest.raises(FormatError):
        read_npy(buf.getvalue())


def test_parse_archive(tmp_path):
    ds = parse_npz(write_archive(tmp_path / "a.npz", n=(30, 6, 9), channels=3, classes=4), "a", 4)
    assert ds.channels == 3 and ds.num_classes == 4
    assert ds["train"].images.shape == (30, 28, 28, 3)
    assert ds["train"].images.dtype == np.uint8
    assert ds["val"].labels.shape == (6,) and ds["val"].labels.dtype == np.int64
    gray = parse_npz(write_archive(tmp_path / "g.npz", labels_2d=False), "g", 3)
    assert gray["test"].images.shape == (12, 28, 28, 1)


def _archive(path, **arrays):
    with zipfile.ZipFile(path, "w") as zf:
        for name, arr in arrays.items():
            zf.writestr(name + ".npy", write_npy(arr))
    return path


def test_schema_errors(tmp_path):
    imgs = np.zeros((4, 28, 28), np.uint8)
    good = {f"{s}_images": imgs for s in ("train", "val", "test")}
    good.update({f"{s}_labels": np.zeros((4, 1), np.uint8) for s in ("train", "val", "test")})
    parse_npz(_archive(tmp_path / "ok.npz", **good), "ok", 2)
    missing = dict(good)
    del missing["val_labels"]
    with pytest.raises(SchemaError, match="val_labels"):
        parse_npz(_archive(tmp_path / "m.npz", **missing), "m", 2)
    multi = dict(good, train_labels=np.zeros((4, 14), np.uint8))
    with pytest.raises(SchemaError, match="multi-label"):
        parse_npz(_archive(tmp_path / "ml.npz", **multi), "ml", 2)
    short = dict(good, test_labels=np.zeros((3, 1), np.uint8))
    with pytest.raises(SchemaError):
        parse_npz(_archive(tmp_path / "s.npz", **short), "s", 2)
    oob = dict(good, train_labels=np.full((4, 1), 7, np.uint8))
    with pytest.raises(SchemaError):
        parse_npz(_archive(tmp_path / "o.npz", **oob), "o", 2)


def test_normalize():
    x = normalize(np.array([0, 51, 255], dtype=np.uint8))
    assert x.dtype == np.float64
    np.testing.assert_array_equal(x, [0.0, 0.2, 1.0])


def test_minibatches():
    split = Split(np.zeros((1080, 28, 28, 3), np.uint8), np.arange(1080) % 5)
    batches = list(minibatches(split, 32, seed=0, epoch=0))
    assert len(batches) == 34
    assert len(batches[-1][1]) == 1080 - 33 * 32 == 24
    seen = np.concatenate([b[1] for b in batches])
    assert sorted(seen.tolist()) == sorted(split.labels.tolist())
    again = np.concatenate([b[1] for b in minibatches(split, 32, seed=0, epoch=0)])
    np.testing.assert_array_equal(seen, again)
    other = np.concatenate([b[1] for b in minibatches(split, 32, seed=0, epoch=1)])
    assert not np.array_equal(seen, other)
    with pytest.raises(ValueError):
        next(minibatches(split, 0, 0, 0))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2 ** 32), st.integers(0, 99))
def test_shuffle_is_permutation(count, seed, epoch):
    order = shuffle_order(count, seed, epoch)
    assert sorted(order.tolist()) == list(range(count))


class FakeResponse(io.BytesIO):
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Opener:
    def __init__(self, payload, failures=0):
        self.payload, self.failures, self.calls = payload, failures, 0

    def __call__(self, url, timeout):
        self.calls += 1
        if self.calls <= self.failures:
            raise OSError("temporary failure in name resolution")
        return FakeResponse(self.payload)


def test_fetch_verifies_and_pins(data_dir, tmp_path, monkeypatch):
    payload = write_archive(tmp_path / "src.npz").read_bytes()
    md5 = hashlib.md5(payload).hexdigest()
    monkeypatch.setattr("qvit.data.load_manifest",
                        lambda: {"toy": {"id": "toy", "url": "https://example.invalid/toy.npz", "md5": md5,
                                         "sha256": None, "num_classes": 3, "channels": 1}})
    opener = Opener(payload, failures=1)
    path = fetch("toy", opener=opener, backoff=0)
    assert opener.calls == 2 and path == archive_path("toy")
    assert read_pins()["toy"] == hashlib.sha256(payload).hexdigest()
    assert not path.with_suffix(".part").exists()
    # cached: no network
    assert fetch("toy", opener=Opener(b"")) == path
    assert load_dataset("toy")["train"].images.shape == (40, 28, 28, 1)
    # a pinned archive that changes on disk is rejected
    mid = len(payload) // 2
    path.write_bytes(payload[:mid] + bytes([payload[mid] ^ 0xFF]) + payload[mid + 1:])
    with pytest.raises(IntegrityError):
        fetch("toy", opener=Opener(payload))


def test_fetch_errors(data_dir, monkeypatch):
    monkeypatch.setattr("qvit.data.load_manifest",
                        lambda: {"toy": {"id": "toy", "url": "https://example.invalid/toy.npz",
                                         "md5": hashlib.md5(b"right").hexdigest(), "sha256": None,
                                         "num_classes": 3, "channels": 1}})
    with pytest.raises(IntegrityError):
        fetch("toy", opener=Opener(b"wrong"), backoff=0)
    assert not archive_path("toy").exists() and not archive_path("toy").with_suffix(".part").exists()
    with pytest.raises(FetchError) as exc:
        fetch("toy", opener=Opener(b"right", failures=5), retries=3, backoff=0)
    assert exc.value.attempts == 3
    with pytest.raises(FetchRequiredError, match="qvit fetch toy"):
        load_dataset("toy")
    with pytest.raises(UnknownDatasetError):
        fetch("nope", opener=Opener(b""))
