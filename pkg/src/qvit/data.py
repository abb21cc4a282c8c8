"""MedMNIST-format datasets: fetch with integrity checks, an NPZ/NPY reader,
and seeded minibatching.

Archives are cached under ``$QVIT_DATA_DIR`` (default ``~/.cache/qvit``).
The upstream host publishes md5 digests only; the sha256 of each archive is
pinned in ``pins.json`` next to the cache on its first verified download and
enforced from then on.
"""

from __future__ import annotations

import ast
import hashlib
import json
import logging
import os
import struct
import time
import urllib.request
import zipfile
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .rng import PCG32

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DATA_ENV = "QVIT_DATA_DIR"
NPY_MAGIC = b"\x93NUMPY"
_DTYPES = {"|u1", "<u1", "|i1", "<i1", "|b1", "<u2", "<i2", "<u4", "<i4", "<u8", "<i8", "<f4", "<f8"}


class DataError(Exception):
    pass


class UnknownDatasetError(DataError, KeyError):
    def __str__(self):
        return self.args[0]


class FetchError(DataError):
    def __init__(self, msg, attempts=0):
        super().__init__(msg)
        self.attempts = attempts


class FetchRequiredError(DataError):
    pass


class IntegrityError(DataError):
    pass


class FormatError(DataError):
    pass


class SchemaError(DataError):
    pass


# ---------------------------------------------------------------------------
# manifest and cache


def load_manifest() -> dict[str, dict]:
    doc = json.loads(resources.files("qvit").joinpath("manifest.json").read_text())
    return {entry["id"]: entry for entry in doc["datasets"]}


def manifest_entry(dataset_id: str) -> dict:
    manifest = load_manifest()
    if dataset_id not in manifest:
        raise UnknownDatasetError(f"unknown dataset {dataset_id!r}; known: {', '.join(sorted(manifest))}")
    return manifest[dataset_id]


def cache_dir(override=None) -> Path:
    root = Path(override or os.environ.get(DATA_ENV) or Path.home() / ".cache" / "qvit")
    root.mkdir(parents=True, exist_ok=True)
    return root


def archive_path(dataset_id: str, root=None) -> Path:
    return cache_dir(root) / f"{dataset_id}.npz"


def _pins_path(root) -> Path:
    return cache_dir(root) / "pins.json"


def read_pins(root=None) -> dict:
    path = _pins_path(root)
    return json.loads(path.read_text()) if path.exists() else {}


def _write_pin(dataset_id, digest, root):
    pins = read_pins(root)
    pins[dataset_id] = digest
    tmp = _pins_path(root).with_suffix(".tmp")
    tmp.write_text(json.dumps(pins, indent=2, sort_keys=True))
    tmp.replace(_pins_path(root))


def _digests(path: Path) -> tuple[str, str]:
    sha, md5 = hashlib.sha256(), hashlib.md5()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            sha.update(chunk)
            md5.update(chunk)
    return sha.hexdigest(), md5.hexdigest()


def verify_archive(path: Path, sha256: str | None = None, md5: str | None = None) -> str:
    """Check the archive against whichever digests are known; returns its sha256."""
    got_sha, got_md5 = _digests(path)
    if sha256 and got_sha != sha256:
        raise IntegrityError(f"{path.name}: sha256 {got_sha} does not match expected {sha256}")
    if md5 and got_md5 != md5:
        raise IntegrityError(f"{path.name}: md5 {got_md5} does not match expected {md5}")
    return got_sha


def is_cached(dataset_id: str, root=None) -> bool:
    return archive_path(dataset_id, root).exists()


def fetch(dataset_id: str, url: str | None = None, sha256: str | None = None, *, root=None,
          retries: int = 3, backoff: float = 1.0, opener=urllib.request.urlopen) -> Path:
    """Download (or reuse) the archive for ``dataset_id`` and verify it."""
    entry = manifest_entry(dataset_id)
    url = url or entry["url"]
    sha256 = sha256 or entry.get("sha256") or read_pins(root).get(dataset_id)
    md5 = entry.get("md5")
    dest = archive_path(dataset_id, root)
    if dest.exists():
        digest = verify_archive(dest, sha256, md5)
        if not sha256:
            _write_pin(dataset_id, digest, root)
        return dest

    tmp = dest.with_suffix(".part")
    last = None
    for attempt in range(1, retries + 1):
        try:
            with opener(url, timeout=60) as resp, open(tmp, "wb") as fh:
                for chunk in iter(lambda: resp.read(1 << 20), b""):
                    fh.write(chunk)
            break
        except OSError as exc:
            last = exc
            log.warning("fetch %s attempt %d/%d failed: %s", dataset_id, attempt, retries, exc)
            if attempt < retries:
                time.sleep(backoff * attempt)
    else:
        tmp.unlink(missing_ok=True)
        raise FetchError(f"could not fetch {dataset_id} from {url} after {retries} attempts: {last}", retries)
    try:
        digest = verify_archive(tmp, sha256, md5)
    except IntegrityError:
        tmp.unlink(missing_ok=True)
        raise
    tmp.replace(dest)
    if not sha256:
        _write_pin(dataset_id, digest, root)
    return dest


# ---------------------------------------------------------------------------
# NPY / NPZ


def read_npy(blob: bytes) -> np.ndarray:
    if blob[:6] != NPY_MAGIC:
        raise FormatError("not an NPY file")
    major, minor = blob[6], blob[7]
    if (major, minor) != (1, 0):
        raise FormatError(f"unsupported NPY version {major}.{minor}")
    (hlen,) = struct.unpack("<H", blob[8:10])
    try:
        header = ast.literal_eval(blob[10:10 + hlen].decode("latin1"))
        descr, fortran, shape = header["descr"], header["fortran_order"], tuple(header["shape"])
    except (ValueError, SyntaxError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed NPY header: {exc}") from exc
    if fortran:
        raise FormatError("fortran-ordered arrays are not supported")
    if descr not in _DTYPES:
        raise FormatError(f"unsupported dtype {descr!r}")
    dtype = np.dtype(descr)
    count = int(np.prod(shape)) if shape else 1
    offset = 10 + hlen
    if len(blob) - offset != count * dtype.itemsize:
        raise FormatError(f"payload holds {len(blob) - offset} bytes, header implies {count * dtype.itemsize}")
    return np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape).copy()


def write_npy(arr: np.ndarray) -> bytes:
    """Minimal NPY v1.0 writer, used for fixtures."""
    arr = np.ascontiguousarray(arr)
    descr = arr.dtype.str
    header = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {tuple(arr.shape)!r}, }}"
    pad = 64 - (10 + len(header) + 1) % 64
    header = (header + " " * pad + "\n").encode("latin1")
    return NPY_MAGIC + bytes([1, 0]) + struct.pack("<H", len(header)) + header + arr.tobytes()


@dataclass(frozen=True)
class Split:
    images: np.ndarray  # (count, 28, 28, C) uint8
    labels: np.ndarray  # (count,) int64

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class Dataset:
    id: str
    splits: dict
    num_classes: int
    channels: int

    def __getitem__(self, split: str) -> Split:
        return self.splits[split]


def parse_npz(path, dataset_id: str | None = None, num_classes: int | None = None) -> Dataset:
    path = Path(path)
    dataset_id = dataset_id or path.stem
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        names = set(zf.namelist())
        for split in SPLITS:
            for part in ("images", "labels"):
                member = f"{split}_{part}"
                name = member + ".npy" if member + ".npy" in names else member
                if name not in names:
                    raise SchemaError(f"{path.name} has no member {member}")
                arrays[member] = read_npy(zf.read(name))
    splits = {}
    for split in SPLITS:
        images, labels = arrays[f"{split}_images"], arrays[f"{split}_labels"]
        if images.ndim == 3:
            images = images[..., None]
        if images.ndim != 4:
            raise SchemaError(f"{split}_images has shape {images.shape}")
        if labels.ndim == 2 and labels.shape[1] == 1:
            labels = labels[:, 0]
        if labels.ndim != 1:
            raise SchemaError(f"{split}_labels has shape {labels.shape}; multi-label targets are not supported")
        if len(labels) != len(images):
            raise SchemaError(f"{split}: {len(images)} images but {len(labels)} labels")
        splits[split] = Split(images, labels.astype(np.int64))
    if num_classes is None:
        num_classes = int(max(s.labels.max(initial=-1) for s in splits.values())) + 1
    for split, s in splits.items():
        if len(s) and (s.labels.min() < 0 or s.labels.max() >= num_classes):
            raise SchemaError(f"{split} labels outside [0, {num_classes})")
    return Dataset(dataset_id, splits, num_classes, splits["train"].images.shape[-1])


def load_dataset(dataset_id: str, root=None) -> Dataset:
    entry = manifest_entry(dataset_id)
    path = archive_path(dataset_id, root)
    if not path.exists():
        raise FetchRequiredError(f"{dataset_id} is not cached under {cache_dir(root)}; run `qvit fetch {dataset_id}` first")
    return parse_npz(path, dataset_id, entry["num_classes"])


# ---------------------------------------------------------------------------
# batching


def normalize(images: np.ndarray) -> np.ndarray:
    return np.asarray(images, dtype=np.float64) / 255.0


def shuffle_order(count: int, seed: int, epoch: int) -> np.ndarray:
    return PCG32(seed, 1 + epoch).permutation(count)


def minibatches(split: Split, batch_size: int, seed: int, epoch: int):
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if len(split) == 0:
        raise DataError("cannot batch an empty split")
    order = shuffle_order(len(split), seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield normalize(split.images[idx]), split.labels[idx]
