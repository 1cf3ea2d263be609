"""Binary persistence: environment datasets, checkpoints and CKB stores.

Dataset directory layout::

    manifest.json   structured text, read and version-checked first
    samples.bin     file header + fixed-size records

``samples.bin`` starts with a 16-byte header ``b"CKBD"``, version,
record size and record count (little-endian uint32).  Each record holds

    label map header  b"LMAP", h, w, Z            (4s + 3 x uint32)
    labels            h * w uint8, row-major
    index, d_r        2 x uint32
    bs_pos, cu_pos    6 x float32
    j_po              Z x float32
    descriptor        G * G * (Z + 1) x float32
    H                 K * M complex as interleaved (re, im) float32, row-major
    crc32             uint32 over every preceding byte of the record

Checkpoints are a named-tensor table::

    b"CKBP", version (uint32), dtype tag (2 bytes: b"f4" or b"f8"),
    meta length (uint32) + UTF-8 JSON, tensor count (uint32), then per tensor
    name length (uint16), name, rank (uint8), dims (rank x uint32), values.

Optimizer moments are stored as tensors named ``optim.<key>``.
"""

import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (ChecksumError, ConfigError, DataError, DatasetVersionError, SchemaError,
                     TruncatedRecordError)
from .tensorkit import ParameterSet

FORMAT_VERSION = 1
DATA_MAGIC = b"CKBD"
LABEL_MAGIC = b"LMAP"
CKPT_MAGIC = b"CKBP"
STORE_MAGIC = b"CKBS"
MANIFEST = "manifest.json"
SAMPLES = "samples.bin"

_FILE_HEADER = struct.Struct("<4sIII")
_LABEL_HEADER = struct.Struct("<4sIII")


@dataclass
class EnvSample:
    index: int
    bs_pos: np.ndarray
    cu_pos: np.ndarray
    labels: np.ndarray
    j_po: np.ndarray
    descriptor: np.ndarray
    H: np.ndarray
    d_r: int

    def __post_init__(self):
        self.bs_pos = np.asarray(self.bs_pos, dtype="<f4")
        self.cu_pos = np.asarray(self.cu_pos, dtype="<f4")
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.j_po = np.asarray(self.j_po, dtype="<f4")
        self.descriptor = np.asarray(self.descriptor, dtype="<f4")
        self.H = np.asarray(self.H, dtype=np.complex64)

    def equals(self, other):
        return (self.index == other.index and self.d_r == other.d_r
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("bs_pos", "cu_pos", "labels", "j_po", "descriptor", "H")))


@dataclass
class DatasetManifest:
    sample_count: int
    num_classes: int = 28
    tx_antennas: int = 16
    rx_antennas: int = 16
    resolution: tuple = (256, 256)
    grid: int = 8
    c_h: float = 1.0
    seed: int = 42
    version: int = FORMAT_VERSION
    extra: dict = None

    def __post_init__(self):
        if self.sample_count < 1:
            raise ConfigError("a dataset needs at least one sample")
        self.resolution = tuple(int(v) for v in self.resolution)
        self.extra = dict(self.extra or {})

    @property
    def descriptor_shape(self):
        return (self.grid, self.grid, self.num_classes + 1)

    @property
    def channel_shape(self):
        return (self.rx_antennas, self.tx_antennas)

    def record_size(self):
        h, w = self.resolution
        floats = 6 + self.num_classes + int(np.prod(self.descriptor_shape)) \
            + 2 * self.rx_antennas * self.tx_antennas
        return _LABEL_HEADER.size + h * w + 8 + 4 * floats + 4

    def to_dict(self):
        return {"version": self.version, "sample_count": self.sample_count,
                "num_classes": self.num_classes, "tx_antennas": self.tx_antennas,
                "rx_antennas": self.rx_antennas, "resolution": list(self.resolution),
                "grid": self.grid, "c_h": self.c_h, "seed": self.seed,
                "record_size": self.record_size(), "extra": self.extra}

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != FORMAT_VERSION:
            raise DatasetVersionError(f"dataset format version {d.get('version')!r}, "
                                      f"expected {FORMAT_VERSION}")
        try:
            return cls(d["sample_count"], d["num_classes"], d["tx_antennas"], d["rx_antennas"],
                       tuple(d["resolution"]), d["grid"], d["c_h"], d["seed"], d["version"],
                       d.get("extra"))
        except KeyError as exc:
            raise SchemaError(f"manifest lacks {exc}", missing=[str(exc)]) from None


# -- label maps ------------------------------------------------------------------
def pack_label_map(labels, num_classes=28):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    h, w = labels.shape
    return _LABEL_HEADER.pack(LABEL_MAGIC, h, w, num_classes) + labels.tobytes()


def unpack_label_map(buf):
    magic, h, w, z = _LABEL_HEADER.unpack_from(buf)
    if magic != LABEL_MAGIC:
        raise DataError("bad label map magic")
    body = buf[_LABEL_HEADER.size:_LABEL_HEADER.size + h * w]
    if len(body) != h * w:
        raise DataError("label map is truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy(), z


# -- dataset ----------------------------------------------------------------------
def _pack_record(sample, manifest):
    out = bytearray(pack_label_map(sample.labels, manifest.num_classes))
    out += struct.pack("<II", sample.index, sample.d_r)
    h = sample.H.astype(np.complex64)
    if sample.descriptor.shape != manifest.descriptor_shape or h.shape != manifest.channel_shape:
        raise SchemaError("sample dimensions disagree with the manifest")
    parts = [sample.bs_pos, sample.cu_pos, sample.j_po, sample.descriptor.ravel(),
             h.view(np.float32).ravel()]
    out += np.concatenate([np.asarray(p, dtype="<f4").ravel() for p in parts]).tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    if len(out) != manifest.record_size():
        raise SchemaError(f"record is {len(out)} bytes, manifest expects {manifest.record_size()}")
    return bytes(out)


def _unpack_record(buf, index, manifest):
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(index)
    labels, _ = unpack_label_map(body)
    off = _LABEL_HEADER.size + labels.size
    idx, d_r = struct.unpack_from("<II", body, off)
    floats = np.frombuffer(body, dtype="<f4", offset=off + 8)
    z, k, m = manifest.num_classes, manifest.rx_antennas, manifest.tx_antennas
    n_desc = int(np.prod(manifest.descriptor_shape))
    bounds = np.cumsum([0, 3, 3, z, n_desc, 2 * k * m])
    bs, cu, j_po, desc, hh = (floats[a:b].copy() for a, b in zip(bounds[:-1], bounds[1:]))
    H = hh.view(np.complex64).reshape(k, m)
    return EnvSample(idx, bs, cu, labels, j_po, desc.reshape(manifest.descriptor_shape), H, d_r)


def write_manifest(manifest, directory):
    path = Path(directory) / MANIFEST
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def read_manifest(directory):
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise DataError(f"no manifest in {directory}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON: {exc}") from None
    return DatasetManifest.from_dict(raw)


def write_dataset(samples, manifest, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if len(samples) != manifest.sample_count:
        raise SchemaError(f"manifest says {manifest.sample_count} samples, got {len(samples)}")
    size = manifest.record_size()
    with open(directory / SAMPLES, "wb") as fh:
        fh.write(_FILE_HEADER.pack(DATA_MAGIC, FORMAT_VERSION, size, len(samples)))
        for s in samples:
            fh.write(_pack_record(s, manifest))
    write_manifest(manifest, directory)
    return directory


def read_dataset(directory):
    """Returns (samples, manifest)."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    path = directory / SAMPLES
    if not path.exists():
        raise DataError(f"no sample file in {directory}")
    data = path.read_bytes()
    if len(data) < _FILE_HEADER.size:
        raise TruncatedRecordError(0, "sample file header is truncated")
    magic, version, size, count = _FILE_HEADER.unpack_from(data)
    if magic != DATA_MAGIC:
        raise DataError("bad sample file magic")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"sample file version {version}, expected {FORMAT_VERSION}")
    if size != manifest.record_size() or count != manifest.sample_count:
        raise SchemaError("sample file header disagrees with the manifest")
    samples = []
    for i in range(count):
        lo = _FILE_HEADER.size + i * size
        chunk = data[lo:lo + size]
        if len(chunk) < size:
            raise TruncatedRecordError(i)
        samples.append(_unpack_record(chunk, i, manifest))
    return samples, manifest


def parse_ratio(ratio):
    if isinstance(ratio, str):
        try:
            a, b = (int(v) for v in ratio.split(":"))
        except ValueError:
            raise ConfigError(f"ratio must look like 3:1, got {ratio!r}") from None
    else:
        a, b = ratio
    if a < 0 or b < 0 or a + b == 0:
        raise ConfigError(f"invalid split ratio {a}:{b}")
    return a, b


def split(samples, ratio=(3, 1), seed=42):
    """Seeded shuffle, then the first floor(N * a / (a + b)) go to training."""
    a, b = parse_ratio(ratio)
    n = len(samples)
    n_train = n * a // (a + b)
    if n_train == 0 or n_train == n:
        raise ConfigError(f"split {a}:{b} of {n} samples leaves one side empty")
    order = np.random.default_rng(seed).permutation(n)
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


# -- checkpoints -------------------------------------------------------------------
_DTYPES = {b"f4": np.dtype("<f4"), b"f8": np.dtype("<f8")}


def _tag(arrays):
    kinds = {np.asarray(a).dtype for a in arrays}
    return b"f8" if np.dtype(np.float64) in kinds else b"f4"


def save_checkpoint(params, path, meta=None):
    arrays = dict(params.tensors)
    if params.optimizer is not None:
        arrays.update({f"optim.{k}": v for k, v in params.optimizer.items()})
    tag = _tag(params.tensors.values())
    dtype = _DTYPES[tag]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    out = bytearray(struct.pack("<4sI2sI", CKPT_MAGIC, FORMAT_VERSION, tag, len(meta_bytes)))
    out += meta_bytes
    out += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        key = name.encode()
        out += struct.pack("<HB", len(key), arr.ndim) + key
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=dtype).tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    os.replace(tmp, path)
    return path


def load_checkpoint(path, with_meta=False):
    data = Path(path).read_bytes()
    head = struct.Struct("<4sI2sI")
    if len(data) < head.size:
        raise TruncatedRecordError(0, "checkpoint header is truncated")
    magic, version, tag, n_meta = head.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise DataError("not a checkpoint file")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    if tag not in _DTYPES:
        raise DataError(f"unknown checkpoint dtype tag {tag!r}")
    dtype = _DTYPES[tag]
    off = head.size
    meta = json.loads(data[off:off + n_meta].decode())
    off += n_meta
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors, optimizer = {}, {}
    try:
        for i in range(count):
            n_key, rank = struct.unpack_from("<HB", data, off)
            off += 3
            name = data[off:off + n_key].decode()
            off += n_key
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            n = int(np.prod(shape)) * dtype.itemsize
            if off + n > len(data):
                raise TruncatedRecordError(i, f"tensor {name!r} is truncated")
            arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=off)
            arr = arr.reshape(shape).astype(dtype.newbyteorder("="))
            off += n
            if name.startswith("optim."):
                optimizer[name[6:]] = arr
            else:
                tensors[name] = arr
    except struct.error:
        raise TruncatedRecordError(len(tensors) + len(optimizer), "checkpoint is truncated") from None
    params = ParameterSet(tensors, optimizer or None)
    return (params, meta) if with_meta else params


# -- CKB store ---------------------------------------------------------------------
def save_store(entries, path):
    """``entries`` maps sample index -> complex K x M estimate."""
    keys = sorted(entries)
    k, m = np.asarray(entries[keys[0]]).shape if keys else (0, 0)
    out = bytearray(struct.pack("<4sIIII", STORE_MAGIC, FORMAT_VERSION, len(keys), k, m))
    for key in keys:
        out += struct.pack("<I", key)
        out += np.asarray(entries[key], dtype=np.complex64).view("<f4").tobytes()
    Path(path).write_bytes(bytes(out))
    return path


def load_store(path):
    data = Path(path).read_bytes()
    magic, version, count, k, m = struct.unpack_from("<4sIIII", data)
    if magic != STORE_MAGIC:
        raise DataError("not a CKB store file")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(f"store version {version}, expected {FORMAT_VERSION}")
    off, size = 20, 4 + 8 * k * m
    entries = {}
    for i in range(count):
        chunk = data[off + i * size:off + (i + 1) * size]
        if len(chunk) < size:
            raise TruncatedRecordError(i)
        (key,) = struct.unpack_from("<I", chunk)
        entries[key] = np.frombuffer(chunk[4:], dtype="<f4").copy().view(np.complex64).reshape(k, m)
    return entries


__all__ = [
    "DatasetManifest", "EnvSample", "FORMAT_VERSION", "load_checkpoint", "load_store",
    "pack_label_map", "parse_ratio", "read_dataset", "read_manifest", "save_checkpoint",
    "save_store", "split", "unpack_label_map", "write_dataset", "write_manifest",
]
