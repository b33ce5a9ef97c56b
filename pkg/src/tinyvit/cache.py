"""Per-epoch distillation cache files.

One file holds one epoch: a 56-byte self-describing header, a fixed-stride
run of records in sample_id order, and an 8-byte CRC-64 trailer over all
preceding bytes.  Every field is little-endian.  The full layout, including
a hex-annotated example, lives in FORMAT.md; the layout is a compatibility
contract and must not change without bumping ``FORMAT_VERSION``.

Epoch files are independent of each other, so any number of epochs may be
written concurrently by separate workers.  Publication is atomic: the writer
streams to a temporary file, fsyncs, then renames into place.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .labels import SparseLabel

MAGIC = b"TVITCACH"
FORMAT_VERSION = 1
HEADER_SIZE = 56
TRAILER_SIZE = 8
_HEADER_STRUCT = struct.Struct("<8sHHIQQIIB3xQI")

_PRECISION_CODE = {"half": 0, "single": 1}
_PRECISION_NAME = {v: k for k, v in _PRECISION_CODE.items()}
_VALUE_DTYPE = {"half": np.dtype("<f2"), "single": np.dtype("<f4")}


def _crc64_table() -> np.ndarray:
    poly = 0xC96C5795D7870F42  # CRC-64/XZ, reflected
    table = np.zeros(256, dtype=np.uint64)
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
        table[i] = crc
    return table


_CRC64_TABLE = _crc64_table()


def crc64(data: bytes, crc: int = 0) -> int:
    """CRC-64/XZ running update (pass the previous return value to chain)."""
    crc ^= 0xFFFFFFFFFFFFFFFF
    table = _CRC64_TABLE
    for b in data:
        crc = int(table[(crc ^ b) & 0xFF]) ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class EpochHeader:
    pipeline_version: int
    epoch: int
    run_seed: int
    num_samples: int
    num_classes: int
    k: int
    value_precision: str  # "half" | "single"
    shuffle_seed: int
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        if self.num_samples < 1:
            raise ValueError("record count mismatch: num_samples must be positive")
        if self.k < 1:
            raise ValueError("K must be positive")
        if self.k > self.num_classes:
            raise ValueError("K exceeds class count")
        if self.value_precision not in _PRECISION_CODE:
            raise ValueError(f"unknown value precision: {self.value_precision!r}")

    @property
    def index_dtype(self) -> np.dtype:
        # u16 covers C <= 65536 because stored indices top out at C - 1.
        return np.dtype("<u2") if self.num_classes <= 65536 else np.dtype("<u4")

    @property
    def value_dtype(self) -> np.dtype:
        return _VALUE_DTYPE[self.value_precision]

    @property
    def record_size(self) -> int:
        return 4 + self.k * (self.index_dtype.itemsize + self.value_dtype.itemsize)

    def pack(self) -> bytes:
        body = _HEADER_STRUCT.pack(
            MAGIC, self.format_version, self.pipeline_version, self.epoch,
            self.run_seed, self.num_samples, self.num_classes, self.k,
            _PRECISION_CODE[self.value_precision], self.shuffle_seed, 0)
        checksum = zlib.crc32(body[:-4])
        return body[:-4] + struct.pack("<I", checksum)

    @classmethod
    def unpack(cls, raw: bytes) -> "EpochHeader":
        if len(raw) != HEADER_SIZE:
            raise ValueError("cache corrupt")
        (magic, fmt, pipe, epoch, run_seed, num_samples, num_classes, k,
         prec, shuffle, checksum) = _HEADER_STRUCT.unpack(raw)
        if magic != MAGIC:
            raise ValueError("cache corrupt")
        if zlib.crc32(raw[:-4]) != checksum:
            raise ValueError("cache corrupt")
        if fmt != FORMAT_VERSION:
            raise ValueError("unsupported version")
        if prec not in _PRECISION_NAME:
            raise ValueError("unsupported version")
        return cls(pipeline_version=pipe, epoch=epoch, run_seed=run_seed,
                   num_samples=num_samples, num_classes=num_classes, k=k,
                   value_precision=_PRECISION_NAME[prec], shuffle_seed=shuffle,
                   format_version=fmt)


@dataclass(frozen=True)
class CacheRecord:
    """One (sample, epoch) entry: seed plus sparse label in index order.

    ``indices`` are strictly increasing (the canonical on-disk order);
    ``values`` travel alongside them.  Rank order is recovered by sorting
    values descending, ties toward the lower index.
    """

    d0: int
    indices: np.ndarray  # int64
    values: np.ndarray   # float64 (exact image of the stored precision)

    def to_sparse_label(self) -> SparseLabel:
        order = np.lexsort((self.indices, -self.values))
        return SparseLabel(indices=self.indices[order].astype(np.int64),
                           values=self.values[order].copy())


def make_record(d0: int, sparse: SparseLabel) -> CacheRecord:
    """Reorder a rank-ordered sparse label into canonical index order."""
    order = np.argsort(sparse.indices, kind="stable")
    return CacheRecord(d0=d0, indices=sparse.indices[order].astype(np.int64),
                       values=np.asarray(sparse.values, dtype=np.float64)[order])


def write_epoch(path: str | os.PathLike, header: EpochHeader,
                records: Iterable[CacheRecord]) -> None:
    """Write one epoch file atomically (tmp file, fsync, rename)."""
    path = os.fspath(path)
    idt, vdt = header.index_dtype, header.value_dtype
    index_limit = header.num_classes
    tmp = f"{path}.tmp.{os.getpid()}"
    crc = 0
    count = 0
    try:
        with open(tmp, "wb") as f:
            head = header.pack()
            f.write(head)
            crc = crc64(head, crc)
            for rec in records:
                count += 1
                if count > header.num_samples:
                    raise ValueError("record count mismatch")
                idx = np.asarray(rec.indices)
                val = np.asarray(rec.values)
                if idx.shape != (header.k,) or val.shape != (header.k,):
                    raise ValueError("record count mismatch")
                if idx.size and (idx.min() < 0 or idx.max() >= index_limit):
                    raise ValueError("index width overflow")
                if np.any(np.diff(idx) <= 0):
                    raise ValueError("record indices must be strictly increasing")
                buf = (struct.pack("<I", rec.d0)
                       + idx.astype(idt).tobytes()
                       + val.astype(vdt).tobytes())
                f.write(buf)
                crc = crc64(buf, crc)
            if count != header.num_samples:
                raise ValueError("record count mismatch")
            f.write(struct.pack("<Q", crc))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


class EpochCacheReader:
    """Random-access reader over a validated epoch file.

    Record reads go through ``os.pread`` so one reader can serve any number
    of threads concurrently; nothing on the instance mutates after init.
    """

    def __init__(self, path: str | os.PathLike):
        self._path = os.fspath(path)
        self._fd = os.open(self._path, os.O_RDONLY)
        try:
            size = os.fstat(self._fd).st_size
            if size < HEADER_SIZE + TRAILER_SIZE:
                raise ValueError("cache corrupt")
            self.header = EpochHeader.unpack(os.pread(self._fd, HEADER_SIZE, 0))
            expect = (HEADER_SIZE + TRAILER_SIZE
                      + self.header.num_samples * self.header.record_size)
            if size != expect:
                raise ValueError("cache corrupt")
            crc = 0
            offset = 0
            body = size - TRAILER_SIZE
            while offset < body:
                chunk = os.pread(self._fd, min(1 << 20, body - offset), offset)
                if not chunk:
                    raise ValueError("cache corrupt")
                crc = crc64(chunk, crc)
                offset += len(chunk)
            (stored,) = struct.unpack("<Q", os.pread(self._fd, TRAILER_SIZE, body))
            if stored != crc:
                raise ValueError("cache corrupt")
        except Exception:
            os.close(self._fd)
            self._fd = -1
            raise

    @property
    def num_samples(self) -> int:
        return self.header.num_samples

    def read_record(self, sample_id: int) -> CacheRecord:
        if not 0 <= sample_id < self.header.num_samples:
            raise ValueError("sample out of range")
        h = self.header
        raw = os.pread(self._fd, h.record_size,
                       HEADER_SIZE + sample_id * h.record_size)
        (d0,) = struct.unpack_from("<I", raw, 0)
        idx_bytes = h.k * h.index_dtype.itemsize
        indices = np.frombuffer(raw, dtype=h.index_dtype, count=h.k, offset=4)
        values = np.frombuffer(raw, dtype=h.value_dtype, count=h.k,
                               offset=4 + idx_bytes)
        return CacheRecord(d0=d0, indices=indices.astype(np.int64),
                           values=values.astype(np.float64))

    def __iter__(self) -> Iterator[CacheRecord]:
        for i in range(self.header.num_samples):
            yield self.read_record(i)

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self) -> "EpochCacheReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __del__(self) -> None:
        self.close()


def open_epoch(path: str | os.PathLike) -> EpochCacheReader:
    return EpochCacheReader(path)


@dataclass(frozen=True)
class StorageEstimate:
    bytes_total: int
    bytes_per_record: int


def estimate_storage(c: int, k: int, num_samples: int, epochs: int,
                     value_precision: str = "half") -> StorageEstimate:
    """Exact byte arithmetic for the on-disk format."""
    header = EpochHeader(pipeline_version=0, epoch=0, run_seed=0,
                         num_samples=max(num_samples, 1), num_classes=c, k=k,
                         value_precision=value_precision, shuffle_seed=0)
    per_record = header.record_size
    total = epochs * (HEADER_SIZE + num_samples * per_record + TRAILER_SIZE)
    return StorageEstimate(bytes_total=total, bytes_per_record=per_record)


def inspect(path: str | os.PathLike, histogram_top: int = 10) -> dict:
    """Streaming summary: header echo, stored-mass statistics, and the most
    frequent argmax classes.  Record arrays are visited one at a time."""
    with open_epoch(path) as reader:
        h = reader.header
        total_mass = 0.0
        min_mass = float("inf")
        max_mass = float("-inf")
        top_counts: dict[int, int] = {}
        for rec in reader:
            m = float(rec.values.sum())
            total_mass += m
            min_mass = min(min_mass, m)
            max_mass = max(max_mass, m)
            top = int(rec.indices[int(np.argmax(rec.values))])
            top_counts[top] = top_counts.get(top, 0) + 1
        hist = sorted(top_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return {
            "path": os.fspath(path),
            "format_version": h.format_version,
            "pipeline_version": h.pipeline_version,
            "epoch": h.epoch,
            "run_seed": h.run_seed,
            "num_samples": h.num_samples,
            "num_classes": h.num_classes,
            "k": h.k,
            "value_precision": h.value_precision,
            "shuffle_seed": h.shuffle_seed,
            "record_size": h.record_size,
            "mean_topk_mass": total_mass / h.num_samples,
            "min_topk_mass": min_mass,
            "max_topk_mass": max_mass,
            "top_class_histogram": hist[:histogram_top],
        }


def format_inspect(summary: dict) -> str:
    lines = [f"{k}: {json.dumps(v) if isinstance(v, list) else v}"
             for k, v in summary.items()]
    return "\n".join(lines)
