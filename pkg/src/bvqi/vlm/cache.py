"""Content-addressed on-disk cache for frozen-encoder features.

Record layout (little endian), one file per (content hash, view, frame):

    b"BVQF" | u32 version | u32 n_arrays
    repeated n_arrays times:
        u32 name_len | name (utf-8)
        u32 dtype_len | numpy dtype str (e.g. "<f4")
        u32 ndim | u64 * ndim shape
        u64 nbytes | raw C-order bytes

Files live at ``<root>/<hash[:2]>/<hash>/<view>/<frame:05d>.bin``.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BVQF"
VERSION = 1
CACHE_ENV = "BVQI_CACHE_DIR"


class CacheFormatError(ValueError):
    pass


def write_record(fh, arrays: dict[str, np.ndarray]):
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dt, copy=False)
        nb, ds = name.encode(), dt.str.encode()
        fh.write(struct.pack("<I", len(nb)) + nb)
        fh.write(struct.pack("<I", len(ds)) + ds)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        data = arr.tobytes()
        fh.write(struct.pack("<Q", len(data)))
        fh.write(data)


def _read(fh, fmt):
    size = struct.calcsize(fmt)
    buf = fh.read(size)
    if len(buf) != size:
        raise CacheFormatError("truncated record")
    return struct.unpack(fmt, buf)


def read_record(fh) -> dict[str, np.ndarray]:
    if fh.read(4) != MAGIC:
        raise CacheFormatError("bad magic")
    version, n = _read(fh, "<II")
    if version != VERSION:
        raise CacheFormatError(f"unsupported version {version}")
    out = {}
    for _ in range(n):
        (ln,) = _read(fh, "<I")
        name = fh.read(ln).decode()
        (ld,) = _read(fh, "<I")
        dtype = np.dtype(fh.read(ld).decode())
        (ndim,) = _read(fh, "<I")
        shape = _read(fh, f"<{ndim}Q") if ndim else ()
        (nbytes,) = _read(fh, "<Q")
        data = fh.read(nbytes)
        if len(data) != nbytes:
            raise CacheFormatError("truncated array payload")
        out[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return out


def encode_record(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_record(buf, arrays)
    return buf.getvalue()


def decode_record(data: bytes) -> dict[str, np.ndarray]:
    return read_record(io.BytesIO(data))


def file_digest(path: str | Path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(x for x in p.iterdir() if x.is_file()) if p.is_dir() else [p]
    for f in files:
        h.update(f.name.encode() if p.is_dir() else b"")
        with open(f, "rb") as fh:
            while block := fh.read(chunk):
                h.update(block)
    return h.hexdigest()


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "bvqi"))


class FeatureCache:
    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else default_cache_dir()

    def _dir(self, key: str, view: str) -> Path:
        return self.root / key[:2] / key / view

    def path(self, key: str, view: str, frame: int) -> Path:
        return self._dir(key, view) / f"{frame:05d}.bin"

    def put(self, key: str, view: str, frame: int, arrays: dict[str, np.ndarray]) -> Path:
        p = self.path(key, view, frame)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            write_record(fh, arrays)
        os.replace(tmp, p)
        return p

    def get(self, key: str, view: str, frame: int) -> dict[str, np.ndarray] | None:
        p = self.path(key, view, frame)
        if not p.exists():
            return None
        with open(p, "rb") as fh:
            return read_record(fh)

    def get_all(self, key: str, view: str, count: int) -> list[dict[str, np.ndarray]] | None:
        recs = [self.get(key, view, i) for i in range(count)]
        return None if any(r is None for r in recs) else recs

    def put_json(self, key: str, name: str, payload: dict) -> Path:
        p = self.root / key[:2] / key / f"{name}.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(payload, sort_keys=True))
        return p

    def get_json(self, key: str, name: str) -> dict | None:
        p = self.root / key[:2] / key / f"{name}.json"
        return json.loads(p.read_text()) if p.exists() else None
