"""Single-file checkpoint format.

Layout (all integers little-endian)::

    b"EDSG" | u32 version | u64 manifest_len | manifest (UTF-8 JSON) | pad | payload

The payload starts at the first 64-byte boundary after the manifest. Each
tensor is raw binary32 at a 64-byte aligned offset relative to the payload
start. The manifest lists tensors in canonical order with dtype, shape, offset,
byte length and a crc32 of the bytes, plus the metadata record.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .checkpoint import NamedCheckpoint, expected_shapes
from .config import Metadata
from .errors import ConfigError, FormatError, ValidationError

MAGIC = b"EDSG"
FORMAT_VERSION = 1
ALIGN = 64
_HEADER = struct.Struct("<4sIQ")


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def atomic_write_bytes(path: str | Path, chunks) -> None:
    """Write to a temporary file in the target directory, fsync, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            for c in chunks:
                fh.write(c)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_manifest(ckpt: NamedCheckpoint) -> tuple[dict, list[np.ndarray]]:
    entries, arrays, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({
            "name": name,
            "dtype": "float32",
            "shape": list(a.shape),
            "offset": offset,
            "length": a.nbytes,
            "crc32": zlib.crc32(a.tobytes()),
        })
        arrays.append(a)
        offset = _align(offset + a.nbytes)
    return {"version": FORMAT_VERSION, "metadata": ckpt.meta.to_dict(), "tensors": entries}, arrays


def save_checkpoint(ckpt: NamedCheckpoint, path: str | Path) -> None:
    manifest, arrays = build_manifest(ckpt)
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, len(mbytes)) + mbytes
    data_start = _align(len(head))

    def chunks():
        yield head + b"\0" * (data_start - len(head))
        pos = 0
        for entry, a in zip(manifest["tensors"], arrays):
            if entry["offset"] > pos:
                yield b"\0" * (entry["offset"] - pos)
                pos = entry["offset"]
            yield a.tobytes()
            pos += a.nbytes

    atomic_write_bytes(path, chunks())


def read_manifest(path: str | Path) -> tuple[dict, int, bytes]:
    """Parse the header and manifest; returns (manifest, payload start, file bytes)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < _HEADER.size:
        raise FormatError("file shorter than the header (truncated?)")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    end = _HEADER.size + mlen
    if end > len(raw):
        raise FormatError("manifest extends past end of file (truncated?)")
    try:
        manifest = json.loads(raw[_HEADER.size : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"manifest is not valid JSON: {e}") from e
    if not isinstance(manifest, dict) or "tensors" not in manifest or "metadata" not in manifest:
        raise FormatError("manifest lacks tensors/metadata")
    return manifest, _align(end), raw


def load_checkpoint(path: str | Path) -> NamedCheckpoint:
    manifest, start, raw = read_manifest(path)
    try:
        meta = Metadata.from_dict(manifest["metadata"])
    except (KeyError, TypeError, ValueError, ConfigError) as e:
        raise FormatError(f"bad metadata record: {e}") from e

    expected = expected_shapes(meta.arch)
    entries = manifest["tensors"]
    try:
        names = [e["name"] for e in entries]
    except (TypeError, KeyError) as e:
        raise FormatError("tensor entry without a name") from e
    missing = [n for n in expected if n not in names]
    if missing:
        raise ValidationError(f"missing tensor {missing[0]!r}", tensor=missing[0])
    extra = [n for n in names if n not in expected]
    if extra:
        raise ValidationError(f"unexpected tensor {extra[0]!r}", tensor=extra[0])
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names in manifest")

    tensors, spans = {}, []
    payload = len(raw) - start
    for e in entries:
        name = e["name"]
        try:
            shape = tuple(int(d) for d in e["shape"])
            off, length, dtype = int(e["offset"]), int(e["length"]), e["dtype"]
        except (KeyError, TypeError, ValueError) as err:
            raise FormatError(f"malformed entry for {name!r}") from err
        if shape != expected[name]:
            raise ValidationError(f"tensor {name!r}: manifest shape {shape}, architecture expects {expected[name]}", tensor=name)
        if dtype != "float32":
            raise FormatError(f"tensor {name!r}: unsupported dtype {dtype!r}")
        if length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"tensor {name!r}: byte length {length} disagrees with shape {shape}")
        if off < 0 or off % ALIGN or off + length > payload:
            raise FormatError(f"tensor {name!r}: span [{off}, {off + length}) out of bounds or misaligned (truncated?)")
        spans.append((off, off + length, name))
        buf = raw[start + off : start + off + length]
        if "crc32" in e and zlib.crc32(buf) != e["crc32"]:
            raise FormatError(f"tensor {name!r}: checksum mismatch")
        tensors[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
    spans.sort()
    for (_, end_a, a), (beg_b, _, b) in zip(spans, spans[1:]):
        if beg_b < end_a:
            raise FormatError(f"tensors {a!r} and {b!r} overlap")
    ordered = {n: tensors[n] for n in expected}
    return NamedCheckpoint(ordered, meta)
