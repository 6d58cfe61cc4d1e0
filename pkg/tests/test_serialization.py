import json
import struct

import numpy as np
import pytest

from encdec_adapt.errors import FormatError, ValidationError
from encdec_adapt.serialization import ALIGN, load_checkpoint, read_manifest, save_checkpoint
from encdec_adapt.surgery import content_hash


def _rewrite_manifest(path, edit):
    manifest, start, raw = read_manifest(path)
    edit(manifest)
    m = json.dumps(manifest, sort_keys=True).encode()
    head = b"EDSG" + struct.pack("<IQ", 1, len(m)) + m
    new_start = (len(head) + ALIGN - 1) // ALIGN * ALIGN
    path.write_bytes(head + b"\0" * (new_start - len(head)) + raw[start:])


@pytest.mark.parametrize("which", ["toy_decoder", "toy_encdec"])
def test_round_trip_bit_exact(tmp_path, request, which):
    ck = request.getfixturevalue(which)
    path = tmp_path / "c.edsg"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert list(back.tensors) == list(ck.tensors)
    assert all(np.array_equal(back[n], ck[n]) for n in ck)
    assert back.meta.to_dict() == ck.meta.to_dict()
    assert content_hash(back) == content_hash(ck)


def test_offsets_aligned(tmp_path, toy_encdec):
    path = tmp_path / "c.edsg"
    save_checkpoint(toy_encdec, path)
    manifest, start, _ = read_manifest(path)
    assert start % ALIGN == 0
    assert all(e["offset"] % ALIGN == 0 for e in manifest["tensors"])


def test_truncated_file(tmp_path, toy_decoder):
    path = tmp_path / "c.edsg"
    save_checkpoint(toy_decoder, path)
    raw = path.read_bytes()
    for cut in (len(raw) - 4, 10, 40):
        path.write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(path)


def test_bad_magic_and_version(tmp_path, toy_decoder):
    path = tmp_path / "c.edsg"
    save_checkpoint(toy_decoder, path)
    raw = path.read_bytes()
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)
    path.write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(path)


def test_flipped_payload_byte_fails_checksum(tmp_path, toy_decoder):
    path = tmp_path / "c.edsg"
    save_checkpoint(toy_decoder, path)
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="checksum"):
        load_checkpoint(path)


def test_manifest_shape_edit_names_tensor(tmp_path, toy_encdec):
    path = tmp_path / "c.edsg"
    save_checkpoint(toy_encdec, path)

    def edit(m):
        e = next(e for e in m["tensors"] if e["name"] == "dec.1.xattn.k")
        e["shape"] = e["shape"][::-1]

    _rewrite_manifest(path, edit)
    with pytest.raises(ValidationError) as info:
        load_checkpoint(path)
    assert info.value.tensor == "dec.1.xattn.k"


def test_missing_tensor_names_tensor(tmp_path, toy_encdec):
    path = tmp_path / "c.edsg"
    save_checkpoint(toy_encdec, path)
    _rewrite_manifest(path, lambda m: m["tensors"].pop())
    with pytest.raises(ValidationError) as info:
        load_checkpoint(path)
    assert info.value.tensor is not None


def test_garbage_manifest(tmp_path):
    path = tmp_path / "c.edsg"
    path.write_bytes(b"EDSG" + struct.pack("<IQ", 1, 5) + b"{{{{{")
    with pytest.raises(FormatError):
        load_checkpoint(path)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "absent.edsg")


def test_failed_write_leaves_previous_file(tmp_path, toy_decoder, monkeypatch):
    path = tmp_path / "c.edsg"
    save_checkpoint(toy_decoder, path)
    before = path.read_bytes()
    import encdec_adapt.serialization as ser

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(ser.os, "fsync", boom)
    with pytest.raises(OSError):
        save_checkpoint(toy_decoder.replace({"emb.tok": toy_decoder["emb.tok"] * 2}), path)
    assert path.read_bytes() == before
    assert sorted(p.name for p in tmp_path.iterdir()) == ["c.edsg"]
