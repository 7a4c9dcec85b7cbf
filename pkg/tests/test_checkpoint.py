import json
import struct

import numpy as np
import pytest

from apg.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint

from test_model import tiny_batch, tiny_model


def rewrite_header(path, edit):
    blob = path.read_bytes()
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen])
    edit(header)
    raw = json.dumps(header).encode()
    path.write_bytes(blob[:4] + struct.pack("<I", len(raw)) + raw + blob[8 + hlen:])


@pytest.mark.parametrize("version,condition", [
    ("base", "self"), ("v1", "group:a"), ("v3", "self"), ("v4", "mix:a,b;policy=output;agg=attention"),
    ("v5", "mix:a,b;policy=input;agg=concat"),
])
def test_round_trip_bitwise(tmp_path, version, condition):
    model = tiny_model(version, condition, seed=2)
    save_checkpoint(model, tmp_path / "m.apg")
    back = load_checkpoint(tmp_path / "m.apg")
    cat, dense, _ = tiny_batch(7, n=100)
    assert model.forward_batch(cat, dense)[0].tobytes() == back.forward_batch(cat, dense)[0].tobytes()
    assert read_header(tmp_path / "m.apg")["config"]["version"] == version


def test_file_starts_with_magic(tmp_path):
    save_checkpoint(tiny_model("v4"), tmp_path / "m.apg")
    assert (tmp_path / "m.apg").read_bytes()[:4] == b"APG1"


def test_save_is_deterministic(tmp_path):
    save_checkpoint(tiny_model("v4"), tmp_path / "a.apg")
    save_checkpoint(tiny_model("v4"), tmp_path / "b.apg")
    assert (tmp_path / "a.apg").read_bytes() == (tmp_path / "b.apg").read_bytes()


def test_collapse_on_load(tmp_path):
    model = tiny_model("v5", "group:a")
    save_checkpoint(model, tmp_path / "m.apg")
    flat = load_checkpoint(tmp_path / "m.apg", collapse=True)
    assert flat.config.version.value == "v4"
    cat, dense, _ = tiny_batch(8, n=100)
    assert np.abs(model.forward_batch(cat, dense)[0] - flat.forward_batch(cat, dense)[0]).max() <= 1e-9


def test_truncated(tmp_path):
    p = tmp_path / "m.apg"
    save_checkpoint(tiny_model("v4"), p)
    blob = p.read_bytes()
    for cut in (3, 20, len(blob) - 8):
        p.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)


def test_bad_magic_and_corruption(tmp_path):
    p = tmp_path / "m.apg"
    save_checkpoint(tiny_model("v4"), p)
    blob = bytearray(p.read_bytes())
    p.write_bytes(b"NOPE" + bytes(blob[4:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)
    blob[-1] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(p)


def test_header_mismatch(tmp_path):
    p = tmp_path / "m.apg"
    save_checkpoint(tiny_model("v5"), p)
    rewrite_header(p, lambda h: h["config"].update(version="v4"))
    with pytest.raises(CheckpointError, match="parameter list"):
        load_checkpoint(p)
    save_checkpoint(tiny_model("v4"), p)
    rewrite_header(p, lambda h: h["schema"].pop())
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    save_checkpoint(tiny_model("v4"), p)
    rewrite_header(p, lambda h: h.update(format=99))
    with pytest.raises(CheckpointError, match="format"):
        load_checkpoint(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nothing.apg")
