import numpy as np
import pytest

from pdcreid.errors import CheckpointError
from pdcreid.tensorio import decode_pdct, encode_pdct, load_checkpoint, read_pdct, save_checkpoint, write_pdct

# "PDCT", version 1, dtype 0, rank 2, extents 1 and 2, then 1.0f and -2.0f
FROZEN = bytes.fromhex("50444354" "01" "00" "0200" "01000000" "02000000" "0000803f" "000000c0")


def test_frozen_bytes():
    assert encode_pdct(np.array([[1.0, -2.0]])) == FROZEN
    assert decode_pdct(FROZEN).tolist() == [[1.0, -2.0]]


def test_round_trip(tmp_path):
    a = np.random.default_rng(0).normal(size=(2, 3, 4)).astype(np.float32).astype(np.float64)
    write_pdct(tmp_path / "a.pdct", a)
    assert np.array_equal(read_pdct(tmp_path / "a.pdct"), a)


def test_scalar():
    assert decode_pdct(encode_pdct(np.float64(3.5))).shape == ()


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + b"\x02" + b[5:], "version"),
    (lambda b: b[:5] + b"\x07" + b[6:], "dtype"),
    (lambda b: b[:-1], "payload"),
    (lambda b: b[:10], "truncated"),
])
def test_corrupt(mutate, msg):
    with pytest.raises(CheckpointError, match=msg):
        decode_pdct(mutate(FROZEN))


def test_checkpoint(tmp_path):
    tensors = {"fwn.W": np.ones(3), "trunk.0.W": np.zeros((2, 1, 3, 3)), "velocity/x.b": np.arange(2.0)}
    save_checkpoint(tmp_path, tensors, {"iteration": 5, "model.variant": "FullPDC"})
    got, meta = load_checkpoint(tmp_path)
    assert sorted(got) == sorted(tensors)
    assert all(np.array_equal(got[k], tensors[k]) for k in tensors)
    assert meta == {"iteration": "5", "model.variant": "FullPDC"}
    manifest = (tmp_path / "manifest.txt").read_text().splitlines()
    assert "fwn.W fwn.W.pdct" in manifest


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
    (tmp_path / "manifest.txt").write_text("a b c\n")
    with pytest.raises(CheckpointError, match="malformed"):
        load_checkpoint(tmp_path)
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x", {"bad name": np.ones(1)})
