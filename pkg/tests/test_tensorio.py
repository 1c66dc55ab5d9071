import json

import numpy as np
import pytest

from dptr.tensorio import FormatError, load_cache_array, load_tensors, save_cache_array, save_tensors


def test_checkpoint_roundtrip(tmp_path, rng):
    tensors = {"a.weight": rng.standard_normal((3, 4)).astype(np.float32), "b": np.float32(rng.standard_normal(5))}
    save_tensors(tmp_path / "c.bin", tensors, seed=3, dims={"dim": 4})
    back, header = load_tensors(tmp_path / "c.bin")
    assert header["seed"] == 3 and header["dims"] == {"dim": 4}
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])


def test_checkpoint_layout_little_endian(tmp_path):
    save_tensors(tmp_path / "c.bin", {"x": np.array([1.0, -2.0], dtype=np.float32)})
    raw = (tmp_path / "c.bin").read_bytes()
    head, payload = raw.split(b"\n", 1)
    assert json.loads(head)["tensors"] == [{"name": "x", "shape": [2]}]
    assert payload == np.array([1.0, -2.0], dtype="<f4").tobytes()


def test_checkpoint_truncated(tmp_path):
    save_tensors(tmp_path / "c.bin", {"x": np.zeros(10, dtype=np.float32)})
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "c.bin").write_bytes(raw[:-4])
    with pytest.raises(FormatError, match="truncated"):
        load_tensors(tmp_path / "c.bin")
    (tmp_path / "c.bin").write_bytes(raw + b"\0\0\0\0")
    with pytest.raises(FormatError, match="trailing"):
        load_tensors(tmp_path / "c.bin")


def test_cache_roundtrip_and_header(tmp_path, rng):
    bank = rng.standard_normal((3, 5, 2)).astype(np.float32)
    save_cache_array(tmp_path / "k.bin", bank, 7)
    raw = (tmp_path / "k.bin").read_bytes()
    head, payload = raw.split(b"\n", 1)
    assert json.loads(head) == {"count": 3, "rows_per_entry": 5, "D": 2, "seed": 7}
    assert payload == bank.astype("<f4").tobytes()  # entry-major
    back, header = load_cache_array(tmp_path / "k.bin")
    assert np.array_equal(back, bank)


def test_cache_bad_files(tmp_path):
    p = tmp_path / "k.bin"
    p.write_bytes(b'{"count": 1, "rows_per_entry": 2, "D": 2}\n' + b"\0" * 16)
    with pytest.raises(FormatError, match="missing"):
        load_cache_array(p)
    p.write_bytes(b'{"count": 1, "rows_per_entry": 2, "D": 2, "seed": 0}\n' + b"\0" * 12)
    with pytest.raises(FormatError, match="expected 16"):
        load_cache_array(p)
    p.write_bytes(b"not json\n")
    with pytest.raises(FormatError):
        load_cache_array(p)
