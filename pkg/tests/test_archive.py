import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cgfdetr.archive import MAGIC, ArchiveError, WeightArchive, archive_read, archive_write


def _raw(manifest, blob, magic=MAGIC, version=1):
    m = json.dumps({"tensors": manifest}).encode()
    return struct.pack("<4sIQ", magic, version, len(m)) + m + blob


def test_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    a = WeightArchive({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=5).astype(np.float32),
                       "c": np.array(1.5), "d": np.zeros((0, 3))})
    path = tmp_path / "w.cgfw"
    archive_write(a, path)
    b = archive_read(path)
    assert list(b) == list(a)
    for k in a:
        assert b[k].dtype == a[k].dtype and b[k].shape == a[k].shape and b[k].tobytes() == a[k].tobytes()


def test_header_bytes():
    data = WeightArchive({"x": np.ones(2)}).to_bytes()
    assert data[:4] == bytes([0x43, 0x47, 0x46, 0x57])
    assert struct.unpack_from("<I", data, 4)[0] == 1
    mlen = struct.unpack_from("<Q", data, 8)[0]
    manifest = json.loads(data[16:16 + mlen])
    assert manifest["tensors"][0] == {"name": "x", "dtype": "f64", "shape": [2], "offset": 0}
    assert data[16 + mlen:] == np.ones(2, "<f8").tobytes()


def test_empty_archive_valid():
    assert len(WeightArchive.from_bytes(WeightArchive().to_bytes())) == 0


def test_truncated_blob_names_first_bad_tensor():
    data = WeightArchive({"ok": np.ones(2), "cut": np.ones(4), "after": np.ones(1)}).to_bytes()
    with pytest.raises(ArchiveError, match="'cut'"):
        WeightArchive.from_bytes(data[:-12])


def test_bad_magic_and_version():
    good = WeightArchive({"x": np.ones(1)}).to_bytes()
    with pytest.raises(ArchiveError, match="magic"):
        WeightArchive.from_bytes(b"XXXX" + good[4:])
    with pytest.raises(ArchiveError, match="version"):
        WeightArchive.from_bytes(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(ArchiveError):
        WeightArchive.from_bytes(b"CG")


def test_overlap_and_trailing_rejected():
    blob = np.ones(3, "<f8").tobytes()
    overlap = [{"name": "a", "dtype": "f64", "shape": [2], "offset": 0},
               {"name": "b", "dtype": "f64", "shape": [1], "offset": 8}]
    with pytest.raises(ArchiveError, match="overlaps"):
        WeightArchive.from_bytes(_raw(overlap, blob))
    with pytest.raises(ArchiveError, match="covers"):
        WeightArchive.from_bytes(_raw([{"name": "a", "dtype": "f64", "shape": [2], "offset": 0}], blob))


def test_malformed_entries_rejected():
    blob = np.ones(2, "<f8").tobytes()
    dup = [{"name": "a", "dtype": "f64", "shape": [1], "offset": 0},
           {"name": "a", "dtype": "f64", "shape": [1], "offset": 8}]
    with pytest.raises(ArchiveError, match="duplicate"):
        WeightArchive.from_bytes(_raw(dup, blob))
    with pytest.raises(ArchiveError, match="dtype"):
        WeightArchive.from_bytes(_raw([{"name": "a", "dtype": "i8", "shape": [2], "offset": 0}], blob))
    m = b"{not json"
    with pytest.raises(ArchiveError, match="manifest"):
        WeightArchive.from_bytes(struct.pack("<4sIQ", MAGIC, 1, len(m)) + m)


def test_rejects_unsupported_dtype():
    with pytest.raises(ArchiveError):
        WeightArchive({"i": np.arange(3)})


def test_manifest_offsets_ascending():
    entries = WeightArchive({"a": np.ones(3, np.float32), "b": np.ones(2), "c": np.ones(1)}).manifest()
    assert [e.byte_offset for e in entries] == [0, 12, 28]


arrays = st.one_of(
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=4),
               elements=st.floats(allow_nan=True, allow_infinity=True)),
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=4),
               elements=st.floats(width=32)),
)


@settings(max_examples=60)
@given(st.dictionaries(st.text(min_size=1, max_size=12), arrays, max_size=5))
def test_roundtrip_property(tensors):
    back = WeightArchive.from_bytes(WeightArchive(tensors).to_bytes())
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape and back[k].tobytes() == v.tobytes()
