import struct

import numpy as np
import pytest

from dino_exporter.errors import BadConfig, SizeMismatch
from dino_exporter.grid_files import (
    MAGIC_GRID,
    MAGIC_REFS,
    encode_grid,
    read_grid,
    write_grid,
    write_reference,
)


def test_minimal_grid_is_28_bytes():
    buf = encode_grid(np.ones((1, 1, 1), dtype=np.float32))
    assert len(buf) == 28
    assert buf[:8] == MAGIC_GRID
    rows, cols, dim, flags = struct.unpack_from("<4I", buf, 8)
    assert (rows, cols, dim, flags) == (1, 1, 1, 0)
    assert struct.unpack_from("<f", buf, 24)[0] == 1.0


def test_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    emb = rng.standard_normal((5, 7, 9)).astype(np.float32)
    att = rng.uniform(0.0, 1.0, size=(5, 7)).astype(np.float32)
    cls = rng.standard_normal(9).astype(np.float32)
    path = tmp_path / "g.dvkemb"
    write_grid(path, emb, att, cls)
    emb2, att2, cls2 = read_grid(path)
    assert emb2.tobytes() == emb.tobytes()
    assert att2.tobytes() == att.tobytes()
    assert cls2.tobytes() == cls.tobytes()
    write_grid(tmp_path / "h.dvkemb", emb2, att2, cls2)
    assert (tmp_path / "h.dvkemb").read_bytes() == path.read_bytes()


def test_optional_blocks_follow_flags(tmp_path):
    emb = np.ones((2, 2, 3), dtype=np.float32)
    path = tmp_path / "g.dvkemb"
    write_grid(path, emb)
    _, att, cls = read_grid(path)
    assert att is None and cls is None
    write_grid(path, emb, attention=np.full((2, 2), 0.25))
    _, att, cls = read_grid(path)
    assert att is not None and cls is None


def test_rejects_bad_grids():
    bad = np.ones((2, 2, 2), dtype=np.float32)
    bad[0, 0, 0] = np.nan
    with pytest.raises(BadConfig):
        encode_grid(bad)
    zero = np.ones((2, 2, 2), dtype=np.float32)
    zero[1, 1] = 0.0
    with pytest.raises(BadConfig):
        encode_grid(zero)
    with pytest.raises(BadConfig):
        encode_grid(np.ones((2, 2, 2)), attention=np.full((2, 2), 1.5))
    with pytest.raises(SizeMismatch):
        encode_grid(np.ones((2, 2, 2)), attention=np.zeros((3, 2)))
    with pytest.raises(SizeMismatch):
        encode_grid(np.ones((2, 2, 2)), cls=np.ones(5))
    with pytest.raises(BadConfig):
        encode_grid(np.ones((2, 2, 2))[:0])


def test_reference_file_layout(tmp_path):
    path = tmp_path / "r.dvkref"
    cents = np.array([[3.0, 4.0, 0.0], [1.0, 0.0, 0.0]], dtype=np.float32)
    write_reference(path, cents, votes=[5, 2], tau=0.25, seed=9, clusters=10)
    buf = path.read_bytes()
    assert buf[:8] == MAGIC_REFS
    dim, m, big_m = struct.unpack_from("<3I", buf, 8)
    assert (dim, m, big_m) == (3, 2, 10)
    assert struct.unpack_from("<f", buf, 20)[0] == 0.25
    assert struct.unpack_from("<Q", buf, 24)[0] == 9
    got = np.frombuffer(buf, dtype="<f4", count=6, offset=32).reshape(2, 3)
    assert got.tobytes() == cents.tobytes()
    votes = np.frombuffer(buf, dtype="<u4", count=2, offset=32 + 24)
    assert list(votes) == [5, 2]
    assert len(buf) == 32 + 24 + 8


def test_reference_validation(tmp_path):
    path = tmp_path / "r.dvkref"
    good = np.ones((2, 3), dtype=np.float32)
    with pytest.raises(BadConfig):
        write_reference(path, good, votes=[1, 2])  # increasing votes
    with pytest.raises(SizeMismatch):
        write_reference(path, good, votes=[1])
    with pytest.raises(BadConfig):
        write_reference(path, np.zeros((1, 3)), votes=[1])
    with pytest.raises(BadConfig):
        write_reference(path, good, votes=[2, 1], tau=1.5)
    with pytest.raises(BadConfig):
        write_reference(path, good, votes=[2, 1], clusters=1)


def test_atomic_write_leaves_no_debris(tmp_path):
    path = tmp_path / "g.dvkemb"
    write_grid(path, np.ones((1, 1, 2), dtype=np.float32))
    assert [p.name for p in tmp_path.iterdir()] == ["g.dvkemb"]
