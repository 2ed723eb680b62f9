"""Writers (and minimal readers) for the DVKEMB01 / DVKREF01 file formats.

Layout, all integers little-endian:

  DVKEMB01: magic "DVKEMB01"; u32 rows; u32 cols; u32 dim; u32 flags
            (bit0 attention, bit1 cls); f32[rows*cols*dim] embeddings in
            (row, col, dim) order; then f32[rows*cols] attention if bit0;
            then f32[dim] cls if bit1.
  DVKREF01: magic "DVKREF01"; u32 dim; u32 m; u32 M; f32 tau; u64 seed;
            f32[m*dim] centroids; u32[m] votes.

Files are validated before writing and written atomically so a crashed
export never leaves a truncated file behind.
"""

import os
import struct
import tempfile

import numpy as np

from .errors import BadConfig, SizeMismatch

MAGIC_GRID = b"DVKEMB01"
MAGIC_REFS = b"DVKREF01"
FLAG_ATTENTION = 1
FLAG_CLS = 2


def _validate_grid(embeddings, attention, cls):
    if embeddings.ndim != 3:
        raise BadConfig(f"embeddings must be rank 3, got shape {embeddings.shape}")
    rows, cols, dim = embeddings.shape
    if min(rows, cols, dim) < 1:
        raise BadConfig(f"zero-sized grid {embeddings.shape}")
    if not np.isfinite(embeddings).all():
        raise BadConfig("non-finite embedding value")
    norms = np.linalg.norm(embeddings.reshape(-1, dim), axis=1)
    if (norms == 0.0).any():
        raise BadConfig("zero-norm patch embedding")
    if attention is not None:
        if attention.shape != (rows, cols):
            raise SizeMismatch(f"attention {attention.shape} vs grid {(rows, cols)}")
        if not np.isfinite(attention).all():
            raise BadConfig("non-finite attention value")
        if attention.min() < 0.0 or attention.max() > 1.0:
            raise BadConfig("attention outside [0,1]")
    if cls is not None:
        if cls.shape != (dim,):
            raise SizeMismatch(f"cls {cls.shape} vs dim {dim}")
        if not np.isfinite(cls).all():
            raise BadConfig("non-finite cls value")


def encode_grid(embeddings, attention=None, cls=None) -> bytes:
    emb = np.ascontiguousarray(embeddings, dtype=np.float32)
    att = None if attention is None else np.ascontiguousarray(attention, dtype=np.float32)
    cv = None if cls is None else np.ascontiguousarray(cls, dtype=np.float32)
    _validate_grid(emb, att, cv)
    rows, cols, dim = emb.shape
    flags = (FLAG_ATTENTION if att is not None else 0) | (FLAG_CLS if cv is not None else 0)
    parts = [MAGIC_GRID, struct.pack("<4I", rows, cols, dim, flags),
             emb.astype("<f4").tobytes()]
    if att is not None:
        parts.append(att.astype("<f4").tobytes())
    if cv is not None:
        parts.append(cv.astype("<f4").tobytes())
    return b"".join(parts)


def _atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_grid(path, embeddings, attention=None, cls=None) -> None:
    _atomic_write(path, encode_grid(embeddings, attention, cls))


def read_grid(path):
    """Decode a grid file; returns (embeddings, attention, cls)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC_GRID:
        raise BadConfig(f"bad magic in {path}")
    rows, cols, dim, flags = struct.unpack_from("<4I", buf, 8)
    off = 24
    n = rows * cols * dim
    emb = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(rows, cols, dim)
    off += 4 * n
    att = None
    if flags & FLAG_ATTENTION:
        att = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=off)
        att = att.reshape(rows, cols)
        off += 4 * rows * cols
    cls = None
    if flags & FLAG_CLS:
        cls = np.frombuffer(buf, dtype="<f4", count=dim, offset=off)
        off += 4 * dim
    if off != len(buf):
        raise BadConfig(f"trailing bytes in {path}")
    return emb.copy(), None if att is None else att.copy(), None if cls is None else cls.copy()


def write_reference(path, centroids, votes, tau: float = 0.2, seed: int = 0,
                    clusters: int | None = None) -> None:
    """Write a DVKREF01 file; used to turn a chosen patch into a reference."""
    cents = np.ascontiguousarray(centroids, dtype=np.float32)
    if cents.ndim != 2 or cents.shape[0] < 1:
        raise BadConfig(f"centroids must be (m, dim), got {cents.shape}")
    if not np.isfinite(cents).all():
        raise BadConfig("non-finite centroid")
    if (np.linalg.norm(cents, axis=1) == 0.0).any():
        raise BadConfig("zero-norm centroid")
    v = np.ascontiguousarray(votes, dtype=np.uint32)
    if v.shape != (cents.shape[0],):
        raise SizeMismatch(f"votes {v.shape} vs centroids {cents.shape}")
    if (v[:-1] < v[1:]).any():
        raise BadConfig("votes must be non-increasing")
    m, dim = cents.shape
    big_m = m if clusters is None else int(clusters)
    if big_m < m:
        raise BadConfig(f"clusters {big_m} < kept {m}")
    if not 0.0 <= tau <= 1.0:
        raise BadConfig(f"tau {tau} outside [0,1]")
    payload = b"".join([
        MAGIC_REFS,
        struct.pack("<3I", dim, m, big_m),
        struct.pack("<f", tau),
        struct.pack("<Q", seed),
        cents.astype("<f4").tobytes(),
        v.astype("<u4").tobytes(),
    ])
    _atomic_write(path, payload)
