"""Seeding and atomic-write helpers used by every module."""

import hashlib
import os
import tempfile
from pathlib import Path

import numpy as np


def child_seed(*parts) -> int:
    """Derive a stable 64-bit seed from a mixed tuple of ints and strings.

    Stable across processes and platforms (unlike hash()), so artifacts
    reproduce byte-for-byte from the same top-level seed.
    """
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, str):
            h.update(b"s")
            h.update(p.encode("utf-8"))
        elif isinstance(p, (int, np.integer)):
            h.update(b"i")
            h.update(int(p).to_bytes(16, "little", signed=True))
        else:
            raise TypeError(f"seed parts must be int or str, got {type(p)!r}")
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(child_seed(*parts))


def atomic_write_bytes(path, data: bytes) -> None:
    """Write data to path via a same-directory temp file + rename.

    Readers never observe a partially written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
