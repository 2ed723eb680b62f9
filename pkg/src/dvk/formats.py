"""On-disk artifact formats: embedding grids, reference sets, demo datasets.

All binary formats are little-endian and fully deterministic: the same
in-memory value always serializes to the same bytes.

DVKEMB01 (one patch-embedding grid per frame)::

    8s  magic   b"DVKEMB01"
    u32 rows, cols, dim
    u32 flags           bit0 = attention plane present, bit1 = cls present
    f32[rows*cols*dim]  embeddings, (row, col, dim) order
    f32[rows*cols]      attention, (row, col) order      [if bit0]
    f32[dim]            cls vector                       [if bit1]

DVKREF01 (reference set = kept centroids + provenance)::

    8s  magic   b"DVKREF01"
    u32 dim, keep, clusters
    f32 tau
    u64 seed
    f32[keep*dim]       centroids, row-major
    u32[keep]           votes, non-increasing

A demo dataset is a directory with an ``index.jsonl`` whose records are
grouped by demo id with strictly ascending ``t``, each naming a frame
file (relative path) plus proprio and action vectors.  Frame grids are
loaded lazily; everything else is validated eagerly on read.

Readers reject any violation with a structured error rather than ever
returning a silently wrong value.  Writers validate before touching the
filesystem and publish atomically (temp file + rename).
"""

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._util import atomic_write_bytes
from .errors import (
    AttentionOutOfRange,
    BadConfig,
    BadDims,
    BadFlags,
    BadIndex,
    BadMagic,
    DimMismatch,
    MissingFrame,
    MissingIndex,
    NonFiniteValue,
    Truncated,
    UnsortedVotes,
    ZeroNormPatch,
)

MAGIC_GRID = b"DVKEMB01"
MAGIC_REFS = b"DVKREF01"

FLAG_ATTENTION = 1 << 0
FLAG_CLS = 1 << 1
_KNOWN_FLAGS = FLAG_ATTENTION | FLAG_CLS

# Caps keep a corrupted header from asking for an absurd allocation.
_MAX_SIDE = 1 << 16
_MAX_ELEMENTS = 1 << 31

GRID_SUFFIX = ".dvkemb"
INDEX_NAME = "index.jsonl"
FRAMES_DIR = "frames"


class _Cursor:
    """Sequential reader over a bytes buffer with structured errors."""

    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise Truncated(
                f"{self.what}: need {self.pos + n} bytes, file has {len(self.buf)}"
            )
        view = memoryview(self.buf)[self.pos : self.pos + n]
        self.pos += n
        return view

    def u32(self) -> int:
        return int(np.frombuffer(self.take(4), dtype="<u4")[0])

    def u64(self) -> int:
        return int(np.frombuffer(self.take(8), dtype="<u8")[0])

    def f32(self) -> float:
        return float(np.frombuffer(self.take(4), dtype="<f4")[0])

    def f32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()

    def u32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<u4").copy()

    def u8(self) -> int:
        return self.take(1)[0]

    def expect_magic(self, magic: bytes) -> None:
        if len(self.buf) < len(magic):
            raise Truncated(f"{self.what}: shorter than the magic string")
        got = bytes(self.take(len(magic)))
        if got != magic:
            raise BadMagic(f"{self.what}: magic {got!r}, expected {magic!r}")

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise Truncated(
                f"{self.what}: {len(self.buf) - self.pos} trailing bytes after payload"
            )


def _check_side(name: str, value: int, what: str) -> None:
    if not 1 <= value <= _MAX_SIDE:
        raise BadDims(f"{what}: {name}={value} out of range [1, {_MAX_SIDE}]")


@dataclass(frozen=True)
class PatchGrid:
    """A rows x cols grid of patch embeddings for one frame.

    embeddings: (rows, cols, dim) float32, every patch with positive norm
    attention:  (rows, cols) float32 in [0, 1], or None
    cls:        (dim,) float32, or None
    frame_id:   identifier, set from the file stem on read (not stored)
    """

    embeddings: np.ndarray
    attention: np.ndarray | None = None
    cls: np.ndarray | None = None
    frame_id: str = ""

    @property
    def rows(self) -> int:
        return self.embeddings.shape[0]

    @property
    def cols(self) -> int:
        return self.embeddings.shape[1]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[2]

    def validate(self) -> None:
        e = self.embeddings
        if e.ndim != 3:
            raise BadDims(f"embeddings must be 3-d, got shape {e.shape}")
        if e.dtype != np.float32:
            raise BadDims(f"embeddings must be float32, got {e.dtype}")
        _check_side("rows", self.rows, "grid")
        _check_side("cols", self.cols, "grid")
        _check_side("dim", self.dim, "grid")
        if not np.isfinite(e).all():
            raise NonFiniteValue("grid embeddings contain a non-finite value")
        # positive norm <=> at least one nonzero component
        if not (e != 0).any(axis=2).all():
            bad = np.argwhere(~(e != 0).any(axis=2))[0]
            raise ZeroNormPatch(f"patch ({bad[0]}, {bad[1]}) has zero norm")
        a = self.attention
        if a is not None:
            if a.shape != (self.rows, self.cols) or a.dtype != np.float32:
                raise BadDims(
                    f"attention must be float32 {(self.rows, self.cols)}, "
                    f"got {a.dtype} {a.shape}"
                )
            if not np.isfinite(a).all():
                raise NonFiniteValue("attention plane contains a non-finite value")
            if ((a < 0) | (a > 1)).any():
                raise AttentionOutOfRange("attention values must lie in [0, 1]")
        c = self.cls
        if c is not None:
            if c.shape != (self.dim,) or c.dtype != np.float32:
                raise BadDims(f"cls must be float32 ({self.dim},), got {c.dtype} {c.shape}")
            if not np.isfinite(c).all():
                raise NonFiniteValue("cls vector contains a non-finite value")


def encode_grid(grid: PatchGrid) -> bytes:
    grid.validate()
    flags = 0
    if grid.attention is not None:
        flags |= FLAG_ATTENTION
    if grid.cls is not None:
        flags |= FLAG_CLS
    parts = [
        MAGIC_GRID,
        np.array([grid.rows, grid.cols, grid.dim, flags], dtype="<u4").tobytes(),
        np.ascontiguousarray(grid.embeddings, dtype="<f4").tobytes(),
    ]
    if grid.attention is not None:
        parts.append(np.ascontiguousarray(grid.attention, dtype="<f4").tobytes())
    if grid.cls is not None:
        parts.append(np.ascontiguousarray(grid.cls, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_grid(buf: bytes, frame_id: str = "", what: str = "grid") -> PatchGrid:
    cur = _Cursor(buf, what)
    cur.expect_magic(MAGIC_GRID)
    rows, cols, dim, flags = cur.u32(), cur.u32(), cur.u32(), cur.u32()
    _check_side("rows", rows, what)
    _check_side("cols", cols, what)
    _check_side("dim", dim, what)
    if rows * cols * dim > _MAX_ELEMENTS:
        raise BadDims(f"{what}: {rows}x{cols}x{dim} exceeds the element cap")
    if flags & ~_KNOWN_FLAGS:
        raise BadFlags(f"{what}: unknown flag bits 0x{flags & ~_KNOWN_FLAGS:x}")
    emb = cur.f32_array(rows * cols * dim).reshape(rows, cols, dim)
    attention = None
    if flags & FLAG_ATTENTION:
        attention = cur.f32_array(rows * cols).reshape(rows, cols)
    cls = None
    if flags & FLAG_CLS:
        cls = cur.f32_array(dim)
    cur.finish()
    grid = PatchGrid(embeddings=emb, attention=attention, cls=cls, frame_id=frame_id)
    grid.validate()
    return grid


def write_grid(path, grid: PatchGrid) -> None:
    atomic_write_bytes(path, encode_grid(grid))


def read_grid(path) -> PatchGrid:
    path = Path(path)
    return decode_grid(path.read_bytes(), frame_id=path.stem, what=str(path))


@dataclass(frozen=True)
class RefConfig:
    """Provenance of a reference set: how voting was configured."""

    clusters: int
    keep: int
    tau: float
    seed: int

    def validate(self) -> None:
        if self.keep < 1:
            raise BadConfig(f"keep={self.keep}, must be >= 1")
        if self.keep > self.clusters:
            raise BadConfig(f"keep={self.keep} exceeds clusters={self.clusters}")
        if not (np.isfinite(self.tau) and 0.0 <= self.tau <= 1.0):
            raise BadConfig(f"tau={self.tau} must lie in [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise BadConfig(f"seed={self.seed} must fit in an unsigned 64-bit field")


@dataclass(frozen=True)
class ReferenceSet:
    """Kept centroids (vote-ranked, f32) plus the config that produced them.

    all_votes_zero is an in-memory warning only; it is not serialized.
    """

    centroids: np.ndarray
    votes: np.ndarray
    config: RefConfig
    all_votes_zero: bool = False

    @property
    def keep(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def validate(self) -> None:
        self.config.validate()
        c = self.centroids
        if c.ndim != 2 or c.dtype != np.float32:
            raise BadDims(f"centroids must be 2-d float32, got {c.dtype} {c.shape}")
        if c.shape[0] != self.config.keep:
            raise BadConfig(
                f"{c.shape[0]} centroids stored but config keep={self.config.keep}"
            )
        _check_side("dim", self.dim, "references")
        if not np.isfinite(c).all():
            raise NonFiniteValue("centroids contain a non-finite value")
        if not (c != 0).any(axis=1).all():
            raise ZeroNormPatch("a centroid has zero norm")
        v = self.votes
        if v.shape != (self.keep,) or v.dtype != np.uint32:
            raise BadDims(f"votes must be uint32 ({self.keep},), got {v.dtype} {v.shape}")
        if self.keep > 1 and (np.diff(v.astype(np.int64)) > 0).any():
            raise UnsortedVotes("votes must be non-increasing")


def encode_references(refs: ReferenceSet) -> bytes:
    refs.validate()
    head = np.array([refs.dim, refs.keep, refs.config.clusters], dtype="<u4").tobytes()
    return b"".join(
        [
            MAGIC_REFS,
            head,
            np.array([refs.config.tau], dtype="<f4").tobytes(),
            np.array([refs.config.seed], dtype="<u8").tobytes(),
            np.ascontiguousarray(refs.centroids, dtype="<f4").tobytes(),
            np.ascontiguousarray(refs.votes, dtype="<u4").tobytes(),
        ]
    )


def decode_references(buf: bytes, what: str = "references") -> ReferenceSet:
    cur = _Cursor(buf, what)
    cur.expect_magic(MAGIC_REFS)
    dim, keep, clusters = cur.u32(), cur.u32(), cur.u32()
    _check_side("dim", dim, what)
    if keep < 1 or clusters < 1 or keep * dim > _MAX_ELEMENTS:
        raise BadDims(f"{what}: keep={keep}, clusters={clusters}, dim={dim}")
    tau = cur.f32()
    seed = cur.u64()
    centroids = cur.f32_array(keep * dim).reshape(keep, dim)
    votes = cur.u32_array(keep)
    cur.finish()
    refs = ReferenceSet(
        centroids=centroids,
        votes=votes,
        config=RefConfig(clusters=clusters, keep=keep, tau=tau, seed=seed),
        all_votes_zero=bool(votes.max() == 0),
    )
    refs.validate()
    return refs


def write_references(path, refs: ReferenceSet) -> None:
    atomic_write_bytes(path, encode_references(refs))


def read_references(path) -> ReferenceSet:
    return decode_references(Path(path).read_bytes(), what=str(path))


@dataclass(frozen=True)
class DemoStep:
    t: int
    frame_path: Path
    proprio: np.ndarray
    action: np.ndarray

    def load_frame(self) -> PatchGrid:
        return read_grid(self.frame_path)


@dataclass(frozen=True)
class Demonstration:
    demo_id: int
    steps: tuple = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class DemoDataset:
    root: Path
    demos: tuple
    proprio_dim: int
    action_dim: int

    @property
    def num_demos(self) -> int:
        return len(self.demos)

    @property
    def num_steps(self) -> int:
        return sum(len(d) for d in self.demos)

    def iter_steps(self):
        for demo in self.demos:
            for step in demo.steps:
                yield demo, step


def _vector(record: dict, key: str, line_no: int) -> np.ndarray:
    value = record.get(key)
    if not isinstance(value, list) or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in value
    ):
        raise BadIndex(f"index line {line_no}: {key!r} must be a list of numbers")
    arr = np.asarray(value, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"index line {line_no}: {key!r} has a non-finite value")
    return arr


def read_demos(root) -> DemoDataset:
    """Load and validate a demo dataset directory.

    The index is checked eagerly (ordering, dims, frame existence); frame
    grids themselves load lazily via DemoStep.load_frame.
    """
    root = Path(root)
    index = root / INDEX_NAME
    if not index.is_file():
        raise MissingIndex(f"{index} not found")
    demos: list[Demonstration] = []
    steps: list[DemoStep] = []
    seen: set[int] = set()
    current: int | None = None
    proprio_dim: int | None = None
    action_dim: int | None = None
    with index.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BadIndex(f"index line {line_no}: not valid JSON ({exc})") from exc
            if not isinstance(record, dict):
                raise BadIndex(f"index line {line_no}: record must be an object")
            demo = record.get("demo")
            t = record.get("t")
            frame = record.get("frame")
            if not isinstance(demo, int) or not isinstance(t, int):
                raise BadIndex(f"index line {line_no}: 'demo' and 't' must be integers")
            if not isinstance(frame, str) or not frame:
                raise BadIndex(f"index line {line_no}: 'frame' must be a relative path")
            frame_path = Path(frame)
            if frame_path.is_absolute() or ".." in frame_path.parts:
                raise BadIndex(f"index line {line_no}: frame path must stay inside the dataset")
            proprio = _vector(record, "proprio", line_no)
            action = _vector(record, "action", line_no)
            if proprio_dim is None:
                proprio_dim, action_dim = len(proprio), len(action)
            else:
                if len(proprio) != proprio_dim:
                    raise DimMismatch(
                        f"index line {line_no}: proprio has {len(proprio)} entries, "
                        f"expected {proprio_dim}"
                    )
                if len(action) != action_dim:
                    raise DimMismatch(
                        f"index line {line_no}: action has {len(action)} entries, "
                        f"expected {action_dim}"
                    )
            if demo != current:
                if demo in seen:
                    raise BadIndex(
                        f"index line {line_no}: demo {demo} appears in two groups"
                    )
                if current is not None:
                    demos.append(Demonstration(demo_id=current, steps=tuple(steps)))
                seen.add(demo)
                current = demo
                steps = []
            elif steps and t <= steps[-1].t:
                raise BadIndex(
                    f"index line {line_no}: t={t} not ascending within demo {demo}"
                )
            full = root / frame_path
            if not full.is_file():
                raise MissingFrame(f"index line {line_no}: frame {frame!r} not found")
            steps.append(DemoStep(t=t, frame_path=full, proprio=proprio, action=action))
    if current is not None:
        demos.append(Demonstration(demo_id=current, steps=tuple(steps)))
    return DemoDataset(
        root=root,
        demos=tuple(demos),
        proprio_dim=proprio_dim or 0,
        action_dim=action_dim or 0,
    )


def write_demos(root, demos, overwrite: bool = False) -> DemoDataset:
    """Write a demo dataset directory and return it re-read (validated).

    demos: iterable of step lists, one per demonstration, each step a
    (PatchGrid, proprio, action) triple.  Demo ids are assigned 0..n-1
    and t runs 0..len-1.  The directory is built in a temp sibling and
    renamed into place, so a failed write leaves no partial dataset.
    """
    root = Path(root)
    if root.exists():
        if not overwrite:
            raise FileExistsError(f"{root} already exists")
        shutil.rmtree(root)
    root.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=root.parent, prefix=root.name + ".tmp"))
    try:
        (tmp / FRAMES_DIR).mkdir()
        lines = []
        for demo_id, steps in enumerate(demos):
            for t, (grid, proprio, action) in enumerate(steps):
                rel = f"{FRAMES_DIR}/d{demo_id:05d}_t{t:03d}{GRID_SUFFIX}"
                write_grid(tmp / rel, grid)
                record = {
                    "demo": demo_id,
                    "t": t,
                    "frame": rel,
                    "proprio": [float(np.float32(x)) for x in np.asarray(proprio).ravel()],
                    "action": [float(np.float32(x)) for x in np.asarray(action).ravel()],
                }
                lines.append(json.dumps(record))
        (tmp / INDEX_NAME).write_text("".join(l + "\n" for l in lines), encoding="utf-8")
        os.replace(tmp, root)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return read_demos(root)
