"""Per-frame keypoint extraction by cosine matching against references.

Each reference centroid lands on exactly one grid cell: the patch whose
embedding has the highest cosine similarity.  There is no presence
threshold; an absent concept still yields the location of whatever
matches best.  Ties resolve to the smaller row-major patch index, so
extraction is deterministic.
"""

from dataclasses import dataclass

import numpy as np

from ._util import atomic_write_bytes
from .errors import DimMismatch, ZeroNorm
from .formats import PatchGrid, ReferenceSet


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors, computed in float64, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimMismatch(f"cosine: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNorm("cosine is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class Keypoint:
    """One matched cell: integer grid location plus normalized coordinates.

    u = (col + 0.5) / cols and v = (row + 0.5) / rows, the cell center in
    [0, 1] with u horizontal and v vertical.
    """

    row: int
    col: int
    u: float
    v: float
    similarity: float


@dataclass(frozen=True)
class KeypointVector:
    """Keypoints in reference order for one frame."""

    points: tuple
    frame_id: str = ""

    def __len__(self) -> int:
        return len(self.points)

    def as_uv(self) -> np.ndarray:
        """(keep, 2) float64 array of (u, v) pairs in reference order."""
        return np.array([[p.u, p.v] for p in self.points], dtype=np.float64)


def extract_keypoints(grid: PatchGrid, refs: ReferenceSet) -> KeypointVector:
    """Match every reference centroid to its best patch in one grid."""
    if grid.dim != refs.dim:
        raise DimMismatch(f"grid dim {grid.dim} vs reference dim {refs.dim}")
    rows, cols = grid.rows, grid.cols
    flat = grid.embeddings.reshape(rows * cols, grid.dim).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    if (norms == 0).any():
        raise ZeroNorm("grid has a zero-norm patch")
    flat = flat / norms[:, None]
    cents = refs.centroids.astype(np.float64)
    cents = cents / np.linalg.norm(cents, axis=1)[:, None]
    sims = cents @ flat.T  # (keep, rows*cols)
    best = np.argmax(sims, axis=1)  # first max wins: smallest row-major index
    points = []
    for k, idx in enumerate(best):
        r, c = divmod(int(idx), cols)
        points.append(
            Keypoint(
                row=r,
                col=c,
                u=(c + 0.5) / cols,
                v=(r + 0.5) / rows,
                similarity=float(np.clip(sims[k, idx], -1.0, 1.0)),
            )
        )
    return KeypointVector(points=tuple(points), frame_id=grid.frame_id)


def policy_input(kv: KeypointVector, proprio: np.ndarray) -> np.ndarray:
    """Flatten keypoints and proprio into one policy input vector.

    Layout: [u_0, v_0, u_1, v_1, ..., proprio...], float64.
    """
    flat = kv.as_uv().ravel()
    proprio = np.asarray(proprio, dtype=np.float64).ravel()
    return np.concatenate([flat, proprio])


def render_overlay(grid: PatchGrid, kv: KeypointVector, scale: int = 16) -> bytes:
    """Render a PPM (P6) overlay: attention as grayscale, keypoint cells in red.

    Purely a debugging aid; the base image is the attention plane when
    present, otherwise mid-gray.
    """
    rows, cols = grid.rows, grid.cols
    if grid.attention is not None:
        base = (np.asarray(grid.attention, dtype=np.float64) * 255).astype(np.uint8)
    else:
        base = np.full((rows, cols), 128, dtype=np.uint8)
    img = np.repeat(base[:, :, None], 3, axis=2)
    for p in kv.points:
        img[p.row, p.col] = (255, 40, 40)
    img = np.kron(img, np.ones((scale, scale, 1), dtype=np.uint8))
    header = f"P6\n{cols * scale} {rows * scale}\n255\n".encode("ascii")
    return header + img.tobytes()


def write_overlay(path, grid: PatchGrid, kv: KeypointVector, scale: int = 16) -> None:
    atomic_write_bytes(path, render_overlay(grid, kv, scale=scale))
