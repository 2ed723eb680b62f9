"""Reference initialization: pool demo features, cluster, vote, keep the top.

Pipeline over a demo dataset:

1. collect_features pools patch embeddings (with bookkeeping of which
   frame and cell each came from) from every stride-th step of every demo.
2. kmeans runs Lloyd's algorithm with k-means++ seeding on L2-normalized
   copies, squared-Euclidean distance, centroids re-normalized to unit
   length after every update.
3. saliency scores each (frame, cluster) pair as the mean attention of
   the cluster's patches within that frame.
4. vote_and_select counts, per cluster, the frames whose saliency
   strictly exceeds tau, then keeps the top-voted centroids.

Everything is deterministic given the dataset, the config, and the seed.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadConfig,
    DegenerateBag,
    MissingAttention,
    NoFrames,
    TooFewPoints,
)
from .formats import DemoDataset, RefConfig, ReferenceSet


@dataclass
class FeatureBag:
    """Pooled patch features plus provenance arrays (all parallel).

    vectors hold the raw (unnormalized) embeddings in float64; frame
    attention planes are kept per selected frame for saliency scoring.
    """

    vectors: np.ndarray  # (n, dim) float64
    frame_index: np.ndarray  # (n,) int32, index into attentions
    patch_row: np.ndarray  # (n,) int32
    patch_col: np.ndarray  # (n,) int32
    attentions: list = field(default_factory=list)  # per frame, (rows, cols) float64
    dim: int = 0

    @property
    def num_points(self) -> int:
        return self.vectors.shape[0]

    @property
    def num_frames(self) -> int:
        return len(self.attentions)


def collect_features(dataset: DemoDataset, stride: int = 1) -> FeatureBag:
    """Pool every patch of every stride-th step per demo into one bag.

    Steps are subsampled by position within each demo (0, stride, ...).
    Every selected frame must carry an attention plane.
    """
    if stride < 1:
        raise BadConfig(f"stride={stride}, must be >= 1")
    vectors = []
    frame_idx = []
    rows_ = []
    cols_ = []
    attentions = []
    dim = None
    for demo in dataset.demos:
        for pos, step in enumerate(demo.steps):
            if pos % stride:
                continue
            grid = step.load_frame()
            if grid.attention is None:
                raise MissingAttention(f"frame {grid.frame_id!r} has no attention plane")
            if dim is None:
                dim = grid.dim
            r, c = grid.rows, grid.cols
            vectors.append(grid.embeddings.reshape(r * c, grid.dim).astype(np.float64))
            cell = np.arange(r * c, dtype=np.int32)
            frame_idx.append(np.full(r * c, len(attentions), dtype=np.int32))
            rows_.append(cell // c)
            cols_.append(cell % c)
            attentions.append(np.asarray(grid.attention, dtype=np.float64))
    if not attentions:
        raise NoFrames("dataset contributed no frames")
    return FeatureBag(
        vectors=np.concatenate(vectors, axis=0),
        frame_index=np.concatenate(frame_idx),
        patch_row=np.concatenate(rows_),
        patch_col=np.concatenate(cols_),
        attentions=attentions,
        dim=int(dim),
    )


@dataclass
class Clustering:
    """K-means result: unit-norm centroids, per-point assignment, inertia trace."""

    centroids: np.ndarray  # (clusters, dim) float64, unit rows
    assignment: np.ndarray  # (num_points,) int32
    inertia_trace: list = field(default_factory=list)

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1)[:, None]

def _plusplus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: D^2-weighted draws without replacement in effect."""
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    # squared Euclidean distance to the nearest chosen centroid so far
    d2 = np.maximum(2.0 - 2.0 * (x @ centroids[0]), 0.0)
    for j in range(1, k):
        total = d2.sum()
        idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = x[idx]
        d2 = np.minimum(d2, np.maximum(2.0 - 2.0 * (x @ centroids[j]), 0.0))
    return centroids


def kmeans(
    bag: FeatureBag,
    clusters: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> Clustering:
    """Lloyd's algorithm on L2-normalized features.

    Mean centroids are re-normalized to unit length after every update;
    for unit-norm points the normalized mean is the inertia-optimal unit
    centroid, so the recorded inertia trace never increases.  Empty
    clusters are re-seeded to the point currently farthest from its own
    centroid.  Stops when the inertia improvement drops below tol, the
    assignment stops changing, or max_iter assignments have run.
    """
    if clusters < 1:
        raise BadConfig(f"clusters={clusters}, must be >= 1")
    if max_iter < 1:
        raise BadConfig(f"max_iter={max_iter}, must be >= 1")
    x = _normalize_rows(bag.vectors.astype(np.float64, copy=False))
    n = x.shape[0]
    distinct = np.unique(x, axis=0).shape[0]
    if distinct == 1 and clusters > 1:
        raise DegenerateBag("all features are identical; cannot split into clusters")
    if clusters > distinct:
        raise TooFewPoints(f"{distinct} distinct features cannot seed {clusters} clusters")
    rng = np.random.default_rng(seed)
    centroids = _plusplus_init(x, clusters, rng)

    trace: list[float] = []
    prev_inertia = math.inf
    prev_labels: np.ndarray | None = None
    labels = np.zeros(n, dtype=np.int32)
    for it in range(max_iter):
        sims = x @ centroids.T  # (n, clusters)
        labels = np.argmax(sims, axis=1).astype(np.int32)
        d2 = np.maximum(2.0 - 2.0 * sims[np.arange(n), labels], 0.0)
        inertia = float(d2.sum())
        trace.append(inertia)
        if prev_inertia - inertia < tol:
            break
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        prev_inertia = inertia
        prev_labels = labels
        if it == max_iter - 1:
            break
        # update step
        sums = np.zeros((clusters, x.shape[1]), dtype=np.float64)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=clusters).astype(np.float64)
        norms = np.linalg.norm(sums, axis=1)
        dead = (counts == 0) | (norms == 0)
        alive = ~dead
        centroids = np.where(alive[:, None], sums / np.where(norms == 0, 1.0, norms)[:, None], centroids)
        if dead.any():
            # farthest-point re-seeding, one point per dead cluster
            cand = d2.copy()
            for j in np.flatnonzero(dead):
                p = int(np.argmax(cand))
                centroids[j] = x[p]
                cand[p] = -np.inf
    return Clustering(centroids=centroids, assignment=labels, inertia_trace=trace)


@dataclass
class SaliencyTable:
    """Per (frame, cluster) mean attention; NaN where a cluster is absent."""

    sal: np.ndarray  # (num_frames, clusters) float64

    @property
    def num_frames(self) -> int:
        return self.sal.shape[0]

    @property
    def num_clusters(self) -> int:
        return self.sal.shape[1]


def saliency(clustering: Clustering, bag: FeatureBag) -> SaliencyTable:
    """Mean attention of each cluster's patches within each frame."""
    if clustering.assignment.shape[0] != bag.num_points:
        raise BadConfig(
            f"assignment covers {clustering.assignment.shape[0]} points, "
            f"bag has {bag.num_points}"
        )
    j = bag.num_frames
    m = clustering.num_clusters
    shapes = {a.shape for a in bag.attentions}
    if len(shapes) == 1:
        stack = np.stack(bag.attentions)
        att = stack[bag.frame_index, bag.patch_row, bag.patch_col]
    else:
        att = np.array(
            [
                bag.attentions[f][bag.patch_row[i], bag.patch_col[i]]
                for i, f in enumerate(bag.frame_index)
            ]
        )
    sums = np.zeros((j, m), dtype=np.float64)
    counts = np.zeros((j, m), dtype=np.float64)
    np.add.at(sums, (bag.frame_index, clustering.assignment), att)
    np.add.at(counts, (bag.frame_index, clustering.assignment), 1.0)
    with np.errstate(invalid="ignore"):
        sal = np.where(counts > 0, sums / np.where(counts == 0, 1.0, counts), np.nan)
    return SaliencyTable(sal=sal)


def vote_and_select(
    table: SaliencyTable,
    clustering: Clustering,
    tau: float,
    keep: int,
    seed: int,
) -> ReferenceSet:
    """Count frames with saliency strictly above tau; keep the top centroids.

    sal == tau does not vote.  Ties in vote count break toward the lower
    cluster index (stable).  Zero votes everywhere is not an error: the
    selection still proceeds and the result carries all_votes_zero=True.
    """
    clusters = clustering.num_clusters
    config = RefConfig(clusters=clusters, keep=keep, tau=tau, seed=seed)
    config.validate()
    with np.errstate(invalid="ignore"):
        votes = np.nansum(table.sal > tau, axis=0).astype(np.int64)
    order = np.argsort(-votes, kind="stable")[:keep]
    return ReferenceSet(
        centroids=clustering.centroids[order].astype(np.float32),
        votes=votes[order].astype(np.uint32),
        config=config,
        all_votes_zero=bool(votes.max(initial=0) == 0),
    )


@dataclass(frozen=True)
class InitConfig:
    """Defaults for one-call reference initialization."""

    clusters: int = 100
    keep: int = 50
    tau: float = 0.2
    seed: int = 0
    stride: int = 5
    max_iter: int = 100
    tol: float = 1e-6


def init_references(
    dataset: DemoDataset,
    config: InitConfig = InitConfig(),
    report: dict | None = None,
) -> ReferenceSet:
    """collect_features -> kmeans -> saliency -> vote_and_select.

    When report is a dict it is filled in place with per-cluster
    diagnostics (sizes, votes, kept flags) for a clusters.json artifact.
    """
    bag = collect_features(dataset, stride=config.stride)
    clustering = kmeans(
        bag,
        clusters=config.clusters,
        seed=config.seed,
        max_iter=config.max_iter,
        tol=config.tol,
    )
    table = saliency(clustering, bag)
    refs = vote_and_select(table, clustering, config.tau, config.keep, config.seed)
    if report is not None:
        with np.errstate(invalid="ignore"):
            votes = np.nansum(table.sal > config.tau, axis=0).astype(np.int64)
        sizes = np.bincount(clustering.assignment, minlength=config.clusters)
        kept = set(np.argsort(-votes, kind="stable")[: config.keep].tolist())
        report.update(
            {
                "num_points": int(bag.num_points),
                "num_frames": int(bag.num_frames),
                "inertia_trace": [float(v) for v in clustering.inertia_trace],
                "all_votes_zero": refs.all_votes_zero,
                "clusters": [
                    {
                        "cluster": int(jj),
                        "size": int(sizes[jj]),
                        "votes": int(votes[jj]),
                        "kept": jj in kept,
                    }
                    for jj in range(config.clusters)
                ],
            }
        )
    return refs
