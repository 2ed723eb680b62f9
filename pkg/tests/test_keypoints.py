"""Keypoint extraction against a brute-force scan oracle."""

import numpy as np
import pytest

from dvk.errors import DimMismatch, ZeroNorm
from dvk.formats import PatchGrid, RefConfig, ReferenceSet
from dvk.keypoints import cosine, extract_keypoints, policy_input


def brute_force_best(grid, centroid):
    """Naive double loop: exact cosine per cell, first maximum wins."""
    best = (-2.0, None)
    for r in range(grid.rows):
        for c in range(grid.cols):
            v = grid.embeddings[r, c].astype(np.float64)
            w = centroid.astype(np.float64)
            sim = float(v @ w / (np.linalg.norm(v) * np.linalg.norm(w)))
            if sim > best[0]:
                best = (sim, (r, c))
    return best


def make_refs(cent):
    cent = cent.astype(np.float32)
    votes = np.arange(len(cent), 0, -1, dtype=np.uint32)
    cfg = RefConfig(clusters=len(cent) + 2, keep=len(cent), tau=0.2, seed=0)
    return ReferenceSet(centroids=cent, votes=votes, config=cfg)


def test_cosine_basics():
    a = np.array([1.0, 0.0])
    b = np.array([0.0, 2.0])
    assert cosine(a, b) == pytest.approx(0.0)
    assert cosine(a, a) == pytest.approx(1.0)
    assert cosine(a, -a) == pytest.approx(-1.0)
    assert -1.0 <= cosine(np.array([1e20, 1e20]), np.array([1e20, 1e20])) <= 1.0
    with pytest.raises(DimMismatch):
        cosine(a, np.array([1.0, 2.0, 3.0]))
    with pytest.raises(ZeroNorm):
        cosine(a, np.zeros(2))


def test_matches_brute_force_on_random_grids():
    rng = np.random.default_rng(0)
    for trial in range(50):
        rows = int(rng.integers(1, 7))
        cols = int(rng.integers(1, 7))
        dim = int(rng.integers(2, 9))
        n_refs = int(rng.integers(1, 5))
        grid = PatchGrid(
            embeddings=rng.standard_normal((rows, cols, dim)).astype(np.float32)
        )
        refs = make_refs(rng.standard_normal((n_refs, dim)))
        kps = extract_keypoints(grid, refs)
        assert len(kps) == n_refs
        for ref_i, kp in enumerate(kps.points):
            sim, cell = brute_force_best(grid, refs.centroids[ref_i])
            assert (kp.row, kp.col) == cell
            assert kp.similarity == pytest.approx(sim, abs=1e-6)
            assert kp.u == pytest.approx((kp.col + 0.5) / cols)
            assert kp.v == pytest.approx((kp.row + 0.5) / rows)


def test_tie_breaks_to_first_row_major_cell():
    dim = 4
    target = np.zeros(dim, dtype=np.float32)
    target[0] = 1.0
    emb = np.tile(np.array([0.0, 1.0, 0.0, 0.0], dtype=np.float32), (3, 3, 1))
    # two exact copies of the target, at (1, 2) and (2, 0); row-major first wins
    emb[1, 2] = target
    emb[2, 0] = target
    grid = PatchGrid(embeddings=emb)
    kps = extract_keypoints(grid, make_refs(target[None, :])).points
    assert (kps[0].row, kps[0].col) == (1, 2)


def test_dim_mismatch_raises():
    rng = np.random.default_rng(1)
    grid = PatchGrid(embeddings=rng.standard_normal((2, 2, 5)).astype(np.float32))
    refs = make_refs(rng.standard_normal((2, 4)))
    with pytest.raises(DimMismatch):
        extract_keypoints(grid, refs)


def test_zero_norm_patch_raises():
    emb = np.ones((2, 2, 3), dtype=np.float32)
    emb[0, 1] = 0.0
    grid = PatchGrid(embeddings=emb)
    refs = make_refs(np.ones((1, 3)))
    with pytest.raises(ZeroNorm):
        extract_keypoints(grid, refs)


def test_policy_input_layout():
    rng = np.random.default_rng(2)
    grid = PatchGrid(embeddings=rng.standard_normal((4, 5, 3)).astype(np.float32))
    refs = make_refs(rng.standard_normal((3, 3)))
    kps = extract_keypoints(grid, refs)
    proprio = np.array([0.25, 0.5, 1.0])
    x = policy_input(kps, proprio)
    assert x.shape == (2 * 3 + 3,)
    for i, kp in enumerate(kps.points):
        assert x[2 * i] == pytest.approx(kp.u)
        assert x[2 * i + 1] == pytest.approx(kp.v)
    assert np.allclose(x[-3:], proprio)
