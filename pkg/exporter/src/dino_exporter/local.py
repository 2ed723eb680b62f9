"""Weights-free appearance descriptor backend.

Computes a hand-crafted per-patch descriptor (color statistics, color
histograms, gradient orientation histograms) and projects it into a
384-d space with a fixed seeded Gaussian matrix, so cosine similarity
between patches reflects local appearance.  Deterministic, needs no
checkpoint; exists for tests, offline smoke runs, and the qualitative
correspondence demo.
"""

import numpy as np

OUT_DIM = 384
_RAW_DIM = 31
_PROJECT = np.random.default_rng(716253).standard_normal((_RAW_DIM, OUT_DIM)) / np.sqrt(_RAW_DIM)


def _patch_descriptor(patch: np.ndarray) -> np.ndarray:
    """patch: (p, p, 3) float32 in [0,1] -> (31,) float64."""
    gray = patch.mean(axis=2)
    gx = np.diff(gray, axis=1, append=gray[:, -1:])
    gy = np.diff(gray, axis=0, append=gray[-1:, :])
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)  # [-pi, pi]
    ori_hist, _ = np.histogram(ang, bins=8, range=(-np.pi, np.pi), weights=mag)
    total = mag.sum()
    if total > 0:
        ori_hist = ori_hist / total
    color_hist = np.concatenate([
        np.histogram(patch[:, :, c], bins=4, range=(0.0, 1.0))[0] for c in range(3)
    ]) / patch[:, :, 0].size
    lum = np.percentile(gray, (25, 50, 75))
    feats = np.concatenate([
        patch.mean(axis=(0, 1)) - 0.5,        # 3: mean color, centered
        patch.std(axis=(0, 1)),               # 3: color spread
        color_hist - 1.0 / 4.0,               # 12: centered occupancy
        [mag.mean() * 4.0, mag.std() * 4.0],  # 2: edge energy
        ori_hist,                             # 8: edge directions
        lum - 0.5,                            # 3: brightness profile
    ])
    return feats


class LocalBackend:
    """Patch-appearance features; same call surface as the ViT backend."""

    def __init__(self, patch: int):
        self.patch = patch

    def features(self, image: np.ndarray):
        side = image.shape[0] // self.patch
        emb = np.zeros((side, side, OUT_DIM), dtype=np.float32)
        energy = np.zeros((side, side), dtype=np.float32)
        border = np.concatenate([
            image[0].reshape(-1, 3), image[-1].reshape(-1, 3),
            image[:, 0].reshape(-1, 3), image[:, -1].reshape(-1, 3),
        ]).mean(axis=0)
        for r in range(side):
            for c in range(side):
                patch = image[
                    r * self.patch:(r + 1) * self.patch,
                    c * self.patch:(c + 1) * self.patch,
                ]
                raw = _patch_descriptor(patch)
                emb[r, c] = (raw @ _PROJECT).astype(np.float32)
                contrast = np.abs(patch.mean(axis=(0, 1)) - border).sum()
                edges = np.abs(np.diff(patch.mean(axis=2), axis=0)).mean()
                energy[r, c] = contrast + 8.0 * edges
        # histograms make an all-zero descriptor impossible, but guard anyway
        norms = np.linalg.norm(emb.reshape(-1, OUT_DIM), axis=1)
        if (norms == 0.0).any():
            emb[..., 0] += 1e-6
        cls = emb.mean(axis=(0, 1))
        return emb, energy, cls
