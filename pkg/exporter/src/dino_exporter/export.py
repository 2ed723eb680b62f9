"""Top-level export pipeline: images in, DVKEMB01 files out."""

import os
from pathlib import Path

import numpy as np

from .config import ExportConfig
from .errors import BadConfig, SizeMismatch
from .grid_files import read_grid, write_grid, write_reference
from .images import IMAGE_SUFFIXES, load_rgb


def make_backend(config: ExportConfig):
    config.validate()
    if config.model == "local":
        from .local import LocalBackend

        return LocalBackend(config.patch_size)
    from .vit import VitBackend

    return VitBackend(config.model, config.patch_size, config.weights, config.device)


def normalize_attention(raw: np.ndarray) -> np.ndarray:
    """Map a raw saliency plane onto [0,1] per image (min to 0, max to 1)."""
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo < 1e-12:
        return np.full(raw.shape, 0.5, dtype=np.float32)
    return ((raw - lo) / (hi - lo)).astype(np.float32)


def list_images(path) -> list:
    p = Path(path)
    if p.is_file():
        return [p]
    if p.is_dir():
        found = sorted(
            child for child in p.iterdir()
            if child.is_file() and child.suffix.lower() in IMAGE_SUFFIXES
        )
        if not found:
            raise BadConfig(f"no images under {p}")
        return found
    raise BadConfig(f"no such file or directory: {p}")


def export_images(in_path, out_dir, config: ExportConfig, backend=None) -> list:
    """Export every image under in_path; returns the written file paths."""
    backend = backend or make_backend(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for image_path in list_images(in_path):
        image = load_rgb(image_path, config.image_size)
        emb, raw_attention, cls = backend.features(image)
        side = config.grid_side
        if emb.shape[:2] != (side, side):
            raise SizeMismatch(f"backend produced {emb.shape[:2]}, expected {(side, side)}")
        target = out / (image_path.stem + ".dvkemb")
        write_grid(
            target,
            emb,
            attention=normalize_attention(raw_attention),
            cls=cls if config.with_cls else None,
        )
        written.append(target)
    return written


def reference_from_cell(grid_path, row: int, col: int, ref_path) -> None:
    """Turn one exported patch into a single-centroid DVKREF01 file.

    This is the bridge for correspondence demos: pick a cell (say, a
    mug handle) in one exported image and match it in others.
    """
    emb, _, _ = read_grid(grid_path)
    rows, cols, _ = emb.shape
    if not (0 <= row < rows and 0 <= col < cols):
        raise BadConfig(f"cell ({row},{col}) outside {rows}x{cols} grid")
    write_reference(ref_path, emb[row, col][None, :], votes=[1])
    if not os.path.exists(ref_path):
        raise BadConfig(f"failed to write {ref_path}")
