"""Part correspondence across two mug photos, end to end through the
consumer pipeline: export both images, turn one handle patch into a
reference file, and check the match lands on the other mug's handle."""

import json
import shutil
import subprocess

import numpy as np
from PIL import Image, ImageDraw

from dino_exporter.config import ExportConfig
from dino_exporter.export import export_images, reference_from_cell

PATCH = 16


def handle_cells(handle_box, body_box, size=224):
    """Grid cells covered by the visible part of the handle ring."""
    ring = Image.new("L", (size, size), 0)
    d = ImageDraw.Draw(ring)
    d.ellipse(handle_box, outline=255, width=14)
    body = Image.new("L", (size, size), 0)
    ImageDraw.Draw(body).rounded_rectangle(body_box, radius=14, fill=255)
    visible = np.logical_and(np.asarray(ring) > 0, np.asarray(body) == 0)
    cells = set()
    side = size // PATCH
    for r in range(side):
        for c in range(side):
            tile = visible[r * PATCH:(r + 1) * PATCH, c * PATCH:(c + 1) * PATCH]
            if tile.sum() >= 24:  # ignore slivers
                cells.add((r, c))
    return cells


def test_handle_matches_handle(tmp_path, mug_pair):
    dvk = shutil.which("dvk")
    assert dvk, "primary CLI must be installed for the correspondence demo"
    cfg = ExportConfig(model="local")
    grids = {
        name: export_images(mug_pair[name], tmp_path / "emb", cfg)[0]
        for name in ("a", "b")
    }
    ay, ax = mug_pair["a_handle_px"]
    ref = tmp_path / "handle.dvkref"
    reference_from_cell(grids["a"], ay // PATCH, ax // PATCH, ref)

    out = tmp_path / "match"
    proc = subprocess.run(
        [dvk, "extract", "--refs", str(ref), str(grids["b"]),
         "--out", str(out), "--overlay"],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0, proc.stderr
    record = json.loads((out / "keypoints.jsonl").read_text().splitlines()[0])
    row, col = record["points"][0]["row"], record["points"][0]["col"]

    target = handle_cells(handle_box=(128, 80, 196, 170), body_box=(30, 40, 140, 200))
    near = {(r + dr, c + dc) for r, c in target for dr in (-1, 0, 1) for dc in (-1, 0, 1)}
    assert (row, col) in near, f"matched ({row},{col}), handle cells {sorted(target)}"

    overlays = list(out.glob("overlays/*.ppm"))
    assert overlays, "qualitative overlay image must be produced"
    assert overlays[0].read_bytes().startswith(b"P6")
