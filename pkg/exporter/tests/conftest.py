import numpy as np
import pytest
from PIL import Image, ImageDraw


def draw_mug(size, body_box, handle_box, body_color, background=(235, 235, 230)):
    """A flat-color mug silhouette: rounded body plus a ring handle."""
    im = Image.new("RGB", (size, size), background)
    d = ImageDraw.Draw(im)
    d.rounded_rectangle(body_box, radius=14, fill=body_color)
    d.ellipse(handle_box, outline=body_color, width=14)
    return im


@pytest.fixture()
def mug_pair(tmp_path):
    """Two mug photos with known handle locations (in pixels)."""
    a = draw_mug(
        224, body_box=(40, 60, 130, 190), handle_box=(120, 90, 180, 160),
        body_color=(40, 80, 170),
    )
    b = draw_mug(
        224, body_box=(30, 40, 140, 200), handle_box=(128, 80, 196, 170),
        body_color=(60, 70, 150),
    )
    pa, pb = tmp_path / "mug_a.png", tmp_path / "mug_b.png"
    a.save(pa)
    b.save(pb)
    return {
        "a": pa, "b": pb,
        # right-hand rim of each handle ring, in pixels
        "a_handle_px": (125, 176),
        "b_handle_px": (125, 192),
    }


def flat_test_image(path, size=224, seed=3):
    rng = np.random.default_rng(seed)
    arr = (rng.uniform(0.2, 0.9, size=(size, size, 3)) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return path
