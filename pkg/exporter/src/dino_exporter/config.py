"""Export configuration."""

from dataclasses import dataclass

from .errors import BadConfig

PATCH_SIZES = {"vits16": 16, "vits8": 8, "local": 16}


@dataclass(frozen=True)
class ExportConfig:
    """What to run and how to size the grid.

    model "vits16"/"vits8" run a ViT-S checkpoint (weights required);
    "local" is a deterministic hand-crafted appearance descriptor that
    needs no weights and exists for tests and offline smoke runs.
    """

    model: str = "vits16"
    image_size: int = 224
    weights: str | None = None
    device: str = "cpu"
    with_cls: bool = False

    def validate(self) -> None:
        if self.model not in PATCH_SIZES:
            raise BadConfig(f"unknown model {self.model!r}, expected one of {sorted(PATCH_SIZES)}")
        patch = PATCH_SIZES[self.model]
        if self.image_size < patch:
            raise BadConfig(f"image_size {self.image_size} smaller than patch {patch}")
        if self.image_size % patch != 0:
            raise BadConfig(
                f"image_size {self.image_size} not divisible by patch size {patch}"
            )

    @property
    def patch_size(self) -> int:
        return PATCH_SIZES[self.model]

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size
