"""Clothing-agnostic person representation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import FrozenSet, Tuple

import numpy as np
from scipy import ndimage

from .data_io import ROLES, Sample, SegmentationMap
from .errors import ConfigError, PaletteError

PROTECTED_ROLES = frozenset({"face", "hair"})
AGNOSTIC_ROLE = "agnostic"


@dataclass(frozen=True)
class AgnosticConfig:
    """Which parse roles to erase and how.

    Drop ``"neck"`` from ``erase_roles`` to keep the neck visible.
    """

    erase_roles: FrozenSet[str] = field(
        default_factory=lambda: frozenset({"upper_clothes", "arms", "neck"}))
    dilation_px: int = 8
    fill_value: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "erase_roles", frozenset(self.erase_roles))
        unknown = self.erase_roles - ROLES
        if unknown:
            raise ConfigError(f"unknown erase roles: {sorted(unknown)}")
        if AGNOSTIC_ROLE in self.erase_roles:
            raise ConfigError("the agnostic role itself cannot be erased")
        if int(self.dilation_px) != self.dilation_px or self.dilation_px < 0:
            raise ConfigError("dilation_px must be a non-negative integer")
        if not 0.0 <= self.fill_value <= 1.0:
            raise ConfigError("fill_value must lie in [0, 1]")

    def check_size(self, H: int, W: int):
        if self.dilation_px > min(H, W) / 4:
            raise ConfigError(
                f"dilation_px={self.dilation_px} exceeds min(H, W)/4 for {H}x{W}")


def erase_region(parse: SegmentationMap, cfg: AgnosticConfig) -> np.ndarray:
    """Boolean mask of pixels to erase: dilated erase roles minus face/hair."""
    roles = set(parse.palette.values())
    missing = sorted(cfg.erase_roles - roles)
    if missing:
        raise PaletteError(f"erase roles {missing} are not in the palette")
    mask = parse.role_mask(cfg.erase_roles)
    if cfg.dilation_px > 0 and mask.any():
        size = 2 * int(cfg.dilation_px) + 1
        mask = ndimage.maximum_filter(mask, size=size, mode="constant", cval=False)
    return mask & ~parse.role_mask(PROTECTED_ROLES)


def build_agnostic(sample: Sample, cfg: AgnosticConfig = AgnosticConfig()
                   ) -> Tuple[np.ndarray, SegmentationMap]:
    """Remove garment evidence from the person image and its parse map.

    Returns ``(agnostic_image, agnostic_parse)``. Erased pixels take
    ``cfg.fill_value`` in every channel and the palette's agnostic label.
    """
    cfg.check_size(*sample.size)
    if AGNOSTIC_ROLE not in sample.parse.palette.values():
        raise PaletteError("palette has no 'agnostic' label")
    region = erase_region(sample.parse, cfg)

    image = sample.person_image.copy()
    image[region] = cfg.fill_value
    labels = sample.parse.labels.copy()
    labels[region] = sample.parse.label_of(AGNOSTIC_ROLE)
    return image, SegmentationMap(labels, sample.parse.palette)
