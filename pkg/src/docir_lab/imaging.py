"""Raster types and the mask algebra the disentanglement pipeline builds on.

A Frame pairs an RGB raster with a per-pixel instance-ID raster from one
camera view. Masks select pixels by instance ID; applying a mask yields a
4-channel stack: masked RGB (white where masked out) plus the mask itself.
White is the masking color, so the mask channel is what disambiguates a
genuinely white object pixel from masked-out background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WHITE = 1.0
TABLE_GRAY = 0.8  # background deliberately not white, so masking stays visible
GRIPPER_GRAY = (0.45, 0.45, 0.45)


@dataclass(frozen=True)
class Palette:
    name: str
    colors: tuple  # ordered (r, g, b) triples, values in [0, 1]


TRAIN_PALETTE = Palette("train", (
    (0.90, 0.10, 0.10), (0.10, 0.70, 0.10), (0.15, 0.25, 0.90),
    (0.95, 0.80, 0.10), (0.85, 0.15, 0.80), (0.10, 0.80, 0.80),
    (0.95, 0.50, 0.10), (0.55, 0.30, 0.10), (0.40, 0.90, 0.40),
    (0.60, 0.10, 0.40), (0.30, 0.50, 0.70), (0.70, 0.70, 0.30),
    (0.20, 0.90, 0.60), (0.90, 0.40, 0.50), (0.50, 0.20, 0.90),
    (0.20, 0.20, 0.50),
))

HELDOUT_PALETTE = Palette("heldout", (
    (0.05, 0.45, 0.30), (0.75, 0.55, 0.95), (0.98, 0.75, 0.55),
    (0.35, 0.05, 0.05), (0.05, 0.05, 0.98), (0.55, 0.95, 0.05),
    (0.95, 0.05, 0.55), (0.05, 0.65, 0.95), (0.65, 0.95, 0.75),
    (0.30, 0.30, 0.05), (0.98, 0.30, 0.30), (0.05, 0.30, 0.60),
    (0.75, 0.95, 0.25), (0.45, 0.05, 0.75), (0.95, 0.95, 0.45),
    (0.25, 0.75, 0.45),
))


def palettes_disjoint(a: Palette, b: Palette) -> bool:
    return not (set(a.colors) & set(b.colors))


@dataclass
class Frame:
    """One camera view: rgb (H, W, 3) floats in [0,1], ids (H, W) ints.

    Instance ID 0 is reserved for background (table/void) and never belongs
    to any semantic group.
    """
    rgb: np.ndarray
    ids: np.ndarray
    view: str  # "base" or "wrist"

    def __post_init__(self):
        if self.rgb.shape[:2] != self.ids.shape:
            raise ValueError(f"rgb {self.rgb.shape} and ids {self.ids.shape} disagree")
        if self.view not in ("base", "wrist"):
            raise ValueError(f"unknown view {self.view!r}")


@dataclass
class MaskedStack:
    """4xHxW: channels 0..2 masked RGB (white where mask=0), channel 3 the mask."""
    channels: np.ndarray

    @property
    def mask(self):
        return self.channels[3]

    @property
    def rgb(self):
        return self.channels[:3]


def binary_mask(ids: np.ndarray, group) -> np.ndarray:
    """Pixelwise indicator of membership in ``group`` (a set of instance IDs).

    Background id 0 is never maskable.
    """
    group = set(group)
    if 0 in group:
        raise ValueError("instance id 0 (background) cannot be part of a mask group")
    if not group:
        return np.zeros(ids.shape, dtype=np.uint8)
    return np.isin(ids, sorted(group)).astype(np.uint8)


def apply_mask(rgb: np.ndarray, mask: np.ndarray) -> MaskedStack:
    """Mask an RGB raster to white outside the mask and append the mask channel."""
    if rgb.shape[:2] != mask.shape:
        raise ValueError(f"rgb {rgb.shape} and mask {mask.shape} disagree")
    out = np.empty((4,) + mask.shape, dtype=rgb.dtype)
    m = mask.astype(bool)
    for c in range(3):
        out[c] = np.where(m, rgb[..., c], WHITE)
    out[3] = mask
    return MaskedStack(out)


# ---------------------------------------------------------------------------
# PPM debug export

def write_ppm(path, rgb: np.ndarray):
    """Write an (H, W, 3) float raster as binary P6, 8-bit."""
    h, w = rgb.shape[:2]
    data = (np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_stack_ppm(path, stack: MaskedStack):
    write_ppm(path, np.moveaxis(stack.channels[:3], 0, -1))
