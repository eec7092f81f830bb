"""Image loading, resizing and the fixed 4x4 sub-image grid.

The canvas is 600x400 pixels (width x height); tiles are 150x100 and
ordered row-major over the grid, matching the sub-image axis of the
tiled feature layout.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

CANVAS_W = 600
CANVAS_H = 400
GRID = 4
TILE_W = CANVAS_W // GRID  # 150
TILE_H = CANVAS_H // GRID  # 100


def load_image(path):
    """Decode to an RGB uint8 array resized to the 600x400 canvas.

    Images already at canvas size pass through without resampling, so
    tiling them is a lossless pixel partition.
    """
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (CANVAS_W, CANVAS_H):
            img = img.resize((CANVAS_W, CANVAS_H), Image.BILINEAR)
        return np.asarray(img, dtype=np.uint8)


def tile_image(image):
    """Split a 600x400 RGB array into 16 tiles, row-major, (16, 100, 150, 3)."""
    image = np.asarray(image)
    if image.shape != (CANVAS_H, CANVAS_W, 3):
        raise ValueError(
            f"expected a {CANVAS_H}x{CANVAS_W} RGB array, got shape {image.shape}"
        )
    tiles = np.empty((GRID * GRID, TILE_H, TILE_W, 3), dtype=image.dtype)
    for r in range(GRID):
        for c in range(GRID):
            tiles[r * GRID + c] = image[
                r * TILE_H : (r + 1) * TILE_H, c * TILE_W : (c + 1) * TILE_W
            ]
    return tiles


def reassemble(tiles):
    """Inverse of tile_image; reproduces the source canvas bit-exactly."""
    tiles = np.asarray(tiles)
    if tiles.shape != (GRID * GRID, TILE_H, TILE_W, 3):
        raise ValueError(f"expected (16, {TILE_H}, {TILE_W}, 3), got {tiles.shape}")
    image = np.empty((CANVAS_H, CANVAS_W, 3), dtype=tiles.dtype)
    for r in range(GRID):
        for c in range(GRID):
            image[r * TILE_H : (r + 1) * TILE_H, c * TILE_W : (c + 1) * TILE_W] = \
                tiles[r * GRID + c]
    return image
