"""PNG montage comparing ground-truth layers with each strategy's reconstruction."""

import io
import logging
import os
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from app import utils
from app.processing.models import Strategy
from app.processing.pipeline import cell_dir

logger = logging.getLogger(__name__)

LABEL_HEIGHT = 14
GUTTER = 2
# one colour per column header, ground truth first
COLUMN_COLORS = ['#10B981', '#3B82F6', '#8B5CF6', '#EC4899', '#F59E0B']


def _column_color(index: int) -> str:
    return COLUMN_COLORS[index % len(COLUMN_COLORS)]


def render_layer_montage(
    output_dir: str,
    layers: Sequence[int],
    ratio: float,
    seed: int,
    strategies: Optional[List[Strategy]] = None,
    output_path: Optional[str] = None,
    scale: int = 2,
) -> Image.Image:
    """
    Grid with one row per layer and one column for the ground truth plus one
    per strategy's reconstruction at the given ratio and seed.
    Missing reconstructions are left blank and logged.
    """
    truth = utils.read_volume(os.path.join(output_dir, "ground_truth"))
    strategies = [Strategy(s) for s in (strategies or list(Strategy))]
    for layer in layers:
        if layer < 0 or layer >= truth.n3:
            raise ValueError(f"Layer {layer} out of range for a {truth.n3}-layer stack")

    columns = [("truth", truth)]
    for strategy in strategies:
        path = cell_dir(output_dir, strategy, ratio, seed)
        try:
            columns.append((strategy.value, utils.read_volume(path)))
        except FileNotFoundError:
            logger.warning(f"No reconstruction at {path}; column left blank")
            columns.append((strategy.value, None))

    tile_h, tile_w = truth.n1 * scale, truth.n2 * scale
    width = len(columns) * (tile_w + GUTTER) + GUTTER
    height = LABEL_HEIGHT + len(layers) * (tile_h + GUTTER) + GUTTER
    canvas = Image.new("RGB", (width, height), "white")
    draw = ImageDraw.Draw(canvas)

    for col, (label, volume) in enumerate(columns):
        x0 = GUTTER + col * (tile_w + GUTTER)
        draw.text((x0 + 2, 1), label, fill=_column_color(col))
        if volume is None:
            continue
        for row, layer in enumerate(layers):
            y0 = LABEL_HEIGHT + GUTTER + row * (tile_h + GUTTER)
            pixels = np.round(volume.layer(layer) * 255).astype(np.uint8)
            tile = Image.fromarray(pixels, mode="L").resize((tile_w, tile_h), Image.Resampling.NEAREST)
            canvas.paste(tile.convert("RGB"), (x0, y0))

    if output_path:
        buffer = io.BytesIO()
        canvas.save(buffer, format="PNG")
        utils.atomic_write_bytes(output_path, buffer.getvalue())
        logger.info(f"Preview of layers {list(layers)} at ratio {ratio:g}, seed {seed}: {output_path}")
    return canvas
