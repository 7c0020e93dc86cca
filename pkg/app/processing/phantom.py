"""Synthetic slice stacks whose content drifts slowly from layer to layer."""

import logging

import numpy as np
from scipy.ndimage import gaussian_filter

from app.processing.core import RngSeed, make_rng
from app.processing.models import PhantomSpec, Volume

logger = logging.getLogger(__name__)

BACKGROUND = 0.2
BODY_CONTRAST = 0.55
ORGANELLE_DEPTH = 0.3
TEXTURE_STD = 0.02
EDGE_WIDTH = 1.5


def _soft_ellipse(rows, cols, cy, cx, ay, ax) -> np.ndarray:
    radius = np.sqrt(((rows - cy) / ay) ** 2 + ((cols - cx) / ax) ** 2)
    # argument clipped so exp never overflows far from the body
    return 1.0 / (1.0 + np.exp(np.clip((radius - 1.0) * min(ay, ax) / EDGE_WIDTH, -50, 50)))


def _blob_cell(spec: PhantomSpec, generator: np.random.Generator) -> np.ndarray:
    n1, n2, n3 = spec.n1, spec.n2, spec.n3
    rows, cols = np.mgrid[0:n1, 0:n2].astype(np.float64)

    texture = gaussian_filter(generator.standard_normal((n1, n2)), sigma=2.0)
    texture *= TEXTURE_STD / max(texture.std(), 1e-12)

    ay, ax = 0.32 * n1, 0.26 * n2
    organelles = [
        (generator.uniform(-0.4, 0.4) * ay, generator.uniform(-0.4, 0.4) * ax, generator.uniform(0.12, 0.22) * min(ay, ax))
        for _ in range(3)
    ]

    # body path is centred on the stack so it stays in frame
    offsets = spec.drift_rate * (np.arange(n3) - (n3 - 1) / 2.0)
    layers = []
    for offset in offsets:
        cy, cx = n1 / 2.0 + 0.5 * offset, n2 / 2.0 + offset
        body = _soft_ellipse(rows, cols, cy, cx, ay, ax)
        inner = np.zeros_like(body)
        for dy, dx, r in organelles:
            inner = np.maximum(inner, _soft_ellipse(rows, cols, cy + dy, cx + dx, r, r))
        layers.append(BACKGROUND + texture + BODY_CONTRAST * body - ORGANELLE_DEPTH * inner * body)
    return np.clip(np.stack(layers), 0.0, 1.0)


def _stripes(spec: PhantomSpec) -> np.ndarray:
    cols = np.arange(spec.n2)
    layers = []
    for layer in range(spec.n3):
        shift = int(np.floor(spec.drift_rate * layer))
        band = ((cols + shift) // 4) % 2
        layers.append(np.tile(np.where(band == 1, 0.8, 0.2), (spec.n1, 1)))
    return np.stack(layers)


def _checker_drift(spec: PhantomSpec) -> np.ndarray:
    rows, cols = np.mgrid[0:spec.n1, 0:spec.n2]
    layers = []
    for layer in range(spec.n3):
        shift = int(np.floor(spec.drift_rate * layer))
        parity = ((rows + shift) // 8 + (cols + shift) // 8) % 2
        layers.append(np.where(parity == 1, 0.75, 0.25))
    return np.stack(layers).astype(np.float64)


def generate_phantom(spec: PhantomSpec, rng: RngSeed = 0) -> Volume:
    """
    Deterministic phantom volume.

    blob_cell: bright soft-edged ellipsoidal body with darker inclusions on a
    static smooth texture, translated by drift_rate pixels per layer.
    stripes: vertical 0.2/0.8 bands of period 8 shifting with the drift.
    checker_drift: 0.25/0.75 squares of side 8 moving diagonally.
    """
    generator = make_rng(rng)
    if spec.kind == "blob_cell":
        data = _blob_cell(spec, generator)
    elif spec.kind == "stripes":
        data = _stripes(spec)
    else:
        data = _checker_drift(spec)
    logger.info(f"Generated {spec.kind} phantom {spec.n1}x{spec.n2}x{spec.n3}, drift {spec.drift_rate} px/layer")
    return Volume(data=data)
