"""
Index conventions, seeded random streams, and the masked acquisition model.

Vectorisation is row-major: pixel (row, col) of an n1 x n2 slice has linear
index row * n2 + col. numpy's C-order ravel/reshape is the array form of the
same convention, so every module flattens images with `vectorize`.

All randomness comes from numpy Generators over the counter-based Philox4x64-10
bit generator. A stream is fully determined by its unsigned 64-bit seed.
"""

import logging
from typing import List, Optional, Tuple, Union

import numpy as np

from app.processing.models import UINT64_MAX, MeasurementSlice, SamplingMask

logger = logging.getLogger(__name__)

PRNG_ALGORITHM = "Philox4x64-10"

RngSeed = Union[int, np.random.Generator]


def make_rng(seed: RngSeed) -> np.random.Generator:
    """Generator for a seed; an existing Generator is passed through unchanged."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(int(seed) & UINT64_MAX))


def layer_seed(seed: int, layer_index: int) -> int:
    """Per-layer sub-seed: seed XOR layer index."""
    return (int(seed) ^ int(layer_index)) & UINT64_MAX


def derive_seed(*parts: int) -> int:
    """Mix non-negative integers into one 64-bit seed through SeedSequence."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def spawn_rngs(seed: int, count: int) -> List[np.random.Generator]:
    """Independent child streams of one seed, in a fixed order."""
    children = np.random.SeedSequence(int(seed) & UINT64_MAX).spawn(count)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


def linear_index(row: int, col: int, n2: int, n1: Optional[int] = None) -> int:
    if n2 < 1:
        raise ValueError(f"n2 must be positive, got {n2}")
    if col < 0 or col >= n2:
        raise IndexError(f"Column {col} out of range for n2={n2}")
    if row < 0 or (n1 is not None and row >= n1):
        raise IndexError(f"Row {row} out of range for n1={n1}")
    return row * n2 + col


def unravel_index(index: int, n2: int, n1: Optional[int] = None) -> Tuple[int, int]:
    if index < 0 or (n1 is not None and index >= n1 * n2):
        raise IndexError(f"Index {index} out of range")
    return divmod(int(index), n2)


def vectorize(image: np.ndarray) -> np.ndarray:
    return np.asarray(image).reshape(-1)


def devectorize(vector: np.ndarray, n1: int, n2: int) -> np.ndarray:
    vector = np.asarray(vector)
    if vector.size != n1 * n2:
        raise ValueError(f"Cannot reshape {vector.size} values into {n1}x{n2}")
    return vector.reshape(n1, n2)


def apply_mask(
    slice_: np.ndarray,
    mask: SamplingMask,
    noise_sigma: float = 0.0,
    rng: RngSeed = 0,
) -> MeasurementSlice:
    """
    Observe a slice on the mask's pixels, with optional additive Gaussian noise.

    Sampled values are clamped to [0, 1]; everything outside the mask is 0.
    Noise is drawn only for the sampled pixels, in index order.
    """
    image = np.asarray(slice_, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"Expected an n1 x n2 slice, got shape {image.shape}")
    n1, n2 = image.shape
    if mask.n_bar != n1 * n2:
        raise ValueError(f"Mask covers {mask.n_bar} pixels but the slice has {n1 * n2}")
    if mask.shape is not None and tuple(mask.shape) != (n1, n2):
        raise ValueError(f"Mask shape {mask.shape} does not match slice shape {(n1, n2)}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be non-negative, got {noise_sigma}")

    flat = vectorize(image)
    values = np.zeros(n1 * n2, dtype=np.float64)
    sampled = flat[mask.indices]
    if noise_sigma > 0:
        sampled = sampled + make_rng(rng).normal(0.0, noise_sigma, size=sampled.size)
    values[mask.indices] = np.clip(sampled, 0.0, 1.0)

    if mask.shape is None:
        mask = mask.model_copy(update={"shape": (n1, n2)})
    return MeasurementSlice(mask=mask, values=values.reshape(n1, n2), noise_sigma=float(noise_sigma))


def full_mask(n1: int, n2: int) -> SamplingMask:
    """Mask of every pixel, i.e. the full-acquisition mode."""
    n_bar = n1 * n2
    return SamplingMask(n_bar=n_bar, indices=np.arange(n_bar), m_targeted=0, m_random=n_bar, shape=(n1, n2), rho=0.0)
