"""
Subsampling masks: uniform density sampling (UDS) and targeted sampling (TS).

TS splits the budget M into floor(rho * M) indices drawn without replacement
from a pixel distribution built from the previous layer's reconstruction, then
M - floor(rho * M) indices drawn uniformly from the pixels not yet chosen.

Weighted sampling without replacement uses Gumbel top-k: add i.i.d. Gumbel(0, 1)
noise to log p and keep the k largest scores. The selected set (and its order)
has the same law as k successive draws from the renormalized distribution.
"""

import logging
from typing import Iterable, Optional

import numpy as np

from app.processing.core import RngSeed, make_rng, vectorize
from app.processing.models import PixelDistribution, SamplingMask, Strategy, TsConfig

logger = logging.getLogger(__name__)


def uds_mask(n_bar: int, m: int, rng: RngSeed, shape=None) -> SamplingMask:
    """M indices uniformly at random, without replacement."""
    if m < 0 or m > n_bar:
        raise ValueError(f"Cannot sample {m} of {n_bar} pixels without replacement")
    indices = make_rng(rng).choice(n_bar, size=m, replace=False)
    return SamplingMask(n_bar=n_bar, indices=indices, m_targeted=0, m_random=m, shape=shape, strategy=Strategy.UDS)


def intensity_distribution(prev_recon: np.ndarray) -> PixelDistribution:
    """p(q) = x[q] / ||x||_1 ; uniform fallback for an all-zero slice."""
    image = np.asarray(prev_recon, dtype=np.float64)
    if np.any(image < 0):
        raise ValueError("Intensity distribution needs a non-negative slice")
    return _normalize(vectorize(image), "intensity")


def gradient_magnitude(slice_: np.ndarray) -> np.ndarray:
    """
    |forward difference along rows| + |forward difference along cols|.

    The last row and last column have no forward neighbour and contribute 0.
    """
    image = np.asarray(slice_, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] < 2 or image.shape[1] < 2:
        raise ValueError(f"Gradient needs at least a 2x2 slice, got shape {image.shape}")
    down = np.abs(np.diff(image, axis=0, append=image[-1:, :]))
    right = np.abs(np.diff(image, axis=1, append=image[:, -1:]))
    return down + right


def gradient_distribution(prev_recon: np.ndarray) -> PixelDistribution:
    """p(q) = Grad(x)[q] / ||Grad(x)||_1 ; uniform fallback for a constant slice."""
    return _normalize(vectorize(gradient_magnitude(prev_recon)), "gradient")


def _normalize(weights: np.ndarray, label: str) -> PixelDistribution:
    total = float(weights.sum())
    if total <= 0.0 or not np.isfinite(total):
        logger.warning(f"Degenerate {label} distribution over {weights.size} pixels, falling back to uniform")
        return PixelDistribution.uniform(weights.size)
    return PixelDistribution(n_bar=weights.size, probs=weights / total)


def positive_support(dist: PixelDistribution, exclude: Optional[Iterable[int]] = None) -> int:
    """Number of indices with positive probability outside `exclude`."""
    eligible = dist.probs > 0
    if exclude is not None:
        excluded = np.asarray(list(exclude) if not isinstance(exclude, np.ndarray) else exclude, dtype=np.int64)
        eligible[excluded] = False
    return int(eligible.sum())


def weighted_sample_without_replacement(
    dist: PixelDistribution,
    k: int,
    exclude: Optional[Iterable[int]] = None,
    rng: RngSeed = 0,
) -> np.ndarray:
    """
    k distinct indices outside `exclude`, drawn by Gumbel top-k from `dist`.

    When fewer than k indices carry positive probability, all of them are taken
    and the deficit is topped up uniformly from the remaining indices.
    Returned in draw order.
    """
    generator = make_rng(rng)
    n_bar = dist.n_bar
    blocked = np.zeros(n_bar, dtype=bool)
    if exclude is not None:
        excluded = np.asarray(list(exclude) if not isinstance(exclude, np.ndarray) else exclude, dtype=np.int64)
        blocked[excluded] = True
    available = n_bar - int(blocked.sum())
    if k < 0 or k > available:
        raise ValueError(f"Cannot draw {k} indices from {available} available pixels")
    if k == 0:
        return np.empty(0, dtype=np.int64)

    with np.errstate(divide="ignore"):
        scores = np.log(dist.probs) + generator.gumbel(size=n_bar)
    scores[blocked] = -np.inf
    support = int(np.count_nonzero(np.isfinite(scores)))

    if support >= k:
        top = np.argpartition(-scores, k - 1)[:k]
        return top[np.argsort(-scores[top], kind="stable")].astype(np.int64)

    logger.warning(f"Only {support} pixels have positive probability, topping up {k - support} uniformly")
    chosen = np.flatnonzero(np.isfinite(scores))
    chosen = chosen[np.argsort(-scores[chosen], kind="stable")]
    blocked[chosen] = True
    remaining = np.flatnonzero(~blocked)
    top_up = generator.choice(remaining, size=k - support, replace=False)
    return np.concatenate([chosen, top_up]).astype(np.int64)


def targeted_distribution(strategy: Strategy, prev_recon: np.ndarray) -> PixelDistribution:
    if strategy == Strategy.TS_INTENSITY:
        return intensity_distribution(prev_recon)
    if strategy == Strategy.TS_GRADIENT:
        return gradient_distribution(prev_recon)
    raise ValueError(f"Strategy {strategy} has no targeted distribution")


def ts_mask(
    config: TsConfig,
    prev_recon: Optional[np.ndarray],
    rng: RngSeed,
    n_bar: Optional[int] = None,
    shape=None,
) -> SamplingMask:
    """
    Targeted part first (floor(rho * M) from the strategy's distribution), then a
    uniform random part over the complement. UDS ignores rho and prev_recon.
    """
    if prev_recon is not None:
        shape = tuple(np.shape(prev_recon))
        n_bar = shape[0] * shape[1]
    elif shape is not None:
        n_bar = shape[0] * shape[1]
    if n_bar is None:
        raise ValueError("ts_mask needs prev_recon, shape or n_bar")
    if config.m > n_bar:
        raise ValueError(f"Cannot sample {config.m} of {n_bar} pixels without replacement")

    generator = make_rng(rng)
    if config.strategy == Strategy.UDS:
        mask = uds_mask(n_bar, config.m, generator, shape=shape)
        return mask.model_copy(update={"rho": config.rho})
    if prev_recon is None:
        raise ValueError(f"{config.strategy.value} needs the previous layer's reconstruction")

    dist = targeted_distribution(config.strategy, prev_recon)
    m_targeted = min(config.m_targeted, positive_support(dist))
    if m_targeted < config.m_targeted:
        logger.warning(
            f"Targeted part reduced from {config.m_targeted} to {m_targeted}: not enough positive-probability pixels"
        )
    targeted = weighted_sample_without_replacement(dist, m_targeted, rng=generator)

    taken = np.zeros(n_bar, dtype=bool)
    taken[targeted] = True
    remaining = np.flatnonzero(~taken)
    random_part = generator.choice(remaining, size=config.m - m_targeted, replace=False)

    return SamplingMask(
        n_bar=n_bar,
        indices=np.concatenate([targeted, random_part]),
        m_targeted=m_targeted,
        m_random=config.m - m_targeted,
        shape=shape,
        rho=config.rho,
        strategy=config.strategy,
    )
