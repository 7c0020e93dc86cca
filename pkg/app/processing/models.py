"""Shared models: volumes, masks, measurements, and run configuration."""

import math
from enum import Enum
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

UINT64_MAX = (1 << 64) - 1

# Sampling-ratio grid used when a config does not give one
DEFAULT_SAMPLING_RATIOS = [0.05, 0.10, 0.15, 0.20, 0.30, 0.50]

RESULT_COLUMNS = [
    'strategy', 'rho', 'sampling_ratio', 'realisation_seed', 'layer',
    'ssim', 'psnr', 'wall_time_seconds', 'error',
]


class Strategy(str, Enum):
    UDS = "UDS"
    TS_INTENSITY = "TS_INTENSITY"
    TS_GRADIENT = "TS_GRADIENT"


def _readonly(value, dtype) -> np.ndarray:
    arr = np.array(value, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


class Volume(BaseModel):
    """Ordered stack of n3 grayscale slices of n1 x n2 intensities in [0, 1]."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray

    @field_validator("data", mode="before")
    @classmethod
    def _check_data(cls, value):
        arr = _readonly(value, np.float64)
        if arr.ndim == 2:
            arr = _readonly(arr[np.newaxis, :, :], np.float64)
        if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError(f"Volume data must have shape (n3, n1, n2) with n3 >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Volume data contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"Volume intensities must lie in [0, 1], got [{arr.min()}, {arr.max()}]")
        return arr

    @property
    def n1(self) -> int:
        return int(self.data.shape[1])

    @property
    def n2(self) -> int:
        return int(self.data.shape[2])

    @property
    def n3(self) -> int:
        return int(self.data.shape[0])

    @property
    def n_bar(self) -> int:
        return self.n1 * self.n2

    def layer(self, index: int) -> np.ndarray:
        return self.data[index]

    def same_shape(self, other: "Volume") -> bool:
        return self.data.shape == other.data.shape


class SamplingMask(BaseModel):
    """Sampled pixel set of one layer, with its targeted/random split."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    n_bar: int = Field(ge=1)
    indices: np.ndarray
    m_targeted: int = Field(default=0, ge=0)
    m_random: int = Field(default=0, ge=0)
    shape: Optional[Tuple[int, int]] = None
    rho: float = Field(default=0.0, ge=0.0, le=1.0)
    strategy: Strategy = Strategy.UDS
    seed: Optional[int] = Field(default=None, ge=0, le=UINT64_MAX)

    @field_validator("indices", mode="before")
    @classmethod
    def _sort_indices(cls, value):
        arr = np.asarray(value, dtype=np.int64).reshape(-1)
        ordered = np.sort(arr)
        if ordered.size > 1 and np.any(ordered[1:] == ordered[:-1]):
            raise ValueError("Mask indices contain duplicates")
        return _readonly(ordered, np.int64)

    @model_validator(mode="after")
    def _check_cardinality(self):
        m = int(self.indices.size)
        if m != self.m_targeted + self.m_random:
            raise ValueError(f"Mask has {m} indices but m_targeted + m_random = {self.m_targeted + self.m_random}")
        if m > self.n_bar:
            raise ValueError(f"Mask has {m} indices for only {self.n_bar} pixels")
        if m and (self.indices[0] < 0 or self.indices[-1] >= self.n_bar):
            raise ValueError(f"Mask indices must lie in [0, {self.n_bar})")
        if self.shape is not None and self.shape[0] * self.shape[1] != self.n_bar:
            raise ValueError(f"Mask shape {self.shape} does not cover n_bar={self.n_bar}")
        return self

    @property
    def m(self) -> int:
        return int(self.indices.size)

    @property
    def ratio(self) -> float:
        return self.m / self.n_bar

    def indicator(self) -> np.ndarray:
        flags = np.zeros(self.n_bar, dtype=bool)
        flags[self.indices] = True
        return flags

    def image(self, shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
        n1, n2 = shape or self.shape or (1, self.n_bar)
        return self.indicator().reshape(n1, n2)


class MeasurementSlice(BaseModel):
    """Masked observation of one layer; unsampled pixels hold 0."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mask: SamplingMask
    values: np.ndarray
    noise_sigma: float = Field(default=0.0, ge=0.0)

    @field_validator("values", mode="before")
    @classmethod
    def _as_image(cls, value):
        arr = _readonly(value, np.float64)
        if arr.ndim != 2:
            raise ValueError(f"Measurement values must be an n1 x n2 image, got shape {arr.shape}")
        return arr

    @model_validator(mode="after")
    def _check_support(self):
        if self.values.size != self.mask.n_bar:
            raise ValueError(f"Measurement has {self.values.size} values for a mask over {self.mask.n_bar} pixels")
        if self.mask.shape is not None and tuple(self.values.shape) != tuple(self.mask.shape):
            raise ValueError(f"Measurement shape {self.values.shape} differs from mask shape {self.mask.shape}")
        outside = self.values.reshape(-1)[~self.mask.indicator()]
        if np.any(outside != 0.0):
            raise ValueError("Measurement has nonzero values outside the sampled set")
        return self

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.values.shape[0]), int(self.values.shape[1])

    @property
    def observed(self) -> np.ndarray:
        return self.mask.image(self.shape)


class TsConfig(BaseModel):
    """Targeted-sampling settings for one layer."""
    rho: float = Field(default=0.5, ge=0.0, le=1.0)
    strategy: Strategy = Strategy.UDS
    m: int = Field(ge=1)

    @property
    def m_targeted(self) -> int:
        if self.strategy == Strategy.UDS:
            return 0
        return int(math.floor(self.rho * self.m))


class PixelDistribution(BaseModel):
    """Probability mass over the N̄ pixel indices."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    n_bar: int = Field(ge=1)
    probs: np.ndarray
    degenerate: bool = False

    @field_validator("probs", mode="before")
    @classmethod
    def _as_vector(cls, value):
        return _readonly(np.asarray(value, dtype=np.float64).reshape(-1), np.float64)

    @model_validator(mode="after")
    def _check_normalized(self):
        if self.probs.size != self.n_bar:
            raise ValueError(f"Distribution has {self.probs.size} entries for n_bar={self.n_bar}")
        if np.any(self.probs < 0) or not np.all(np.isfinite(self.probs)):
            raise ValueError("Distribution entries must be finite and non-negative")
        total = float(self.probs.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"Distribution sums to {total}, expected 1")
        return self

    @classmethod
    def uniform(cls, n_bar: int) -> "PixelDistribution":
        return cls(n_bar=n_bar, probs=np.full(n_bar, 1.0 / n_bar), degenerate=True)


class BpfaConfig(BaseModel):
    """Hyper-parameters of the patch dictionary learner."""
    k: int = Field(default=36, ge=1)
    b: int = Field(default=14, ge=1)
    n_epoch: int = Field(default=2, ge=1)
    eta: float = Field(default=0.85, gt=0.0, le=1.0)
    n_batch: int = Field(default=163844, ge=1)
    a: float = Field(default=1.0, gt=0.0)
    b_param: float = Field(default=0.0, ge=0.0)
    gamma_n_init: float = Field(default=1.0, gt=0.0)
    gamma_w_init: float = Field(default=1e6, gt=0.0)
    # False holds gamma_n at gamma_n_init, as gamma_w always is
    learn_gamma_n: bool = True
    n_sweeps: int = Field(default=1, ge=1)
    workers: int = Field(default=1, ge=1)
    warm_start: bool = False


class SsimParams(BaseModel):
    window: int = Field(default=11, ge=1)
    sigma: float = Field(default=1.5, gt=0.0)
    k1: float = Field(default=0.01, gt=0.0)
    k2: float = Field(default=0.03, gt=0.0)
    dynamic_range: float = Field(default=1.0, gt=0.0)

    @field_validator("window")
    @classmethod
    def _odd_window(cls, value):
        if value % 2 == 0:
            raise ValueError(f"SSIM window must be odd, got {value}")
        return value


class ResultRecord(BaseModel):
    """One row of the results CSV: a reconstructed layer, or an error marker."""
    strategy: Strategy
    rho: float = Field(ge=0.0, le=1.0)
    sampling_ratio: float = Field(gt=0.0, le=1.0)
    realisation_seed: int = Field(ge=0, le=UINT64_MAX)
    layer: int = Field(ge=0)
    ssim: Optional[float] = Field(default=None, ge=-1.0, le=1.0)
    psnr: Optional[float] = None
    wall_time_seconds: Optional[float] = Field(default=None, ge=0.0)
    error: Optional[str] = None

    @model_validator(mode="after")
    def _metrics_unless_error(self):
        if self.error is None and (self.ssim is None or self.psnr is None):
            raise ValueError("ssim and psnr are required on rows without an error marker")
        return self

    def as_row(self) -> dict:
        row = self.model_dump()
        row["strategy"] = self.strategy.value
        return {column: row[column] for column in RESULT_COLUMNS}


class PhantomSpec(BaseModel):
    n1: int = Field(default=64, ge=2)
    n2: int = Field(default=64, ge=2)
    n3: int = Field(default=8, ge=1)
    kind: Literal["blob_cell", "stripes", "checker_drift"] = "blob_cell"
    drift_rate: float = Field(default=1.0, ge=0.0)


class ExperimentConfig(BaseModel):
    """Sweep description: volume source, strategy x ratio x seed grid, solver settings."""
    input_volume: Optional[str] = None
    phantom: Optional[PhantomSpec] = None
    phantom_seed: int = Field(default=0, ge=0, le=UINT64_MAX)
    strategies: List[Strategy] = Field(default_factory=lambda: list(Strategy))
    sampling_ratios: List[float] = Field(default_factory=lambda: list(DEFAULT_SAMPLING_RATIOS))
    rho: float = Field(default=0.5, ge=0.0, le=1.0)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    noise_sigma: float = Field(default=0.0, ge=0.0)
    bpfa: BpfaConfig = Field(default_factory=BpfaConfig)
    ssim: SsimParams = Field(default_factory=SsimParams)
    output_dir: str = "output"
    threads: int = Field(default=1, ge=1)
    strict_sequential: bool = False

    @field_validator("sampling_ratios")
    @classmethod
    def _ratios_in_range(cls, value):
        if not value:
            raise ValueError("sampling_ratios must not be empty")
        for ratio in value:
            if not 0.0 < ratio <= 1.0:
                raise ValueError(f"Sampling ratio {ratio} outside (0, 1]")
        return value

    @field_validator("seeds")
    @classmethod
    def _seeds_valid(cls, value):
        if not value:
            raise ValueError("seeds must not be empty")
        for seed in value:
            if not 0 <= seed <= UINT64_MAX:
                raise ValueError(f"Seed {seed} is not an unsigned 64-bit integer")
        return value

    @field_validator("strategies")
    @classmethod
    def _strategies_present(cls, value):
        if not value:
            raise ValueError("strategies must not be empty")
        return list(dict.fromkeys(value))

    @model_validator(mode="after")
    def _one_volume_source(self):
        if self.input_volume and self.phantom:
            raise ValueError("Give either input_volume or phantom, not both")
        if not self.input_volume and self.phantom is None:
            self.phantom = PhantomSpec()
        return self

    def cell_count(self) -> int:
        return len(self.strategies) * len(self.sampling_ratios) * len(self.seeds)


def sample_count(ratio: float, n_bar: int) -> int:
    """Number of probe positions for a sampling ratio: floor(ratio * N̄), at least 1."""
    return max(1, min(n_bar, int(math.floor(ratio * n_bar + 1e-9))))
