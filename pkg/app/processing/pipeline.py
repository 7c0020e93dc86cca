"""
Layer-by-layer acquisition loop: mask -> measure -> reconstruct -> score, with
each reconstruction steering the next layer's targeted mask.
"""

import logging
import os
import time
from typing import Callable, List, NamedTuple, Optional

import numpy as np
import pandas as pd

from app import db, utils
from app.processing import bpfa
from app.processing.core import apply_mask, derive_seed, full_mask, layer_seed, spawn_rngs
from app.processing.models import (
    BpfaConfig, ExperimentConfig, MeasurementSlice, ResultRecord, SamplingMask, Strategy, TsConfig, Volume,
    sample_count,
)
from app.processing.quality import psnr, ssim
from app.processing.sampling import ts_mask

logger = logging.getLogger(__name__)

STRATEGY_ORDER = list(Strategy)

# observer(layer_index, source, image) sees the slice a targeted distribution is built from
DistributionObserver = Callable[[int, str, np.ndarray], None]

SUMMARY_COLUMNS = [
    'strategy', 'sampling_ratio', 'ssim_mean', 'ssim_std', 'psnr_mean',
    'wall_time_mean', 'wall_time_std', 'n_rows', 'dose_reduction',
]


class LayerResult(NamedTuple):
    mask: SamplingMask
    measurement: MeasurementSlice
    reconstruction: np.ndarray
    record: ResultRecord
    state: bpfa.BpfaState


def cell_seed(seed: int, strategy: Strategy, ratio: float) -> int:
    """Independent stream seed for one (strategy, ratio, seed) cell."""
    return derive_seed(seed, STRATEGY_ORDER.index(Strategy(strategy)), int(round(ratio * 1_000_000)))


def cell_dir(output_dir: str, strategy: Strategy, ratio: float, seed: int) -> str:
    return os.path.join(output_dir, Strategy(strategy).value, f"{ratio:g}", str(seed))


def _bpfa_config(config: ExperimentConfig, strict_sequential: bool) -> BpfaConfig:
    if strict_sequential or config.strict_sequential:
        return config.bpfa.model_copy(update={"workers": 1})
    return config.bpfa


def run_layer(
    layer_index: int,
    truth_slice: np.ndarray,
    prev_recon: Optional[np.ndarray],
    config: ExperimentConfig,
    strategy: Strategy,
    ratio: float,
    seed: int,
    stream_seed: Optional[int] = None,
    initial_dictionary: Optional[np.ndarray] = None,
    observer: Optional[DistributionObserver] = None,
    strict_sequential: bool = False,
) -> LayerResult:
    """
    Acquire and reconstruct one layer.

    Layer 0 always uses UDS. For TS strategies on later layers the targeted
    distribution is built from `prev_recon`, never from the ground truth.
    """
    truth = np.asarray(truth_slice, dtype=np.float64)
    n1, n2 = truth.shape
    strategy = Strategy(strategy)
    if stream_seed is None:
        stream_seed = cell_seed(seed, strategy, ratio)
    sub_seed = layer_seed(stream_seed, layer_index)
    mask_rng, noise_rng, bpfa_rng = spawn_rngs(sub_seed, 3)

    effective = Strategy.UDS if layer_index == 0 else strategy
    if effective != Strategy.UDS:
        if prev_recon is None:
            raise ValueError(f"Layer {layer_index} with {strategy.value} needs the previous reconstruction")
        if observer is not None:
            observer(layer_index, "previous_reconstruction", prev_recon)

    ts = TsConfig(rho=config.rho, strategy=effective, m=sample_count(ratio, n1 * n2))
    mask = ts_mask(ts, prev_recon if effective != Strategy.UDS else None, mask_rng, shape=(n1, n2))
    mask = mask.model_copy(update={"seed": sub_seed, "rho": config.rho})
    measurement = apply_mask(truth, mask, config.noise_sigma, noise_rng)

    started = time.perf_counter()
    learner = _bpfa_config(config, strict_sequential)
    patchset = bpfa.extract_patches(measurement, n1, n2, learner.b)
    state = bpfa.infer(measurement, n1, n2, learner, bpfa_rng, patchset=patchset, initial_dictionary=initial_dictionary)
    recon = bpfa.reconstruct_slice(state, patchset, n1, n2)
    elapsed = time.perf_counter() - started

    record = ResultRecord(
        strategy=strategy,
        rho=config.rho,
        sampling_ratio=ratio,
        realisation_seed=seed,
        layer=layer_index,
        ssim=ssim(recon, truth, config.ssim),
        psnr=psnr(recon, truth, config.ssim.dynamic_range),
        wall_time_seconds=elapsed,
    )
    logger.info(
        f"{strategy.value} ratio={ratio:g} seed={seed} layer {layer_index}: "
        f"m={mask.m} (targeted {mask.m_targeted}), SSIM {record.ssim:.4f}, {elapsed:.2f}s"
    )
    return LayerResult(mask, measurement, recon, record, state)


def run_cell(
    truth: Volume,
    config: ExperimentConfig,
    strategy: Strategy,
    ratio: float,
    seed: int,
    observer: Optional[DistributionObserver] = None,
    strict_sequential: bool = False,
    deadline_check: Optional[Callable[[str], None]] = None,
) -> List[ResultRecord]:
    """
    Every layer of one (strategy, ratio, seed) cell, in order.

    A failing layer ends the cell with an error-marker row; rows of the layers
    before it are kept. The reconstructed stack is written only when all layers
    succeed.
    """
    stream_seed = cell_seed(seed, strategy, ratio)
    out_dir = cell_dir(config.output_dir, strategy, ratio, seed)
    records: List[ResultRecord] = []
    recons: List[np.ndarray] = []
    prev_recon = None
    dictionary = None

    for layer in range(truth.n3):
        if deadline_check is not None:
            deadline_check(f"{Strategy(strategy).value} ratio={ratio:g} seed={seed} layer {layer}")
        try:
            result = run_layer(
                layer, truth.layer(layer), prev_recon, config, strategy, ratio, seed,
                stream_seed=stream_seed,
                initial_dictionary=dictionary if config.bpfa.warm_start else None,
                observer=observer,
                strict_sequential=strict_sequential,
            )
            utils.write_mask(result.mask, os.path.join(out_dir, "masks", f"mask_{layer:04d}.pbm"))
        except Exception as e:
            logger.error(f"Cell {Strategy(strategy).value}/{ratio:g}/{seed} failed at layer {layer}: {e}", exc_info=True)
            records.append(error_record(config, strategy, ratio, seed, layer, e))
            return records

        records.append(result.record)
        recons.append(result.reconstruction)
        prev_recon = result.reconstruction
        dictionary = result.state.dictionary.atoms

    try:
        utils.write_volume(Volume(data=np.stack(recons)), out_dir)
    except Exception as e:
        logger.error(f"Cell {Strategy(strategy).value}/{ratio:g}/{seed}: stack not written: {e}", exc_info=True)
        # the stack is unusable, so the cell ends on an error row for its last layer
        records[-1] = error_record(config, strategy, ratio, seed, records[-1].layer, e)
    return records


def error_record(
    config: ExperimentConfig,
    strategy: Strategy,
    ratio: float,
    seed: int,
    layer: int,
    error: BaseException,
) -> ResultRecord:
    return ResultRecord(
        strategy=strategy, rho=config.rho, sampling_ratio=ratio,
        realisation_seed=seed, layer=layer, error=f"{type(error).__name__}: {error}",
    )


def denoise_volume(volume: Volume, config: BpfaConfig, seed: int = 0) -> Volume:
    """Full-mask BPFA pass over every layer; the result serves as a clean reference stack."""
    layers = []
    for index in range(volume.n3):
        truth = volume.layer(index)
        mask = full_mask(volume.n1, volume.n2)
        measurement = MeasurementSlice(mask=mask, values=truth)
        patchset = bpfa.extract_patches(measurement, volume.n1, volume.n2, config.b)
        state = bpfa.infer(measurement, volume.n1, volume.n2, config, layer_seed(seed, index), patchset=patchset)
        layers.append(bpfa.reconstruct_slice(state, patchset, volume.n1, volume.n2))
        logger.info(f"Denoised layer {index + 1}/{volume.n3}")
    return Volume(data=np.stack(layers))


def summarize(csv_path: str, out_path: Optional[str] = None) -> pd.DataFrame:
    """
    Mean and population std of SSIM per (strategy, sampling_ratio), plus PSNR,
    wall time, row count and dose reduction 1 / ratio. Error-marker rows are
    skipped. Groups are ordered by strategy name, then ratio ascending.
    """
    frame = db.read_results(csv_path)
    frame = frame[frame["error"].isna() & frame["ssim"].notna()]
    if frame.empty:
        raise ValueError(f"No successful result rows in {csv_path}")

    grouped = frame.groupby(["strategy", "sampling_ratio"], sort=True)
    table = grouped.agg(
        ssim_mean=("ssim", "mean"),
        ssim_std=("ssim", lambda s: float(np.std(s.to_numpy(dtype=np.float64)))),
        psnr_mean=("psnr", "mean"),
        wall_time_mean=("wall_time_seconds", "mean"),
        wall_time_std=("wall_time_seconds", lambda s: float(np.std(s.to_numpy(dtype=np.float64)))),
        n_rows=("ssim", "size"),
    ).reset_index()
    table["dose_reduction"] = 1.0 / table["sampling_ratio"]
    table = table[SUMMARY_COLUMNS]

    if out_path:
        utils.atomic_write_bytes(out_path, table.to_csv(index=False, lineterminator="\n").encode("utf-8"))
        logger.info(f"Wrote summary of {len(table)} groups to {out_path}")
    return table
