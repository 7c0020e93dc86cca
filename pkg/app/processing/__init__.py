"""
Compressive slice-and-view experiment sweep.

For every (strategy, sampling ratio, seed) cell the layers of a volume are
subsampled, reconstructed by patch dictionary learning, and scored against the
ground truth. Cells run concurrently; layers within a cell run in order.
"""

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional

from app import db, utils

MAX_WORKERS = int(os.getenv("PIPELINE_MAX_WORKERS", "1"))
PIPELINE_TIMEOUT = int(os.getenv("PIPELINE_TIMEOUT_SECONDS", "0"))

RESULTS_FILE = "results.csv"
SUMMARY_FILE = "summary.csv"


class PipelineTimeoutError(Exception):
    pass


from app.processing.models import ExperimentConfig, ResultRecord, Volume
from app.processing.phantom import generate_phantom
from app.processing.pipeline import DistributionObserver, error_record, run_cell, run_layer, summarize

logger = logging.getLogger(__name__)


def load_truth(config: ExperimentConfig) -> Volume:
    if config.input_volume:
        return utils.read_volume(config.input_volume)
    return generate_phantom(config.phantom, config.phantom_seed)


def run_experiment(
    config: ExperimentConfig,
    threads: Optional[int] = None,
    strict_sequential: Optional[bool] = None,
    timeout_seconds: Optional[int] = None,
    observer: Optional[DistributionObserver] = None,
) -> List[ResultRecord]:
    """
    Run the full sweep and write its artifacts under `config.output_dir`:
    ground_truth/, STRATEGY/ratio/seed/ stacks and masks, config.json,
    results.csv (rows in cell order) and summary.csv.
    """
    _start = time.monotonic()
    strict = config.strict_sequential if strict_sequential is None else strict_sequential
    workers = 1 if strict else (threads or config.threads)
    timeout = PIPELINE_TIMEOUT if timeout_seconds is None else timeout_seconds

    truth = load_truth(config)
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    utils.write_volume(truth, os.path.join(out, "ground_truth"))
    utils.atomic_write_bytes(os.path.join(out, "config.json"), config.model_dump_json(indent=2).encode("utf-8"))

    csv_path = os.path.join(out, RESULTS_FILE)
    if os.path.exists(csv_path):
        logger.warning(f"Replacing existing results file {csv_path}")
        os.remove(csv_path)

    cells = [
        (strategy, ratio, seed)
        for strategy in config.strategies
        for ratio in config.sampling_ratios
        for seed in config.seeds
    ]
    logger.info(
        f"Starting sweep: {len(cells)} cells x {truth.n3} layers of {truth.n1}x{truth.n2} "
        f"(workers: {workers}, strict: {strict}, timeout: {timeout or 'none'})"
    )

    def _check_deadline(step: str):
        if timeout:
            elapsed = time.monotonic() - _start
            if elapsed > timeout:
                raise PipelineTimeoutError(f"Sweep exceeded {timeout}s timeout ({elapsed:.0f}s elapsed at: {step})")

    def _run_one(strategy, ratio, seed):
        return run_cell(truth, config, strategy, ratio, seed, observer=observer,
                        strict_sequential=strict, deadline_check=_check_deadline)

    records: List[ResultRecord] = []
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = [executor.submit(_run_one, *cell) for cell in cells]
        try:
            for done, (cell, future) in enumerate(zip(cells, futures), start=1):
                try:
                    cell_records = future.result()
                except PipelineTimeoutError:
                    raise
                except Exception as e:
                    strategy, ratio, seed = cell
                    logger.error(f"Cell {strategy.value}/{ratio:g}/{seed} failed: {e}", exc_info=True)
                    cell_records = [error_record(config, strategy, ratio, seed, 0, e)]
                db.append_results(cell_records, csv_path)
                records.extend(cell_records)
                logger.info(f"Cell {done}/{len(cells)} complete")
        except PipelineTimeoutError:
            for future in futures:
                future.cancel()
            logger.error(f"Sweep aborted after {len(records)} rows: timeout")
            raise

    failed = sum(1 for r in records if r.error)
    if failed:
        logger.warning(f"{failed} cell(s) ended with an error marker")
    if len(records) > failed:
        summarize(csv_path, os.path.join(out, SUMMARY_FILE))
    logger.info(f"Sweep finished: {len(records)} rows in {time.monotonic() - _start:.1f}s")
    return records


__all__ = [
    "PipelineTimeoutError", "load_truth", "run_experiment", "run_cell", "run_layer", "summarize",
]
