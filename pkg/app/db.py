"""
Result store: one CSV row per (strategy, ratio, seed, layer) evaluation.
Uses pandas for encoding/parsing and a module-level lock as the single writer.
"""

import logging
import math
import os
import threading
from typing import Iterable, List

import pandas as pd

from app import utils
from app.processing.models import RESULT_COLUMNS, ResultRecord

logger = logging.getLogger(__name__)

HEADER_LINE = ",".join(RESULT_COLUMNS)

# Serializes every read-modify-replace of a results file
_lock = threading.Lock()


def _check_header(csv_path: str) -> None:
    with open(csv_path, "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\r\n")
    if first != HEADER_LINE:
        raise utils.MalformedHeaderError(f"{csv_path}: header {first!r} does not match {HEADER_LINE!r}")


def _encode_rows(records: Iterable[ResultRecord]) -> str:
    frame = pd.DataFrame([r.as_row() for r in records], columns=RESULT_COLUMNS)
    return frame.to_csv(index=False, header=False, lineterminator="\n")


def append_results(records: List[ResultRecord], csv_path: str) -> None:
    """
    Append rows, writing the header once when the file is new.

    Args:
        records: Rows to add, in order
        csv_path: Target CSV

    Raises:
        MalformedHeaderError: the existing file has a different header
    """
    if not records:
        return
    with _lock:
        existing = ""
        if os.path.exists(csv_path) and os.path.getsize(csv_path) > 0:
            _check_header(csv_path)
            with open(csv_path, "r", encoding="utf-8") as fh:
                existing = fh.read()
            if not existing.endswith("\n"):
                existing += "\n"
        else:
            existing = HEADER_LINE + "\n"
        utils.atomic_write_bytes(csv_path, (existing + _encode_rows(records)).encode("utf-8"))


def append_result(record: ResultRecord, csv_path: str) -> None:
    append_results([record], csv_path)


def read_results(csv_path: str) -> pd.DataFrame:
    """Parse a results CSV into a DataFrame with the stored column order."""
    _check_header(csv_path)
    frame = pd.read_csv(
        csv_path,
        dtype={"strategy": str, "error": str},
        keep_default_na=False,
        na_values=[""],
        float_precision="round_trip",
    )
    return frame[RESULT_COLUMNS]


def _none_if_nan(value):
    if value is None:
        return None
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def read_records(csv_path: str) -> List[ResultRecord]:
    frame = read_results(csv_path)
    records = []
    for row in frame.to_dict(orient="records"):
        cleaned = {key: _none_if_nan(value) for key, value in row.items()}
        cleaned["realisation_seed"] = int(cleaned["realisation_seed"])
        cleaned["layer"] = int(cleaned["layer"])
        records.append(ResultRecord(**cleaned))
    return records
