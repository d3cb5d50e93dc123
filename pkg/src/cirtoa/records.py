"""Canonical record files and adapters for CSV measurement dumps.

A record file is JSON Lines, one object per line::

    {"samples": [...], "delta_t_ns": 1.0016, "toa_true": 42.3,
     "toa_device": 43.0, "range_true_m": 3.1, "environment": "room_a"}

``toa_true`` and ``toa_device`` may be null. The noise floor is not
stored; readers re-estimate it from the samples.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cir import (
    DEFAULT_DELTA_T_NS,
    NOISE_WINDOW,
    CirTrace,
    MeasurementRecord,
    estimate_noise_sigma,
    label_toa,
)
from .errors import CirToaError, RecordFormatError

FIELDS = ("samples", "delta_t_ns", "toa_true", "toa_device", "range_true_m", "environment")


def record_to_dict(record: MeasurementRecord) -> dict:
    return {
        "samples": record.cir.samples.tolist(),
        "delta_t_ns": record.cir.delta_t,
        "toa_true": record.toa_true,
        "toa_device": record.toa_device,
        "range_true_m": record.range_true,
        "environment": record.environment,
    }


def _number(doc, key, optional=False):
    v = doc.get(key)
    if v is None and optional:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ValueError(f"field {key!r} must be a finite number, got {v!r}")
    return float(v)


def record_from_dict(doc: dict) -> MeasurementRecord:
    if not isinstance(doc, dict):
        raise ValueError("record must be a JSON object")
    unknown = set(doc) - set(FIELDS)
    if unknown:
        raise ValueError(f"unknown fields {sorted(unknown)}")
    for key in ("samples", "delta_t_ns", "range_true_m"):
        if key not in doc:
            raise ValueError(f"missing field {key!r}")
    samples = doc["samples"]
    if not isinstance(samples, list) or not samples:
        raise ValueError("field 'samples' must be a non-empty array")
    if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in samples):
        raise ValueError("field 'samples' must contain numbers only")
    samples = np.array(samples, dtype=np.float64)
    env = doc.get("environment", "")
    if not isinstance(env, str):
        raise ValueError("field 'environment' must be a string")
    delta_t = _number(doc, "delta_t_ns")
    noise = estimate_noise_sigma(samples) if samples.size >= 2 * NOISE_WINDOW else 0.0
    try:
        trace = CirTrace(samples, delta_t, noise)
        return MeasurementRecord(
            trace,
            _number(doc, "toa_true", optional=True),
            _number(doc, "range_true_m"),
            env,
            _number(doc, "toa_device", optional=True),
        )
    except CirToaError as exc:
        raise ValueError(str(exc)) from None


def dumps_record(record: MeasurementRecord) -> str:
    return json.dumps(record_to_dict(record), separators=(",", ":"))


def write_records(path, records: Iterable[MeasurementRecord]) -> int:
    lines = [dumps_record(r) for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines))
    return len(lines)


def read_records(path) -> list[MeasurementRecord]:
    """Parse a record file; every invalid line is reported, none is skipped."""
    records, problems = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(record_from_dict(json.loads(line)))
            except (ValueError, TypeError) as exc:
                problems.append((lineno, str(exc)))
    if problems:
        detail = "; ".join(f"line {n}: {msg}" for n, msg in problems[:10])
        raise RecordFormatError(f"{path}: {len(problems)} invalid record(s): {detail}", [n for n, _ in problems])
    return records


# ------------------------------------------------------------------ ingest


@dataclass(frozen=True)
class CsvFormat:
    """Column mapping for a CSV measurement dump.

    The CIR is either spread over columns ``<cir_prefix>0, <cir_prefix>1, ...``
    or held in ``cir_column`` as ``;``-separated numbers. If ``window_after``
    is set, the CIR is cut to ``window_before`` samples before the device's
    first-path index plus ``window_after`` samples from it on.
    """

    toa_device: str = "toa_device"
    ranging_error: str = "ranging_error"
    range_true: str = "range_true"
    cir_prefix: str | None = "CIR"
    cir_column: str | None = None
    delta_t_column: str | None = None
    delta_t_ns: float = DEFAULT_DELTA_T_NS
    environment_column: str | None = None
    environment: str = ""
    window_before: int = 0
    window_after: int | None = None
    magnitude_scale: float = 1.0


FORMAT_PRESETS = {
    # 152 samples from the first detected path on
    "office": CsvFormat(toa_device="FP_IDX", window_before=0, window_after=152),
    # 5 samples before the first detected path plus 152 from it
    "room": CsvFormat(toa_device="FP_IDX", window_before=5, window_after=152),
    "generic": CsvFormat(),
}


def csv_format(hints: dict | None = None, preset: str = "generic") -> CsvFormat:
    if preset not in FORMAT_PRESETS:
        raise RecordFormatError(f"unknown ingest preset {preset!r}")
    base = FORMAT_PRESETS[preset]
    return CsvFormat(**{**base.__dict__, **(hints or {})})


def _cir_from_row(row: dict, fmt: CsvFormat, cir_cols: Sequence[str]) -> np.ndarray:
    if fmt.cir_column:
        raw = row.get(fmt.cir_column) or ""
        values = [float(v) for v in raw.split(";") if v.strip()]
    else:
        values = [float(row[c]) for c in cir_cols]
    if not values:
        raise ValueError("empty CIR")
    return np.abs(np.array(values)) * fmt.magnitude_scale


def _field(row, column, name):
    value = row.get(column)
    if value is None or str(value).strip() == "":
        raise ValueError(f"missing {name} (column {column!r})")
    return float(value)


def ingest_csv(path, fmt: CsvFormat) -> list[MeasurementRecord]:
    """Canonical records with ToA labels derived from device ToA and ranging error.

    Raises :class:`RecordFormatError` naming every rejected data row
    (1-based, header excluded); nothing is returned on failure.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        cir_cols = []
        if not fmt.cir_column and fmt.cir_prefix:
            cir_cols = sorted(
                (c for c in header if c.startswith(fmt.cir_prefix) and c[len(fmt.cir_prefix):].isdigit()),
                key=lambda c: int(c[len(fmt.cir_prefix):]),
            )
        rows = list(reader)
    if rows and not fmt.cir_column and not cir_cols:
        raise RecordFormatError(f"{path}: no CIR columns with prefix {fmt.cir_prefix!r}")

    records, problems = [], []
    for i, row in enumerate(rows, start=1):
        try:
            cir = _cir_from_row(row, fmt, cir_cols)
            toa_dev = _field(row, fmt.toa_device, "device ToA")
            eps_r = _field(row, fmt.ranging_error, "ranging error")
            r_true = _field(row, fmt.range_true, "true range")
            dt = _field(row, fmt.delta_t_column, "delta_t") if fmt.delta_t_column else fmt.delta_t_ns
            if not dt > 0:
                raise ValueError(f"delta_t must be positive, got {dt}")
            env = row.get(fmt.environment_column, "") if fmt.environment_column else fmt.environment
            if fmt.window_after is not None:
                start = int(math.floor(toa_dev)) - fmt.window_before
                stop = int(math.floor(toa_dev)) + fmt.window_after
                if start < 0 or stop > cir.size:
                    raise ValueError(f"window [{start}, {stop}) exceeds CIR of {cir.size} samples")
                cir = cir[start:stop]
                toa_dev -= start
            toa_true = label_toa(toa_dev, eps_r, dt)
            noise = estimate_noise_sigma(cir) if cir.size >= 2 * NOISE_WINDOW else 0.0
            records.append(MeasurementRecord(CirTrace(cir, dt, noise), toa_true, r_true, env, toa_dev))
        except (ValueError, KeyError, TypeError, CirToaError) as exc:
            problems.append((i, str(exc)))
    if problems:
        detail = "; ".join(f"row {n}: {msg}" for n, msg in problems[:10])
        raise RecordFormatError(f"{path}: {len(problems)} rejected row(s): {detail}", [n for n, _ in problems])
    return records
