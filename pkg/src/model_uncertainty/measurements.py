"""
Delimited-text measurement files.

One row per (series, input) cell with the columns

    series,input_index,q_realized,q_setpoint,<sensor 1>,...,<sensor nS>

Forces are in newtons, displacements in micrometers. Values are converted
to meters through their decimal representation, so exporting and
ingesting a tensor reproduces it exactly.
"""

from __future__ import annotations

from collections.abc import Callable
from decimal import Decimal, InvalidOperation
from pathlib import Path

import numpy as np
import pandas as pd

from .estimation import MeasurementTensor, SensorLayout
from .exceptions import DimensionMismatch, MalformedRow, NonFiniteValue
from .logging import get_logger
from .model import InputSchedule

logger = get_logger(__name__)

INDEX_COLUMNS = ("series", "input_index", "q_realized", "q_setpoint")
MICROMETER_EXPONENT = 6


def _to_meters(text: str) -> float:
    return float(Decimal(text).scaleb(-MICROMETER_EXPONENT))


def _to_micrometers(value: float) -> str:
    return str(Decimal(repr(float(value))).scaleb(MICROMETER_EXPONENT))


def _parse(
    raw: object, column: str, line: int, convert: Callable[[str], float] = float
) -> float:
    text = raw.strip() if isinstance(raw, str) else ""
    if not text:
        raise MalformedRow("Missing value", line=line, column=column)
    try:
        value = convert(text)
    except (ValueError, InvalidOperation) as exc:
        raise MalformedRow(
            "Value is not a number", line=line, column=column, value=text
        ) from exc
    if not np.isfinite(value):
        raise NonFiniteValue("Non-finite value", line=line, column=column)
    return float(value)


def _parse_index(raw: object, column: str, line: int) -> int:
    value = _parse(raw, column, line)
    if not value.is_integer():
        raise MalformedRow(
            "Index is not an integer", line=line, column=column, value=str(raw).strip()
        )
    return int(value)


def ingest_measurements(
    path: str | Path, layout: SensorLayout | None = None
) -> MeasurementTensor:
    """
    Read a measurement file into a tensor.

    The schedule is built from the setpoints, which must agree between
    series; the first maximum ends the loading phase.

    Args:
        path: CSV file
        layout: Sensor sigmas and design; unit sigmas with all sensors on
            when omitted

    Raises:
        MalformedRow: unreadable or missing cell, with its line number
        DimensionMismatch: cells missing, duplicated or inconsistent
        NonFiniteValue: NaN or infinite values
    """
    try:
        frame = pd.read_csv(
            path, dtype=str, keep_default_na=False, skipinitialspace=True
        )
    except pd.errors.ParserError as exc:
        raise MalformedRow("Unreadable measurement file", detail=str(exc)) from exc
    except pd.errors.EmptyDataError as exc:
        raise MalformedRow("Measurement file is empty", line=1) from exc
    columns = [str(c).strip() for c in frame.columns]
    if tuple(columns[:4]) != INDEX_COLUMNS or len(columns) < 5:
        raise MalformedRow(
            "Header must start with series,input_index,q_realized,q_setpoint "
            "followed by sensor columns",
            line=1,
            header=columns,
        )
    sensors = columns[4:]
    frame.columns = columns

    cells: dict[tuple[int, int], tuple[float, float, list[float]]] = {}
    for offset, row in enumerate(frame.itertuples(index=False, name=None)):
        line = offset + 2
        series = _parse_index(row[0], "series", line)
        input_index = _parse_index(row[1], "input_index", line)
        realized = _parse(row[2], "q_realized", line)
        setpoint = _parse(row[3], "q_setpoint", line)
        values = [
            _parse(text, name, line, convert=_to_meters)
            for text, name in zip(row[4:], sensors)
        ]
        if series < 0 or input_index < 0:
            raise MalformedRow("Negative index", line=line)
        if (series, input_index) in cells:
            raise MalformedRow(
                "Duplicate cell", line=line, series=series, input_index=input_index
            )
        cells[(series, input_index)] = (realized, setpoint, values)

    if not cells:
        raise DimensionMismatch("Measurement file has no rows", path=str(path))
    n_m = max(i for i, _ in cells) + 1
    n_q = max(j for _, j in cells) + 1
    missing = [(i, j) for i in range(n_m) for j in range(n_q) if (i, j) not in cells]
    if missing:
        raise DimensionMismatch(
            "Measurement file is missing cells",
            missing=len(missing),
            first_series=missing[0][0],
            first_input=missing[0][1],
        )

    z = np.empty((n_m, n_q, len(sensors)))
    realized = np.empty((n_m, n_q))
    setpoints = np.empty((n_m, n_q))
    for (i, j), (q_real, q_set, values) in cells.items():
        z[i, j] = values
        realized[i, j] = q_real
        setpoints[i, j] = q_set
    if not np.all(setpoints == setpoints[0]):
        raise DimensionMismatch("Setpoints differ between series")

    if layout is None:
        layout = SensorLayout(sigma=np.ones(len(sensors)))
    if layout.n_s != len(sensors):
        raise DimensionMismatch(
            "Sensor columns do not match the layout",
            columns=len(sensors),
            n_s=layout.n_s,
        )
    tensor = MeasurementTensor(
        z=z,
        schedule=InputSchedule.from_setpoints(setpoints[0]),
        layout=layout,
        realized=realized,
    )
    logger.info(
        "Measurements ingested",
        path=str(path),
        n_m=n_m,
        n_q=n_q,
        n_s=len(sensors),
    )
    return tensor


def export_measurements(
    tensor: MeasurementTensor,
    path: str | Path,
    sensor_names: list[str] | None = None,
) -> Path:
    """Write a tensor in the format read by ``ingest_measurements``."""
    names = sensor_names or [f"s{k + 1}" for k in range(tensor.n_s)]
    if len(names) != tensor.n_s:
        raise DimensionMismatch("One name per sensor required", n_s=tensor.n_s)
    setpoints = tensor.schedule.nominal[:, 0]
    rows = []
    for i in range(tensor.n_m):
        applied = setpoints if tensor.realized is None else tensor.realized[i]
        for j in range(tensor.n_q):
            row = {
                "series": i,
                "input_index": j,
                "q_realized": repr(float(applied[j])),
                "q_setpoint": repr(float(setpoints[j])),
            }
            row.update(
                {name: _to_micrometers(tensor.z[i, j, k]) for k, name in enumerate(names)}
            )
            rows.append(row)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=[*INDEX_COLUMNS, *names]).to_csv(
        target, index=False, lineterminator="\n"
    )
    logger.info("Measurements exported", path=str(target), rows=len(rows))
    return target
