"""Measurement CSV ingestion and atomic output writing."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .device_models import MeasurementTable

BASE_COLUMNS = ("state", "stimulus", "response")


class IngestError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


def ingest_measurements(path, require_temperature: bool = False) -> MeasurementTable:
    """Read ``state,stimulus,response[,temperature]`` rows; line numbers are kept."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestError(f"{path} is empty")
        header = [h.strip() for h in header]
        if tuple(header[:3]) != BASE_COLUMNS or len(header) > 4 or (len(header) == 4 and header[3] != "temperature"):
            raise IngestError(f"header must be state,stimulus,response[,temperature], got {','.join(header)}", 1)
        has_t = len(header) == 4
        if require_temperature and not has_t:
            raise IngestError("a temperature column is required", 1)
        rows, lines = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestError(f"expected {len(header)} fields, got {len(row)}", line)
            try:
                vals = [float(c) for c in row]
            except ValueError:
                bad = next(c for c in row if not _is_float(c))
                raise IngestError(f"non-numeric value {bad!r}", line) from None
            if not all(np.isfinite(vals)):
                raise IngestError("non-finite value", line)
            rows.append(vals)
            lines.append(line)
    if not rows:
        raise IngestError(f"{path} has no data rows")
    arr = np.array(rows)
    return MeasurementTable(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3] if has_t else None, np.array(lines))


def _is_float(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def export_measurements(table: MeasurementTable, path) -> None:
    cols = [table.state, table.stimulus, table.response]
    header = list(BASE_COLUMNS)
    if table.temperature is not None:
        cols.append(table.temperature)
        header.append("temperature")
    rows = [header] + [[repr(float(v)) for v in r] for r in zip(*cols)]
    atomic_write_text(path, _csv_text(rows))


def _csv_text(rows) -> str:
    out = []
    for r in rows:
        out.append(",".join(str(c) for c in r))
    return "\n".join(out) + "\n"


def fmt(value) -> str:
    """Stable text form for CSV cells."""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def csv_text(header, rows) -> str:
    return _csv_text([list(header)] + [[fmt(c) for c in r] for r in rows])


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def atomic_write_text(path, text: str) -> str:
    """Write via a temp file and rename; returns the sha256 of the content."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = text.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(data).hexdigest()
