"""
Output records: fixed-format floats, CSV tables with unit headers, JSON
encoding of complex data and atomic file writes.
"""

import csv
import io
import json
import logging
import os
import tempfile
from enum import Enum
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "{:.11e}"  # 12 significant digits


def fmt(value: Any) -> str:
    """Render a cell: floats in scientific notation, everything else as str."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT.format(float(value))
    if value is None:
        return ""
    return str(value)


def to_jsonable(obj: Any) -> Any:
    """Recursively convert numpy and complex values; complex -> [re, im]."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Enum):
        return obj.value
    return obj


def atomic_write(path: str, data: bytes) -> None:
    """Write to a temp file in the target directory, then os.replace."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """RFC-4180 CSV (CRLF line ends); header entries carry units, e.g. tau[1/omega]."""
    atomic_write(path, csv_text(header, rows).encode("utf-8"))
    logger.debug(f"wrote {path}")
    return path


def write_json(path: str, doc: Any) -> str:
    text = json.dumps(to_jsonable(doc), indent=2, sort_keys=True)
    atomic_write(path, (text + "\n").encode("utf-8"))
    logger.debug(f"wrote {path}")
    return path


def dict_rows(rows: List[Dict], columns: Sequence[str]) -> List[List[Any]]:
    """Project dict records onto an ordered column list."""
    return [[r.get(c) for c in columns] for r in rows]
