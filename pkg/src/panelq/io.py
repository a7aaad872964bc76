"""Panel CSV ingestion and report serialization."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .panel import PanelData

SCHEMA_VERSION = 1
REQUIRED_COLUMNS = ("id", "time", "y")


class PanelCsvError(ValueError):
    """Malformed panel file; ``code`` is a stable machine-readable tag."""

    def __init__(self, code: str, message: str, line: int = None):
        self.code = code
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


def _sort_key(labels):
    """Numeric order when every label parses as a number, text order otherwise."""
    try:
        values = [float(v) for v in labels]
    except ValueError:
        return lambda v: v
    if all(math.isfinite(v) for v in values):
        return float
    return lambda v: v


def parse_panel_csv(path) -> PanelData:
    """Read a long-format panel ``id,time,y,x1,...,xp``.

    Rows are grouped by ``id`` (individuals ordered by id) and sorted by
    ``time`` within each individual, so the input row order does not matter.
    Covariates keep their header order.
    """
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelCsvError("E_CSV_EMPTY", "file is empty", 1) from None
        header = [h.strip() for h in header]
        if tuple(h.lower() for h in header[:3]) != REQUIRED_COLUMNS:
            raise PanelCsvError(
                "E_CSV_COLUMNS",
                f"header must start with id,time,y; got {','.join(header[:3]) or '(nothing)'}", 1)
        covariates = header[3:]
        if len(set(header)) != len(header) or any(not h for h in header):
            raise PanelCsvError("E_CSV_COLUMNS", "column names must be non-empty and unique", 1)
        width = len(header)

        ids, times, values = [], [], []
        seen = {}
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise PanelCsvError("E_CSV_FIELDS",
                                    f"expected {width} fields, found {len(row)}", line)
            cells = [c.strip() for c in row]
            for name, cell in zip(header, cells):
                if cell == "":
                    raise PanelCsvError("E_CSV_MISSING", f"missing value in column {name!r}", line)
            nums = []
            for name, cell in zip(header[2:], cells[2:]):
                try:
                    v = float(cell)
                except ValueError:
                    v = math.nan
                if not math.isfinite(v):
                    raise PanelCsvError("E_CSV_NUMERIC",
                                        f"column {name!r} has non-numeric value {cell!r}", line)
                nums.append(v)
            key = (cells[0], cells[1])
            if key in seen:
                raise PanelCsvError(
                    "E_CSV_DUPLICATE",
                    f"duplicate (id, time) pair ({key[0]}, {key[1]}); first seen on line {seen[key]}",
                    line)
            seen[key] = line
            ids.append(cells[0])
            times.append(cells[1])
            values.append(nums)
    if not values:
        raise PanelCsvError("E_CSV_EMPTY", "no data rows", 2)

    labels = sorted(set(ids), key=_sort_key(set(ids)))
    index = {lab: i for i, lab in enumerate(labels)}
    time_key = _sort_key(times)
    order = sorted(range(len(ids)), key=lambda r: (index[ids[r]], time_key(times[r])))
    vals = np.asarray(values, dtype=float)[order]
    return PanelData(
        y=vals[:, 0], x=vals[:, 1:], ids=np.array([index[ids[r]] for r in order]),
        n=len(labels), labels=tuple(labels),
        times=np.array([times[r] for r in order], dtype=object),
        covariate_names=tuple(covariates))


def write_panel_csv(data: PanelData, path) -> None:
    """Write ``data`` in the layout read by :func:`parse_panel_csv`, floats in ``repr`` form."""
    times = data.times
    if times is None:
        # number each individual's rows 1, 2, ... in their stored order
        order = np.argsort(data.ids, kind="stable")
        starts = np.concatenate([[0], np.cumsum(data.t_lengths)[:-1]])
        times = np.empty(data.n_obs, dtype=np.int64)
        times[order] = np.arange(data.n_obs) - starts[data.ids[order]] + 1
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(REQUIRED_COLUMNS) + list(data.covariate_names))
        for r in range(data.n_obs):
            writer.writerow([data.labels[data.ids[r]], times[r], repr(float(data.y[r]))]
                            + [repr(float(v)) for v in data.x[r]])


# -- structured output -----------------------------------------------------------

def to_json_text(obj) -> str:
    """Canonical JSON: fixed key order, shortest round-trip floats, no NaN."""
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten(obj, prefix=()):
    """Yield ``(path, index, value)`` leaves of nested dicts and lists.

    ``path`` joins dict keys with dots; ``index`` is the position within the
    innermost list (``""`` for values outside lists).
    """
    if isinstance(obj, dict):
        for key, val in obj.items():
            yield from flatten(val, prefix + (str(key),))
    elif isinstance(obj, (list, tuple)):
        for i, val in enumerate(obj):
            if isinstance(val, (dict, list, tuple)):
                for path, idx, leaf in flatten(val, prefix):
                    yield path, (f"{i}" if idx == "" else f"{i}.{idx}"), leaf
            else:
                yield ".".join(prefix), str(i), val
    else:
        yield ".".join(prefix), "", obj


@dataclass(frozen=True)
class FitReport:
    """Estimation results for one panel at one or more quantile levels.

    ``meta`` describes the input and settings; ``blocks`` holds one dict per
    quantile level (see the README for the field list).
    """

    meta: dict
    blocks: tuple

    def to_dict(self) -> dict:
        return {"schema": SCHEMA_VERSION, "kind": "fit", **self.meta, "blocks": list(self.blocks)}

    @classmethod
    def from_dict(cls, obj: dict) -> "FitReport":
        if obj.get("schema") != SCHEMA_VERSION or obj.get("kind") != "fit":
            raise ValueError("not a schema-1 fit report")
        meta = {k: v for k, v in obj.items() if k not in ("schema", "kind", "blocks")}
        return cls(meta=meta, blocks=tuple(obj["blocks"]))

    def to_json(self) -> str:
        return to_json_text(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "FitReport":
        return cls.from_dict(json.loads(text))

    def csv_rows(self):
        """Long rows ``(tau, section, index, value)``; metadata rows have an empty tau."""
        for path, idx, val in flatten(self.meta):
            yield "", path, idx, val
        for block in self.blocks:
            tau = repr(float(block["tau"]))
            for path, idx, val in flatten({k: v for k, v in block.items() if k != "tau"}):
                yield tau, path, idx, val


def write_rows_csv(path_or_fh, header, rows) -> None:
    def emit(fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    if hasattr(path_or_fh, "write"):
        emit(path_or_fh)
    else:
        with open(path_or_fh, "w", newline="", encoding="utf-8") as fh:
            emit(fh)
