"""Ranging datasets: in-memory columns and the CSV file format.

File layout (UTF-8, ``\\n`` line endings)::

    # uwbcal-dataset v1
    t_s,initiator,responder,dt41_ns,dt32_ns,dt53_ns,dt64_ns,fpp2_dbm,fpp4_dbm,truth_tof_ns,truth_range_m
    0,0,2,300026.5237,...

Floats are written with 12 significant digits (``%.12g``), so a parsed
file re-serialises to identical bytes. Missing truth is an empty field.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import FormatError, VersionMismatch
from .twr import TwrIntervals

DATASET_MAGIC = "# uwbcal-dataset"
DATASET_VERSION = 1
COLUMNS = (
    "t_s",
    "initiator",
    "responder",
    "dt41_ns",
    "dt32_ns",
    "dt53_ns",
    "dt64_ns",
    "fpp2_dbm",
    "fpp4_dbm",
    "truth_tof_ns",
    "truth_range_m",
)
_FIELDS = ("t_s", "initiator", "responder", "dt41", "dt32", "dt53", "dt64", "fpp2", "fpp4", "truth_tof", "truth_range")
_INT_FIELDS = ("initiator", "responder")


@dataclass(frozen=True)
class TwrTransaction:
    timestamp: float
    initiator_id: int
    responder_id: int
    intervals: TwrIntervals
    fpp_p2: float
    fpp_p4: float
    truth_tof: Optional[float] = None
    truth_range: Optional[float] = None


class Dataset:
    """Column store of DS-TWR exchanges, ordered by start time.

    Truth columns hold NaN where the truth is unknown (imported logs).
    """

    def __init__(self, columns: dict):
        n = len(columns["t_s"])
        self.cols = {}
        for name in _FIELDS:
            if name in columns:
                arr = np.asarray(columns[name])
            elif name in ("truth_tof", "truth_range"):
                arr = np.full(n, np.nan)
            else:
                raise FormatError(f"missing column {name}")
            dtype = np.int64 if name in _INT_FIELDS else float
            arr = arr.astype(dtype, copy=True)
            if arr.shape != (n,):
                raise FormatError(f"column {name} has shape {arr.shape}, expected ({n},)")
            self.cols[name] = arr
        self.dropped = 0

    @classmethod
    def from_columns(cls, columns: dict) -> "Dataset":
        return cls(columns)

    @classmethod
    def from_transactions(cls, txs: Iterable[TwrTransaction]) -> "Dataset":
        txs = list(txs)

        def opt(v):
            return np.nan if v is None else v

        return cls(
            {
                "t_s": [t.timestamp for t in txs],
                "initiator": [t.initiator_id for t in txs],
                "responder": [t.responder_id for t in txs],
                "dt41": [t.intervals.dt41 for t in txs],
                "dt32": [t.intervals.dt32 for t in txs],
                "dt53": [t.intervals.dt53 for t in txs],
                "dt64": [t.intervals.dt64 for t in txs],
                "fpp2": [t.fpp_p2 for t in txs],
                "fpp4": [t.fpp_p4 for t in txs],
                "truth_tof": [opt(t.truth_tof) for t in txs],
                "truth_range": [opt(t.truth_range) for t in txs],
            }
        )

    def __len__(self) -> int:
        return len(self.cols["t_s"])

    def __getattr__(self, name):
        cols = self.__dict__.get("cols")
        if cols is not None and name in cols:
            return cols[name]
        raise AttributeError(name)

    def __getitem__(self, k: int) -> TwrTransaction:
        c = self.cols

        def opt(v):
            return None if np.isnan(v) else float(v)

        return TwrTransaction(
            timestamp=float(c["t_s"][k]),
            initiator_id=int(c["initiator"][k]),
            responder_id=int(c["responder"][k]),
            intervals=TwrIntervals(float(c["dt41"][k]), float(c["dt32"][k]), float(c["dt53"][k]), float(c["dt64"][k])),
            fpp_p2=float(c["fpp2"][k]),
            fpp_p4=float(c["fpp4"][k]),
            truth_tof=opt(c["truth_tof"][k]),
            truth_range=opt(c["truth_range"][k]),
        )

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset) or len(self) != len(other):
            return False
        return all(np.array_equal(self.cols[n], other.cols[n], equal_nan=True) for n in _FIELDS)

    @property
    def intervals(self) -> TwrIntervals:
        c = self.cols
        return TwrIntervals(c["dt41"], c["dt32"], c["dt53"], c["dt64"])

    @property
    def tag_ids(self) -> np.ndarray:
        return np.unique(np.concatenate([self.cols["initiator"], self.cols["responder"]]))

    def subset(self, mask) -> "Dataset":
        return Dataset({k: v[mask] for k, v in self.cols.items()})

    def with_columns(self, **updates) -> "Dataset":
        cols = dict(self.cols)
        cols.update(updates)
        return Dataset(cols)

    def canonical(self) -> "Dataset":
        """Values as they would read back from the CSV format."""
        return parse_dataset(serialize_dataset(self))


def _fmt(v: float) -> str:
    if np.isnan(v):
        return ""
    s = "%.12g" % v
    return "0" if s == "-0" else s


def serialize_dataset(ds: Dataset) -> str:
    buf = io.StringIO()
    buf.write(f"{DATASET_MAGIC} v{DATASET_VERSION}\n")
    buf.write(",".join(COLUMNS) + "\n")
    c = ds.cols
    if len(ds) and np.any(np.diff(c["t_s"]) <= 0):
        raise FormatError("timestamps must be strictly increasing")
    for k in range(len(ds)):
        row = [_fmt(c["t_s"][k]), str(int(c["initiator"][k])), str(int(c["responder"][k]))]
        row += [_fmt(c[n][k]) for n in _FIELDS[3:]]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def read_version(line: str, magic: str) -> int:
    line = line.strip()
    if not line.startswith(magic + " v"):
        raise FormatError(f"expected '{magic} v<N>' header, got {line[:60]!r}")
    try:
        return int(line[len(magic) + 2 :])
    except ValueError as exc:
        raise FormatError(f"bad version in {line!r}") from exc


def parse_dataset(text: str) -> Dataset:
    lines = text.splitlines()
    if len(lines) < 2:
        raise FormatError("dataset file too short")
    version = read_version(lines[0], DATASET_MAGIC)
    if version != DATASET_VERSION:
        raise VersionMismatch(f"dataset version {version}, expected {DATASET_VERSION}")
    if tuple(lines[1].split(",")) != COLUMNS:
        raise FormatError("unexpected dataset header")
    rows = [ln.split(",") for ln in lines[2:] if ln]
    data = {name: [] for name in _FIELDS}
    for lineno, row in enumerate(rows, start=3):
        if len(row) != len(COLUMNS):
            raise FormatError(f"line {lineno}: expected {len(COLUMNS)} fields")
        try:
            for name, val in zip(_FIELDS, row):
                if name in _INT_FIELDS:
                    data[name].append(int(val))
                elif val == "":
                    if name not in ("truth_tof", "truth_range"):
                        raise FormatError(f"line {lineno}: empty {name}")
                    data[name].append(np.nan)
                else:
                    data[name].append(float(val))
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
    ds = Dataset(data)
    if len(ds) and np.any(np.diff(ds.t_s) <= 0):
        raise FormatError("timestamps must be strictly increasing")
    return ds


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(serialize_dataset(ds), encoding="utf-8", newline="\n")


def read_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_text(encoding="utf-8"))
