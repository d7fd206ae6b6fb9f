"""Detection-score arithmetic: mAP, mTP, NDS and table average ranks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from ..errors import ParameterError

TP_NAMES = ("mATE", "mASE", "mAOE", "mAVE", "mAAE")


def compute_map(ap) -> float:
    """Mean over all ``U x S`` average-precision entries."""
    ap = np.asarray(ap, dtype=np.float64)
    if ap.size == 0:
        raise ParameterError("empty AP matrix")
    if np.any((ap < 0) | (ap > 1)) or not np.all(np.isfinite(ap)):
        raise ParameterError("AP entries must lie in [0, 1]")
    return float(ap.mean())


def compute_mtp(tp) -> np.ndarray:
    """Per-metric means over classes for a ``W x S`` true-positive error matrix."""
    tp = np.asarray(tp, dtype=np.float64)
    if tp.ndim != 2 or tp.size == 0:
        raise ParameterError("TP matrix must be a non-empty W x S array")
    return tp.mean(axis=1)


def compute_nds(map_: float, mtp: Sequence[float]) -> float:
    """``0.5 * mAP + 0.1 * sum(1 - min(1, mTP_w))``."""
    mtp = np.asarray(mtp, dtype=np.float64)
    if not 0.0 <= map_ <= 1.0:
        raise ParameterError(f"mAP {map_} outside [0, 1]")
    if mtp.shape != (5,) or np.any(mtp < 0):
        raise ParameterError("need five non-negative mTP values")
    return 0.5 * map_ + 0.1 * float(np.sum(1.0 - np.minimum(1.0, mtp)))


def average_rank(table, higher_better: Sequence[bool], method: str = "average") -> np.ndarray:
    """Mean per-metric rank of each row (1 = best).

    ``method`` is the tie rule passed to ``scipy.stats.rankdata``:
    ``"average"`` gives tied rows the mean of the ranks they span,
    ``"dense"`` gives them the same rank with no gap after.
    """
    t = np.asarray(table, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] < 2:
        raise ParameterError("need at least two rows")
    if len(higher_better) != t.shape[1]:
        raise ParameterError("one direction flag per metric column")
    signs = np.where(np.asarray(higher_better, dtype=bool), -1.0, 1.0)
    ranks = rankdata(t * signs, method=method, axis=0)
    return ranks.mean(axis=1)


@dataclass
class DetectionRow:
    name: str
    mAP: float
    mTP: tuple
    NDS: Optional[float] = None
    size: Optional[float] = None
    gflops: Optional[float] = None
    tau_E: Optional[float] = None
    tau_FPN: Optional[float] = None
    tau_D: Optional[float] = None
    tau: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def computed_nds(self) -> float:
        return compute_nds(self.mAP, self.mTP)


class CsvFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


_OPTIONAL = ("NDS", "size", "gflops", "tau_E", "tau_FPN", "tau_D", "tau")


def _num(value: str, line: int, col: str) -> float:
    try:
        out = float(value)
    except ValueError:
        raise CsvFormatError(line, f"column {col!r}: {value!r} is not a number") from None
    if not math.isfinite(out):
        raise CsvFormatError(line, f"column {col!r} is not finite")
    return out


def read_rows(path) -> list[DetectionRow]:
    """Read a detection table with columns ``name, mAP, mATE..mAAE`` and optional extras."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(1, "empty file") from None
        need = ("name", "mAP") + TP_NAMES
        missing = [c for c in need if c not in header]
        if missing:
            raise CsvFormatError(1, f"missing columns {missing}")
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise CsvFormatError(line, f"expected {len(header)} fields, got {len(rec)}")
            cells = dict(zip(header, rec))
            opt = {c: _num(cells[c], line, c) for c in _OPTIONAL if cells.get(c, "") != ""}
            row = DetectionRow(
                name=cells["name"],
                mAP=_num(cells["mAP"], line, "mAP"),
                mTP=tuple(_num(cells[c], line, c) for c in TP_NAMES),
                **opt,
            )
            try:
                row.computed_nds()
            except ParameterError as exc:
                raise CsvFormatError(line, str(exc)) from None
            rows.append(row)
    if not rows:
        raise CsvFormatError(2, "no data rows")
    return rows


# columns ranked by default, with higher-is-better flags
RANK_COLUMNS = (("mAP", True), ("NDS", True)) + tuple((n, False) for n in TP_NAMES)
RANK_OPTIONAL = (("size", False), ("gflops", False), ("tau_E", False), ("tau", False))


def rank_table(rows: Sequence[DetectionRow], method: str = "average") -> np.ndarray:
    """Average rank over mAP, NDS, the mTP errors and any cost column present in every row.

    A row's own NDS value is ranked when given, otherwise the computed one.
    """
    cols, flags = [], []
    for name, hb in RANK_COLUMNS:
        if name == "NDS":
            cols.append([r.computed_nds() if r.NDS is None else r.NDS for r in rows])
        elif name == "mAP":
            cols.append([r.mAP for r in rows])
        else:
            cols.append([r.mTP[TP_NAMES.index(name)] for r in rows])
        flags.append(hb)
    for name, hb in RANK_OPTIONAL:
        vals = [getattr(r, name) for r in rows]
        if all(v is not None for v in vals):
            cols.append(vals)
            flags.append(hb)
    return average_rank(np.array(cols).T, flags, method=method)


def write_metrics(path, rows: Sequence[DetectionRow], method: str = "average") -> None:
    ranks = rank_table(rows, method) if len(rows) >= 2 else [float("nan")] * len(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "mAP", "NDS", "avg_rank"])
        for r, rk in zip(rows, ranks):
            w.writerow([r.name, repr(r.mAP), repr(r.computed_nds()), repr(float(rk))])
