"""Confusion counts, SEN/SPE/ACC and cross-replicate aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .detectors import FlagVector
from .errors import EmptyInput, IndexMismatch

COLUMNS = ("tn", "fn", "fp", "tp", "sen", "spe", "acc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: float
    tn: float
    fp: float
    fn: float

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def positives(self) -> float:
        return self.tp + self.fn

    @property
    def negatives(self) -> float:
        return self.tn + self.fp


@dataclass(frozen=True)
class RateSummary:
    """Rates; ``None`` marks a rate whose denominator is zero."""

    sen: Optional[float]
    spe: Optional[float]
    acc: Optional[float]


def confusion(flags: FlagVector, truth: Iterable[int]) -> ConfusionCounts:
    truth = np.asarray(sorted(set(int(t) for t in truth)), dtype=np.int64)
    is_true = np.isin(flags.t_index, truth)
    if is_true.sum() != truth.size:
        missing = np.setdiff1d(truth, flags.t_index)
        raise IndexMismatch(f"anomaly indices not among flagged labels: {missing[:5].tolist()}")
    f = flags.is_outlier
    return ConfusionCounts(
        tp=int(np.sum(f & is_true)),
        tn=int(np.sum(~f & ~is_true)),
        fp=int(np.sum(f & ~is_true)),
        fn=int(np.sum(~f & is_true)),
    )


def _ratio(num, den) -> Optional[float]:
    return num / den if den > 0 else None


def rates(c: ConfusionCounts) -> RateSummary:
    return RateSummary(
        sen=_ratio(c.tp, c.positives),
        spe=_ratio(c.tn, c.negatives),
        acc=_ratio(c.tp + c.tn, c.positives + c.negatives),
    )


@dataclass(frozen=True)
class ColumnStat:
    mean: Optional[float]
    sd: Optional[float]
    n: int
    excluded: int


def aggregate(per_replicate: Sequence[Tuple[ConfusionCounts, RateSummary]]) -> dict:
    """Column-wise mean and sample sd (``n - 1``) over replicates.

    Undefined rates are left out of their column and counted in ``excluded``.
    A column with a single value gets ``sd = 0``.
    """
    if len(per_replicate) == 0:
        raise EmptyInput("nothing to aggregate")
    cols = {k: [] for k in COLUMNS}
    for c, r in per_replicate:
        for k in ("tn", "fn", "fp", "tp"):
            cols[k].append(getattr(c, k))
        for k in ("sen", "spe", "acc"):
            cols[k].append(getattr(r, k))
    out = {}
    total = len(per_replicate)
    for k, vals in cols.items():
        kept = np.array([v for v in vals if v is not None], dtype=float)
        if kept.size == 0:
            out[k] = ColumnStat(None, None, 0, total)
            continue
        sd = float(np.std(kept, ddof=1)) if kept.size > 1 else 0.0
        out[k] = ColumnStat(float(kept.mean()), sd, int(kept.size), total - int(kept.size))
    return out


def fmt(x: Optional[float], digits: int = 2) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NA"
    return f"{x:.{digits}f}"
