"""Price series types, price ratios, quantiles and Tukey-sample filtering."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import EmptySample, NonPositivePrice, SeriesTooShort, ScanguardError


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PriceSeries:
    """Weekly prices and sales volumes of one item at one store."""

    store_id: str
    item_id: str
    weeks: np.ndarray
    prices: np.ndarray
    volumes: np.ndarray

    def __post_init__(self):
        weeks = _frozen(self.weeks, dtype=np.int64)
        prices = _frozen(self.prices)
        volumes = _frozen(self.volumes)
        if not (len(weeks) == len(prices) == len(volumes)):
            raise ScanguardError("weeks, prices and volumes must have equal length")
        if len(prices) < 2:
            raise SeriesTooShort(f"need at least 2 observations, got {len(prices)}")
        if np.any(~(prices > 0)):
            raise NonPositivePrice("all prices must be positive")
        if np.any(~(volumes > 0)):
            raise ScanguardError("all volumes must be positive")
        if np.any(np.diff(weeks) <= 0):
            raise ScanguardError("weeks must be strictly increasing")
        object.__setattr__(self, "weeks", weeks)
        object.__setattr__(self, "prices", prices)
        object.__setattr__(self, "volumes", volumes)

    def __len__(self) -> int:
        return len(self.prices)

    def scaled(self, k: float) -> "PriceSeries":
        return PriceSeries(self.store_id, self.item_id, self.weeks, self.prices * k, self.volumes)


@dataclass(frozen=True)
class RatioSeries:
    """Consecutive price ratios ``R_t = P_t / P_{t-1}`` with their volume pairs.

    ``vol_pairs`` has shape ``(n, 2)`` holding ``(V_{t-1}, V_t)``. ``gaps`` is the
    number of weeks each ratio spans (1 when no week is missing). ``store_ids``
    is set when the series pools observations from several stores.
    """

    t_index: np.ndarray
    ratios: np.ndarray
    log_ratios: np.ndarray
    vol_pairs: np.ndarray
    gaps: Optional[np.ndarray] = None
    store_ids: Optional[tuple] = None

    def __post_init__(self):
        t_index = _frozen(self.t_index, dtype=np.int64)
        ratios = _frozen(self.ratios)
        log_ratios = _frozen(self.log_ratios)
        vol_pairs = _frozen(self.vol_pairs).reshape(-1, 2)
        n = len(ratios)
        if not (len(t_index) == len(log_ratios) == len(vol_pairs) == n):
            raise ScanguardError("RatioSeries fields must be aligned")
        if n and (np.any(~np.isfinite(ratios)) or np.any(ratios <= 0)):
            raise ScanguardError("ratios must be finite and positive")
        gaps = _frozen(np.ones(n) if self.gaps is None else self.gaps, dtype=np.int64)
        if len(gaps) != n:
            raise ScanguardError("gaps must align with ratios")
        store_ids = self.store_ids
        if store_ids is not None:
            store_ids = tuple(store_ids)
            if len(store_ids) != n:
                raise ScanguardError("store_ids must align with ratios")
        object.__setattr__(self, "t_index", t_index)
        object.__setattr__(self, "ratios", ratios)
        object.__setattr__(self, "log_ratios", log_ratios)
        object.__setattr__(self, "vol_pairs", vol_pairs)
        object.__setattr__(self, "gaps", gaps)
        object.__setattr__(self, "store_ids", store_ids)

    def __len__(self) -> int:
        return len(self.ratios)

    def take(self, idx) -> "RatioSeries":
        """Subsequence at integer positions or boolean mask ``idx``."""
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        stores = None if self.store_ids is None else tuple(self.store_ids[i] for i in idx)
        return RatioSeries(
            self.t_index[idx],
            self.ratios[idx],
            self.log_ratios[idx],
            self.vol_pairs[idx],
            self.gaps[idx],
            stores,
        )

    @classmethod
    def concat(cls, parts: Sequence["RatioSeries"]) -> "RatioSeries":
        parts = list(parts)
        if not parts:
            return cls(np.array([], dtype=np.int64), [], [], np.empty((0, 2)))
        stores = None
        if any(p.store_ids is not None for p in parts):
            stores = tuple(s for p in parts for s in (p.store_ids or ("",) * len(p)))
        return cls(
            np.concatenate([p.t_index for p in parts]),
            np.concatenate([p.ratios for p in parts]),
            np.concatenate([p.log_ratios for p in parts]),
            np.concatenate([p.vol_pairs for p in parts]),
            np.concatenate([p.gaps for p in parts]),
            stores,
        )

    @classmethod
    def from_log_ratios(cls, t_index, log_ratios, vol_pairs) -> "RatioSeries":
        y = np.asarray(log_ratios, dtype=float)
        return cls(t_index, np.exp(y), y, vol_pairs)


@dataclass(frozen=True)
class QuartileSummary:
    q1: float
    q2: float
    q3: float

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


def compute_ratios(series: PriceSeries, tag_store: bool = False) -> RatioSeries:
    """Turn a price series into ``n - 1`` ratios labelled by the later week."""
    p = series.prices
    ratios = p[1:] / p[:-1]
    vol_pairs = np.column_stack([series.volumes[:-1], series.volumes[1:]])
    stores = (series.store_id,) * (len(p) - 1) if tag_store else None
    return RatioSeries(
        t_index=series.weeks[1:],
        ratios=ratios,
        log_ratios=np.log(ratios),
        vol_pairs=vol_pairs,
        gaps=np.diff(series.weeks),
        store_ids=stores,
    )


def quantile(sample, p: float) -> float:
    """Linear-interpolation quantile: ``x[i] + f * (x[i+1] - x[i])`` at ``g = (n-1)p``."""
    x = np.asarray(sample, dtype=float).ravel()
    if x.size == 0:
        raise EmptySample("quantile of an empty sample")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    # numpy's default "linear" method is exactly this rule
    return float(np.quantile(x, p, method="linear"))


def quartiles(sample) -> QuartileSummary:
    x = np.asarray(sample, dtype=float).ravel()
    if x.size == 0:
        raise EmptySample("quartiles of an empty sample")
    q1, q2, q3 = np.quantile(x, [0.25, 0.5, 0.75], method="linear")
    return QuartileSummary(float(q1), float(q2), float(q3))


def tukey_filter(rs: RatioSeries, eps: float = 0.0) -> RatioSeries:
    """Keep observations whose price changed, i.e. ``|R_t - 1| > eps``.

    With the default ``eps = 0`` this is an exact ``R_t != 1`` comparison.
    """
    if eps == 0.0:
        keep = rs.ratios != 1.0
    else:
        keep = np.abs(rs.ratios - 1.0) > eps
    return rs.take(keep)
