"""Local-constant (Nadaraya-Watson) estimation of the log-ratio variance surface.

The surface maps a volume pair ``(V_{t-1}, V_t)`` to the conditional variance
of ``Y_t = log R_t``. Under control the mean of ``Y_t`` is zero, so the
squared log-ratios are smoothed directly with a product Gaussian kernel.
Bandwidths come from a leave-one-out cross-validation grid search.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .core import RatioSeries
from .errors import (
    DegenerateVolumesWarning,
    EmptyTraining,
    NonPositiveBandwidth,
    NumericalUnderflow,
    SchemaVersionError,
    ScanguardError,
    TooFewPoints,
)

SURFACE_SCHEMA = "scanguard.variance_surface/1"

# rows of the query block processed at once; bounds memory at ~block * n floats
_BLOCK = 256


@dataclass(frozen=True)
class VarianceSurface:
    """Training triples ``(v1, v2, y^2)`` and bandwidth ``(h1, h2)``."""

    train_points: np.ndarray
    bandwidth: Tuple[float, float]

    def __post_init__(self):
        pts = np.array(self.train_points, dtype=float, copy=True).reshape(-1, 3)
        if len(pts) < 2:
            raise EmptyTraining(f"need at least 2 training points, got {len(pts)}")
        if np.any(pts[:, 2] < 0):
            raise ScanguardError("squared log-ratios must be non-negative")
        if np.any(pts[:, :2] <= 0):
            raise ScanguardError("volumes must be positive")
        h1, h2 = (float(h) for h in self.bandwidth)
        if not (h1 > 0 and h2 > 0):
            raise NonPositiveBandwidth(f"bandwidth must be positive, got {(h1, h2)}")
        pts.setflags(write=False)
        object.__setattr__(self, "train_points", pts)
        object.__setattr__(self, "bandwidth", (h1, h2))

    def __len__(self) -> int:
        return len(self.train_points)

    def estimate(self, queries, fallback: Optional[str] = None) -> np.ndarray:
        """Vectorised :func:`nw_estimate` over an ``(m, 2)`` array of queries.

        ``fallback="nearest"`` replaces an underflowed weight sum with the
        ``y^2`` of the kernel-nearest training point instead of raising.
        """
        q = np.asarray(queries, dtype=float).reshape(-1, 2)
        pts = self.train_points
        h1, h2 = self.bandwidth
        out = np.empty(len(q))
        for start in range(0, len(q), _BLOCK):
            qb = q[start:start + _BLOCK]
            expo = ((qb[:, :1] - pts[None, :, 0]) ** 2 / (2 * h1 * h1)
                    + (qb[:, 1:] - pts[None, :, 1]) ** 2 / (2 * h2 * h2))
            w = np.exp(-expo)
            den = w.sum(axis=1)
            num = w @ pts[:, 2]
            bad = den == 0
            if np.any(bad):
                if fallback != "nearest":
                    i = int(np.flatnonzero(bad)[0]) + start
                    raise NumericalUnderflow(
                        f"kernel weights underflow at query {tuple(q[i])} "
                        f"with bandwidth {self.bandwidth}"
                    )
                num[bad] = pts[np.argmin(expo[bad], axis=1), 2]
                den[bad] = 1.0
            out[start:start + _BLOCK] = num / den
        return out

    def to_dict(self) -> dict:
        return {
            "schema": SURFACE_SCHEMA,
            "bandwidth": list(self.bandwidth),
            "train_points": self.train_points.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VarianceSurface":
        if d.get("schema") != SURFACE_SCHEMA:
            raise SchemaVersionError(f"unsupported surface schema {d.get('schema')!r}")
        return cls(np.asarray(d["train_points"], dtype=float), tuple(d["bandwidth"]))


def save_surface(surface: VarianceSurface, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(surface.to_dict(), fh)


def load_surface(path) -> VarianceSurface:
    with open(path, encoding="utf-8") as fh:
        return VarianceSurface.from_dict(json.load(fh))


def nw_estimate(surface: VarianceSurface, v1: float, v2: float,
                fallback: Optional[str] = None) -> float:
    r"""Kernel-weighted mean of the training ``y^2`` at the volume pair ``(v1, v2)``.

    .. math::

        \hat\sigma^2(v_1, v_2) = \frac{\sum_i w_i y_i^2}{\sum_i w_i}, \qquad
        w_i = \exp\left(-\frac{(v_1 - V_{i-1})^2}{2h_1^2}
                        -\frac{(v_2 - V_i)^2}{2h_2^2}\right)

    Raises :class:`NumericalUnderflow` when every weight underflows to zero,
    unless ``fallback="nearest"``.
    """
    return float(surface.estimate([[v1, v2]], fallback=fallback)[0])


def _triples(train: RatioSeries) -> np.ndarray:
    return np.column_stack([train.vol_pairs, train.log_ratios ** 2])


def fit_variance_surface(train: RatioSeries, h: Tuple[float, float]) -> VarianceSurface:
    if len(train) < 2:
        raise EmptyTraining(f"need at least 2 training observations, got {len(train)}")
    return VarianceSurface(_triples(train), tuple(h))


def _loocv_from_arrays(x: np.ndarray, y2: np.ndarray, h1: float, h2: float) -> Tuple[float, int]:
    n = len(y2)
    err = 0.0
    underflow = 0
    for start in range(0, n, _BLOCK):
        xb = x[start:start + _BLOCK]
        w = np.exp(-((xb[:, :1] - x[None, :, 0]) ** 2 / (2 * h1 * h1)
                     + (xb[:, 1:] - x[None, :, 1]) ** 2 / (2 * h2 * h2)))
        rows = np.arange(len(xb))
        w[rows, rows + start] = 0.0
        den = w.sum(axis=1)
        num = w @ y2
        ok = den > 0
        pred = np.zeros(len(xb))
        pred[ok] = num[ok] / den[ok]
        underflow += int((~ok).sum())
        err += float(np.sum((y2[start:start + _BLOCK] - pred) ** 2))
    return err, underflow


def loocv_error(train: RatioSeries, h: Tuple[float, float], return_underflow: bool = False):
    """Leave-one-out squared error of the variance smoother at bandwidth ``h``.

    Each point is predicted from all others by zeroing its own kernel weight in
    the full weight matrix. A point whose remaining weights all underflow is
    predicted as zero; the number of such points is returned when
    ``return_underflow`` is set.
    """
    if len(train) < 3:
        raise TooFewPoints(f"cross-validation needs at least 3 points, got {len(train)}")
    h1, h2 = (float(v) for v in h)
    if not (h1 > 0 and h2 > 0):
        raise NonPositiveBandwidth(f"bandwidth must be positive, got {h}")
    t = _triples(train)
    err, underflow = _loocv_from_arrays(t[:, :2], t[:, 2], h1, h2)
    return (err, underflow) if return_underflow else err


@dataclass(frozen=True)
class BandwidthSearchConfig:
    grid_points_per_dim: int = 16
    grid_span: Tuple[float, float] = (1 / 8, 8.0)
    pilot_rule: str = "ROT"

    def __post_init__(self):
        if self.grid_points_per_dim < 1:
            raise ValueError("grid_points_per_dim must be at least 1")
        lo, hi = self.grid_span
        if not 0 < lo < hi:
            raise ValueError(f"grid_span must satisfy 0 < lower < upper, got {self.grid_span}")
        if self.pilot_rule != "ROT":
            raise ValueError(f"unknown pilot rule {self.pilot_rule!r}")

    def multipliers(self) -> np.ndarray:
        lo, hi = self.grid_span
        if self.grid_points_per_dim == 1:
            return np.array([np.sqrt(lo * hi)])
        return np.geomspace(lo, hi, self.grid_points_per_dim)


@dataclass(frozen=True)
class BandwidthSelection:
    bandwidth: Tuple[float, float]
    pilot: Tuple[float, float]
    grid_h1: np.ndarray
    grid_h2: np.ndarray
    cv_errors: np.ndarray  # shape (len(grid_h1), len(grid_h2))
    underflows: np.ndarray
    degenerate_dims: Tuple[int, ...] = ()


def pilot_bandwidth(vol_pairs) -> Tuple[Tuple[float, float], Tuple[int, ...]]:
    """Rule-of-thumb ``1.06 * sd * n^(-1/6)`` per volume dimension.

    A dimension with zero spread gets the floor ``1e-6 * max(1, mean)``; its
    index is returned in the second element.
    """
    x = np.asarray(vol_pairs, dtype=float).reshape(-1, 2)
    n = len(x)
    h = []
    degenerate = []
    for d in range(2):
        sd = float(np.std(x[:, d], ddof=1)) if n > 1 else 0.0
        if sd > 0:
            h.append(1.06 * sd * n ** (-1 / 6))
        else:
            h.append(1e-6 * max(1.0, float(np.mean(x[:, d]))))
            degenerate.append(d)
    return (h[0], h[1]), tuple(degenerate)


def _cv_grid(x: np.ndarray, y2: np.ndarray, g1: np.ndarray, g2: np.ndarray):
    """CV error and underflow counts for every ``(g1[a], g2[b])`` pair."""
    n = len(y2)
    err = np.zeros((len(g1), len(g2)))
    underflow = np.zeros((len(g1), len(g2)), dtype=np.int64)
    c1 = 1.0 / (2.0 * g1 ** 2)
    c2 = 1.0 / (2.0 * g2 ** 2)
    for start in range(0, n, _BLOCK):
        xb = x[start:start + _BLOCK]
        m = len(xb)
        rows = np.arange(m)
        d1 = (xb[:, :1] - x[None, :, 0]) ** 2
        d2 = (xb[:, 1:] - x[None, :, 1]) ** 2
        k1 = np.exp(-c1[:, None, None] * d1[None])  # (A, m, n)
        k2 = np.exp(-c2[:, None, None] * d2[None])  # (B, m, n)
        k1[:, rows, rows + start] = 0.0
        # per query row i: num[i] = K1[:, i, :] @ (K2[:, i, :] * y2).T
        k1t = k1.transpose(1, 0, 2)                    # (m, A, n)
        k2t = k2.transpose(1, 2, 0)                    # (m, n, B)
        den = np.matmul(k1t, k2t)                      # (m, A, B)
        num = np.matmul(k1t, k2t * y2[None, :, None])  # (m, A, B)
        ok = den > 0
        pred = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
        resid = y2[start:start + m, None, None] - pred
        err += np.sum(resid ** 2, axis=0)
        underflow += np.sum(~ok, axis=0)
    return err, underflow


def search_bandwidth(train: RatioSeries, cfg: BandwidthSearchConfig = BandwidthSearchConfig()) -> BandwidthSelection:
    """Full grid search; see :func:`select_bandwidth`."""
    if len(train) < 3:
        raise TooFewPoints(f"bandwidth search needs at least 3 points, got {len(train)}")
    t = _triples(train)
    pilot, degenerate = pilot_bandwidth(t[:, :2])
    if degenerate:
        warnings.warn(
            f"volume dimension(s) {degenerate} have zero spread; bandwidth pinned to floor",
            DegenerateVolumesWarning,
            stacklevel=2,
        )
    mult = cfg.multipliers()
    g1 = np.array([pilot[0]]) if 0 in degenerate else pilot[0] * mult
    g2 = np.array([pilot[1]]) if 1 in degenerate else pilot[1] * mult
    err, underflow = _cv_grid(t[:, :2], t[:, 2], g1, g2)
    # ties go to the smoother surface: largest index sum, then largest h1
    best = np.flatnonzero(err.ravel() == err.min())
    a, b = np.unravel_index(best, err.shape)
    order = np.lexsort((a, a + b))
    a, b = int(a[order[-1]]), int(b[order[-1]])
    return BandwidthSelection(
        bandwidth=(float(g1[a]), float(g2[b])),
        pilot=pilot,
        grid_h1=g1,
        grid_h2=g2,
        cv_errors=err,
        underflows=underflow,
        degenerate_dims=degenerate,
    )


def select_bandwidth(train: RatioSeries, cfg: BandwidthSearchConfig = BandwidthSearchConfig()) -> Tuple[float, float]:
    """Bandwidth pair minimising the leave-one-out CV error over a log grid.

    The grid is the rule-of-thumb pilot times ``grid_points_per_dim``
    log-spaced multipliers spanning ``grid_span``, per dimension, searched over
    the full Cartesian product.
    """
    return search_bandwidth(train, cfg).bandwidth


@dataclass(frozen=True)
class SurfaceGrid:
    v1: np.ndarray
    v2: np.ndarray
    sigma2: np.ndarray  # sigma2[i, j] at (v1[i], v2[j])
    sq_error: Optional[np.ndarray] = None

    def rows(self):
        for i, a in enumerate(self.v1):
            for j, b in enumerate(self.v2):
                row = [float(a), float(b), float(self.sigma2[i, j])]
                if self.sq_error is not None:
                    row.append(float(self.sq_error[i, j]))
                yield row

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        header = ["v1", "v2", "sigma2"] + (["sq_error"] if self.sq_error is not None else [])
        w.writerow(header)
        for row in self.rows():
            w.writerow([repr(v) for v in row])


def surface_grid(
    surface: VarianceSurface,
    grid1: Tuple[float, float, int],
    grid2: Tuple[float, float, int],
    true_variance: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
    fallback: Optional[str] = None,
) -> SurfaceGrid:
    """Evaluate the surface on a ``steps1 x steps2`` grid of volume pairs.

    ``true_variance(v1, v2)`` (vectorised) adds a per-cell squared error column.
    """
    axes = []
    for lo, hi, steps in (grid1, grid2):
        if int(steps) < 2:
            raise ValueError("grid needs at least 2 steps per dimension")
        axes.append(np.linspace(float(lo), float(hi), int(steps)))
    a1, a2 = np.meshgrid(axes[0], axes[1], indexing="ij")
    q = np.column_stack([a1.ravel(), a2.ravel()])
    sigma2 = surface.estimate(q, fallback=fallback).reshape(a1.shape)
    sq = None
    if true_variance is not None:
        sq = (sigma2 - np.asarray(true_variance(a1, a2), dtype=float)) ** 2
    return SurfaceGrid(axes[0], axes[1], sigma2, sq)
