"""Control limits for the seven detection methods and test-point classification.

Constant-limit methods (quartile, HB, resistant fences, Tukey, constant
variance) carry a single ``(lower, upper)`` pair. The volume-dependent
methods (estimated variance surface, oracle) carry one pair per test point.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import RatioSeries, quartiles, tukey_filter
from .errors import (
    DegenerateIQRWarning,
    EmptyTraining,
    InsufficientTukeySamples,
    LengthMismatch,
    NonPositiveRatio,
    ZeroVarianceWarning,
)
from .varest import VarianceSurface


class Space(str, enum.Enum):
    RATIO = "RATIO"
    LOG_RATIO = "LOG_RATIO"
    HB = "HB"


class Method(str, enum.Enum):
    VAR = "VAR"
    CONST = "CONST"
    QUARTILE = "QUARTILE"
    HB = "HB"
    RF = "RF"
    TUKEY = "TUKEY"
    ORACLE = "ORACLE"


# display order used in scenario tables
METHOD_ORDER = (Method.VAR, Method.CONST, Method.QUARTILE, Method.HB, Method.RF, Method.TUKEY, Method.ORACLE)


@dataclass(frozen=True)
class MethodConfig:
    """Width constants for every method.

    ``log_scale`` moves the quartile, resistant-fence and Tukey methods from
    ``R_t`` to ``log R_t``. ``hb_literal`` selects the upper HB branch
    ``q2/R - 1`` instead of ``R/q2 - 1``. ``tukey_eps`` widens the
    unchanged-price test to ``|R_t - 1| <= eps``.
    """

    c_u: float = 4.5
    c_l: Optional[float] = None
    rf_c: float = 1.75
    tukey_c: float = 2.5
    sigma_mult: float = 3.0
    hb_literal: bool = False
    log_scale: bool = False
    tukey_eps: float = 0.0

    def __post_init__(self):
        if self.c_l is None:
            object.__setattr__(self, "c_l", self.c_u)
        for name in ("c_u", "c_l", "rf_c", "tukey_c", "sigma_mult"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.tukey_eps < 0:
            raise ValueError("tukey_eps must be non-negative")


@dataclass(frozen=True)
class ControlLimits:
    space: Space
    lower: np.ndarray
    upper: np.ndarray
    method: Method
    center: Optional[float] = None  # training median of R_t, for the HB space
    hb_literal: bool = False
    warnings: tuple = ()

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float, copy=True).ravel()
        hi = np.array(self.upper, dtype=float, copy=True).ravel()
        if lo.shape != hi.shape or lo.size == 0:
            raise LengthMismatch("lower and upper must be non-empty and equal length")
        if np.any(lo > hi):
            raise ValueError("lower limit exceeds upper limit")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def is_constant(self) -> bool:
        return self.lower.size == 1

    def statistic(self, rs: RatioSeries) -> np.ndarray:
        """Monitored statistic of ``rs`` in this limit's space."""
        if self.space is Space.RATIO:
            return np.asarray(rs.ratios)
        if self.space is Space.LOG_RATIO:
            return np.asarray(rs.log_ratios)
        return hb_transform(rs.ratios, self.center, self.hb_literal)

    def to_log_ratio(self):
        """Limits mapped onto the ``log R_t`` axis (for plotting against ``Y_t``)."""
        if self.space is Space.LOG_RATIO:
            return self.lower, self.upper
        if self.space is Space.RATIO:
            with np.errstate(divide="ignore", invalid="ignore"):
                lo = np.where(self.lower > 0, np.log(np.where(self.lower > 0, self.lower, 1.0)), -np.inf)
                hi = np.where(self.upper > 0, np.log(np.where(self.upper > 0, self.upper, 1.0)), -np.inf)
            return lo, hi
        return _hb_inverse_log(self.lower, self.center, self.hb_literal), \
            _hb_inverse_log(self.upper, self.center, self.hb_literal)


def _hb_inverse_log(s: np.ndarray, q2: float, literal: bool) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    neg = s < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        # lower branch: s = 1 - q2/R  =>  R = q2 / (1 - s)
        out[neg] = np.log(q2 / (1.0 - s[neg]))
        if literal:
            # printed upper branch q2/R - 1 is never positive; s = 0 maps to R = q2
            pos = ~neg
            out[pos] = np.where(s[pos] > 0, np.inf, np.log(q2 / (1.0 + s[pos])))
        else:
            out[~neg] = np.log(q2 * (1.0 + s[~neg]))
    return out


@dataclass(frozen=True)
class FlagVector:
    t_index: np.ndarray
    is_outlier: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t_index, dtype=np.int64)
        f = np.asarray(self.is_outlier, dtype=bool)
        if t.shape != f.shape:
            raise LengthMismatch("t_index and is_outlier must align")
        object.__setattr__(self, "t_index", t)
        object.__setattr__(self, "is_outlier", f)

    def __len__(self) -> int:
        return len(self.t_index)

    @property
    def n_flagged(self) -> int:
        return int(self.is_outlier.sum())

    def flagged(self) -> np.ndarray:
        return self.t_index[self.is_outlier]


def _require(train: RatioSeries):
    if len(train) == 0:
        raise EmptyTraining("training series is empty")


def _quartile_bounds(sample, c_u: float, c_l: float):
    q = quartiles(sample)
    notes = ()
    if q.iqr == 0:
        warnings.warn("training quartiles coincide; limits collapse to a point",
                      DegenerateIQRWarning, stacklevel=3)
        notes = ("DegenerateIQR",)
    return q, q.q2 - c_l * (q.q2 - q.q1), q.q2 + c_u * (q.q3 - q.q2), notes


def quartile_limits(train: RatioSeries, cfg: MethodConfig = MethodConfig()) -> ControlLimits:
    """``Q2 - c_l (Q2 - Q1)`` to ``Q2 + c_u (Q3 - Q2)`` on the training ratios."""
    _require(train)
    space = Space.LOG_RATIO if cfg.log_scale else Space.RATIO
    sample = train.log_ratios if cfg.log_scale else train.ratios
    _, lo, hi, notes = _quartile_bounds(sample, cfg.c_u, cfg.c_l)
    return ControlLimits(space, [lo], [hi], Method.QUARTILE, warnings=notes)


def hb_transform(ratios, q2: float, literal: bool = False) -> np.ndarray:
    """Hidiroglou-Berthelot centring of price ratios around their median.

    ``1 - q2/R`` below the median and ``R/q2 - 1`` at or above it, so halving
    and doubling the price map to -1 and +1. ``literal=True`` uses the
    alternative upper branch ``q2/R - 1``.
    """
    r = np.asarray(ratios, dtype=float)
    if q2 is None or not q2 > 0:
        raise NonPositiveRatio(f"median ratio must be positive, got {q2}")
    if np.any(~(r > 0)):
        raise NonPositiveRatio("HB transform needs positive ratios")
    below = r < q2
    upper = q2 / r - 1.0 if literal else r / q2 - 1.0
    return np.where(below, 1.0 - q2 / r, upper)


def hb_limits(train: RatioSeries, cfg: MethodConfig = MethodConfig()) -> ControlLimits:
    _require(train)
    q2 = quartiles(train.ratios).q2
    s = hb_transform(train.ratios, q2, cfg.hb_literal)
    _, lo, hi, notes = _quartile_bounds(s, cfg.c_u, cfg.c_l)
    return ControlLimits(Space.HB, [lo], [hi], Method.HB, center=q2,
                         hb_literal=cfg.hb_literal, warnings=notes)


def rf_limits(train: RatioSeries, cfg: MethodConfig = MethodConfig()) -> ControlLimits:
    """Resistant fences ``Q1 - c IQR`` and ``Q3 + c IQR``."""
    _require(train)
    space = Space.LOG_RATIO if cfg.log_scale else Space.RATIO
    sample = train.log_ratios if cfg.log_scale else train.ratios
    q = quartiles(sample)
    notes = ()
    if q.iqr == 0:
        warnings.warn("training quartiles coincide; limits collapse to a point",
                      DegenerateIQRWarning, stacklevel=2)
        notes = ("DegenerateIQR",)
    return ControlLimits(space, [q.q1 - cfg.rf_c * q.iqr], [q.q3 + cfg.rf_c * q.iqr],
                         Method.RF, warnings=notes)


def tukey_limits(train: RatioSeries, cfg: MethodConfig = MethodConfig()) -> ControlLimits:
    """Tukey algorithm on the observations whose price changed.

    With ``m`` the mean of those samples and ``m_U`` / ``m_L`` the means of
    the samples strictly above / below it, the limits are
    ``m - c (m - m_L)`` and ``m + c (m_U - m)``.
    """
    ts = tukey_filter(train, cfg.tukey_eps)
    if len(ts) == 0:
        raise InsufficientTukeySamples("no observations with a price change")
    space = Space.LOG_RATIO if cfg.log_scale else Space.RATIO
    x = ts.log_ratios if cfg.log_scale else ts.ratios
    m = float(np.mean(x))
    above, below = x[x > m], x[x < m]
    if above.size == 0 or below.size == 0:
        raise InsufficientTukeySamples("all Tukey samples lie on one side of their mean")
    c = cfg.tukey_c
    return ControlLimits(space, [m - c * (m - below.mean())], [m + c * (above.mean() - m)], Method.TUKEY)


def const_limits(train_log, cfg: MethodConfig = MethodConfig()) -> ControlLimits:
    """``+- sigma_mult * sigma`` with ``sigma^2`` the mean squared log-ratio (zero in-control mean)."""
    y = np.asarray(train_log, dtype=float)
    if y.size == 0:
        raise EmptyTraining("training series is empty")
    s = float(np.sqrt(np.mean(y * y)))
    notes = ()
    if s == 0:
        warnings.warn("training log-ratios are all zero", ZeroVarianceWarning, stacklevel=2)
        notes = ("ZeroVariance",)
    return ControlLimits(Space.LOG_RATIO, [-cfg.sigma_mult * s], [cfg.sigma_mult * s],
                         Method.CONST, warnings=notes)


def var_limits(surface: VarianceSurface, test_vol_pairs, cfg: MethodConfig = MethodConfig(),
               fallback: Optional[str] = None) -> ControlLimits:
    """Per-point ``+- sigma_mult * sigma_hat(v1, v2)`` from a fitted variance surface."""
    s = np.sqrt(surface.estimate(test_vol_pairs, fallback=fallback))
    return ControlLimits(Space.LOG_RATIO, -cfg.sigma_mult * s, cfg.sigma_mult * s, Method.VAR)


def oracle_limits(true_sigma: Callable, test_vol_pairs, cfg: MethodConfig = MethodConfig()) -> ControlLimits:
    """Per-point limits from a known standard-deviation function ``true_sigma(v1, v2)``."""
    vp = np.asarray(test_vol_pairs, dtype=float).reshape(-1, 2)
    s = np.broadcast_to(np.asarray(true_sigma(vp[:, 0], vp[:, 1]), dtype=float), (len(vp),))
    return ControlLimits(Space.LOG_RATIO, -cfg.sigma_mult * s, cfg.sigma_mult * s, Method.ORACLE)


def classify(test: RatioSeries, limits: ControlLimits) -> FlagVector:
    """Flag test points strictly outside the closed control interval."""
    n = len(test)
    if not limits.is_constant and limits.lower.size != n:
        raise LengthMismatch(f"{limits.lower.size} limit pairs for {n} test points")
    if n == 0:
        return FlagVector(test.t_index, np.zeros(0, dtype=bool))
    stat = limits.statistic(test)
    return FlagVector(test.t_index, (stat < limits.lower) | (stat > limits.upper))


def fit_constant_method(method: Method, train: RatioSeries, cfg: MethodConfig = MethodConfig()) -> ControlLimits:
    """Dispatch for the methods that need only the training series."""
    if method is Method.QUARTILE:
        return quartile_limits(train, cfg)
    if method is Method.HB:
        return hb_limits(train, cfg)
    if method is Method.RF:
        return rf_limits(train, cfg)
    if method is Method.TUKEY:
        return tukey_limits(train, cfg)
    if method is Method.CONST:
        return const_limits(train.log_ratios, cfg)
    raise ValueError(f"{method} needs volume information; fit it directly")
