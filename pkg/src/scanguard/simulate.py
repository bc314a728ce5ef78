"""Synthetic price/volume paths with injected level shifts, and replicated
comparison of all seven detectors on them.

Each path has ``n_train`` in-control log-ratios followed by ``n_test`` test
log-ratios. The in-control log-price is a random walk with steps
``sigma(V_{t-1}, V_t) * eps_t``, volumes ``1 + chi2(5)``. Anomalies sit at a
random subset ``J`` of the test period and take one of two shapes:

``"spike"``
    the observed log-price at ``t in J`` is raised by ``delta`` and returns at
    ``t + 1``, so both ratios around the spike are abnormal (the set of
    positives is ``J`` symmetric-difference ``J + 1``);
``"level"``
    ``delta`` enters the step at ``t in J`` and persists, so only the ratio at
    ``t`` is abnormal.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .core import RatioSeries
from .detectors import (
    METHOD_ORDER,
    Method,
    MethodConfig,
    classify,
    fit_constant_method,
    oracle_limits,
    var_limits,
)
from .errors import SchemaVersionError, ScanguardError
from .metrics import COLUMNS, ColumnStat, ConfusionCounts, aggregate, confusion, rates
from .varest import BandwidthSearchConfig, fit_variance_surface, select_bandwidth

REPORT_SCHEMA = "scanguard.scenario_report/1"


class VarianceCase(str, enum.Enum):
    A = "A"
    B = "B"
    C = "C"


def variance_case(case, v1, v2):
    """True variance ``sigma^2(v1, v2)``: 1, ``v1^2 / 46`` or ``(v1 + v2)^2 / 92``."""
    case = VarianceCase(case)
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    if case is VarianceCase.A:
        out = np.ones(np.broadcast(v1, v2).shape)
    elif case is VarianceCase.B:
        out = v1 ** 2 / 46.0 + 0.0 * v2
    else:
        out = (v1 + v2) ** 2 / 92.0
    return float(out) if out.ndim == 0 else out


def true_sigma(case):
    def sigma(v1, v2):
        return np.sqrt(variance_case(case, v1, v2))
    return sigma


def sample_volume(rng: np.random.Generator, size=None):
    """``1 + chi2(5)`` drawn as one plus five squared standard normals."""
    if size is None:
        return 1.0 + float(np.sum(rng.standard_normal(5) ** 2))
    shape = (size,) if np.isscalar(size) else tuple(size)
    return 1.0 + np.sum(rng.standard_normal(shape + (5,)) ** 2, axis=-1)


def replicate_rng(base_seed: int, replicate_index: int) -> np.random.Generator:
    """Independent generator for one replicate, keyed by ``(base_seed, index)``."""
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), int(replicate_index)]))


def anomaly_count(fraction: float, n_test: int) -> int:
    return int(math.floor(fraction * n_test + 0.5))


@dataclass(frozen=True)
class ScenarioConfig:
    variance_case: VarianceCase = VarianceCase.A
    anomaly_fraction: float = 0.05
    delta: float = 2.0
    n_train: int = 300
    n_test: int = 300
    n_replicates: int = 50
    base_seed: int = 0
    anomaly_shape: str = "spike"
    # quartile, RF and Tukey run on log R_t in the simulation study
    methods: MethodConfig = MethodConfig(log_scale=True)
    bandwidth: BandwidthSearchConfig = BandwidthSearchConfig()

    def __post_init__(self):
        object.__setattr__(self, "variance_case", VarianceCase(self.variance_case))
        if self.n_train < 10 or self.n_test < 10:
            raise ValueError("n_train and n_test must be at least 10")
        if not 0 <= self.anomaly_fraction < 1:
            raise ValueError("anomaly_fraction must lie in [0, 1)")
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be at least 1")
        # exp(709.78) is the largest finite double; ratios must stay finite and positive
        if not abs(self.delta) < 700:
            raise ValueError("|delta| must be below 700 so price ratios stay finite")
        if self.anomaly_shape not in ("spike", "level"):
            raise ValueError(f"unknown anomaly shape {self.anomaly_shape!r}")
        if not 0 <= int(self.base_seed) < 2 ** 64:
            raise ValueError("base_seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class SimulatedPath:
    log_prices: np.ndarray  # log P_0 .. log P_T, log P_0 = 0
    volumes: np.ndarray     # V_0 .. V_T
    anomaly_set: np.ndarray
    case: VarianceCase
    n_train: int
    positives: np.ndarray  # t labels whose log-ratio carries a shift

    @property
    def prices(self) -> np.ndarray:
        return np.exp(self.log_prices)

    @property
    def log_ratios(self) -> np.ndarray:
        return np.diff(self.log_prices)

    def true_sigma(self, v1, v2):
        return true_sigma(self.case)(v1, v2)

    def ratio_series(self) -> RatioSeries:
        y = self.log_ratios
        t = np.arange(1, len(y) + 1)
        return RatioSeries.from_log_ratios(t, y, np.column_stack([self.volumes[:-1], self.volumes[1:]]))

    def split(self):
        rs = self.ratio_series()
        n = np.arange(len(rs))
        return rs.take(n < self.n_train), rs.take(n >= self.n_train)


def generate_path(cfg: ScenarioConfig, replicate_index: int) -> SimulatedPath:
    rng = replicate_rng(cfg.base_seed, replicate_index)
    T = cfg.n_train + cfg.n_test
    volumes = sample_volume(rng, T + 1)
    eps = rng.standard_normal(T)
    k = anomaly_count(cfg.anomaly_fraction, cfg.n_test)
    J = np.sort(rng.choice(np.arange(cfg.n_train + 1, T + 1), size=k, replace=False))
    sigma = np.sqrt(variance_case(cfg.variance_case, volumes[:-1], volumes[1:]))
    shift = np.zeros(T + 1)  # indexed by t = 0..T
    shift[J] = cfg.delta
    if cfg.anomaly_shape == "level":
        log_prices = np.concatenate([[0.0], np.cumsum(sigma * eps + shift[1:])])
        positives = J
    else:
        log_prices = np.concatenate([[0.0], np.cumsum(sigma * eps)]) + shift
        # ratio t is shifted iff exactly one of t, t-1 is a spike
        positives = np.setxor1d(J, J + 1)
        positives = positives[positives <= T]
    return SimulatedPath(log_prices, volumes, J.astype(np.int64), cfg.variance_case,
                         cfg.n_train, positives.astype(np.int64))


@dataclass
class ReplicateResult:
    index: int
    counts: Dict[Method, Optional[ConfusionCounts]]
    errors: Dict[Method, str]
    bandwidth: Optional[tuple] = None


def run_replicate(cfg: ScenarioConfig, replicate_index: int) -> ReplicateResult:
    path = generate_path(cfg, replicate_index)
    train, test = path.split()
    mc = cfg.methods
    counts: Dict[Method, Optional[ConfusionCounts]] = {}
    errors: Dict[Method, str] = {}
    bw = None
    for method in METHOD_ORDER:
        try:
            if method is Method.VAR:
                bw = select_bandwidth(train, cfg.bandwidth)
                surface = fit_variance_surface(train, bw)
                limits = var_limits(surface, test.vol_pairs, mc, fallback="nearest")
            elif method is Method.ORACLE:
                limits = oracle_limits(path.true_sigma, test.vol_pairs, mc)
            else:
                limits = fit_constant_method(method, train, mc)
            counts[method] = confusion(classify(test, limits), path.positives)
        except ScanguardError as exc:
            counts[method] = None
            errors[method] = f"{type(exc).__name__}: {exc}"
    return ReplicateResult(replicate_index, counts, errors, bw)


def worker_count() -> int:
    raw = os.environ.get("SCANGUARD_THREADS", "0").strip() or "0"
    n = int(raw)
    return n if n > 0 else (os.cpu_count() or 1)


@dataclass
class MethodRow:
    case: VarianceCase
    fraction: float
    method: Method
    stats: dict
    n_ok: int
    n_failed: int

    def mean(self, col: str) -> Optional[float]:
        return self.stats[col].mean

    def sd(self, col: str) -> Optional[float]:
        return self.stats[col].sd


@dataclass
class ScenarioReport:
    config: ScenarioConfig
    replicates: List[ReplicateResult]
    rows: List[MethodRow] = field(default_factory=list)

    def row(self, method) -> MethodRow:
        method = Method(method)
        return next(r for r in self.rows if r.method is method)


def summarize(cfg: ScenarioConfig, replicates: List[ReplicateResult]) -> List[MethodRow]:
    rows = []
    for method in METHOD_ORDER:
        per = [(r.counts[method], rates(r.counts[method])) for r in replicates if r.counts[method] is not None]
        failed = len(replicates) - len(per)
        if per:
            stats = aggregate(per)
        else:
            stats = {k: ColumnStat(None, None, 0, len(replicates)) for k in COLUMNS}
        rows.append(MethodRow(cfg.variance_case, cfg.anomaly_fraction, method, stats, len(per), failed))
    return rows


def run_scenario(cfg: ScenarioConfig, workers: Optional[int] = None) -> ScenarioReport:
    """Run every replicate of ``cfg`` and aggregate per-method performance."""
    workers = worker_count() if workers is None else max(1, workers)
    idx = range(cfg.n_replicates)
    if workers == 1:
        reps = [run_replicate(cfg, i) for i in idx]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            reps = list(ex.map(lambda i: run_replicate(cfg, i), idx))
    return ScenarioReport(cfg, reps, summarize(cfg, reps))


# --- serialization -------------------------------------------------------------

def report_records(reports: List[ScenarioReport]) -> List[dict]:
    out = []
    for rep in reports:
        for row in rep.rows:
            rec = {
                "case": row.case.value,
                "fraction": row.fraction,
                "method": row.method.value,
                "n_ok": row.n_ok,
                "n_failed": row.n_failed,
            }
            for col in COLUMNS:
                rec[f"{col}_mean"] = row.stats[col].mean
                rec[f"{col}_sd"] = row.stats[col].sd
            out.append(rec)
    return out


CSV_FIELDS = ["case", "fraction", "method", "n_ok", "n_failed"] + [
    f"{c}_{s}" for c in COLUMNS for s in ("mean", "sd")
]


def write_report_csv(reports: List[ScenarioReport], fh) -> None:
    fh.write(f"# schema: {REPORT_SCHEMA}\n")
    w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for rec in report_records(reports):
        w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in rec.items()})


def _config_dict(cfg: ScenarioConfig) -> dict:
    d = asdict(cfg)
    d["variance_case"] = cfg.variance_case.value
    d["bandwidth"]["grid_span"] = list(cfg.bandwidth.grid_span)
    return d


def write_report_json(reports: List[ScenarioReport], fh) -> None:
    doc = {
        "schema": REPORT_SCHEMA,
        "version": __version__,
        "scenarios": [_config_dict(r.config) for r in reports],
        "rows": report_records(reports),
    }
    json.dump(doc, fh, indent=2)
    fh.write("\n")


def read_report(fh) -> List[dict]:
    """Rows of a report written by :func:`write_report_json` or :func:`write_report_csv`."""
    text = fh.read()
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        if doc.get("schema") != REPORT_SCHEMA:
            raise SchemaVersionError(f"unsupported report schema {doc.get('schema')!r}")
        return doc["rows"]
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# schema: {REPORT_SCHEMA}":
        raise SchemaVersionError("missing or unsupported report schema header")
    rows = []
    for rec in csv.DictReader(lines[1:]):
        row = {}
        for k, v in rec.items():
            if k in ("case", "method"):
                row[k] = v
            elif k in ("n_ok", "n_failed"):
                row[k] = int(v)
            else:
                row[k] = None if v == "" else float(v)
        rows.append(row)
    return rows
