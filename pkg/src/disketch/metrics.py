"""Error metrics for frequency, heavy-hitter and entropy queries."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


def abs_errors(estimates: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(estimates, dtype=np.float64) - np.asarray(truth, dtype=np.float64))


def aae(estimates, truth) -> float:
    e = abs_errors(estimates, truth)
    return float(e.mean()) if e.size else float("nan")


def rmse(estimates, truth) -> float:
    e = abs_errors(estimates, truth)
    return float(np.sqrt(np.mean(e * e))) if e.size else float("nan")


def nrmse(estimates, truth, total_packets: float) -> float:
    return rmse(estimates, truth) / total_packets if total_packets else float("nan")


def f1_score(predicted: set, actual: set) -> float:
    if not predicted and not actual:
        return 1.0
    tp = len(predicted & actual)
    if tp == 0:
        return 0.0
    p = tp / len(predicted)
    r = tp / len(actual)
    return 2 * p * r / (p + r)


@dataclass
class LengthStats:
    path_length: int
    keys: int
    aae: float
    rmse: float
    median_abs_error: float


def per_length(estimates: np.ndarray, truth: np.ndarray, lengths: np.ndarray) -> list[LengthStats]:
    out = []
    for length in np.unique(lengths):
        m = lengths == length
        e = abs_errors(estimates[m], truth[m])
        out.append(LengthStats(int(length), int(m.sum()), float(e.mean()), float(np.sqrt(np.mean(e * e))),
                               float(np.median(e))))
    return out


@dataclass
class MetricsReport:
    system: str
    keys: int
    total_packets: int
    aae: float
    rmse: float
    nrmse: float
    hh_threshold: float
    f1: float
    entropy_true: float | None = None
    entropy_estimate: float | None = None
    by_length: list[LengthStats] = field(default_factory=list)

    @property
    def entropy_abs_error(self) -> float | None:
        if self.entropy_estimate is None or self.entropy_true is None:
            return None
        return abs(self.entropy_estimate - self.entropy_true)

    @property
    def entropy_rel_error(self) -> float | None:
        err = self.entropy_abs_error
        if err is None or not self.entropy_true:
            return None
        return err / self.entropy_true

    def length(self, path_length: int) -> LengthStats | None:
        return next((s for s in self.by_length if s.path_length == path_length), None)

    def row(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "by_length"}
        d["entropy_abs_error"] = self.entropy_abs_error
        d["entropy_rel_error"] = self.entropy_rel_error
        return d


def evaluate(system: str, estimates: np.ndarray, truth: np.ndarray, lengths: np.ndarray,
             total_packets: int, hh_threshold: float) -> MetricsReport:
    """Frequency and heavy-hitter metrics over window totals of the evaluated keys."""
    estimates = np.asarray(estimates, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    predicted = set(np.flatnonzero(estimates >= hh_threshold).tolist())
    actual = set(np.flatnonzero(truth >= hh_threshold).tolist())
    return MetricsReport(
        system=system,
        keys=len(truth),
        total_packets=int(total_packets),
        aae=aae(estimates, truth),
        rmse=rmse(estimates, truth),
        nrmse=nrmse(estimates, truth, total_packets),
        hh_threshold=float(hh_threshold),
        f1=f1_score(predicted, actual),
        by_length=per_length(estimates, truth, np.asarray(lengths)),
    )
