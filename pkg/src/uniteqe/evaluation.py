"""Correlation metrics, pooled/per-direction evaluation and CDF reports."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .corpus import Dataset, iter_lp_groups
from .errors import DataError, NumericalError

logger = logging.getLogger(__name__)

POOLED = "pooled"


def average_ranks(x) -> np.ndarray:
    """0-based ascending ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a 1-D vector")
    if not np.all(np.isfinite(x)):
        raise NumericalError("cannot rank non-finite values")
    n = x.size
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    starts = np.concatenate(([0], np.flatnonzero(xs[1:] != xs[:-1]) + 1))
    ends = np.concatenate((starts[1:], [n]))
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat((starts + ends - 1) / 2.0, ends - starts)
    return ranks


def _paired(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"vectors must be 1-D and equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("correlation needs at least 2 points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise NumericalError("correlation inputs must be finite")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise NumericalError("correlation is undefined for a constant vector")
    return x, y


def pearson(x, y) -> float:
    x, y = _paired(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    r = float(np.dot(dx, dy) / math.sqrt(float(np.dot(dx, dx)) * float(np.dot(dy, dy))))
    return max(-1.0, min(1.0, r))


def spearman(x, y) -> float:
    x, y = _paired(x, y)
    return pearson(average_ranks(x), average_ranks(y))


def kendall_b(x, y, chunk: int = 2048) -> float:
    """Kendall's tau-b; pairwise counting done in row chunks to bound memory."""
    x, y = _paired(x, y)
    n = x.size
    s = n0x = n0y = 0
    for start in range(0, n - 1, chunk):
        stop = min(start + chunk, n - 1)
        rows = np.arange(start, stop)
        sx = np.sign(x[rows, None] - x[None, :])
        sy = np.sign(y[rows, None] - y[None, :])
        upper = np.arange(n)[None, :] > rows[:, None]
        s += int(np.sum(sx * sy * upper))
        n0x += int(np.sum((sx != 0) & upper))
        n0y += int(np.sum((sy != 0) & upper))
    tau = s / math.sqrt(n0x * n0y)
    return max(-1.0, min(1.0, tau))


@dataclass
class CorrelationEntry:
    spearman: float
    pearson: float
    kendall_b: float
    n: int


@dataclass
class CorrelationReport:
    entries: dict[str, CorrelationEntry]
    mode: str
    metadata: dict[str, str] = field(default_factory=dict)

    def to_table(self) -> str:
        lines = [f"{'group':<12} {'n':>7} {'spearman':>9} {'pearson':>9} {'kendall_b':>9}"]
        for key, e in self.entries.items():
            lines.append(f"{key:<12} {e.n:>7d} {e.spearman:>9.4f} {e.pearson:>9.4f} {e.kendall_b:>9.4f}")
        return "\n".join(lines)

    def to_tsv(self) -> str:
        out = ["group\tn\tspearman\tpearson\tkendall_b"]
        for key, e in self.entries.items():
            out.append(f"{key}\t{e.n}\t{e.spearman!r}\t{e.pearson!r}\t{e.kendall_b!r}")
        return "\n".join(out) + "\n"

    def to_json(self) -> str:
        payload = {
            "mode": self.mode,
            "metadata": self.metadata,
            "entries": {k: asdict(v) for k, v in self.entries.items()},
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _entry(gold: np.ndarray, pred: np.ndarray) -> CorrelationEntry:
    return CorrelationEntry(
        spearman=spearman(pred, gold),
        pearson=pearson(pred, gold),
        kendall_b=kendall_b(pred, gold),
        n=int(gold.size),
    )


def evaluate(dataset: Dataset, predictions, mode: str = POOLED, metadata: Optional[dict] = None) -> CorrelationReport:
    """Correlate predictions with the dataset's gold scores.

    ``pooled`` scores every prediction at once, ignoring language pairs;
    ``per_lp`` scores each language pair separately.  Groups where a
    coefficient is undefined are dropped with a warning.
    """
    if mode not in (POOLED, "per_lp"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    pred = np.asarray(predictions, dtype=np.float64)
    if pred.shape != (len(dataset),):
        raise DataError(f"{pred.size} predictions for {len(dataset)} examples")
    gold = dataset.scores()
    if mode == POOLED:
        groups = [(POOLED, np.arange(len(dataset)))]
    else:
        groups = [(str(lp), np.array(idx)) for lp, idx in sorted(iter_lp_groups(dataset), key=lambda g: str(g[0]))]
    entries = {}
    for key, idx in groups:
        if idx.size < 2:
            logger.warning("skipping %s: only %d example(s)", key, idx.size)
            continue
        try:
            entries[key] = _entry(gold[idx], pred[idx])
        except NumericalError as err:
            logger.warning("skipping %s: %s", key, err)
    if not entries:
        raise DataError("evaluation produced no entries")
    return CorrelationReport(entries, mode, dict(metadata or {}))


@dataclass
class CDFReport:
    thresholds: np.ndarray
    fractions: np.ndarray

    def to_tsv(self) -> str:
        rows = ["threshold\tfraction"]
        rows += [f"{t!r}\t{f!r}" for t, f in zip(self.thresholds.tolist(), self.fractions.tolist())]
        return "\n".join(rows) + "\n"


def cdf_report(scores, thresholds) -> CDFReport:
    """Fraction of scores at or below each threshold."""
    scores = np.sort(np.asarray(scores, dtype=np.float64))
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if scores.size == 0:
        raise DataError("cannot build a CDF from no scores")
    if thresholds.ndim != 1 or np.any(np.diff(thresholds) < 0):
        raise ValueError("thresholds must be an ascending 1-D sequence")
    counts = np.searchsorted(scores, thresholds, side="right")
    return CDFReport(thresholds, counts / scores.size)
