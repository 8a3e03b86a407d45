"""Synthetic pretraining data: pseudo translation, degradation, labeling,
rank-based normalization and quality-bin pruning."""

from __future__ import annotations

import json
import logging
import math
import time
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .corpus import Dataset, Example, InputFormat, LanguagePair, iter_lp_groups, split_even, tokenize
from .errors import DataError, NumericalError
from .evaluation import average_ranks

logger = logging.getLogger(__name__)

DEFAULT_DROP_RATIOS = (0.9, 0.8, 0.6, 0.2, 0.0)


class TranslationProvider(Protocol):
    def translate(self, src: str, lp: LanguagePair) -> str: ...


class Scorer(Protocol):
    name: str

    def score(self, example: Example, format: InputFormat) -> float: ...


class ProviderError(RuntimeError):
    pass


class OfflineProvider:
    """Returns the reference of the matching parallel pair verbatim."""

    def __init__(self, parallel: Dataset):
        self._refs: dict[tuple[str, LanguagePair], str] = {}
        for ex in parallel:
            if ex.ref is not None:
                self._refs.setdefault((ex.src, ex.lp), ex.ref)

    def translate(self, src: str, lp: LanguagePair) -> str:
        try:
            return self._refs[(src, lp)]
        except KeyError:
            raise ProviderError(f"no reference known for source in {lp}") from None


class HttpProvider:
    """Posts ``{"src", "lp"}`` as JSON to an endpoint and reads ``{"mt"}`` back."""

    def __init__(self, endpoint: str, timeout: float = 10.0, retries: int = 2, backoff: float = 0.5):
        if timeout <= 0:
            raise ValueError("timeout must be positive")
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def translate(self, src: str, lp: LanguagePair) -> str:
        body = json.dumps({"src": src, "lp": str(lp)}).encode("utf-8")
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.endpoint, data=body, headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                mt = payload["mt"]
                if not isinstance(mt, str):
                    raise ProviderError("response field 'mt' is not a string")
                return mt
            except (urllib.error.URLError, OSError, ValueError, KeyError) as err:
                last = err
                if attempt < self.retries:
                    time.sleep(self.backoff * (2 ** attempt))
        raise ProviderError(f"{self.endpoint}: {last}")


@dataclass(frozen=True)
class DegradeConfig:
    word_drop_prob: float = 0.15
    span_drop_prob: float = 0.3
    max_span_fraction: float = 0.3
    min_tokens_kept: int = 1

    def __post_init__(self):
        for name in ("word_drop_prob", "span_drop_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if not 0.0 < self.max_span_fraction <= 1.0:
            raise ValueError(f"max_span_fraction must be in (0, 1], got {self.max_span_fraction}")
        if self.min_tokens_kept < 1:
            raise ValueError("min_tokens_kept must be at least 1")


def word_drop(tokens: Sequence[str], p: float, rng: np.random.Generator, min_tokens_kept: int = 1) -> list:
    """Drop each token independently with probability ``p``.

    If fewer than ``min_tokens_kept`` survive, randomly chosen dropped tokens
    are restored in place.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability must be in [0, 1], got {p}")
    n = len(tokens)
    keep = rng.random(n) >= p
    deficit = min(min_tokens_kept, n) - int(keep.sum())
    if deficit > 0:
        restore = rng.choice(np.flatnonzero(~keep), size=deficit, replace=False)
        keep[restore] = True
    return [t for t, k in zip(tokens, keep) if k]


def span_drop(tokens: Sequence[str], max_span_fraction: float, rng: np.random.Generator, min_tokens_kept: int = 1) -> list:
    """Remove one contiguous span of length uniform in [1, ceil(fraction * n)]."""
    n = len(tokens)
    longest = min(math.ceil(max_span_fraction * n), n - min_tokens_kept)
    if longest < 1:
        return list(tokens)
    length = int(rng.integers(1, longest + 1))
    start = int(rng.integers(0, n - length + 1))
    return list(tokens[:start]) + list(tokens[start + length:])


def degrade(tokens: Sequence[str], cfg: DegradeConfig, rng: np.random.Generator) -> list:
    out = list(tokens)
    if cfg.word_drop_prob > 0 and out:
        out = word_drop(out, cfg.word_drop_prob, rng, cfg.min_tokens_kept)
    if out and rng.random() < cfg.span_drop_prob:
        out = span_drop(out, cfg.max_span_fraction, rng, cfg.min_tokens_kept)
    return out


def example_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def synthesize(parallel: Dataset, provider: TranslationProvider, cfg: DegradeConfig, seed: int) -> Dataset:
    """Build degraded pseudo-hypotheses for source/reference pairs.

    Each example draws from its own random stream keyed by ``(seed, index)``.
    Provider failures skip the example; more than half failing is fatal.
    """
    out = []
    failures = 0
    for i, ex in enumerate(parallel):
        if not ex.src or ex.ref is None:
            raise DataError(f"example {ex.id}: synthesis needs both src and ref")
        try:
            mt = provider.translate(ex.src, ex.lp)
        except Exception as err:  # noqa: BLE001 - any provider failure skips the example
            failures += 1
            logger.warning("translation failed for %s: %s", ex.id, err)
            continue
        tokens = degrade(tokenize(mt), cfg, example_rng(seed, i))
        if not tokens:
            failures += 1
            logger.warning("empty translation for %s; skipped", ex.id)
            continue
        out.append(Example(ex.id, ex.lp, ex.src, " ".join(tokens), ex.ref, None))
    if parallel and failures * 2 > len(parallel):
        raise DataError(f"synthesis failed for {failures} of {len(parallel)} examples")
    return Dataset(out, "synthetic")


class OverlapScorer:
    """Fraction of reference tokens that survive in the hypothesis."""

    name = "overlap"

    def score(self, example: Example, format=InputFormat.REF) -> float:
        ref = tokenize(example.ref)
        if not ref:
            raise DataError(f"example {example.id}: overlap scoring needs a reference")
        kept = Counter(tokenize(example.hyp)) & Counter(ref)
        return sum(kept.values()) / len(ref)


@dataclass
class ScoreMatrix:
    values: np.ndarray
    ids: list[str]
    scorer_names: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise ValueError("score matrix must be N x M with M >= 1")
        if self.values.shape[0] != len(self.ids) or self.values.shape[1] != len(self.scorer_names):
            raise ValueError("score matrix shape does not match ids / scorer names")
        if not np.all(np.isfinite(self.values)):
            raise NumericalError("score matrix contains non-finite values")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\t".join(["id", *self.scorer_names]) + "\n")
            for id_, row in zip(self.ids, self.values.tolist()):
                fh.write("\t".join([id_, *map(repr, row)]) + "\n")

    @classmethod
    def load(cls, path) -> "ScoreMatrix":
        path = Path(path)
        if not path.exists():
            raise DataError(f"no such file: {path}")
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("id\t"):
            raise DataError(f"{path}:1: score matrix header must start with 'id'")
        names = lines[0].split("\t")[1:]
        ids, rows = [], []
        for lineno, line in enumerate(lines[1:], start=2):
            cells = line.split("\t")
            if len(cells) != len(names) + 1:
                raise DataError(f"{path}:{lineno}: expected {len(names) + 1} fields, found {len(cells)}")
            try:
                rows.append([float(c) for c in cells[1:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric score") from None
            ids.append(cells[0])
        return cls(np.array(rows, dtype=np.float64).reshape(len(rows), len(names)), ids, names)


def label(dataset: Dataset, scorers: Sequence[Scorer], format=InputFormat.SRC) -> ScoreMatrix:
    if not scorers:
        raise ValueError("at least one scorer is required")
    fmt = InputFormat.parse(format)
    values = np.empty((len(dataset), len(scorers)), dtype=np.float64)
    for j, scorer in enumerate(scorers):
        for i, ex in enumerate(dataset):
            v = float(scorer.score(ex, fmt))
            if not math.isfinite(v):
                raise NumericalError(f"scorer {getattr(scorer, 'name', j)!r} gave {v} for example {ex.id}")
            values[i, j] = v
    names = [getattr(s, "name", f"scorer{j}") for j, s in enumerate(scorers)]
    # Disambiguate repeated names so the matrix file round-trips.
    seen: Counter = Counter()
    for j, name in enumerate(names):
        seen[name] += 1
        if names.count(name) > 1:
            names[j] = f"{name}.{seen[name]}"
    return ScoreMatrix(values, dataset.ids, names)


def rank_z_normalize(scores) -> np.ndarray:
    """Replace scores by their average ranks, then z-score (population std).

    An all-equal input maps to zeros.
    """
    ranks = average_ranks(scores)
    n = ranks.size
    if n < 2:
        raise ValueError("rank normalization needs at least 2 scores")
    centred = ranks - (n - 1) / 2.0
    std = math.sqrt(float(np.dot(centred, centred)) / n)
    if std == 0.0:
        return np.zeros(n)
    return centred / std


def aggregate(matrix: ScoreMatrix) -> np.ndarray:
    """Borda-style combination: per-scorer rank z-scores averaged per example."""
    cols = [rank_z_normalize(matrix.values[:, j]) for j in range(matrix.values.shape[1])]
    return np.mean(np.stack(cols, axis=1), axis=1)


def apply_scores(dataset: Dataset, scores) -> Dataset:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(dataset),):
        raise DataError(f"{scores.size} scores for {len(dataset)} examples")
    return dataset.replace([ex.with_score(float(s)) for ex, s in zip(dataset, scores)])


def aggregate_labels(dataset: Dataset, matrix: ScoreMatrix) -> Dataset:
    """Attach aggregated scores, normalizing within each language pair."""
    position = {id_: i for i, id_ in enumerate(matrix.ids)}
    missing = [ex.id for ex in dataset if ex.id not in position]
    if missing:
        raise DataError(f"score matrix has no row for example {missing[0]!r}")
    scores = np.empty(len(dataset))
    for _, idx in iter_lp_groups(dataset):
        rows = [position[dataset[i].id] for i in idx]
        sub = ScoreMatrix(matrix.values[rows], [matrix.ids[r] for r in rows], matrix.scorer_names)
        scores[idx] = aggregate(sub)
    return apply_scores(dataset, scores)


def _lp_rng(seed: int, lp: LanguagePair) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *str(lp).encode("utf-8")]))


def bin_prune(dataset: Dataset, drop_ratios: Sequence[float] = DEFAULT_DROP_RATIOS, seed: int = 0) -> Dataset:
    """Per language pair, sort by score into 5 bins and drop a fixed share of each.

    Bin ``i`` loses exactly ``round(drop_ratios[i] * size)`` examples chosen
    uniformly without replacement.  Kept examples stay in input order.
    """
    ratios = [float(r) for r in drop_ratios]
    if len(ratios) != 5 or not all(0.0 <= r <= 1.0 for r in ratios):
        raise ValueError("bin_prune needs 5 drop ratios in [0, 1]")
    scores = dataset.scores()
    keep = np.ones(len(dataset), dtype=bool)
    for lp, idx in iter_lp_groups(dataset):
        idx = np.asarray(idx)
        if idx.size < 5:
            raise DataError(f"language pair {lp} has {idx.size} examples; pruning needs at least 5")
        ranked = idx[np.argsort(scores[idx], kind="mergesort")]
        rng = _lp_rng(seed, lp)
        start = 0
        for ratio, size in zip(ratios, split_even(idx.size, 5)):
            members = ranked[start:start + size]
            start += size
            n_drop = math.floor(ratio * size + 0.5)
            if n_drop:
                keep[rng.choice(members, size=n_drop, replace=False)] = False
    return dataset.subset(np.flatnonzero(keep).tolist())


def bin_kept_counts(n: int, drop_ratios: Sequence[float] = DEFAULT_DROP_RATIOS) -> list[int]:
    return [size - math.floor(r * size + 0.5) for r, size in zip(drop_ratios, split_even(n, 5))]


def renormalize(dataset: Dataset) -> Dataset:
    scores = dataset.scores()
    out = scores.copy()
    for _, idx in iter_lp_groups(dataset):
        out[idx] = rank_z_normalize(scores[idx])
    return apply_scores(dataset, out)
