"""Staged training, checkpoint selection, cross-validation and ensembling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .corpus import Dataset, InputFormat, split_even
from .errors import DataError, NumericalError
from .evaluation import spearman
from .model import (
    ALL_FORMATS,
    ModelState,
    TrainHyper,
    load_checkpoint,
    parse_formats,
    predict,
    save_checkpoint,
    train,
)

logger = logging.getLogger(__name__)

STAGE_PROVENANCE = {
    "pretrain": "synthetic",
    "finetune_da": "da",
    "finetune_mqm": "mqm",
    "finetune_dev": "dev",
}
NUM_FOLDS = 5


@dataclass
class StageSpec:
    name: str
    dataset: Dataset
    hyper: TrainHyper = field(default_factory=TrainHyper)
    formats: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.name not in STAGE_PROVENANCE:
            raise ValueError(f"unknown stage {self.name!r}; expected one of {sorted(STAGE_PROVENANCE)}")
        if self.formats is None:
            self.formats = ALL_FORMATS if self.name == "pretrain" else InputFormat.SRC.value
        fmt = parse_formats(self.formats)
        self.formats = fmt if isinstance(fmt, str) else fmt.value
        expected = STAGE_PROVENANCE[self.name]
        if self.dataset.provenance != expected:
            raise DataError(
                f"stage {self.name} expects {expected} data, got a {self.dataset.provenance} dataset"
            )


def run_stage(state: ModelState, spec: StageSpec, path=None) -> tuple[ModelState, Optional[Path]]:
    """Train a copy of ``state`` on one stage and optionally checkpoint it."""
    out = state.copy()
    try:
        train(out, spec.dataset, spec.formats, spec.hyper, spec.seed)
    except NumericalError as err:
        raise NumericalError(f"stage {spec.name} aborted: {err}") from err
    history = list(state.metadata.get("history", [])) + [spec.name]
    out.metadata = {
        **state.metadata,
        "stage": spec.name,
        "data_hash": spec.dataset.content_hash(),
        "seed": spec.seed,
        "formats": spec.formats,
        "hyper": spec.hyper.to_dict(),
        "history": history,
    }
    saved = save_checkpoint(out, path) if path is not None else None
    return out, saved


def run_pipeline(state: ModelState, stages: Sequence[StageSpec], out_dir=None) -> tuple[ModelState, list[Path]]:
    """Run stages in order (pretrain -> DA -> MQM -> dev), checkpointing each."""
    paths = []
    for i, spec in enumerate(stages):
        path = None if out_dir is None else Path(out_dir) / f"{i:02d}-{spec.name}.ckpt"
        state, saved = run_stage(state, spec, path)
        if saved is not None:
            paths.append(saved)
    return state, paths


def _dev_spearman(state: ModelState, dev: Dataset) -> float:
    try:
        return spearman(predict(state, dev, InputFormat.SRC), dev.scores())
    except NumericalError:
        return math.nan


Member = Union[str, Path, ModelState]


def _load(member: Member) -> ModelState:
    if isinstance(member, ModelState):
        return member
    try:
        return load_checkpoint(member)
    except DataError as err:
        raise DataError(f"ensemble member {member}: {err}") from err


def select_top_k(checkpoints: Sequence[Union[str, Path]], dev: Dataset, k: int = 3) -> list[tuple[str, float]]:
    """Rank checkpoints by source-only dev Spearman (descending), ties by path."""
    if len(dev) == 0:
        raise DataError("cannot select checkpoints on an empty dev set")
    if not 1 <= k <= len(checkpoints):
        raise ValueError(f"k={k} but {len(checkpoints)} checkpoints were given")
    scored = [(str(p), _dev_spearman(load_checkpoint(p), dev)) for p in checkpoints]
    scored.sort(key=lambda item: (-(item[1] if not math.isnan(item[1]) else -math.inf), item[0]))
    return scored[:k]


def best_of_seeds(state: ModelState, spec: StageSpec, seeds: Sequence[int], dev: Dataset, out_dir) -> list[tuple[str, float]]:
    """Run one stage once per seed and rank the results on dev."""
    paths = []
    for seed in seeds:
        run = StageSpec(spec.name, spec.dataset, spec.hyper, spec.formats, seed)
        _, path = run_stage(state, run, Path(out_dir) / f"{spec.name}-seed{seed}.ckpt")
        paths.append(path)
    return select_top_k(paths, dev, k=len(paths))


# ---------------------------------------------------------------- cross-validation


@dataclass
class CVResult:
    point: TrainHyper
    fold_scores: list[float]
    mean: float
    seed: int
    folds: list[list[str]] = field(default_factory=list)


def make_folds(n: int, seed: int, k: int = NUM_FOLDS) -> list[np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    folds, start = [], 0
    for size in split_even(n, k):
        folds.append(order[start:start + size])
        start += size
    return folds


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, 1000 + fold]).generate_state(1)[0])


def kfold_cv(dev: Dataset, grid: Sequence[TrainHyper], base: ModelState, seed: int,
             formats: str = InputFormat.SRC.value) -> list[CVResult]:
    """Score every grid point by mean held-out Spearman over 5 folds.

    Fold assignment and per-fold training seeds depend only on ``seed``, so
    all grid points see identical splits.  A fold whose correlation is
    undefined (constant predictions) counts as 0.
    """
    if not grid:
        raise ValueError("hyperparameter grid is empty")
    if len(dev) < NUM_FOLDS:
        raise DataError(f"{NUM_FOLDS}-fold cross-validation needs at least {NUM_FOLDS} dev examples, got {len(dev)}")
    folds = make_folds(len(dev), seed)
    results = []
    for point in grid:
        scores = []
        for f, held in enumerate(folds):
            train_idx = np.sort(np.concatenate([folds[g] for g in range(NUM_FOLDS) if g != f]))
            state = base.copy()
            train(state, dev.subset(train_idx.tolist()), formats, point, fold_seed(seed, f))
            held_out = dev.subset(np.sort(held).tolist())
            rho = _dev_spearman(state, held_out)
            if math.isnan(rho):
                logger.warning("fold %d: correlation undefined, scored as 0", f)
                rho = 0.0
            scores.append(rho)
        results.append(CVResult(point, scores, float(np.mean(scores)), seed,
                                [[dev[i].id for i in np.sort(fold)] for fold in folds]))
    return sorted(results, key=lambda r: -r.mean)


def final_finetune(base: ModelState, dev: Dataset, best: Union[TrainHyper, CVResult], seed: int = 0,
                   path=None) -> tuple[ModelState, Optional[Path]]:
    """Fine-tune once on the whole dev set, source-only, with the chosen point."""
    point = best.point if isinstance(best, CVResult) else best
    dev_data = dev if dev.provenance == "dev" else dev.replace(dev.examples, "dev")
    state, saved = run_stage(base, StageSpec("finetune_dev", dev_data, point, InputFormat.SRC.value, seed))
    state.metadata["selected_hyper"] = point.to_dict()
    if path is not None:
        saved = save_checkpoint(state, path)
    return state, saved


# ---------------------------------------------------------------- ensembling


@dataclass
class EnsembleSpec:
    members: list[Member]
    rule: str = "zmean"

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if self.rule != "zmean":
            raise ValueError(f"unknown combination rule {self.rule!r}")


def z_normalize(values) -> np.ndarray:
    """Population z-scores; a constant vector maps to zeros."""
    values = np.asarray(values, dtype=np.float64)
    centred = values - values.mean()
    std = math.sqrt(float(np.dot(centred, centred)) / values.size)
    return np.zeros_like(values) if std == 0.0 else centred / std


def combine(member_predictions: Sequence[np.ndarray]) -> np.ndarray:
    return np.mean(np.stack([z_normalize(p) for p in member_predictions]), axis=0)


def ensemble_predict(spec: EnsembleSpec, dataset: Dataset, format=InputFormat.SRC) -> np.ndarray:
    preds = [predict(_load(m), dataset, format) for m in spec.members]
    return combine(preds)
