"""Command-line entry point.

Every command reads its inputs, writes only the declared outputs, prints a
JSON run manifest and stores it next to the output.  Exit codes: 0 success,
1 usage error, 2 data error, 3 numerical failure.  Environment variables are
never consulted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .corpus import Dataset, load_dataset, save_dataset, split_three_way
from .datagen import (
    HttpProvider,
    OfflineProvider,
    OverlapScorer,
    ScoreMatrix,
    aggregate_labels,
    bin_prune,
    label,
    renormalize,
    synthesize,
)
from .errors import DataError, NumericalError
from .evaluation import cdf_report, evaluate
from .model import CheckpointScorer, init_state, load_checkpoint, predict
from .pipeline import STAGE_PROVENANCE, EnsembleSpec, StageSpec, ensemble_predict, run_stage

logger = logging.getLogger("uniteqe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require(args, name: str) -> Path:
    value = getattr(args, name, None)
    if value is None:
        raise UsageError(f"--{name.replace('_', '-')} is required for '{args.command}'")
    return Path(value)


def _read(args, cfg: RunConfig, **kw) -> Dataset:
    return load_dataset(_require(args, "inp"), cfg.format, **kw)


def write_predictions(ids, values, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id\tscore\n")
        for id_, v in zip(ids, np.asarray(values).tolist()):
            fh.write(f"{id_}\t{v!r}\n")


def read_predictions(path, dataset: Dataset) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "id\tscore":
        raise DataError(f"{path}:1: predictions header must be 'id<TAB>score'")
    values = {}
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        if len(cells) != 2:
            raise DataError(f"{path}:{lineno}: expected 2 fields, found {len(cells)}")
        try:
            values[cells[0]] = float(cells[1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: field 'score' is not a number") from None
    missing = [ex.id for ex in dataset if ex.id not in values]
    if missing:
        raise DataError(f"{path}: no prediction for example {missing[0]!r}")
    return np.array([values[ex.id] for ex in dataset])


def _scorers(cfg: RunConfig, override: Optional[str]):
    names = [s.strip() for s in override.split(",")] if override else cfg.scorers
    scorers = []
    for name in names:
        if name == "overlap":
            scorers.append(OverlapScorer())
        else:
            scorers.append(CheckpointScorer(load_checkpoint(name), name=Path(name).stem))
    return scorers


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg):
    parallel = _read(args, cfg, provenance="synthetic", require_mt=False)
    if cfg.provider["kind"] == "http":
        provider = HttpProvider(cfg.provider["endpoint"], cfg.provider["timeout"], cfg.provider["retries"])
    else:
        provider = OfflineProvider(parallel)
    out = synthesize(parallel, provider, cfg.degrade, cfg.seed)
    save_dataset(out, _require(args, "out"), cfg.format)
    return [args.out]


def cmd_label(args, cfg):
    data = _read(args, cfg)
    matrix = label(data, _scorers(cfg, args.scorers), args.input_format or cfg.label_format)
    matrix.save(_require(args, "out"))
    return [args.out]


def cmd_normalize(args, cfg):
    data = _read(args, cfg)
    if args.matrix:
        out = aggregate_labels(data, ScoreMatrix.load(args.matrix))
    else:
        out = renormalize(data)
    save_dataset(out, _require(args, "out"), cfg.format)
    return [args.out]


def cmd_prune(args, cfg):
    data = _read(args, cfg)
    ratios = [float(x) for x in args.drop_ratios.split(",")] if args.drop_ratios else cfg.drop_ratios
    if len(ratios) != 5:
        raise UsageError("--drop-ratios needs exactly 5 comma-separated values")
    save_dataset(bin_prune(data, ratios, cfg.seed), _require(args, "out"), cfg.format)
    return [args.out]


def cmd_split(args, cfg):
    data = _read(args, cfg)
    out = _require(args, "out")
    paths = []
    for name, part in zip(("src", "ref", "srcref"), split_three_way(data, cfg.seed)):
        path = out.with_name(f"{out.name}.{name}.{cfg.format}")
        save_dataset(part, path, cfg.format)
        paths.append(str(path))
    return paths


def cmd_train(args, cfg):
    stage = args.stage
    data = _read(args, cfg, provenance=args.provenance or STAGE_PROVENANCE[stage])
    state = load_checkpoint(args.init) if args.init else init_state(cfg.model)
    sc = cfg.stage(stage)
    spec = StageSpec(stage, data, sc.hyper, sc.formats, cfg.seed)
    run_stage(state, spec, _require(args, "out"))
    return [args.out]


def cmd_predict(args, cfg):
    data = _read(args, cfg)
    state = load_checkpoint(_require(args, "checkpoint"))
    write_predictions(data.ids, predict(state, data, args.input_format), _require(args, "out"))
    return [args.out]


def cmd_ensemble(args, cfg):
    members = [m.strip() for m in args.checkpoints.split(",")] if args.checkpoints else cfg.ensemble_members
    if not members:
        raise UsageError("no ensemble members: pass --checkpoints or set ensemble.members")
    data = _read(args, cfg)
    write_predictions(data.ids, ensemble_predict(EnsembleSpec(members), data, args.input_format), _require(args, "out"))
    return [args.out]


def cmd_evaluate(args, cfg):
    data = _read(args, cfg)
    preds = read_predictions(_require(args, "predictions"), data)
    mode = args.mode or cfg.eval_mode
    report = evaluate(data, preds, mode, {"dataset": str(args.inp), "predictions": str(args.predictions)})
    print(report.to_table(), file=sys.stderr)
    out = _require(args, "out")
    out.write_text(report.to_json() if out.suffix == ".json" else report.to_tsv(), encoding="utf-8")
    return [args.out]


def cmd_report(args, cfg):
    from .plotting import plot_cdf, plot_scatter

    data = _read(args, cfg)
    scores = data.scores()
    out = _require(args, "out")
    out.mkdir(parents=True, exist_ok=True)
    if cfg.thresholds:
        thresholds = np.array(cfg.thresholds, dtype=float)
    else:
        thresholds = np.linspace(scores.min(), scores.max(), cfg.bins + 1)[1:]
    cdf = cdf_report(scores, thresholds)
    written = [out / "cdf.tsv", out / "cdf.png"]
    written[0].write_text(cdf.to_tsv(), encoding="utf-8")
    plot_cdf(cdf, written[1], title=f"cumulative score distribution (n={scores.size})")
    if args.predictions:
        preds = read_predictions(args.predictions, data)
        report = evaluate(data, preds, args.mode or cfg.eval_mode)
        (out / "correlation.tsv").write_text(report.to_tsv(), encoding="utf-8")
        plot_scatter(scores, preds, out / "scatter.png", title="predicted vs gold")
        written += [out / "correlation.tsv", out / "scatter.png"]
    return [str(p) for p in written]


COMMANDS = {
    "synth": (cmd_synth, "degrade pseudo-translations of parallel data"),
    "label": (cmd_label, "score a dataset with one or more scorers into a score matrix"),
    "normalize": (cmd_normalize, "aggregate a score matrix (or renormalize scores) per language pair"),
    "prune": (cmd_prune, "quality-bin pruning of a scored dataset"),
    "split": (cmd_split, "three-way split for multi-format training"),
    "train": (cmd_train, "run one training stage and write a checkpoint"),
    "predict": (cmd_predict, "predict scores with a checkpoint"),
    "ensemble": (cmd_ensemble, "z-normalized mean of several checkpoints' predictions"),
    "evaluate": (cmd_evaluate, "Spearman/Pearson/Kendall against gold scores"),
    "report": (cmd_report, "score CDF table and figures"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uniteqe", description="Unified translation quality estimation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="run config file (key = value, sections per stage)")
        p.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
        p.add_argument("--in", dest="inp", metavar="PATH", help="input dataset")
        p.add_argument("--out", metavar="PATH", help="output path")
        p.add_argument("--format", choices=("tsv", "jsonl"), help="dataset file format")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "label":
            p.add_argument("--scorers", help="comma list: 'overlap' and/or checkpoint paths")
            p.add_argument("--input-format", choices=("src", "ref", "src+ref"))
        if name == "normalize":
            p.add_argument("--matrix", help="score matrix from 'label'; omit to renormalize existing scores")
        if name == "prune":
            p.add_argument("--drop-ratios", help="five comma-separated drop ratios, lowest-score bin first")
        if name == "train":
            p.add_argument("--stage", required=True, choices=sorted(STAGE_PROVENANCE))
            p.add_argument("--init", help="checkpoint to continue from (default: fresh model)")
            p.add_argument("--provenance", choices=("synthetic", "da", "mqm", "dev", "test"),
                           help="dataset provenance (default: the stage's own)")
        if name in ("predict", "ensemble"):
            p.add_argument("--input-format", default="src", choices=("src", "ref", "src+ref"))
        if name == "predict":
            p.add_argument("--checkpoint")
        if name == "ensemble":
            p.add_argument("--checkpoints", help="comma list of member checkpoints")
        if name in ("evaluate", "report"):
            p.add_argument("--predictions", help="predictions TSV (id, score)")
            p.add_argument("--mode", choices=("pooled", "per_lp"))
    return parser


def _manifest_path(args) -> Path:
    out = Path(args.out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        if args.format is not None:
            overrides.append(f"run.format={args.format}")
        cfg = load_config(args.config, overrides)
        cfg.validate()
        inputs = [p for p in (args.inp, getattr(args, "init", None), getattr(args, "checkpoint", None),
                              getattr(args, "matrix", None), getattr(args, "predictions", None), args.config) if p]
        for listed in (getattr(args, "checkpoints", None), getattr(args, "scorers", None)):
            inputs += [p.strip() for p in (listed or "").split(",") if p.strip() and p.strip() != "overlap"]
        handler = COMMANDS[args.command][0]
        outputs = handler(args, cfg)
    except (UsageError, ConfigError) as err:
        print(f"uniteqe {args.command}: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as err:
        print(f"uniteqe {args.command}: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as err:
        print(f"uniteqe {args.command}: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    manifest = {
        "command": args.command,
        "seed": cfg.seed,
        "version": __version__,
        "inputs": {str(p): _sha256(p) for p in inputs if Path(p).is_file()},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    text = json.dumps(manifest, indent=2, sort_keys=True)
    print(text)
    _manifest_path(args).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
