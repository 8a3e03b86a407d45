"""Data model, dataset I/O, splitting and input-sequence construction.

Datasets are stored either as TSV (header ``id lp src mt ref score``) or as
JSONL with the same keys.  The three model input layouts are::

    SRC      <s> h </s> </s> s </s>
    REF      <s> h </s> </s> r </s>
    SRC+REF  <s> h </s> </s> s </s> </s> r </s>
"""

from __future__ import annotations

import enum
import functools
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence as Seq

import numpy as np

from .errors import DataError

TSV_COLUMNS = ("id", "lp", "src", "mt", "ref", "score")
PROVENANCES = ("synthetic", "da", "mqm", "dev", "test")
DEFAULT_BUCKETS = 65536


class InputFormat(str, enum.Enum):
    SRC = "src"
    REF = "ref"
    SRC_REF = "src+ref"

    @classmethod
    def parse(cls, value: "str | InputFormat") -> "InputFormat":
        if isinstance(value, InputFormat):
            return value
        key = value.strip().lower().replace("_", "+")
        for fmt in cls:
            if fmt.value == key:
                return fmt
        raise ValueError(f"unknown input format {value!r} (expected src, ref or src+ref)")


@dataclass(frozen=True, order=True)
class LanguagePair:
    source_language: str
    target_language: str

    def __post_init__(self):
        if not self.source_language or not self.target_language:
            raise ValueError("language codes must be nonempty")
        object.__setattr__(self, "source_language", self.source_language.lower())
        object.__setattr__(self, "target_language", self.target_language.lower())

    @classmethod
    def parse(cls, text: str) -> "LanguagePair":
        parts = text.strip().split("-")
        if len(parts) != 2 or not all(parts):
            raise ValueError(f"language pair must look like 'xx-yy', got {text!r}")
        return cls(parts[0], parts[1])

    def __str__(self) -> str:
        return f"{self.source_language}-{self.target_language}"


@dataclass(frozen=True)
class Example:
    id: str
    lp: LanguagePair
    src: str
    hyp: str
    ref: Optional[str] = None
    score: Optional[float] = None

    def __post_init__(self):
        if self.score is not None:
            score = float(self.score)
            if not math.isfinite(score):
                raise DataError(f"example {self.id}: score must be finite, got {self.score!r}")
            object.__setattr__(self, "score", score)

    def with_score(self, score: Optional[float]) -> "Example":
        return Example(self.id, self.lp, self.src, self.hyp, self.ref, score)


@dataclass
class Dataset:
    examples: list[Example] = field(default_factory=list)
    provenance: str = "dev"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}; expected one of {PROVENANCES}")
        seen = set()
        for ex in self.examples:
            if ex.id in seen:
                raise DataError(f"duplicate example id {ex.id!r}")
            seen.add(ex.id)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    @property
    def ids(self) -> list[str]:
        return [ex.id for ex in self.examples]

    def scores(self) -> np.ndarray:
        missing = [ex.id for ex in self.examples if ex.score is None]
        if missing:
            raise DataError(f"unscored examples: {', '.join(missing[:5])}" + (" ..." if len(missing) > 5 else ""))
        return np.array([ex.score for ex in self.examples], dtype=np.float64)

    def language_pairs(self) -> list[LanguagePair]:
        """Language pairs in order of first appearance."""
        return list(dict.fromkeys(ex.lp for ex in self.examples))

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.examples[i] for i in indices], self.provenance)

    def replace(self, examples: list[Example], provenance: Optional[str] = None) -> "Dataset":
        return Dataset(examples, provenance or self.provenance)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for ex in self.examples:
            row = [ex.id, str(ex.lp), ex.src, ex.hyp, ex.ref, None if ex.score is None else repr(ex.score)]
            h.update(json.dumps(row, ensure_ascii=False).encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


# ---------------------------------------------------------------- file I/O


def _format_score(score: Optional[float]) -> str:
    return "" if score is None else repr(float(score))


def _parse_score(raw, where: str) -> Optional[float]:
    if raw is None or raw == "":
        return None
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise DataError(f"{where}: field 'score' is not a number: {raw!r}") from None
    if not math.isfinite(value):
        raise DataError(f"{where}: field 'score' is not finite: {raw!r}")
    return value


def _make_example(rec: dict, where: str, require_mt: bool) -> Example:
    for key in ("id", "lp", "src"):
        if not rec.get(key):
            raise DataError(f"{where}: field {key!r} is empty")
    if require_mt and not rec.get("mt"):
        raise DataError(f"{where}: field 'mt' is empty")
    try:
        lp = LanguagePair.parse(rec["lp"])
    except ValueError as err:
        raise DataError(f"{where}: field 'lp': {err}") from None
    ref = rec.get("ref")
    return Example(
        id=rec["id"],
        lp=lp,
        src=rec["src"],
        hyp=rec.get("mt") or "",
        ref=ref if ref else None,
        score=_parse_score(rec.get("score"), where),
    )


def _read_tsv(path: Path, require_mt: bool) -> list[Example]:
    examples = []
    with open(path, encoding="utf-8", newline="") as fh:
        header = fh.readline().rstrip("\n").rstrip("\r")
        if tuple(header.split("\t")) != TSV_COLUMNS:
            raise DataError(f"{path}:1: header must be {' '.join(TSV_COLUMNS)!r} (tab-separated), got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            cells = line.split("\t")
            if len(cells) != len(TSV_COLUMNS):
                missing = TSV_COLUMNS[len(cells)] if len(cells) < len(TSV_COLUMNS) else "<extra>"
                raise DataError(
                    f"{path}:{lineno}: expected {len(TSV_COLUMNS)} fields, found {len(cells)} "
                    f"(field {missing!r}; tabs inside fields are not allowed)"
                )
            examples.append(_make_example(dict(zip(TSV_COLUMNS, cells)), f"{path}:{lineno}", require_mt))
    return examples


def _read_jsonl(path: Path, require_mt: bool) -> list[Example]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataError(f"{where}: invalid JSON ({err.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"{where}: record must be a JSON object")
            missing = [k for k in TSV_COLUMNS if k not in rec]
            if missing:
                raise DataError(f"{where}: missing field {missing[0]!r}")
            for key in ("id", "lp", "src", "mt", "ref"):
                if rec[key] is not None and not isinstance(rec[key], str):
                    raise DataError(f"{where}: field {key!r} must be a string")
            examples.append(_make_example(rec, where, require_mt))
    return examples


def load_dataset(path, format: str = "tsv", provenance: str = "dev", *, require_mt: bool = True) -> Dataset:
    """Read a dataset file.

    ``require_mt=False`` admits rows with an empty ``mt`` column, which is how
    plain parallel data is fed to synthesis.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    reader = {"tsv": _read_tsv, "jsonl": _read_jsonl}.get(format)
    if reader is None:
        raise ValueError(f"unknown dataset format {format!r}")
    try:
        examples = reader(path, require_mt)
    except UnicodeDecodeError as err:
        raise DataError(f"{path}: not valid UTF-8 ({err.reason} at byte {err.start})") from None
    return Dataset(examples, provenance)


def _check_no_tabs(ex: Example) -> None:
    for name in ("id", "src", "hyp", "ref"):
        value = getattr(ex, name)
        if value and ("\t" in value or "\n" in value):
            raise DataError(f"example {ex.id}: field {name!r} contains a tab or newline")


def save_dataset(dataset: Dataset, path, format: str = "tsv") -> None:
    path = Path(path)
    try:
        if format == "tsv":
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write("\t".join(TSV_COLUMNS) + "\n")
                for ex in dataset:
                    _check_no_tabs(ex)
                    row = [ex.id, str(ex.lp), ex.src, ex.hyp, ex.ref or "", _format_score(ex.score)]
                    fh.write("\t".join(row) + "\n")
        elif format == "jsonl":
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                for ex in dataset:
                    rec = {"id": ex.id, "lp": str(ex.lp), "src": ex.src, "mt": ex.hyp, "ref": ex.ref, "score": ex.score}
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
        else:
            raise ValueError(f"unknown dataset format {format!r}")
    except OSError as err:
        raise DataError(f"cannot write {path}: {err.strerror}") from err


# ---------------------------------------------------------------- splitting


def split_even(n: int, parts: int) -> list[int]:
    """Sizes of ``parts`` near-equal chunks; earlier chunks take the remainder."""
    base, extra = divmod(n, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def split_three_way(dataset: Dataset, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    if len(dataset) == 0:
        raise DataError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(len(dataset))
    out, start = [], 0
    for size in split_even(len(dataset), 3):
        out.append(dataset.subset(order[start:start + size].tolist()))
        start += size
    return tuple(out)


# ---------------------------------------------------------------- tokens


@functools.lru_cache(maxsize=1 << 18)
def _stable_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class Vocabulary:
    buckets: int = DEFAULT_BUCKETS
    pad_id: int = 0
    unk_id: int = 1
    cls_id: int = 2
    sep_id: int = 3

    NUM_SPECIAL = 4

    def __post_init__(self):
        specials = {self.pad_id, self.unk_id, self.cls_id, self.sep_id}
        if len(specials) != 4 or not specials <= set(range(self.NUM_SPECIAL)):
            raise ValueError("special ids must be distinct and below 4")
        if self.buckets < 1:
            raise ValueError("vocabulary needs at least one hash bucket")

    @property
    def size(self) -> int:
        return self.NUM_SPECIAL + self.buckets

    def token_id(self, token: str) -> int:
        return self.NUM_SPECIAL + _stable_hash(token) % self.buckets

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_id(t) for t in tokens]


def tokenize(text: Optional[str]) -> list[str]:
    if not text:
        return []
    return text.lower().split()


@dataclass(frozen=True)
class Sequence:
    ids: tuple[int, ...]
    format: InputFormat
    l_h: int
    l_s: int = 0
    l_r: int = 0

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_special(self) -> int:
        return len(self.ids) - self.l_h - self.l_s - self.l_r

    def segment_ids(self) -> list[int]:
        """0 for ``<s> h </s>``, then 1 and 2 for each ``</s> x </s>`` block."""
        out = [0] * (self.l_h + 2)
        if self.format is InputFormat.REF:
            blocks = [self.l_r]
        elif self.format is InputFormat.SRC:
            blocks = [self.l_s]
        else:
            blocks = [self.l_s, self.l_r]
        for k, n in enumerate(blocks, start=1):
            out += [k] * (n + 2)
        return out


def build_input(example: Example, format, vocab: Vocabulary) -> Sequence:
    fmt = InputFormat.parse(format)
    h = vocab.encode(tokenize(example.hyp))
    if not h:
        raise DataError(f"example {example.id}: empty hypothesis")
    if fmt in (InputFormat.REF, InputFormat.SRC_REF) and example.ref is None:
        raise DataError(f"example {example.id}: format {fmt.value} needs a reference")
    cls, sep = vocab.cls_id, vocab.sep_id
    ids = [cls, *h, sep]
    l_s = l_r = 0
    if fmt in (InputFormat.SRC, InputFormat.SRC_REF):
        s = vocab.encode(tokenize(example.src))
        ids += [sep, *s, sep]
        l_s = len(s)
    if fmt in (InputFormat.REF, InputFormat.SRC_REF):
        r = vocab.encode(tokenize(example.ref))
        ids += [sep, *r, sep]
        l_r = len(r)
    return Sequence(tuple(ids), fmt, len(h), l_s, l_r)


def expected_specials(fmt: InputFormat) -> int:
    return 6 if InputFormat.parse(fmt) is InputFormat.SRC_REF else 4


def iter_lp_groups(dataset: Dataset) -> Iterator[tuple[LanguagePair, list[int]]]:
    """Yield ``(lp, indices)`` for each language pair in first-seen order."""
    groups: dict[LanguagePair, list[int]] = {}
    for i, ex in enumerate(dataset):
        groups.setdefault(ex.lp, []).append(i)
    yield from groups.items()


def sequences(dataset: Seq[Example], fmt, vocab: Vocabulary) -> list[Sequence]:
    out = []
    for ex in dataset:
        out.append(build_input(ex, fmt, vocab))
    return out
