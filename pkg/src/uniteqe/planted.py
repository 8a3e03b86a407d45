"""Toy planted-signal task for end-to-end experiments.

Two artificial languages share a word-for-word bijection.  A source sentence
is a random word sequence; its reference is the word-by-word translation; the
hypothesis is the reference after word/span dropping.  The gold score is the
fraction of reference tokens that survive in the hypothesis, so a model can
only recover it by relating the hypothesis to the source (or reference).
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .corpus import Dataset, Example, LanguagePair
from .datagen import DegradeConfig, OfflineProvider, OverlapScorer, label, synthesize

PLANTED_DEGRADE = DegradeConfig(word_drop_prob=0.25, span_drop_prob=0.5, max_span_fraction=0.5)


def make_parallel(n: int, seed: int, lp: str = "xx-yy", words: int = 200,
                  min_len: int = 6, max_len: int = 14, id_prefix: str = "p") -> Dataset:
    pair = LanguagePair.parse(lp)
    rng = np.random.default_rng(np.random.SeedSequence([seed, *lp.encode()]))
    # The bijection depends only on the language pair so that every split of
    # the task shares one "dictionary".
    lex = np.random.default_rng(np.random.SeedSequence([7, *lp.encode()])).permutation(words)
    src_words = [f"{pair.source_language}{i}" for i in range(words)]
    tgt_words = [f"{pair.target_language}{i}" for i in range(words)]
    examples = []
    for i in range(n):
        length = int(rng.integers(min_len, max_len + 1))
        toks = rng.integers(0, words, size=length)
        src = " ".join(src_words[t] for t in toks)
        ref = " ".join(tgt_words[lex[t]] for t in toks)
        examples.append(Example(f"{id_prefix}{lp}-{i}", pair, src, "", ref, None))
    return Dataset(examples, "synthetic")


def make_planted(n: int, seed: int, lps: tuple[str, ...] = ("xx-yy",), provenance: str = "synthetic",
                 degrade: Optional[DegradeConfig] = None, id_prefix: str = "p") -> Dataset:
    """Scored planted-signal dataset with ``n`` examples per language pair."""
    examples = []
    for lp in lps:
        parallel = make_parallel(n, seed, lp, id_prefix=id_prefix)
        synth = synthesize(parallel, OfflineProvider(parallel), degrade or PLANTED_DEGRADE, seed)
        scores = label(synth, [OverlapScorer()]).values[:, 0]
        examples += [ex.with_score(float(s)) for ex, s in zip(synth, scores)]
    return Dataset(examples, provenance)
