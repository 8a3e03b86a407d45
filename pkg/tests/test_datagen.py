import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import rank_z_by_definition
from uniteqe.corpus import Dataset, Example, LanguagePair
from uniteqe.datagen import (
    DegradeConfig,
    HttpProvider,
    OfflineProvider,
    OverlapScorer,
    ProviderError,
    ScoreMatrix,
    aggregate,
    aggregate_labels,
    bin_kept_counts,
    bin_prune,
    label,
    rank_z_normalize,
    renormalize,
    span_drop,
    synthesize,
    word_drop,
)
from uniteqe.errors import DataError, NumericalError

EN_DE = LanguagePair("en", "de")
ZH_EN = LanguagePair("zh", "en")
TOKENS = [f"t{i}" for i in range(10)]


def is_subsequence(small, big):
    it = iter(big)
    return all(tok in it for tok in small)


def rng(seed=0):
    return np.random.default_rng(seed)


def parallel(n=10, lp=EN_DE):
    return Dataset([Example(f"p{i}", lp, f"quelle {i} satz", "", f"ref {i} a b c d e", None) for i in range(n)], "synthetic")


def scored(scores, lp=EN_DE, prefix="s"):
    return Dataset([Example(f"{prefix}{i}", lp, "s", "h", "r", float(v)) for i, v in enumerate(scores)], "synthetic")


# ---------------------------------------------------------------- degradation


def test_word_drop_identity_and_floor():
    assert word_drop(TOKENS, 0.0, rng()) == TOKENS
    assert len(word_drop(TOKENS[:5], 1.0, rng())) == 1


@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
@settings(max_examples=100, deadline=None)
def test_word_drop_is_subsequence(seed, p):
    out = word_drop(TOKENS, p, rng(seed))
    assert 1 <= len(out) <= len(TOKENS)
    assert is_subsequence(out, TOKENS)


def test_span_drop_bounds():
    for seed in range(200):
        out = span_drop(TOKENS, 0.3, rng(seed))
        assert 7 <= len(out) <= 9
    assert span_drop(["only"], 0.5, rng()) == ["only"]


@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.floats(0.01, 1.0))
@settings(max_examples=100, deadline=None)
def test_span_drop_removes_one_gap(seed, n, frac):
    toks = [f"w{i}" for i in range(n)]
    out = span_drop(toks, frac, rng(seed))
    assert len(out) >= 1
    gap = n - len(out)
    # Output must equal the input with one contiguous block of `gap` tokens removed.
    assert any(out == toks[:s] + toks[s + gap:] for s in range(n - gap + 1))


def test_degrade_config_validation():
    with pytest.raises(ValueError):
        DegradeConfig(word_drop_prob=1.5)
    with pytest.raises(ValueError):
        DegradeConfig(max_span_fraction=0.0)
    with pytest.raises(ValueError):
        DegradeConfig(min_tokens_kept=0)


# ---------------------------------------------------------------- synthesis


def test_synthesize_identity_with_offline_provider():
    par = parallel()
    out = synthesize(par, OfflineProvider(par), DegradeConfig(0.0, 0.0), seed=1)
    assert [ex.hyp for ex in out] == [ex.ref for ex in par]
    assert all(ex.score is None for ex in out)
    assert out.provenance == "synthetic"


def test_synthesize_full_word_drop():
    par = parallel()
    out = synthesize(par, OfflineProvider(par), DegradeConfig(word_drop_prob=1.0), seed=1)
    assert all(len(ex.hyp.split()) == 1 for ex in out)


def test_synthesize_deterministic_and_order_independent():
    par = parallel(30)
    cfg = DegradeConfig(0.3, 0.5, 0.5)
    a = synthesize(par, OfflineProvider(par), cfg, seed=9)
    b = synthesize(par, OfflineProvider(par), cfg, seed=9)
    assert a.examples == b.examples
    c = synthesize(par, OfflineProvider(par), cfg, seed=10)
    assert a.examples != c.examples


class FlakyProvider:
    def __init__(self, fail_every):
        self.fail_every = fail_every
        self.calls = 0

    def translate(self, src, lp):
        self.calls += 1
        if self.calls % self.fail_every == 0:
            raise ProviderError("boom")
        return "some translation words"


def test_provider_failures_skip_then_abort(caplog):
    par = parallel(10)
    out = synthesize(par, FlakyProvider(5), DegradeConfig(0, 0), seed=0)
    assert len(out) == 8
    assert "translation failed" in caplog.text
    with pytest.raises(DataError, match="synthesis failed"):
        synthesize(par, FlakyProvider(1), DegradeConfig(0, 0), seed=0)


def test_synthesize_requires_ref():
    par = Dataset([Example("a", EN_DE, "s", "", None)], "synthetic")
    with pytest.raises(DataError):
        synthesize(par, OfflineProvider(par), DegradeConfig(), 0)


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        payload = json.dumps({"mt": f"[{body['lp']}] {body['src']}"}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


def test_http_provider_wire_format():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        provider = HttpProvider(f"http://127.0.0.1:{server.server_port}/", timeout=5, retries=0)
        assert provider.translate("hallo welt", EN_DE) == "[en-de] hallo welt"
    finally:
        server.shutdown()


def test_http_provider_gives_up():
    provider = HttpProvider("http://127.0.0.1:9/", timeout=0.2, retries=1, backoff=0.0)
    with pytest.raises(ProviderError):
        provider.translate("x", EN_DE)


# ---------------------------------------------------------------- labeling


class Const:
    name = "const"

    def score(self, example, format):
        return 0.25


class Length:
    name = "length"

    def score(self, example, format):
        return float(len(example.hyp))


class Broken:
    name = "broken"

    def score(self, example, format):
        return float("nan")


def test_label_shapes_and_values():
    ds = scored([0, 0, 0])
    m = label(ds, [Const()])
    assert m.values.shape == (3, 1)
    assert np.all(m.values == 0.25)
    m2 = label(ds, [Const(), Length()], "ref")
    direct = [[Const().score(ex, "ref"), Length().score(ex, "ref")] for ex in ds]
    assert m2.values.tolist() == direct
    assert m2.ids == ds.ids


def test_label_rejects_non_finite():
    with pytest.raises(NumericalError, match="broken.*s0"):
        label(scored([1, 2]), [Broken()])


def test_overlap_scorer():
    ex = Example("a", EN_DE, "s", "a c", "a b c d")
    assert OverlapScorer().score(ex) == 0.5


def test_score_matrix_round_trip(tmp_path):
    m = ScoreMatrix(np.array([[0.1, 2.0], [1e-17, -3.5]]), ["a", "b"], ["x", "y"])
    m.save(tmp_path / "m.tsv")
    back = ScoreMatrix.load(tmp_path / "m.tsv")
    assert np.array_equal(back.values, m.values) and back.ids == m.ids and back.scorer_names == m.scorer_names


# ---------------------------------------------------------------- rank normalization


def test_rank_z_hand_value():
    np.testing.assert_allclose(rank_z_normalize([0.2, 0.9, 0.5]), [-1.224745, 1.224745, 0.0], atol=1e-6)
    assert np.array_equal(rank_z_normalize([3.0, 3.0, 3.0]), np.zeros(3))
    with pytest.raises(ValueError):
        rank_z_normalize([1.0])


vec = st.lists(st.integers(-20, 20).map(lambda v: v / 4), min_size=2, max_size=60)


@given(vec)
@settings(max_examples=200, deadline=None)
def test_rank_z_matches_definition(xs):
    np.testing.assert_allclose(rank_z_normalize(xs), rank_z_by_definition(xs), atol=1e-12)
    out = rank_z_normalize(xs)
    assert abs(out.mean()) < 1e-9
    if len(set(xs)) == len(xs):
        assert abs(out.std() - 1.0) < 1e-9


@given(vec, st.sampled_from(["affine", "cube", "exp", "arctan"]))
@settings(max_examples=200, deadline=None)
def test_rank_z_monotone_invariance(xs, kind):
    f = {
        "affine": lambda v: 3.0 * v - 7.0,
        "cube": lambda v: v ** 3 + v,
        "exp": np.exp,
        "arctan": np.arctan,
    }[kind]
    assert np.array_equal(rank_z_normalize(f(np.array(xs))), rank_z_normalize(xs))


def test_aggregate_cases():
    one = ScoreMatrix(np.array([[0.2], [0.9], [0.5]]), list("abc"), ["m"])
    assert np.array_equal(aggregate(one), rank_z_normalize([0.2, 0.9, 0.5]))
    opposite = ScoreMatrix(np.array([[1, 3], [2, 2], [3, 1]]), list("abc"), ["m", "n"])
    assert np.allclose(aggregate(opposite), 0.0, atol=1e-15)
    dup = ScoreMatrix(np.array([[0.2, 0.2], [0.9, 0.9], [0.5, 0.5]]), list("abc"), ["m", "n"])
    assert np.array_equal(aggregate(dup), aggregate(one))


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=30), st.integers(1, 5))
@settings(max_examples=100, deadline=None)
def test_aggregate_identical_columns(col, m):
    values = np.repeat(np.array(col)[:, None], m, axis=1)
    single = ScoreMatrix(np.array(col)[:, None], [str(i) for i in range(len(col))], ["a"])
    multi = ScoreMatrix(values, single.ids, [f"c{j}" for j in range(m)])
    np.testing.assert_allclose(aggregate(multi), aggregate(single), atol=1e-15)


def test_aggregate_labels_per_language_pair():
    ds = Dataset(scored([0, 0, 0]).examples + scored([0, 0, 0], ZH_EN, "z").examples, "synthetic")
    m = ScoreMatrix(np.array([[1.0], [2.0], [3.0], [100.0], [300.0], [200.0]]), ds.ids, ["m"])
    out = aggregate_labels(ds, m).scores()
    np.testing.assert_allclose(out[:3], [-1.224745, 0, 1.224745], atol=1e-6)
    np.testing.assert_allclose(out[3:], [-1.224745, 1.224745, 0], atol=1e-6)


# ---------------------------------------------------------------- pruning


def test_bin_prune_default_ratios():
    ds = scored(np.random.default_rng(0).permutation(1000))
    out = bin_prune(ds, seed=3)
    assert len(out) == 500
    kept = np.sort(out.scores())
    counts = [int(np.sum((kept >= 200 * b) & (kept < 200 * (b + 1)))) for b in range(5)]
    assert counts == [20, 40, 80, 160, 200]
    assert set(kept[kept >= 800]) == set(range(800, 1000))
    assert bin_prune(ds, seed=3).ids == out.ids
    assert set(out.ids) <= set(ds.ids)


def test_bin_prune_zero_ratios_identity():
    ds = scored(range(37))
    assert bin_prune(ds, [0, 0, 0, 0, 0], seed=1).examples == ds.examples


@given(st.integers(5, 120), st.lists(st.floats(0, 1), min_size=5, max_size=5), st.integers(0, 1000))
@settings(max_examples=60, deadline=None)
def test_bin_prune_size_formula(n, ratios, seed):
    ds = scored(np.random.default_rng(seed).normal(size=n))
    out = bin_prune(ds, ratios, seed)
    assert len(out) == sum(bin_kept_counts(n, ratios))


def test_bin_prune_per_language_pair():
    ds = Dataset(scored(range(100)).examples + scored(range(50), ZH_EN, "z").examples, "synthetic")
    out = bin_prune(ds, seed=0)
    by_lp = {lp: sum(1 for ex in out if ex.lp == lp) for lp in (EN_DE, ZH_EN)}
    assert by_lp == {EN_DE: 50, ZH_EN: 25}


def test_bin_prune_errors():
    with pytest.raises(DataError, match="at least 5"):
        bin_prune(scored(range(4)))
    ds = Dataset([Example(f"x{i}", EN_DE, "s", "h", "r", None) for i in range(6)], "synthetic")
    with pytest.raises(DataError, match="unscored"):
        bin_prune(ds)


# ---------------------------------------------------------------- renormalization


def test_renormalize_idempotent_on_rank_z():
    z = rank_z_normalize([5.0, 1.0, 3.0, 2.0, 4.0])
    out = renormalize(scored(z)).scores()
    np.testing.assert_allclose(out, z, atol=1e-12)


def test_renormalize_per_pair():
    ds = Dataset(scored([10, 30, 20]).examples + scored([0.1, 0.2, 0.3], ZH_EN, "z").examples, "synthetic")
    out = renormalize(ds).scores()
    np.testing.assert_allclose(out, [-1.224745, 1.224745, 0, -1.224745, 0, 1.224745], atol=1e-6)
