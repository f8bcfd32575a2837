import csv
import json
import math

import numpy as np
import pytest
import sacrebleu
from hypothesis import given, settings, strategies as st

from gspeech.ast_filter import (FilterInputError, FilterSpec, TranslationPair, bleu, cer, cosine_distance,
                                curve_value_at, filter_pairs, length_bias_report, levenshtein, normalize,
                                read_pairs, selection_curve, to_manifest, tokenize_13a, wer,
                                write_curve_csv, write_filtered_manifest, write_pairs)

import pairsets

FIXTURE_REFS = [
    "The cat sat on the mat near the door.",
    "A quick brown fox jumps over the lazy dog today, again!",
    "We will meet at 10:30 in the main hall.",
]
FIXTURE_HYPS = [
    "The cat was sitting on the mat by the door.",
    "The quick brown fox jumped over a lazy dog today again.",
    "We meet at 10:30 in the hall.",
]


# ------------------------------------------------------------------ error rates

def test_wer_hand_cases():
    assert wer("a b c", "a b c") == 0.0
    assert wer("a b c", "a c") == pytest.approx(1 / 3)
    assert wer("a b", "a c") == 0.5
    assert wer("a b", "b a c d") == 1.5  # insert b, keep a, substitute c, insert d
    assert wer("", "") == 0.0
    assert wer("", "x y") == 2.0


def test_wer_normalization_switch():
    assert wer("Hello  World", "hello world") == 0.0
    assert wer("Hello  World", "hello world", norm=False) == 1.0
    assert normalize("  ÁB\tc ") == "áb c"


def test_cer_hand_cases():
    assert cer("ab", "ab") == 0.0
    assert cer("ab", "ac") == 0.5
    assert cer("abcd", "abd") == 0.25
    assert FilterSpec.for_language("ja") == FilterSpec("cer", 0.4)
    assert FilterSpec.for_language("de") == FilterSpec("wer", 0.3)


def _lev_oracle(a, b):
    # plain recursion with memo, written separately from the library's table fill
    from functools import lru_cache

    @lru_cache(None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))
    return d(len(a), len(b))


@settings(max_examples=150, deadline=None)
@given(st.lists(st.sampled_from("abc"), max_size=8), st.lists(st.sampled_from("abc"), max_size=8))
def test_levenshtein_matches_recursive_oracle(a, b):
    assert levenshtein(a, b) == _lev_oracle(tuple(a), tuple(b))


@settings(max_examples=150, deadline=None)
@given(st.lists(st.sampled_from(["x", "y", "z"]), min_size=1, max_size=8),
       st.lists(st.sampled_from(["x", "y", "z"]), max_size=8))
def test_wer_zero_iff_equal(r, h):
    v = wer(" ".join(r), " ".join(h))
    assert v >= 0 and (v == 0) == (r == h)


# ------------------------------------------------------------------ BLEU

def test_bleu_identity_is_exactly_100():
    assert bleu(FIXTURE_REFS, FIXTURE_REFS) == 100.0


def test_bleu_no_four_gram_overlap_is_zero():
    assert bleu(["a b c d e"], ["a b c x d e"]) == 0.0


def test_bleu_matches_reference_implementation():
    ref = sacrebleu.corpus_bleu(FIXTURE_HYPS, [FIXTURE_REFS], lowercase=True, smooth_method="none").score
    assert abs(bleu(FIXTURE_REFS, FIXTURE_HYPS) - ref) <= 0.01


def test_13a_tokenizer_matches_reference():
    from sacrebleu.tokenizers.tokenizer_13a import Tokenizer13a
    t = Tokenizer13a()
    for s in FIXTURE_REFS + FIXTURE_HYPS + ["x&amp;y <b>", "1,000.5 e.g. U.S.A."]:
        assert tokenize_13a(s) == t(s).split()


def test_bleu_length_mismatch():
    with pytest.raises(FilterInputError):
        bleu(["a"], ["a", "b"])


def test_bleu_permutation_invariant():
    rng = np.random.default_rng(0)
    idx = rng.permutation(3)
    a = bleu(FIXTURE_REFS, FIXTURE_HYPS)
    b = bleu([FIXTURE_REFS[i] for i in idx], [FIXTURE_HYPS[i] for i in idx])
    assert a == b


# ------------------------------------------------------------------ cosine

def test_cosine_cases():
    u = np.array([1.0, 2.0, -0.5])
    assert cosine_distance(u, u) == pytest.approx(0.0, abs=1e-15)
    assert cosine_distance([1, 0], [0, 3]) == pytest.approx(1.0)
    assert cosine_distance(u, -u) == pytest.approx(2.0)
    with pytest.raises(FilterInputError):
        cosine_distance([0, 0], [1, 0])
    with pytest.raises(FilterInputError):
        cosine_distance([1, 0], [1, 0, 0])


# ------------------------------------------------------------------ filtering

def test_infinite_threshold_keeps_all():
    pairs = pairsets.anti_correlated(50)
    kept, st_ = filter_pairs(pairs, FilterSpec("wer", math.inf))
    assert kept == pairs and st_.kept_fraction == 1.0


def test_half_identical_construction():
    rng = np.random.default_rng(3)
    pairs = []
    for i in range(40):
        words = " ".join(f"t{j}" for j in rng.integers(0, 50, size=8))
        other = words if i % 2 == 0 else " ".join(f"r{j}" for j in rng.integers(0, 50, size=8))
        pairs.append(TranslationPair(f"h{i}", "src text", words, other))
    kept, st_ = filter_pairs(pairs, FilterSpec("wer", 0.0))
    assert [p.id for p in kept] == [f"h{i}" for i in range(0, 40, 2)]
    assert st_.kept == 20


@pytest.mark.parametrize("metric", ["wer", "cer", "bleu", "cosine"])
def test_selection_size_monotone_in_threshold(metric):
    pairs = pairsets.anti_correlated(80)
    rng = np.random.default_rng(0)
    for p in pairs:
        p.primary_emb = list(rng.normal(size=4))
        p.secondary_emb = list(np.asarray(p.primary_emb) + rng.normal(size=4))
    grid = np.linspace(0, 100 if metric == "bleu" else 2, 25)
    sizes = [filter_pairs(pairs, FilterSpec(metric, float(t)))[1].kept for t in grid]
    diffs = np.diff(sizes)
    assert np.all(diffs <= 0) if metric == "bleu" else np.all(diffs >= 0)


def test_cosine_without_embeddings_lists_ids():
    pairs = pairsets.anti_correlated(3)
    pairs[0].primary_emb = pairs[0].secondary_emb = [1.0, 0.0]
    with pytest.raises(FilterInputError, match="p1, p2"):
        filter_pairs(pairs, FilterSpec("cosine", 0.5))


def test_invalid_specs():
    for m, t in [("bleu", 120.0), ("wer", -1.0), ("rouge", 0.1), ("wer", math.nan)]:
        with pytest.raises(FilterInputError):
            FilterSpec(m, t)


# ------------------------------------------------------------------ selection curve

def test_constant_quality_gives_flat_curve():
    pairs = pairsets.length_independent(60)
    curve = selection_curve(pairs, FilterSpec("wer"))
    assert all(r.mean_quality == 50.0 for r in curve)
    assert [r.fraction for r in curve] == sorted(r.fraction for r in curve)


def test_full_selection_equals_global_mean():
    pairs = pairsets.anti_correlated(120)
    curve = selection_curve(pairs, FilterSpec("wer"))
    assert curve[-1].fraction == 1.0
    assert curve[-1].mean_quality == math.fsum(p.quality for p in pairs) / len(pairs)


def test_perfect_anticorrelation_is_strictly_decreasing():
    pairs = []
    for k in range(10):
        ref = " ".join(f"a{j}" for j in range(10))
        hyp = " ".join(f"a{j}" if j >= k else f"b{j}" for j in range(10))
        pairs.append(TranslationPair(f"k{k}", "s", ref, hyp, quality=100.0 - 10 * k))
    curve = selection_curve(pairs, FilterSpec("wer"))
    q = [r.mean_quality for r in curve]
    assert all(a > b for a, b in zip(q, q[1:]))


def test_filtering_helps_at_one_fifth():
    pairs = pairsets.anti_correlated(400)
    curve = selection_curve(pairs, FilterSpec("wer"))
    overall = math.fsum(p.quality for p in pairs) / len(pairs)
    assert curve_value_at(curve, 0.2) > overall + 10


def test_curve_requires_quality():
    pairs = pairsets.short_agree(5)
    with pytest.raises(FilterInputError):
        selection_curve(pairs, FilterSpec("wer"))


# ------------------------------------------------------------------ length bias

def test_length_bias_cases():
    assert length_bias_report(pairsets.anti_correlated(50), FilterSpec("wer", math.inf)).ratio == 1.0
    r = length_bias_report(pairsets.length_independent(), FilterSpec("wer", 0.3))
    assert abs(r.ratio - 1.0) <= 0.05 and not r.biased_short
    short = length_bias_report(pairsets.short_agree(), FilterSpec("wer", 0.3))
    assert short.ratio < 1.0 and short.biased_short
    nothing = [TranslationPair("z", "a b", "a b", "c d")]
    empty = length_bias_report(nothing, FilterSpec("wer", 0.0))
    assert empty.mean_src_len_kept is None and empty.ratio is None


# ------------------------------------------------------------------ files

def test_pair_io_and_outputs(tmp_path):
    pairs = pairsets.anti_correlated(10)
    for p in pairs:
        p.audio, p.duration_s, p.tgt_lang = f"{p.id}.wav", 1.5, "de"
    write_pairs(tmp_path / "pairs.jsonl", pairs)
    back = read_pairs(tmp_path / "pairs.jsonl")
    assert back == pairs
    kept, _ = filter_pairs(back, FilterSpec("wer", 0.5))
    write_filtered_manifest(tmp_path / "m.jsonl", kept)
    rows = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [r["id"] for r in rows] == [p.id for p in kept]
    assert all(r["task"] == "ast" and r["translation"] == p.primary_out for r, p in zip(rows, kept))
    assert to_manifest(kept)[0].text == kept[0].source_text
    write_curve_csv(tmp_path / "c.csv", selection_curve(pairs, FilterSpec("wer")))
    header = next(csv.reader((tmp_path / "c.csv").open()))
    assert header == ["threshold", "fraction", "mean_quality"]


def test_empty_text_rejected():
    with pytest.raises(FilterInputError):
        TranslationPair("e", "src", "  ", "x")
