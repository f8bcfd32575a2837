import csv
import hashlib
import logging
from collections import Counter

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gspeech.data import (BalancedSampler, DataError, ManifestRecord, SamplingPlan, balanced_probs,
                          default_tone_map, distribution_rows, epoch_batches, load_audio, read_manifest,
                          sample_corpus, synth_dataset, write_batch_plan_csv, write_distribution_csv,
                          write_manifest)

TABLE1 = [44000, 10000, 10000, 5000, 2600, 2000, 960, 500, 260, 200, 100, 80, 18]
SYNTH_32_SHA256 = "4122130d83dae30f719c83ed24df85b64e75b1ab6cc592570074bf2e5705d4a9"


def mp_probs(sizes, alpha):
    mpmath.mp.dps = 50
    w = [mpmath.power(mpmath.mpf(n), mpmath.mpf(alpha)) for n in sizes]
    s = mpmath.fsum(w)
    return [float(x / s) for x in w]


# ------------------------------------------------------------------ balanced probabilities

@pytest.mark.parametrize("alpha", [0.0, 0.3, 0.6, 1.0])
@pytest.mark.parametrize("sizes", [[44000, 100], TABLE1, [7], [1, 1e9]])
def test_closed_form_matches_high_precision(sizes, alpha):
    got = balanced_probs(sizes, alpha)
    assert np.allclose(got, mp_probs(sizes, alpha), rtol=1e-12, atol=0)
    assert abs(got.sum() - 1.0) <= 1e-9


def test_alpha_extremes_exact():
    sizes = np.array(TABLE1, dtype=float)
    assert np.array_equal(balanced_probs(TABLE1, 0.0), np.full(13, 1 / 13))
    assert np.allclose(balanced_probs(TABLE1, 1.0), sizes / sizes.sum(), rtol=1e-15)


@pytest.mark.parametrize("bad", [([], 0.5), ([10, 0], 0.5), ([10, -1], 0.5), ([10], 1.5), ([10], -0.1)])
def test_invalid_inputs(bad):
    with pytest.raises(DataError):
        balanced_probs(*bad)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 10**6), min_size=2, max_size=8),
       st.floats(0, 1), st.floats(0, 1))
def test_flattening_is_monotone(sizes, a1, a2):
    lo, hi = sorted((a1, a2))
    p_lo, p_hi = balanced_probs(sizes, lo), balanced_probs(sizes, hi)
    for i in range(len(sizes)):
        for j in range(len(sizes)):
            if sizes[i] > sizes[j]:
                assert p_lo[i] / p_lo[j] <= p_hi[i] / p_hi[j] * (1 + 1e-12)


def test_single_corpus_always_zero():
    plan = SamplingPlan(["only"], [5], 0.6)
    rng = np.random.default_rng(0)
    assert all(sample_corpus(plan, rng) == 0 for _ in range(100))


@pytest.mark.parametrize("alpha", [0.0, 0.6, 1.0])
def test_sampling_frequencies(alpha):
    plan = SamplingPlan([f"c{i}" for i in range(13)], TABLE1, alpha)
    rng = np.random.default_rng(42)
    counts = np.bincount([sample_corpus(plan, rng) for _ in range(100_000)], minlength=13)
    assert np.max(np.abs(counts / 100_000 - plan.probs)) <= 0.01


def test_default_alpha():
    assert SamplingPlan(["a"], [1]).alpha == 0.6


def test_balanced_sampler_uniform_within_corpus():
    recs = [ManifestRecord(f"a{i}", "x", "t", 1.0, corpus="a") for i in range(4)]
    recs += [ManifestRecord("b0", "x", "t", 1.0, corpus="b")]
    s = BalancedSampler(recs, alpha=0.0)
    got = Counter(r.id for r in s.draw(np.random.default_rng(1), 40_000))
    assert got["b0"] / 40_000 == pytest.approx(0.5, abs=0.01)
    for i in range(4):
        assert got[f"a{i}"] / 40_000 == pytest.approx(0.125, abs=0.01)


def test_distribution_csv(tmp_path):
    rows = distribution_rows(["big", "small"], [300, 3], [0.0, 1.0])
    write_distribution_csv(tmp_path / "d.csv", rows)
    back = list(csv.DictReader((tmp_path / "d.csv").open()))
    assert [r["corpus"] for r in back] == ["big", "small", "big", "small"]
    assert float(back[0]["balanced_p"]) == 0.5 and float(back[2]["balanced_p"]) == pytest.approx(300 / 303)


# ------------------------------------------------------------------ epoch batching

def records(n, seed=0):
    rng = np.random.default_rng(seed)
    return [ManifestRecord(f"r{i}", "x", "t", float(rng.uniform(0.5, 20))) for i in range(n)]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 12), st.integers(1, 9), st.integers(0, 10**6))
def test_epoch_is_a_permutation_sorted_within_parts(n, parts, bs, seed):
    recs = records(n, seed % 7)
    plan = epoch_batches(recs, parts, bs, seed)
    ids = [i for b in plan.batches for i in b]
    assert Counter(ids) == Counter(r.id for r in recs)
    dur = {r.id: r.duration_s for r in recs}
    for p in set(plan.parts):
        seq = [dur[i] for b, q in zip(plan.batches, plan.parts) if q == p for i in b]
        assert seq == sorted(seq)
    assert all(len(b) <= bs for b in plan.batches)


def test_one_part_sorts_globally():
    recs = records(30)
    plan = epoch_batches(recs, 1, 4, seed=3)
    d = [next(r.duration_s for r in recs if r.id == i) for b in plan.batches for i in b]
    assert d == sorted(d)


def test_default_parts_and_reduction(caplog):
    assert epoch_batches.__defaults__[0] == 200
    with caplog.at_level(logging.WARNING):
        plan = epoch_batches(records(5), 200, 2, seed=0)
    assert plan.num_parts == 5 and "reduced" in caplog.text


def test_plan_determinism_and_seed_sensitivity():
    recs = records(50)
    assert epoch_batches(recs, 5, 4, 9).batches == epoch_batches(recs, 5, 4, 9).batches
    assert epoch_batches(recs, 5, 4, 9).batches != epoch_batches(recs, 5, 4, 10).batches
    with pytest.raises(DataError):
        epoch_batches(recs, 5, 0, 0)


def test_batch_plan_csv(tmp_path):
    recs = records(6)
    write_batch_plan_csv(tmp_path / "p.csv", epoch_batches(recs, 2, 2, 0), recs)
    rows = list(csv.DictReader((tmp_path / "p.csv").open()))
    assert len(rows) == 6 and set(rows[0]) == {"batch", "part", "id", "duration_s"}


# ------------------------------------------------------------------ synthetic data and manifests

def test_synth_properties():
    waves, recs = synth_dataset(0, 32)
    for r in recs:
        assert 2 <= len(r.text) <= 8 and len(set(r.text)) == len(r.text)
        assert r.duration_s == pytest.approx(0.1 * len(r.text), abs=1e-12)
        assert waves[r.id].samples.size == 1600 * len(r.text)
    tm = default_tone_map()
    assert len(set(tm.values())) == len(tm)


def test_synth_audio_hash_is_frozen():
    waves, recs = synth_dataset(0, 32)
    h = hashlib.sha256()
    for r in recs:
        h.update(r.id.encode())
        h.update(waves[r.id].samples.astype("<f4").tobytes())
    assert h.hexdigest() == SYNTH_32_SHA256


def test_synth_rejects_bad_args():
    with pytest.raises(DataError):
        synth_dataset(0, 0)
    with pytest.raises(DataError):
        synth_dataset(0, 2, chars="abc", max_len=4)


def test_manifest_round_trip_and_audio(tmp_path):
    waves, recs = synth_dataset(1, 3)
    recs.append(ManifestRecord("t1", "synth:ab", "ab", 0.2, task="ast", translation="x", tgt_lang="de"))
    write_manifest(tmp_path / "m.jsonl", recs)
    assert read_manifest(tmp_path / "m.jsonl") == recs
    w = load_audio(recs[0], default_tone_map())
    assert np.array_equal(w.samples, waves[recs[0].id].samples)


def test_manifest_errors(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"id": "x", "audio": "a", "text": "t", "duration_s": 0}\n', encoding="utf-8")
    with pytest.raises(DataError):
        read_manifest(p)
    p.write_text('{"id": "x", "nope": 1}\n', encoding="utf-8")
    with pytest.raises(DataError, match=":1:"):
        read_manifest(p)
