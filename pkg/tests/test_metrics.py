import json
import random
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from aimkp.metrics import (
    EvalReport,
    MetricError,
    evaluate_corpus,
    f1_at_k,
    load_predictions,
    map_at_k,
    mean_reports,
    normalize_phrases,
    porter_stem,
    report_csv,
    report_text,
)

# -- independent reference, written from the definitions ------------------------


def ref_f1(preds, gold, k):
    padded = list(preds[:k]) + [None] * max(0, k - len(preds))  # None never matches
    assert len(padded) == k
    tp = sum(p is not None and p in gold for p in padded)
    return float(Fraction(2 * tp, k + len(gold)))


def ref_map(preds, gold, k):
    kp = min(len(preds), k)
    if kp == 0:
        return 0.0
    terms = []
    for r in range(1, kp + 1):
        if preds[r - 1] in gold:
            terms.append(Fraction(sum(p in gold for p in preds[:r]), r))
    return float(sum(terms, Fraction(0)) / min(len(gold), kp))


def ref_corpus(pairs):
    rows = []
    for preds, gold in pairs:
        p, g = normalize_phrases(preds), set(normalize_phrases(gold))
        rows.append((ref_f1(p, g, 1), ref_f1(p, g, 3), ref_map(p, g, 5)))
    return [sum(col) / len(rows) for col in zip(*rows)]


# -- hand examples ----------------------------------------------------------------


def test_f1_padding_example():
    assert f1_at_k(["a", "b"], {"a", "c"}, 3) == pytest.approx(0.4, abs=0)


def test_f1_trivial():
    assert f1_at_k(["a"], {"a"}, 1) == 1.0
    assert f1_at_k(["x"], {"a"}, 1) == 0.0


def test_map_examples():
    assert map_at_k(["a"], {"a"}, 5) == 1.0
    assert map_at_k(["b", "a"], {"a"}, 5) == 0.5
    assert map_at_k(["a", "b", "c"], {"a", "c"}, 5) == 5 / 6


def test_map_empty_predictions():
    assert map_at_k([], {"a"}, 5) == 0.0


@pytest.mark.parametrize("fn", [f1_at_k, map_at_k])
def test_rejects_bad_inputs(fn):
    with pytest.raises(MetricError):
        fn(["a"], {"a"}, 0)
    with pytest.raises(MetricError):
        fn(["a"], set(), 1)


def test_normalization_examples():
    assert normalize_phrases(["Running Shoes", "running shoe"]) == ["run shoe"]
    assert normalize_phrases([]) == []
    assert normalize_phrases(["NCAA Golf", "Hokies"]) == ["ncaa golf", "hoki"]


def test_punctuation_is_stripped():
    # "U.S." -> "us" -> Porter strips the plural s
    assert normalize_phrases(["#Golf!", "golf", "U.S. Open"]) == ["golf", "u open"]


@pytest.mark.parametrize("word,stem", [("caresses", "caress"), ("ponies", "poni"), ("sky", "sky")])
def test_porter_examples(word, stem):
    assert porter_stem(word) == stem


def test_porter_passthrough():
    assert porter_stem("2024") == "2024"
    assert porter_stem("café") == "café"


# -- oracle equivalence -------------------------------------------------------------


def test_metrics_match_reference_on_random_cases():
    rng = random.Random(5)
    alphabet = list("abcdefgh")
    n_short = n_kprime = 0
    for _ in range(1000):
        preds = rng.sample(alphabet, rng.randint(0, 7))
        gold = set(rng.sample(alphabet, rng.randint(1, 4)))
        k = rng.randint(1, 6)
        n_short += len(preds) < k
        n_kprime += min(len(preds), k) < k
        assert f1_at_k(preds, gold, k) == ref_f1(preds, gold, k)
        assert map_at_k(preds, gold, k) == ref_map(preds, gold, k)
    assert n_short > 100 and n_kprime > 100


def test_corpus_matches_reference():
    rng = random.Random(9)
    words = ["Golf", "golfing", "NCAA", "shoes", "Running", "shoe", "open", "U.S."]
    pairs = []
    for _ in range(50):
        mk = lambda: " ".join(rng.sample(words, rng.randint(1, 2)))
        pairs.append(([mk() for _ in range(rng.randint(0, 6))], [mk() for _ in range(rng.randint(1, 3))]))
    report = evaluate_corpus(pairs)
    assert [report.f1_at_1, report.f1_at_3, report.map_at_5] == ref_corpus(pairs)


def test_corpus_means():
    r = evaluate_corpus([(["a"], ["a"])] * 3)
    assert r.f1_at_1 == 1.0 and r.map_at_5 == 1.0
    r = evaluate_corpus([(["a"], ["a"]), (["b"], ["a"])])
    assert r.f1_at_1 == 0.5 and r.map_at_5 == 0.5


def test_empty_corpus_rejected():
    with pytest.raises(MetricError):
        evaluate_corpus([])
    with pytest.raises(MetricError):
        evaluate_corpus([(["a"], ["a"])], condition="audio-only")


def test_porter_matches_reference_vocabulary():
    nltk_porter = pytest.importorskip("nltk.stem.porter")
    english_words = pytest.importorskip("english_words")
    ref = nltk_porter.PorterStemmer(mode=nltk_porter.PorterStemmer.ORIGINAL_ALGORITHM)
    vocab = sorted(w for w in english_words.get_english_words_set(["web2"], lower=True) if w.isalpha())
    sample = random.Random(0).sample(vocab, 20_000)
    mismatches = [w for w in sample if porter_stem(w) != ref.stem(w, to_lowercase=False)]
    assert len(sample) >= 10_000
    assert mismatches == []


# -- properties -----------------------------------------------------------------------

tokens = st.sampled_from(["alpha", "beta", "gamma", "delta", "eps"])
pred_lists = st.lists(tokens, max_size=7, unique=True)
gold_sets = st.sets(tokens, min_size=1, max_size=4)


@given(pred_lists, gold_sets, st.integers(1, 6))
def test_scores_lie_in_unit_interval(preds, gold, k):
    assert 0.0 <= f1_at_k(preds, gold, k) <= 1.0
    assert 0.0 <= map_at_k(preds, gold, k) <= 1.0


@given(pred_lists, gold_sets, st.integers(1, 6))
def test_prepending_a_hit_never_lowers_map(preds, gold, k):
    hit = sorted(gold)[0]
    rest = [p for p in preds if p != hit]
    assert map_at_k([hit] + rest, gold, k) >= map_at_k(rest, gold, k)


@given(pred_lists, gold_sets, st.integers(1, 6))
def test_padding_semantics(preds, gold, k):
    if len(preds) >= k:
        assert f1_at_k(preds, gold, k) == f1_at_k(preds[:k], gold, k)
    else:
        tp = sum(p in gold for p in preds)
        expect = 0.0 if tp == 0 else 2 * (tp / k) * (tp / len(gold)) / (tp / k + tp / len(gold))
        assert f1_at_k(preds, gold, k) == pytest.approx(expect, rel=1e-15)


@given(st.lists(st.text(alphabet="abcdefgz ,.!AEIOU", max_size=12), max_size=6))
def test_normalization_is_idempotent_on_stem_fixed_points(phrases):
    once = normalize_phrases(phrases)
    assert len(set(once)) == len(once)
    if all(porter_stem(t) == t for p in once for t in p.split()):
        assert normalize_phrases(once) == once


def test_classic_porter_is_not_idempotent():
    # the unmodified algorithm can strip further on a second pass
    assert porter_stem("abee") == "abe" and porter_stem("abe") == "ab"
    assert normalize_phrases(normalize_phrases(["abee"])) != normalize_phrases(["abee"])


@given(st.lists(st.sampled_from(["Running Shoes", "run shoe", "golf", "Golfing!"]), min_size=1, max_size=4))
def test_symmetric_normalization(phrases):
    # identical raw lists on both sides always rank every gold phrase first
    assert evaluate_corpus([(phrases, phrases)]).map_at_5 == 1.0


# -- io -----------------------------------------------------------------------------


def test_load_predictions(tmp_path):
    p = tmp_path / "preds.jsonl"
    p.write_text(json.dumps({"id": "a", "preds": ["x"], "gold": ["x"]}) + "\n\n")
    assert load_predictions(p) == [("a", ["x"], ["x"])]
    p.write_text('{"id": "a", "preds": ["x"]}\n')
    with pytest.raises(MetricError, match=":1:"):
        load_predictions(p)


def test_report_formats():
    r = EvalReport("image-only", 0.5, 0.25, 0.75, 10)
    text = report_csv([r])
    assert text.splitlines()[0] == "condition,f1_at_1,f1_at_3,map_at_5,n_samples"
    assert "image-only,0.5,0.25,0.75,10" in text
    assert "50.00" in report_text([r])
    assert mean_reports([r, EvalReport("image-only", 0.0, 0.0, 0.0, 10)]).f1_at_1 == 0.25
