import math
import random

import pytest
import torch
from hypothesis import given, settings, strategies as st

from cem.corpus import make_batches
from cem.errors import DataError
from cem.evalsuite import (EvalReport, ablation_compare, accuracy_from_probs, distinct_n, emotion_accuracy,
                           fingerprint, format_ablation_table, nll_totals, perplexity, trigram_report)
from cem.model import CEM, ModelConfig
from cem.objective import nll_loss
from conftest import SMALL_MODEL

words = st.sampled_from(["a", "b", "c", "d", "e"])
responses = st.lists(st.lists(words, min_size=0, max_size=8), min_size=1, max_size=10)


def test_distinct_hand_oracle():
    assert distinct_n([["a", "b"], ["a", "c"]], 1) == 75.0
    assert distinct_n([["a", "b"], ["a", "b"]], 2) == 50.0
    with pytest.raises(DataError):
        distinct_n([["a"]], 2)


def _brute_distinct(rs, n):
    grams = []
    for r in rs:
        for i in range(len(r) - n + 1):
            grams.append(tuple(r[i:i + n]))
    uniq = []
    for g in grams:
        if g not in uniq:
            uniq.append(g)
    return 100 * len(uniq) / len(grams)


@settings(max_examples=200)
@given(responses, st.integers(1, 3))
def test_distinct_matches_brute_force(rs, n):
    if sum(max(0, len(r) - n + 1) for r in rs) == 0:
        with pytest.raises(DataError):
            distinct_n(rs, n)
    else:
        assert distinct_n(rs, n) == pytest.approx(_brute_distinct(rs, n), abs=1e-12)
        assert 0 < distinct_n(rs, n) <= 100


def test_trigram_hand_oracle():
    rs = [["i", "am", "sorry", "to"], ["so", "sorry", "to"], ["i", "am", "sorry"]]
    rows = dict(trigram_report(rs))
    assert rows[("i", "am", "sorry")] == pytest.approx(2 / 3)
    assert trigram_report(rs, trigrams=[("sorry", "to", "hear")]) == [(("sorry", "to", "hear"), 0.0)]
    assert trigram_report(rs, top_k=1) == [(("i", "am", "sorry"), pytest.approx(2 / 3))]


@settings(max_examples=100)
@given(responses)
def test_trigram_coverage_brute_force(rs):
    for tri, cov in trigram_report(rs):
        hits = sum(any(tuple(r[i:i + 3]) == tri for i in range(len(r) - 2)) for r in rs)
        assert cov == pytest.approx(hits / len(rs), abs=1e-12)


def test_accuracy_ties_go_to_first_label():
    p = torch.tensor([[0.5, 0.5, 0.0], [0.2, 0.3, 0.5]])
    assert accuracy_from_probs(p, torch.tensor([0, 2])) == 1.0
    assert accuracy_from_probs(p, torch.tensor([1, 2])) == 0.5


def test_report_validation_and_json():
    r = EvalReport(1.5, 10.0, 20.0, 0.5, 3, "abc")
    assert EvalReport.from_json(r.to_json()) == r
    with pytest.raises(ValueError):
        EvalReport(0.5, 10.0, 20.0, None, 3)
    with pytest.raises(ValueError):
        EvalReport(1.5, 101.0, 20.0, None, 3)


def test_fingerprint_stable():
    assert fingerprint({"a": 1, "b": 2}) == fingerprint({"b": 2, "a": 1})
    assert len(fingerprint("x")) == 16


def test_perplexity_matches_batch_means(small_experiment):
    torch.manual_seed(0)
    model = CEM(ModelConfig(vocab_size=len(small_experiment.vocab), **SMALL_MODEL)).eval()
    batches = make_batches(small_experiment.valid, 3)
    total, count = nll_totals(model, batches)
    with torch.no_grad():
        ref = sum(nll_loss(model(b).logits, b.labels, b.label_mask).item() * int(b.label_mask.sum())
                  for b in batches)
    assert count == sum(int(b.label_mask.sum()) for b in batches)
    assert total == pytest.approx(ref, rel=1e-6)
    assert perplexity(model, batches) == pytest.approx(math.exp(total / count), rel=1e-12)


def test_emotion_accuracy_absent_for_vanilla(small_experiment):
    model = CEM(ModelConfig(vocab_size=len(small_experiment.vocab), ablations=("vanilla",), **SMALL_MODEL))
    assert emotion_accuracy(model, make_batches(small_experiment.valid, 4)) is None


def test_ablation_compare_deltas():
    reps = {"full": EvalReport(30.0, 1.0, 4.0, 0.4, 10), "no-div": EvalReport(31.0, 0.5, 2.0, 0.5, 10),
            "vanilla": EvalReport(32.0, 0.4, 1.0, None, 10)}
    table = ablation_compare({k: () for k in reps}, lambda name, _: reps[name])
    assert table["reference"] == "full"
    assert table["deltas"]["no-div"]["ppl"] == 1.0
    assert table["deltas"]["no-div"]["dist_2"] == -2.0
    assert table["deltas"]["vanilla"]["emotion_accuracy"] is None
    text = format_ablation_table(table)
    assert text.splitlines()[0] == "model\tPPL\tDist-1\tDist-2\tAcc"
    assert text.splitlines()[3].endswith("\t-")
    with pytest.raises(ValueError):
        ablation_compare({"full": ()}, lambda n, o: reps[n])
