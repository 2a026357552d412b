import csv
import json
import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from picomaml import analysis as A
from picomaml.data import RESERVED, TaggedSentence, Vocab
from picomaml.errors import DataError

import oracles


def curve(values, start=0, every=10):
    return [(start + i * every, v) for i, v in enumerate(values)]


def test_t90_examples():
    c = curve([10, 6, 3, 1.5, 1.1, 1.0])
    # threshold = 1.0 + 0.1 * 9 = 1.9
    assert A.t90(c) == 30
    assert A.t90(curve([5, 5, 5])) == 0
    rising = curve([0, 5, 9.5, 10])
    assert A.t90(rising) == 20
    assert A.t90([(0.5, 2.0), (1.5, 1.0)]) == 1.5


def test_normalized_auc_examples():
    assert A.normalized_auc(curve([1, 0])) == pytest.approx(0.5)
    assert A.normalized_auc(curve([1, 0, 0])) == pytest.approx(0.25)
    assert A.normalized_auc(curve([3, 3, 3])) == 0.0
    assert A.is_degenerate(curve([3, 3])) and not A.is_degenerate(curve([3, 2]))


@given(st.lists(st.integers(-10**6, 10**6).map(lambda v: v / 1000), min_size=2, max_size=30),
       st.floats(0.1, 100), st.floats(-100, 100))
def test_curve_metrics_are_affine_invariant(values, a, b):
    # values sitting on the threshold may flip under rounding of the affine map
    thr = values[-1] + 0.1 * (values[0] - values[-1])
    assume(all(abs(v - thr) > 1e-6 for v in values))
    c = curve(values)
    moved = [(s, a * v + b) for s, v in c]
    assert A.t90(moved) == A.t90(c)
    assert A.normalized_auc(moved) == pytest.approx(A.normalized_auc(c), abs=1e-9)
    assert 0.0 <= A.normalized_auc(c) <= 1.0


def test_initial_slope_matches_normal_equations():
    rng = np.random.default_rng(0)
    steps = np.cumsum(rng.integers(1, 20, size=9)).astype(float)
    vals = rng.normal(size=9)
    c = list(zip(steps, vals))
    assert A.initial_slope(c, k=5) == pytest.approx(oracles.lstsq_slope(steps[:5], vals[:5]), rel=1e-10)
    assert A.initial_slope(curve([10, 8, 6, 4]), k=5) == pytest.approx(-0.2)


def test_curve_validation():
    with pytest.raises(DataError):
        A.t90([])
    with pytest.raises(DataError):
        A.t90([(0, 1.0)])
    with pytest.raises(DataError):
        A.normalized_auc([(0, 1.0), (0, 2.0)])
    with pytest.raises(DataError):
        A.t90([(0, 1.0), (1, float("nan"))])


def test_read_curve_prefers_heldout(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("\n".join(json.dumps(r) for r in [
        {"step": 10, "train_loss": 3.0, "heldout_loss": 3.5},
        {"step": 20, "train_loss": 2.0, "heldout_loss": None},
        {"step": 30, "train_loss": 1.0, "heldout_loss": 2.5}]) + "\n")
    assert A.read_curve(p) == [(10.0, 3.5), (30.0, 2.5)]
    assert A.read_curve(p, "train_loss")[1] == (20.0, 2.0)
    with pytest.raises(DataError):
        A.read_curve(p, "query_acc")
    p.write_text("{oops\n")
    with pytest.raises(DataError, match=":1:"):
        A.read_curve(p)


def test_macro_mean_skips_missing():
    assert A.macro_mean([0.5, None, 1.0]) == 0.75
    assert A.macro_mean([None]) is None


@given(st.integers(0, 2**31 - 1), st.integers(2, 8), st.integers(2, 8))
def test_effective_rank_matches_jacobi_oracle(seed, m, n):
    a = np.random.default_rng(seed).normal(size=(m, n))
    assert A.effective_rank_proportional(a) == pytest.approx(oracles.per_reference(a), rel=1e-8)


def test_effective_rank_examples():
    assert A.effective_rank_proportional(np.eye(4)) == pytest.approx(1.0)
    assert A.effective_rank_proportional(np.outer([1, 2, 3], [1, 1])) == pytest.approx(0.5)
    assert A.effective_rank_proportional(np.zeros((3, 3))) is None
    assert A.effective_rank_proportional(5 * np.eye(3)) == pytest.approx(1.0)
    with pytest.raises(DataError):
        A.effective_rank_proportional(np.ones(3))


def sent(text, tags):
    return TaggedSentence(tuple(text.split()), tuple(tags.split()))


DATA = [
    sent("pumunta si Juan sa Cebu .", "O O B-PER O B-LOC O"),
    sent("umalis Maria sa Davao .", "O B-PER O B-LOC O"),
    sent("tumawag ni Ana Cruz ang isda .", "O O B-PER I-PER O O O"),
    sent("dumating ang Red Cross .", "O O B-ORG I-ORG O"),
]


def test_particle_recall_examples():
    assert A.particle_recall(DATA) == pytest.approx(2 / 3)
    assert A.particle_recall(DATA, ["SI"]) == pytest.approx(1 / 3)
    assert A.particle_recall([DATA[3]]) is None


def test_oov_rate_counts_tokens():
    vocab = Vocab(list(RESERVED) + ["pumunta", "si", "sa", "."])
    assert A.oov_rate([DATA[0]], vocab) == pytest.approx(2 / 6)
    with pytest.raises(DataError):
        A.oov_rate([], vocab)


def test_top_words_and_span_statistics():
    top = A.top_words(DATA, 3)
    assert top["non_entity"] == [".", "ang", "sa"]  # ties alphabetical
    assert top["entity"][:2] == ["Ana", "Cebu"]
    stats = A.span_statistics(DATA)
    assert stats["PER"] == {"count": 3, "mean_length": pytest.approx(4 / 3)}
    assert stats["ORG"]["count"] == 1


def test_export_report_csv_and_jsonl(tmp_path):
    rows = [{"step": 1, "value": 0.5}, {"step": 2, "value": None, "extra": "x"}]
    A.export_report(rows, tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        back = list(csv.DictReader(fh))
    assert back[0] == {"step": "1", "value": "0.5", "extra": ""}
    assert back[1]["value"] == ""
    A.export_report(rows, tmp_path / "r.jsonl")
    assert [json.loads(l) for l in (tmp_path / "r.jsonl").read_text().splitlines()] == rows
    with pytest.raises(DataError):
        A.export_report([], tmp_path / "x.csv")
    assert A.long_format(5, "d", {"f1": 0.1, "p": 0.2}) == [
        {"step": 5, "dataset": "d", "metric": "f1", "value": 0.1},
        {"step": 5, "dataset": "d", "metric": "p", "value": 0.2}]


class _FixedTagger:
    """Stands in for a tuned tagger: returns preset marginals."""

    def __init__(self, probs):
        from picomaml.crf import DEFAULT_SCHEME
        self.probs = probs
        self.crf = type("C", (), {"scheme": DEFAULT_SCHEME})()

    def marginals(self, words):
        return self.probs


def test_delta_logprob_sign_convention():
    s = sent("si Juan", "O B-PER")
    pa = np.full((2, 7), 0.1)
    pb = pa.copy()
    pa[0, 0], pa[1, 1] = 0.4, 0.4
    pb[0, 0], pb[1, 1] = 0.4, 0.8
    d = A.delta_logprob(_FixedTagger(pa), _FixedTagger(pb), s)
    assert d[0] == pytest.approx(0.0)
    assert d[1] == pytest.approx(-math.log(2))


def test_word_confidence_averages_gold_marginals():
    from picomaml.crf import DEFAULT_SCHEME
    data = [sent("si Juan", "O B-PER"), sent("si Ana", "O B-PER")]
    probs = [np.full((2, 7), 0.1), np.full((2, 7), 0.1)]
    probs[0][0, 0], probs[1][0, 0] = 0.2, 0.6
    conf = A.word_confidence(probs, data, ["si", "Juan"], DEFAULT_SCHEME)
    assert conf == {"si": pytest.approx(0.4), "Juan": pytest.approx(0.1)}
