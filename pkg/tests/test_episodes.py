import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from picomaml.data import MASK, PretokenizedCorpus
from picomaml.episodes import eligible_words, mask_sentence, sample_episode
from picomaml.errors import EpisodeError, SamplingError


def test_mask_sentence_examples():
    out, pos = mask_sentence([5, 7, 5, 9], 5)
    assert out.tolist() == [MASK, 7, MASK, 9]
    assert pos.tolist() == [0, 2]
    with pytest.raises(SamplingError):
        mask_sentence([5, 7], 8)


def test_thousand_episodes_satisfy_invariants(toy_corpus):
    corpus, vocab = toy_corpus
    rng = np.random.default_rng(0)
    inputs = corpus.sequences[:, :-1]
    for _ in range(1000):
        ep = sample_episode(corpus, vocab, n_ways=4, k_shots=3, q_queries=2, rng=rng)
        ep.validate(inputs)
        assert ep.support_tokens.shape == (12, corpus.seq_len - 1)
        assert ep.query_tokens.shape == (8, corpus.seq_len - 1)
        assert np.all(ep.support_tokens[np.arange(12), ep.support_positions] == MASK)


@given(st.integers(0, 2**31 - 1), st.integers(2, 6), st.integers(1, 3), st.integers(1, 3))
def test_episode_invariants_property(toy_corpus, seed, n, k, q):
    corpus, vocab = toy_corpus
    ep = sample_episode(corpus, vocab, n_ways=n, k_shots=k, q_queries=q, rng=np.random.default_rng(seed))
    ep.validate(corpus.sequences[:, :-1])
    assert np.bincount(ep.support_labels, minlength=n).tolist() == [k] * n
    assert np.bincount(ep.query_labels, minlength=n).tolist() == [q] * n


def test_same_seed_same_episode(toy_corpus):
    corpus, vocab = toy_corpus
    a = sample_episode(corpus, vocab, 4, 2, 2, np.random.default_rng(9))
    b = sample_episode(corpus, vocab, 4, 2, 2, np.random.default_rng(9))
    assert np.array_equal(a.support_tokens, b.support_tokens)
    assert np.array_equal(a.class_words, b.class_words)


def test_validate_catches_tampering(toy_corpus):
    corpus, vocab = toy_corpus
    ep = sample_episode(corpus, vocab, 4, 2, 2, np.random.default_rng(1))
    ep.support_labels[0] = (ep.support_labels[0] + 1) % 4
    with pytest.raises(EpisodeError):
        ep.validate()
    ep = sample_episode(corpus, vocab, 4, 2, 2, np.random.default_rng(1))
    ep.query_rows[0] = ep.support_rows[0]
    with pytest.raises(EpisodeError):
        ep.validate()


def test_too_many_ways_reports_deficit(toy_corpus):
    corpus, vocab = toy_corpus
    n_ok = len(eligible_words(corpus, 6))
    with pytest.raises(EpisodeError, match=f"deficit {5}"):
        sample_episode(corpus, vocab, n_ways=n_ok + 5, k_shots=4, q_queries=2, rng=np.random.default_rng(0))


def test_eligibility_excludes_frequent_and_reserved():
    rows = [[1, 3, 4, 10 + (i % 10), 0] for i in range(50)]
    corpus = PretokenizedCorpus(np.array(rows))
    elig = eligible_words(corpus, 3).tolist()
    assert 3 not in elig and 4 not in elig and 1 not in elig
    assert elig == list(range(10, 20))
    assert eligible_words(corpus, 6).tolist() == []


def test_class_words_are_uniform():
    # 20 candidate words, each in 40 sequences of its own; fillers appear everywhere
    n_words, per_word = 20, 40
    rows = []
    for w in range(n_words):
        for _ in range(per_word):
            rows.append([3, 4, 100 + w, 5, 6])
    corpus = PretokenizedCorpus(np.array(rows))
    rng = np.random.default_rng(0)
    counts = np.zeros(n_words)
    for _ in range(10_000):
        ep = sample_episode(corpus, None, n_ways=4, k_shots=4, q_queries=2, rng=rng)
        counts[ep.class_words - 100] += 1
    _, p = stats.chisquare(counts)
    assert p > 0.001
