import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from picomaml.crf import is_valid_iob2, spans_from_bio
from picomaml.data import (MASK, PAD, RESERVED, UNK, PretokenizedCorpus, TaggedSentence, Vocab, build_vocab,
                           gen_synthetic_corpus, gen_synthetic_ner, load_pretokenized, pretraining_text, read_conll,
                           sample_lm_batch, write_conll, write_pretokenized)
from picomaml.errors import DataError, ParseError, VocabularyError


def test_reserved_ids():
    assert (UNK, MASK, PAD) == (0, 1, 2)
    v = Vocab(list(RESERVED) + ["a", "b"])
    assert v.encode(["a", "zzz", "b"]).tolist() == [3, 0, 4]
    assert v.decode([3, 4]) == ["a", "b"]
    assert "<mask>" not in v and "a" in v
    with pytest.raises(VocabularyError):
        Vocab(["a", "<unk>", "<mask>", "<pad>"])
    with pytest.raises(VocabularyError):
        Vocab(list(RESERVED) + ["a", "a"])


def test_build_vocab_frequency_then_lexicographic():
    v = build_vocab(["b a a", "c b", "d"], max_size=6)
    assert v.words == list(RESERVED) + ["a", "b", "c"]
    with pytest.raises(DataError):
        build_vocab([], 10)


def test_vocab_round_trip(tmp_path):
    v = Vocab(list(RESERVED) + ["isá", "dalawa"])
    v.save(tmp_path / "v.json")
    assert Vocab.load(tmp_path / "v.json") == v
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ParseError):
        Vocab.load(tmp_path / "bad.json")


def test_pretokenized_round_trip_and_errors(tmp_path):
    corpus = PretokenizedCorpus(np.arange(12).reshape(3, 4))
    path = tmp_path / "c.jsonl"
    write_pretokenized(path, corpus)
    back = load_pretokenized(path, vocab_size=12)
    assert np.array_equal(back.sequences, corpus.sequences)
    with pytest.raises(VocabularyError):
        load_pretokenized(path, vocab_size=5)
    path.write_text('{"ids": [1, 2]}\n{"ids": [1]}\n')
    with pytest.raises(ParseError, match=":2:"):
        load_pretokenized(path)
    path.write_text('{"ids": [1, "x"]}\n')
    with pytest.raises(ParseError):
        load_pretokenized(path)
    path.write_text("")
    with pytest.raises(DataError):
        load_pretokenized(path)


def test_word_index_uses_model_inputs_only():
    corpus = PretokenizedCorpus(np.array([[5, 6, 7], [7, 5, 9]]))
    idx = corpus.word_index
    assert idx[5].tolist() == [0, 1]
    assert 9 not in idx  # a final token is only ever a target
    assert idx[7].tolist() == [1]


def test_split_keeps_tail_for_heldout():
    corpus = PretokenizedCorpus(np.arange(40).reshape(20, 2))
    train, held = corpus.split(0.1)
    assert len(train) == 18 and len(held) == 2
    assert np.array_equal(held.sequences, corpus.sequences[18:])
    with pytest.raises(DataError):
        corpus.split(1.0)


def test_sample_lm_batch_is_seeded():
    corpus = PretokenizedCorpus(np.arange(40).reshape(20, 2))
    a = sample_lm_batch(corpus, 5, np.random.default_rng(3))
    b = sample_lm_batch(corpus, 5, np.random.default_rng(3))
    assert np.array_equal(a, b) and a.shape == (5, 2)


def test_synthetic_corpus_shapes_and_text_mix():
    text = pretraining_text(50, np.random.default_rng(0))
    corpus, vocab = gen_synthetic_corpus(128, 200, 12, np.random.default_rng(1), text=text, text_fraction=0.5)
    assert corpus.sequences.shape == (200, 12)
    assert len(vocab) == 128
    assert corpus.sequences.max() < 128 and corpus.sequences.min() >= len(RESERVED)
    stop = vocab.index["."]
    assert 0.4 < np.mean(np.any(corpus.sequences == stop, axis=1)) < 0.6
    again, _ = gen_synthetic_corpus(128, 200, 12, np.random.default_rng(1), text=text, text_fraction=0.5)
    assert np.array_equal(again.sequences, corpus.sequences)


def test_conll_round_trip(tmp_path):
    sents = gen_synthetic_ner(20, 0.5, np.random.default_rng(0))
    write_conll(tmp_path / "x.conll", sents)
    assert read_conll(tmp_path / "x.conll") == sents


def test_conll_errors(tmp_path):
    p = tmp_path / "bad.conll"
    p.write_text("Juan\tB-PER\nsa\tB-MISC\n")
    with pytest.raises(ParseError, match="B-MISC"):
        read_conll(p)
    p.write_text("Juan B-PER\n")
    with pytest.raises(ParseError):
        read_conll(p)
    p.write_text("\n\n")
    with pytest.raises(DataError):
        read_conll(p)
    with pytest.raises(DataError):
        TaggedSentence(("a",), ())


@given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 0.5, 1.0]), st.sampled_from(["source", "dialect"]))
def test_generated_ner_is_valid_iob2(seed, rate, lexicon):
    for s in gen_synthetic_ner(30, rate, np.random.default_rng(seed), lexicon=lexicon):
        assert is_valid_iob2(s.tags)


def test_particle_rate_controls_marking():
    sents = gen_synthetic_ner(400, 1.0, np.random.default_rng(0))
    pers = [(s, sp) for s in sents for sp in spans_from_bio(s.tags) if sp.type == "PER"]
    assert pers and all(s.words[sp.start - 1] in ("si", "ni") for s, sp in pers)
    sents = gen_synthetic_ner(400, 0.0, np.random.default_rng(0))
    assert not any(w in ("si", "ni") for s in sents for w in s.words)


def test_dialect_lexicon_differs_from_source():
    src = {w for s in gen_synthetic_ner(300, 0.5, np.random.default_rng(0)) for w in s.words}
    dia = {w for s in gen_synthetic_ner(300, 0.5, np.random.default_rng(0), lexicon="dialect") for w in s.words}
    assert dia - src


def test_json_lines_are_plain_ints(tmp_path):
    corpus, _ = gen_synthetic_corpus(32, 3, 5, np.random.default_rng(0))
    write_pretokenized(tmp_path / "c.jsonl", corpus)
    first = json.loads((tmp_path / "c.jsonl").read_text().splitlines()[0])
    assert all(type(i) is int for i in first["ids"])
