"""Vocabulary, pretokenized corpora, CoNLL NER files and synthetic stand-ins."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ParseError, VocabularyError

UNK, MASK, PAD = 0, 1, 2
RESERVED = ("<unk>", "<mask>", "<pad>")

TAGS = ("O", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG", "I-ORG")


class Vocab:
    """id <-> word table with fixed reserved ids 0=<unk>, 1=<mask>, 2=<pad>."""

    def __init__(self, words: Sequence[str]):
        words = list(words)
        if tuple(words[:3]) != RESERVED:
            raise VocabularyError("vocabulary must start with <unk>, <mask>, <pad>")
        if len(set(words)) != len(words):
            raise VocabularyError("vocabulary entries must be unique")
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index and self.index[word] >= len(RESERVED)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.words == other.words

    def encode(self, words: Iterable[str]) -> np.ndarray:
        return np.array([self.index.get(w, UNK) for w in words], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.words[int(i)] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.words, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        try:
            words = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid vocab JSON: {exc}") from exc
        if not isinstance(words, list) or not all(isinstance(w, str) for w in words):
            raise ParseError(f"{path}: vocab must be a JSON array of strings")
        return cls(words)


def build_vocab(corpus: Iterable[str] | Iterable[Sequence[str]], max_size: int) -> Vocab:
    """Most frequent ``max_size - 3`` whitespace words; ties broken lexicographically."""
    if max_size <= len(RESERVED):
        raise DataError(f"max_size must exceed {len(RESERVED)}")
    counts: Counter = Counter()
    for item in corpus:
        counts.update(item.split() if isinstance(item, str) else item)
    for w in RESERVED:
        counts.pop(w, None)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(list(RESERVED) + [w for w, _ in ranked[: max_size - len(RESERVED)]])


@dataclass
class PretokenizedCorpus:
    sequences: np.ndarray  # (n, L) int64
    path: str | None = None

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.int64)
        if self.sequences.ndim != 2:
            raise DataError("corpus sequences must form an (n, L) array")

    def __len__(self) -> int:
        return self.sequences.shape[0]

    @property
    def seq_len(self) -> int:
        return self.sequences.shape[1]

    @cached_property
    def word_index(self) -> dict[int, np.ndarray]:
        """token id -> sorted indices of sequences whose model input (all but last id) contains it."""
        inputs = self.sequences[:, :-1]
        index: dict[int, list[int]] = {}
        for row, seq in enumerate(inputs):
            for tok in np.unique(seq):
                index.setdefault(int(tok), []).append(row)
        return {k: np.array(v, dtype=np.int64) for k, v in index.items()}

    def split(self, heldout_fraction: float) -> tuple["PretokenizedCorpus", "PretokenizedCorpus"]:
        n_held = max(1, int(round(len(self) * heldout_fraction))) if heldout_fraction > 0 else 0
        if n_held >= len(self):
            raise DataError("held-out split would leave no training sequences")
        cut = len(self) - n_held
        return PretokenizedCorpus(self.sequences[:cut], self.path), PretokenizedCorpus(self.sequences[cut:], self.path)


def write_pretokenized(path, corpus: PretokenizedCorpus) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in corpus.sequences:
            fh.write(json.dumps({"ids": [int(i) for i in seq]}) + "\n")


def load_pretokenized(path, vocab_size: int | None = None, seq_len: int | None = None) -> PretokenizedCorpus:
    """Parse a JSONL file of ``{"ids": [...]}`` lines of one fixed length."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ids = obj["ids"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: expected an object with an 'ids' list") from exc
            if not isinstance(ids, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in ids):
                raise ParseError(f"{path}:{lineno}: 'ids' must be a list of integers")
            want = seq_len if seq_len is not None else (len(rows[0]) if rows else len(ids))
            if len(ids) != want:
                raise ParseError(f"{path}:{lineno}: expected {want} ids, got {len(ids)}")
            if vocab_size is not None and ids and (max(ids) >= vocab_size or min(ids) < 0):
                raise VocabularyError(f"{path}:{lineno}: id outside vocabulary of size {vocab_size}")
            rows.append(ids)
    if not rows:
        raise DataError(f"{path}: corpus is empty")
    return PretokenizedCorpus(np.array(rows, dtype=np.int64), str(path))


def sample_lm_batch(corpus: PretokenizedCorpus, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly sampled (with replacement) batch of sequences."""
    if len(corpus) == 0:
        raise DataError("cannot sample from an empty corpus")
    return corpus.sequences[rng.integers(0, len(corpus), size=batch_size)]


def gen_synthetic_corpus(vocab_size: int, n_sequences: int, seq_len: int, rng: np.random.Generator,
                         text: Sequence[Sequence[str]] | None = None, text_fraction: float = 0.0,
                         zipf_a: float = 1.1, follow_prob: float = 0.5) -> tuple[PretokenizedCorpus, Vocab]:
    """Zipf-distributed token stream with planted bigrams, optionally mixed with real sentences.

    Each synthetic word has a fixed successor that follows it with probability
    ``follow_prob``; otherwise the next token is a fresh Zipf draw.  When ``text`` is
    given, a ``text_fraction`` share of the sequences is filled by packing those
    sentences back to back.
    """
    if min(vocab_size, n_sequences, seq_len) <= 0:
        raise DataError("sizes must be positive")
    text_words = sorted({w for sent in text for w in sent}) if text else []
    n_synth = vocab_size - len(RESERVED) - len(text_words)
    if n_synth < 2:
        raise DataError(f"vocab_size {vocab_size} too small for {len(text_words)} text words")
    width = len(str(n_synth - 1))
    synth = [f"w{i:0{width}d}" for i in range(n_synth)]
    probs = 1.0 / np.arange(1, n_synth + 1) ** zipf_a
    probs /= probs.sum()
    successor = rng.permutation(n_synth)

    n_text = int(round(n_sequences * text_fraction)) if text else 0
    is_text = np.zeros(n_sequences, dtype=bool)
    if n_text:
        is_text[rng.choice(n_sequences, size=n_text, replace=False)] = True

    seqs_words: list[list[str]] = []
    for row in range(n_sequences):
        if is_text[row]:
            words: list[str] = []
            while len(words) < seq_len:
                words.extend(text[int(rng.integers(len(text)))])
            seqs_words.append(words[:seq_len])
            continue
        ids = np.empty(seq_len, dtype=np.int64)
        ids[0] = rng.choice(n_synth, p=probs)
        follow = rng.random(seq_len) < follow_prob
        fresh = rng.choice(n_synth, size=seq_len, p=probs)
        for t in range(1, seq_len):
            ids[t] = successor[ids[t - 1]] if follow[t] else fresh[t]
        seqs_words.append([synth[i] for i in ids])

    # every word is kept: the vocabulary holds exactly the generated word types
    vocab = Vocab(list(RESERVED) + text_words + synth)
    seqs = np.stack([vocab.encode(ws) for ws in seqs_words])
    return PretokenizedCorpus(seqs), vocab


# ---------------------------------------------------------------------------
# NER data


@dataclass(frozen=True)
class TaggedSentence:
    words: tuple[str, ...]
    tags: tuple[str, ...]

    def __post_init__(self):
        if len(self.words) != len(self.tags):
            raise DataError("words and tags differ in length")

    def __len__(self) -> int:
        return len(self.words)


def read_conll(path) -> list[TaggedSentence]:
    """Read ``token<TAB>tag`` lines with blank-line sentence breaks; tags are validated."""
    sents: list[TaggedSentence] = []
    words: list[str] = []
    tags: list[str] = []
    valid = set(TAGS)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                if words:
                    sents.append(TaggedSentence(tuple(words), tuple(tags)))
                    words, tags = [], []
                continue
            if line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ParseError(f"{path}:{lineno}: expected token<TAB>tag")
            word, tag = parts[0], parts[-1].strip()
            if tag not in valid:
                raise ParseError(f"{path}:{lineno}: unknown tag {tag!r}")
            words.append(word)
            tags.append(tag)
    if words:
        sents.append(TaggedSentence(tuple(words), tuple(tags)))
    if not sents:
        raise DataError(f"{path}: no sentences")
    return sents


def write_conll(path, sentences: Iterable[TaggedSentence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            for w, t in zip(s.words, s.tags):
                fh.write(f"{w}\t{t}\n")
            fh.write("\n")


@dataclass(frozen=True)
class Lexicon:
    verbs: tuple[str, ...]
    names: tuple[str, ...]
    places: tuple[tuple[str, ...], ...]
    orgs: tuple[tuple[str, ...], ...]
    nouns: tuple[str, ...] = ("bahay", "libro", "pagkain", "sulat", "regalo", "aso", "bigas", "papel")


_VERBS = ("pumunta", "umalis", "dumating", "tumawag", "bumisita", "sumulat", "naglakad", "tumira")
_SOURCE_NAMES = ("Maria", "Juan", "Jose", "Ana", "Pedro", "Rosa", "Carlos", "Elena", "Miguel", "Lucia",
                 "Ramon", "Sofia", "Andres", "Isabel", "Tomas", "Carmen", "Luis", "Teresa", "Diego", "Marta")
_DIALECT_NAMES = ("Dodong", "Inday", "Nonoy", "Bebang", "Kulas", "Ising", "Tasyo", "Osang", "Berto", "Lorna",
                  "Udong", "Pining", "Kikoy", "Nenita", "Badong", "Titing")
_PLACES = (("Cebu",), ("Manila",), ("Davao",), ("Iloilo",), ("Baguio",), ("Tacloban",), ("Bohol",),
           ("San", "Jose"), ("Santa", "Rosa"), ("Quezon", "City"))
_SOURCE_ORGS = (("Bangko", "Sentral"), ("Pambansang", "Museo"), ("Red", "Cross", "Pilipinas"),
                ("Kagawaran", "ng", "Edukasyon"), ("Unibersidad", "ng", "Pilipinas"))
_DIALECT_ORGS = (("Kapunungan", "Mag-uuma"), ("Banko", "Sugbuanon"), ("Tambayayong", "Lungsod"),
                 ("Katilingban", "Mananagat"))
_DIALECT_NOUNS = ("balay", "sinina", "kan-on", "isda", "bulak", "lamesa", "kahoy", "baso")

LEXICONS = {
    "source": Lexicon(_VERBS, _SOURCE_NAMES, _PLACES, _SOURCE_ORGS),
    "dialect": Lexicon(_VERBS, _DIALECT_NAMES, _PLACES, _DIALECT_ORGS, _DIALECT_NOUNS),
    # unlabeled pretraining text: names of both pools, source organisations only
    "pretrain": Lexicon(_VERBS, _SOURCE_NAMES + _DIALECT_NAMES, _PLACES, _SOURCE_ORGS),
}


def _entity(words: Sequence[str], kind: str) -> tuple[list[str], list[str]]:
    return list(words), [f"B-{kind}"] + [f"I-{kind}"] * (len(words) - 1)


def gen_synthetic_ner(n_sentences: int, particle_rate: float, rng: np.random.Generator,
                      lexicon: str | Lexicon = "source", org_rate: float = 0.15) -> list[TaggedSentence]:
    """Particle-anchored NER sentences in IOB2.

    Templates (particle optional, kept with probability ``particle_rate``)::

        <verb> [si] <Name> sa <Place> .
        <verb> [ni] <Name> ang <noun> .
        <verb> ang <Org> sa <Place> .          (with probability org_rate)
        <verb> ang <noun> sa <Place> .

    Person names are anchored by the particles si/ni; organisations share the
    unmarked ``ang`` slot with common nouns.
    """
    if not 0.0 <= particle_rate <= 1.0:
        raise DataError("particle_rate must lie in [0, 1]")
    lex = LEXICONS[lexicon] if isinstance(lexicon, str) else lexicon
    out: list[TaggedSentence] = []
    for _ in range(n_sentences):
        verb = lex.verbs[rng.integers(len(lex.verbs))]
        name = lex.names[rng.integers(len(lex.names))]
        place = lex.places[rng.integers(len(lex.places))]
        noun = lex.nouns[rng.integers(len(lex.nouns))]
        marked = rng.random() < particle_rate
        u = rng.random()
        words, tags = [verb], ["O"]
        if u < org_rate:
            kind = "org"
        elif u < org_rate + (1 - org_rate) * 0.45:
            kind = "per_loc"
        elif u < org_rate + (1 - org_rate) * 0.8:
            kind = "per_obj"
        else:
            kind = "loc"
        if kind in ("loc", "org"):
            if kind == "org":
                filler, filler_tags = _entity(lex.orgs[rng.integers(len(lex.orgs))], "ORG")
            else:
                filler, filler_tags = [noun], ["O"]
            w, t = _entity(place, "LOC")
            words += ["ang"] + filler + ["sa"] + w
            tags += ["O"] + filler_tags + ["O"] + t
        else:
            if marked:
                words.append("ni" if kind == "per_obj" else "si")
                tags.append("O")
            words.append(name)
            tags.append("B-PER")
            if kind == "per_obj":
                words += ["ang", noun]
                tags += ["O", "O"]
            else:
                w, t = _entity(place, "LOC")
                words += ["sa"] + w
                tags += ["O"] + t
        words.append(".")
        tags.append("O")
        out.append(TaggedSentence(tuple(words), tuple(tags)))
    return out


def pretraining_text(n_sentences: int, rng: np.random.Generator, particle_rate: float = 0.5) -> list[list[str]]:
    """Unlabeled template sentences for mixing into the synthetic LM corpus."""
    return [list(s.words) for s in gen_synthetic_ner(n_sentences, particle_rate, rng, lexicon="pretrain")]
