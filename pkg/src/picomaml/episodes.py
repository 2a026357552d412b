"""Subset-masked LM task (SMLMT) episodes sampled from a pretokenized corpus."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MASK, RESERVED, PretokenizedCorpus, Vocab
from .errors import EpisodeError, SamplingError


@dataclass
class Episode:
    n_ways: int
    k_shots: int
    q_queries: int
    class_words: np.ndarray         # (N,) token ids
    support_tokens: np.ndarray      # (N*K, L) masked inputs
    support_labels: np.ndarray      # (N*K,)
    support_positions: np.ndarray   # (N*K,) first masked position
    support_rows: np.ndarray        # (N*K,) corpus row of each example
    query_tokens: np.ndarray
    query_labels: np.ndarray
    query_positions: np.ndarray
    query_rows: np.ndarray
    support_masks: list[np.ndarray]
    query_masks: list[np.ndarray]

    def validate(self, originals: np.ndarray | None = None) -> None:
        """Raise EpisodeError unless every episode invariant holds.

        ``originals`` (the corpus input windows) enables the check that each
        masked position held the example's class word.
        """
        n, k, q = self.n_ways, self.k_shots, self.q_queries
        words = self.class_words
        if len(set(words.tolist())) != n or np.any(words < len(RESERVED)):
            raise EpisodeError("class words must be distinct non-reserved ids")
        for labels, per in ((self.support_labels, k), (self.query_labels, q)):
            if labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
                raise EpisodeError("label outside [0, n_ways)")
            if not np.array_equal(np.bincount(labels, minlength=n), np.full(n, per)):
                raise EpisodeError("unbalanced labels")
        if set(self.support_rows.tolist()) & set(self.query_rows.tolist()):
            raise EpisodeError("a corpus sequence appears in both support and query")
        if originals is None:
            return
        for toks, labels, rows, masks in (
            (self.support_tokens, self.support_labels, self.support_rows, self.support_masks),
            (self.query_tokens, self.query_labels, self.query_rows, self.query_masks),
        ):
            for x, y, r, m in zip(toks, labels, rows, masks):
                orig = originals[r]
                if not np.all(orig[m] == words[y]) or not np.all(x[m] == MASK):
                    raise EpisodeError("masked position did not hold the class word")
                keep = np.ones(len(x), dtype=bool)
                keep[m] = False
                if not np.array_equal(x[keep], orig[keep]) or np.any(orig[keep] == words[y]):
                    raise EpisodeError("masking touched other positions or missed an occurrence")


def mask_sentence(seq, target_word: int) -> tuple[np.ndarray, np.ndarray]:
    """Replace every occurrence of ``target_word`` by <mask>; return (masked, positions)."""
    seq = np.asarray(seq)
    positions = np.flatnonzero(seq == target_word)
    if positions.size == 0:
        raise SamplingError(f"word {target_word} does not occur in the sequence")
    out = seq.copy()
    out[positions] = MASK
    return out, positions


def eligible_words(corpus: PretokenizedCorpus, min_sequences: int, max_fraction: float = 0.2) -> np.ndarray:
    """Non-reserved ids found in >= min_sequences sequences and < max_fraction of all sequences."""
    n = len(corpus)
    out = [w for w, rows in corpus.word_index.items()
           if w >= len(RESERVED) and len(rows) >= min_sequences and len(rows) < max_fraction * n]
    return np.array(sorted(out), dtype=np.int64)


def sample_episode(corpus: PretokenizedCorpus, vocab: Vocab | None, n_ways: int = 32, k_shots: int = 4,
                   q_queries: int = 2, rng: np.random.Generator | None = None,
                   max_fraction: float = 0.2) -> Episode:
    """Draw an N-way, K-shot episode with Q queries per class.

    Class words are visited in a uniformly random order; a word is accepted when
    it still has K+Q unused sequences, so no sequence is reused within an
    episode.  Inputs are the model windows ``sequences[:, :-1]``.
    """
    if rng is None:
        rng = np.random.default_rng()
    if min(n_ways, k_shots, q_queries) <= 0:
        raise EpisodeError("n_ways, k_shots and q_queries must be positive")
    need = k_shots + q_queries
    words = eligible_words(corpus, need, max_fraction)
    if vocab is not None:
        words = words[words < len(vocab)]
    if len(words) < n_ways:
        raise EpisodeError(f"only {len(words)} eligible words for a {n_ways}-way episode "
                           f"(deficit {n_ways - len(words)})")
    inputs = corpus.sequences[:, :-1]
    used: set[int] = set()
    chosen: list[int] = []
    picks: list[np.ndarray] = []
    for w in rng.permutation(words):
        rows = corpus.word_index[int(w)]
        free = rows[~np.isin(rows, list(used))] if used else rows
        if len(free) < need:
            continue
        sel = rng.choice(free, size=need, replace=False)
        used.update(int(r) for r in sel)
        chosen.append(int(w))
        picks.append(sel)
        if len(chosen) == n_ways:
            break
    if len(chosen) < n_ways:
        raise EpisodeError(f"could not find {n_ways} words with {need} disjoint sequences "
                           f"(deficit {n_ways - len(chosen)})")

    def build(part: slice):
        toks, labels, pos, rows, masks = [], [], [], [], []
        for label, (w, sel) in enumerate(zip(chosen, picks)):
            for r in sel[part]:
                masked, where = mask_sentence(inputs[r], w)
                toks.append(masked)
                labels.append(label)
                pos.append(where[0])
                rows.append(r)
                masks.append(where)
        return (np.stack(toks), np.array(labels, dtype=np.int64), np.array(pos, dtype=np.int64),
                np.array(rows, dtype=np.int64), masks)

    s_tok, s_lab, s_pos, s_rows, s_masks = build(slice(0, k_shots))
    q_tok, q_lab, q_pos, q_rows, q_masks = build(slice(k_shots, need))
    return Episode(n_ways, k_shots, q_queries, np.array(chosen, dtype=np.int64),
                   s_tok, s_lab, s_pos, s_rows, q_tok, q_lab, q_pos, q_rows, s_masks, q_masks)
