"""Convergence descriptors, spectral statistics and linguistic diagnostics."""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .crf import TagScheme, spans_from_bio
from .data import TaggedSentence, Vocab
from .errors import ConfigError, DataError

DEFAULT_PARTICLES = frozenset({"si", "ni"})


# ---------------------------------------------------------------------------
# loss curves


def as_curve(curve) -> tuple[np.ndarray, np.ndarray]:
    """Accept (step, value) pairs or a (steps, values) pair of arrays; validate ordering."""
    if isinstance(curve, tuple) and len(curve) == 2 and np.ndim(curve[0]) == 1 and np.ndim(curve[1]) == 1:
        steps, values = np.asarray(curve[0], dtype=np.float64), np.asarray(curve[1], dtype=np.float64)
    else:
        pts = np.asarray(list(curve), dtype=np.float64)
        if pts.size == 0:
            raise DataError("empty loss curve")
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise DataError("a loss curve is a sequence of (step, value) pairs")
        steps, values = pts[:, 0], pts[:, 1]
    if steps.size == 0:
        raise DataError("empty loss curve")
    if steps.shape != values.shape:
        raise DataError("steps and values differ in length")
    if np.any(np.diff(steps) <= 0):
        raise DataError("curve steps must be strictly increasing")
    if not np.all(np.isfinite(values)):
        raise DataError("curve values must be finite")
    return steps, values


def _need(steps: np.ndarray, n: int, what: str) -> None:
    if len(steps) < n:
        raise DataError(f"{what} needs at least {n} points, got {len(steps)}")


def t90(curve) -> float:
    """First logged step whose value is within 10% of the total descent of the final value."""
    steps, values = as_curve(curve)
    _need(steps, 2, "t90")
    first, last = values[0], values[-1]
    if first == last:
        return _num(steps[0])
    threshold = last + 0.10 * (first - last)
    if first > last:
        hit = np.flatnonzero(values <= threshold)
    else:  # a rising curve: reaching 90% of the rise
        hit = np.flatnonzero(values >= threshold)
    return _num(steps[hit[0]])


def _num(x: float):
    return int(x) if float(x).is_integer() else float(x)


def normalized_auc(curve) -> float:
    """Trapezoid area of the min-max normalized curve over a [0, 1] step axis; 0.0 for a flat curve."""
    steps, values = as_curve(curve)
    _need(steps, 2, "normalized_auc")
    lo, hi = values.min(), values.max()
    if hi == lo:
        return 0.0
    x = (steps - steps[0]) / (steps[-1] - steps[0])
    y = (values - lo) / (hi - lo)
    return float(np.trapezoid(y, x) if hasattr(np, "trapezoid") else np.trapz(y, x))


def is_degenerate(curve) -> bool:
    _, values = as_curve(curve)
    return bool(values.min() == values.max())


def initial_slope(curve, k: int = 5) -> float:
    """Least-squares slope (loss per step) over the first ``k`` logged points."""
    steps, values = as_curve(curve)
    _need(steps, 2, "initial_slope")
    x, y = steps[:k], values[:k]
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


CURVE_KEYS = ("heldout_loss", "train_loss", "loss", "value")


def read_curve(path, key: str | None = None) -> list[tuple[float, float]]:
    """(step, value) pairs from a metrics.jsonl file.

    Without ``key`` the first of CURVE_KEYS present in the file is used;
    held-out loss comes first because train loss mixes the AR and episode branches.
    """
    records = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{n}: bad JSON ({exc.msg})") from None
    if key is None:
        key = next((k for k in CURVE_KEYS if any(r.get(k) is not None for r in records)), CURVE_KEYS[0])
    pts = [(float(r["step"]), float(r[key])) for r in records if r.get(key) is not None]
    if not pts:
        raise DataError(f"{path}: no {key!r} values")
    return pts


def macro_mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


# ---------------------------------------------------------------------------
# spectra


def effective_rank_proportional(matrix) -> float | None:
    """exp(entropy of normalized singular values) / min(rows, cols); None for an all-zero matrix."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise DataError(f"expected a non-empty matrix, got shape {a.shape}")
    s = np.linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return None
    s = s[s >= 1e-12 * s[0]]
    p = s / s.sum()
    er = float(np.exp(-np.sum(p * np.log(p))))
    return er / min(a.shape)


# ---------------------------------------------------------------------------
# dataset diagnostics


def particle_recall(dataset: Sequence[TaggedSentence], particles: Iterable[str] = DEFAULT_PARTICLES) -> float | None:
    """Share of gold PER spans whose preceding word (lowercased) is a case particle; None without PER spans."""
    particles = {p.lower() for p in particles}
    hits = total = 0
    for sent in dataset:
        for span in spans_from_bio(sent.tags):
            if span.type != "PER":
                continue
            total += 1
            if span.start > 0 and sent.words[span.start - 1].lower() in particles:
                hits += 1
    return hits / total if total else None


def oov_rate(dataset: Sequence[TaggedSentence], vocab: Vocab) -> float:
    """Fraction of word tokens missing from the vocabulary (reserved symbols do not count as words)."""
    words = [w for s in dataset for w in s.words]
    if not words:
        raise DataError("empty dataset")
    return sum(w not in vocab for w in words) / len(words)


def span_statistics(dataset: Sequence[TaggedSentence]) -> dict:
    counts: Counter = Counter()
    lengths: dict[str, list[int]] = {}
    for sent in dataset:
        for span in spans_from_bio(sent.tags):
            counts[span.type] += 1
            lengths.setdefault(span.type, []).append(span.end - span.start + 1)
    return {t: {"count": counts[t], "mean_length": float(np.mean(lengths[t]))} for t in sorted(counts)}


def top_words(dataset: Sequence[TaggedSentence], top_n: int = 10) -> dict[str, list[str]]:
    """Most frequent surface words, split into words ever inside a gold span vs never (ties: alphabetical)."""
    freq: Counter = Counter()
    in_entity: set[str] = set()
    for sent in dataset:
        freq.update(sent.words)
        for span in spans_from_bio(sent.tags):
            in_entity.update(sent.words[span.start:span.end + 1])
    order = sorted(freq, key=lambda w: (-freq[w], w))
    return {"entity": [w for w in order if w in in_entity][:top_n],
            "non_entity": [w for w in order if w not in in_entity][:top_n]}


# ---------------------------------------------------------------------------
# token confidence and surprisal deltas


@dataclass
class ConfidenceSeries:
    word: str
    split: str
    steps: list[int] = field(default_factory=list)
    confidence: list[float] = field(default_factory=list)


def word_confidence(marginal_seq: Sequence[np.ndarray], dataset: Sequence[TaggedSentence], words: Iterable[str],
                    scheme: TagScheme) -> dict[str, float]:
    """Mean marginal probability of the gold tag over each word's occurrences."""
    wanted = set(words)
    sums: dict[str, list[float]] = {w: [] for w in wanted}
    for probs, sent in zip(marginal_seq, dataset):
        gold = scheme.encode(sent.tags)
        for i, w in enumerate(sent.words):
            if w in wanted:
                sums[w].append(float(probs[i, gold[i]]))
    return {w: float(np.mean(v)) for w, v in sums.items() if v}


def token_confidence_series(sweep_dir, dataset: Sequence[TaggedSentence], top_n: int = 10,
                            checkpoints_dir=None) -> list[ConfidenceSeries]:
    """Per-checkpoint gold-tag confidence for the top-n entity and non-entity words.

    ``sweep_dir`` holds tuned heads (``tuned/step_XXXXXX.npz``) written by a
    sweep; backbones come from ``checkpoints_dir`` (default: the directory
    recorded in each tuned file).
    """
    from .finetune import load_tagger  # local import: finetune depends on the trainer

    tuned = sorted(Path(sweep_dir).glob("tuned/step_*.npz"))
    if not tuned:
        raise DataError(f"{sweep_dir}: no tuned heads found")
    picks = top_words(dataset, top_n)
    series = {(w, split): ConfidenceSeries(w, split) for split, ws in picks.items() for w in ws}
    for path in tuned:
        tagger = load_tagger(path, checkpoints_dir)
        probs = [tagger.marginals(s.words) for s in dataset]
        for split, ws in picks.items():
            conf = word_confidence(probs, dataset, ws, tagger.crf.scheme)
            for w in ws:
                s = series[(w, split)]
                s.steps.append(tagger.step)
                s.confidence.append(conf[w])
    return list(series.values())


def confidence_rows(series: Sequence[ConfidenceSeries]) -> list[dict]:
    return [{"word": s.word, "checkpoint_step": step, "split": s.split, "confidence": c}
            for s in series for step, c in zip(s.steps, s.confidence)]


def delta_logprob(tagger_a, tagger_b, sentence: TaggedSentence) -> np.ndarray:
    """Per-token surprisal of the gold tag under ``tagger_b`` minus under ``tagger_a``.

    Negative values mean the second model is more confident in the gold tag.
    """
    if tagger_a.crf.scheme != tagger_b.crf.scheme:
        raise ConfigError("taggers use different tag schemes")
    gold = tagger_a.crf.scheme.encode(sentence.tags)
    idx = np.arange(len(gold))
    pa = tagger_a.marginals(sentence.words)[idx, gold]
    pb = tagger_b.marginals(sentence.words)[idx, gold]
    with np.errstate(divide="ignore"):
        return -np.log(pb) + np.log(pa)


# ---------------------------------------------------------------------------
# export


def export_report(records: Sequence[dict], path, fmt: str | None = None, columns: Sequence[str] | None = None) -> Path:
    """Write records as CSV or JSONL; CSV columns follow first-seen key order unless given."""
    if not records:
        raise DataError("nothing to export")
    path = Path(path)
    fmt = fmt or ("jsonl" if path.suffix == ".jsonl" else "csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "jsonl":
        with open(path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    elif fmt == "csv":
        if columns is None:
            columns = list(dict.fromkeys(k for rec in records for k in rec))
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(columns))
            writer.writeheader()
            for rec in records:
                writer.writerow({k: "" if rec.get(k) is None else rec.get(k) for k in columns})
    else:
        raise ConfigError(f"unknown export format {fmt!r}")
    return path


def long_format(step: int, dataset: str, metrics: dict) -> list[dict]:
    """One row per (checkpoint, dataset, metric)."""
    return [{"step": step, "dataset": dataset, "metric": k, "value": v} for k, v in metrics.items()]
