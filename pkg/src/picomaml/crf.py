"""Linear-chain CRF tagging head over IOB2 labels, plus span scoring."""
from __future__ import annotations

import math
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .data import TAGS
from .errors import ConfigError, DataError, LabelIndexError, ParseError, ShapeError
from .tensor import Tensor, apply_op


class TagScheme:
    def __init__(self, labels: Sequence[str] = TAGS):
        if labels[0] != "O":
            raise ConfigError("the first label must be 'O'")
        self.labels = tuple(labels)
        self.index = {t: i for i, t in enumerate(self.labels)}
        self.types = tuple(dict.fromkeys(t[2:] for t in self.labels if t != "O"))
        for t in self.labels[1:]:
            if t[:2] not in ("B-", "I-"):
                raise ConfigError(f"label {t!r} is not IOB2")

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, TagScheme) and self.labels == other.labels

    def encode(self, tags: Iterable[str]) -> np.ndarray:
        try:
            return np.array([self.index[t] for t in tags], dtype=np.int64)
        except KeyError as exc:
            raise ParseError(f"unknown tag {exc.args[0]!r}") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.labels[int(i)] for i in ids]

    def allowed_transitions(self) -> tuple[np.ndarray, np.ndarray]:
        """(K x K allowed[i, j] for j after i, K allowed at sentence start) under IOB2."""
        k = len(self.labels)
        allowed = np.ones((k, k), dtype=bool)
        start = np.ones(k, dtype=bool)
        for j, tj in enumerate(self.labels):
            if tj.startswith("I-"):
                start[j] = False
                for i, ti in enumerate(self.labels):
                    allowed[i, j] = ti[2:] == tj[2:] and ti != "O"
        return allowed, start


DEFAULT_SCHEME = TagScheme()


class CrfParams:
    """Emission projection (d x K), transitions (K x K, row = previous label), start and end scores."""

    def __init__(self, d_model: int, scheme: TagScheme = DEFAULT_SCHEME, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng()
        k = len(scheme)
        self.scheme = scheme
        limit = math.sqrt(6.0 / (d_model + k))
        self.emission = Tensor(rng.uniform(-limit, limit, size=(d_model, k)).astype(dtype), True, "emission", dtype)
        self.transitions = Tensor(np.zeros((k, k), dtype=dtype), True, "transitions", dtype)
        self.start = Tensor(np.zeros(k, dtype=dtype), True, "start", dtype)
        self.end = Tensor(np.zeros(k, dtype=dtype), True, "end", dtype)

    @property
    def n_labels(self) -> int:
        return len(self.scheme)

    def tensors(self) -> dict[str, Tensor]:
        return {"emission": self.emission, "transitions": self.transitions, "start": self.start, "end": self.end}

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors().items():
            if state[k].shape != t.shape:
                raise ShapeError(f"crf {k}: expected {t.shape}, got {state[k].shape}")
            t.data = state[k].astype(t.dtype)

    def emissions(self, features: Tensor) -> Tensor:
        return features @ self.emission


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return (np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m).squeeze(axis)


def _as_batch(emissions: np.ndarray, mask) -> tuple[np.ndarray, np.ndarray, bool]:
    e = np.asarray(emissions, dtype=np.float64)
    single = e.ndim == 2
    if single:
        e = e[None]
    if e.ndim != 3 or e.shape[1] == 0:
        raise ShapeError(f"emissions must be T x K or B x T x K with T >= 1, got {np.shape(emissions)}")
    if mask is None:
        m = np.ones(e.shape[:2], dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        m = m[None] if single else m
        if m.shape != e.shape[:2] or not np.all(m[:, 0]):
            raise ShapeError("mask must match emissions and mark at least the first position")
        if np.any(m[:, 1:] & ~m[:, :-1]):
            raise ShapeError("mask must be a prefix of each row")
    return e, m, single


def _forward_backward(e, m, trans, start, end):
    """Log-space alpha/beta tables (B, T, K) and log Z (B,), 64-bit."""
    b, t_len, _ = e.shape
    alpha = np.empty_like(e)
    alpha[:, 0] = start + e[:, 0]
    for t in range(1, t_len):
        rec = _lse(alpha[:, t - 1, :, None] + trans[None], axis=1) + e[:, t]
        alpha[:, t] = np.where(m[:, t, None], rec, alpha[:, t - 1])
    beta = np.empty_like(e)
    beta[:, t_len - 1] = end
    for t in range(t_len - 2, -1, -1):
        rec = _lse(trans[None] + (e[:, t + 1] + beta[:, t + 1])[:, None, :], axis=2)
        beta[:, t] = np.where(m[:, t + 1, None], rec, end)
    log_z = _lse(alpha[:, -1] + end, axis=-1)
    return alpha, beta, log_z


def _params64(crf: CrfParams):
    return (crf.transitions.data.astype(np.float64), crf.start.data.astype(np.float64),
            crf.end.data.astype(np.float64))


def log_partition(emissions, crf: CrfParams, mask=None):
    """Forward-algorithm log Z; a float for T x K input, an array for a batch."""
    e, m, single = _as_batch(emissions.data if isinstance(emissions, Tensor) else emissions, mask)
    _check_k(e, crf)
    _, _, log_z = _forward_backward(e, m, *_params64(crf))
    return float(log_z[0]) if single else log_z


def marginals(emissions, crf: CrfParams, mask=None) -> np.ndarray:
    """Posterior label marginals p(y_t = k | x); rows of masked-out positions are zero."""
    e, m, single = _as_batch(emissions.data if isinstance(emissions, Tensor) else emissions, mask)
    _check_k(e, crf)
    alpha, beta, log_z = _forward_backward(e, m, *_params64(crf))
    p = np.exp(alpha + beta - log_z[:, None, None]) * m[..., None]
    return p[0] if single else p


def _check_k(e: np.ndarray, crf: CrfParams) -> None:
    if e.shape[-1] != crf.n_labels:
        raise ShapeError(f"emissions have {e.shape[-1]} labels, crf has {crf.n_labels}")


def path_score(emissions, labels, crf: CrfParams) -> float:
    e = np.asarray(emissions.data if isinstance(emissions, Tensor) else emissions, dtype=np.float64)
    y = np.asarray(labels)
    trans, start, end = _params64(crf)
    return float(start[y[0]] + e[np.arange(len(y)), y].sum() + trans[y[:-1], y[1:]].sum() + end[y[-1]])


def crf_nll(emissions: Tensor, labels, crf: CrfParams, mask=None) -> Tensor:
    """Mean over sentences of log Z - gold path score; differentiable in emissions and crf scores.

    The gradient is computed in closed form from forward-backward marginals:
    d/d emissions = p(y_t) - onehot(gold), and similarly for transitions and
    start/end scores.
    """
    e, m, single = _as_batch(emissions.data, mask)
    _check_k(e, crf)
    y = np.asarray(labels, dtype=np.int64)
    y = y[None] if single else y
    k = crf.n_labels
    if y.shape != m.shape:
        raise ShapeError(f"labels shape {y.shape} does not match emissions {e.shape[:2]}")
    if np.any((y[m] < 0) | (y[m] >= k)):
        raise LabelIndexError(f"label index outside [0, {k})")
    y = np.where(m, y, 0)
    trans, start, end = _params64(crf)
    alpha, beta, log_z = _forward_backward(e, m, trans, start, end)
    b, t_len = m.shape
    rows = np.arange(b)
    lengths = m.sum(axis=1)
    last = y[rows, lengths - 1]
    gold = start[y[:, 0]] + end[last]
    gold = gold + np.sum(np.take_along_axis(e, y[..., None], axis=2)[..., 0] * m, axis=1)
    pair_mask = m[:, 1:]
    gold = gold + np.sum(trans[y[:, :-1], y[:, 1:]] * pair_mask, axis=1)
    nll = (log_z - gold).mean()
    out_dtype = emissions.dtype

    def bw(g):
        scale = g / b
        p = np.exp(alpha + beta - log_z[:, None, None]) * m[..., None]
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, y[..., None], 1.0, axis=2)
        onehot *= m[..., None]
        g_e = (p - onehot) * scale
        # pairwise marginals xi_t(i, j) for t >= 1
        xi = np.exp(alpha[:, :-1, :, None] + trans[None, None] + (e[:, 1:] + beta[:, 1:])[:, :, None, :]
                    - log_z[:, None, None, None]) * pair_mask[..., None, None]
        g_trans = xi.sum(axis=(0, 1))
        np.add.at(g_trans, (y[:, :-1][pair_mask], y[:, 1:][pair_mask]), -1.0)
        g_start = p[:, 0].sum(axis=0)
        np.add.at(g_start, y[:, 0], -1.0)
        g_end = p[rows, lengths - 1].sum(axis=0)
        np.add.at(g_end, last, -1.0)
        g_e = g_e[0] if single else g_e
        return (g_e.astype(out_dtype), (g_trans * scale).astype(out_dtype), (g_start * scale).astype(out_dtype),
                (g_end * scale).astype(out_dtype))

    return apply_op("crf_nll", (emissions, crf.transitions, crf.start, crf.end),
                    np.asarray(nll, dtype=out_dtype), bw)


def viterbi_decode(emissions, crf: CrfParams, constrained: bool = True) -> np.ndarray:
    """Highest-scoring label path for one T x K sentence.

    Ties resolve to the lowest label index at every backtrack step.  With
    ``constrained``, I-X may only follow B-X or I-X (and may not start a sentence).
    """
    e = np.asarray(emissions.data if isinstance(emissions, Tensor) else emissions, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] == 0:
        raise ShapeError(f"viterbi_decode needs a T x K matrix with T >= 1, got {e.shape}")
    _check_k(e, crf)
    trans, start, end = _params64(crf)
    if constrained:
        allowed, ok_start = crf.scheme.allowed_transitions()
        trans = np.where(allowed, trans, -np.inf)
        start = np.where(ok_start, start, -np.inf)
    t_len = e.shape[0]
    delta = start + e[0]
    back = np.zeros((t_len, e.shape[1]), dtype=np.int64)
    for t in range(1, t_len):
        cand = delta[:, None] + trans
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(e.shape[1])] + e[t]
    path = np.empty(t_len, dtype=np.int64)
    path[-1] = int(np.argmax(delta + end))
    for t in range(t_len - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


# ---------------------------------------------------------------------------
# spans and scores


class Span(NamedTuple):
    start: int
    end: int
    type: str


def spans_from_bio(tags: Sequence[str]) -> set[Span]:
    """Maximal B-X I-X* runs; an I-X that cannot continue the open span starts a new one."""
    spans: set[Span] = set()
    cur: list | None = None
    for i, tag in enumerate(tags):
        if tag == "O":
            kind, etype = "O", None
        elif len(tag) > 2 and tag[:2] in ("B-", "I-"):
            kind, etype = tag[0], tag[2:]
        else:
            raise ParseError(f"unknown tag {tag!r} at position {i}")
        if kind == "I" and cur is not None and cur[2] == etype:
            cur[1] = i
            continue
        if cur is not None:
            spans.add(Span(*cur))
            cur = None
        if kind != "O":
            cur = [i, i, etype]
    if cur is not None:
        spans.add(Span(*cur))
    return spans


def is_valid_iob2(tags: Sequence[str]) -> bool:
    prev = "O"
    for tag in tags:
        if tag.startswith("I-") and (prev == "O" or prev[2:] != tag[2:]):
            return False
        prev = tag
    return True


def token_units(tags: Sequence[str]) -> set[Span]:
    """Token-level scoring units: every non-O token is its own unit, typed by its full label."""
    return {Span(i, i, t) for i, t in enumerate(tags) if t != "O"}


def _prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def _check_aligned(pred, gold) -> None:
    if len(pred) != len(gold):
        raise DataError(f"{len(pred)} predicted sentences vs {len(gold)} gold sentences")


def micro_f1(pred: Sequence[set], gold: Sequence[set]) -> tuple[float, float, float]:
    _check_aligned(pred, gold)
    tp = sum(len(set(p) & set(g)) for p, g in zip(pred, gold))
    return _prf(tp, sum(len(p) for p in pred), sum(len(g) for g in gold))


def _type_of(span: Span) -> str:
    t = span.type
    return t[2:] if t[:2] in ("B-", "I-") else t


def per_type_scores(pred: Sequence[set], gold: Sequence[set], types: Sequence[str] = DEFAULT_SCHEME.types) -> dict:
    """type -> {"p", "r", "f1", "support", "undefined"}; undefined when a type has no gold and no predictions."""
    _check_aligned(pred, gold)
    out = {}
    for etype in types:
        ps = [{s for s in p if _type_of(s) == etype} for p in pred]
        gs = [{s for s in g if _type_of(s) == etype} for g in gold]
        n_pred, n_gold = sum(map(len, ps)), sum(map(len, gs))
        tp = sum(len(a & b) for a, b in zip(ps, gs))
        p, r, f = _prf(tp, n_pred, n_gold)
        out[etype] = {"p": p, "r": r, "f1": f, "support": n_gold, "undefined": n_pred == 0 and n_gold == 0}
    return out


def per_type_f1(pred: Sequence[set], gold: Sequence[set], types: Sequence[str] = DEFAULT_SCHEME.types) -> dict:
    return {t: v["f1"] for t, v in per_type_scores(pred, gold, types).items()}


def evaluation_report(pred_tags: Sequence[Sequence[str]], gold_tags: Sequence[Sequence[str]],
                      scoring: str = "span", types: Sequence[str] = DEFAULT_SCHEME.types) -> dict:
    _check_aligned(pred_tags, gold_tags)
    if scoring not in ("span", "token"):
        raise ConfigError(f"unknown scoring {scoring!r}")
    unit = spans_from_bio if scoring == "span" else token_units
    pred = [unit(p) for p in pred_tags]
    gold = [unit(g) for g in gold_tags]
    p, r, f = micro_f1(pred, gold)
    return {
        "micro": {"p": p, "r": r, "f1": f},
        "per_type": per_type_scores(pred, gold, types),
        "n_sentences": len(gold),
        "n_gold_spans": sum(map(len, gold)),
        "n_pred_spans": sum(map(len, pred)),
        "scoring": scoring,
    }
