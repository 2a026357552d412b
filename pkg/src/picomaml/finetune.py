"""CRF-head finetuning on NER data, zero-shot evaluation and checkpoint sweeps."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .crf import DEFAULT_SCHEME, CrfParams, crf_nll, evaluation_report, marginals, viterbi_decode
from .data import PAD, TaggedSentence, Vocab, read_conll
from .errors import ConfigError, CorruptCheckpointError, DataError, PicoError
from .model import DecoderParams, hidden_states
from .tensor import Tape, Tensor, backward, no_grad
from .trainer import AdamW, load_checkpoint, stream

log = logging.getLogger(__name__)

REGIMES = ("head_only", "full")
SWEEP_COLUMNS = ("step", "regime", "source", "eval_id", "micro_f1", "per_f1", "loc_f1", "org_f1",
                 "final_train_loss", "epochs", "status")


@dataclass
class FinetuneConfig:
    regime: str = "head_only"
    lr: float = 3e-5
    max_epochs: int = 10
    patience: int = 2
    batch_size: int = 16
    seed: int = 0
    weight_decay: float = 0.01
    source: str = "source"
    eval_ids: tuple[str, ...] = ()
    scoring: str = "span"
    constrained: bool = True

    def __post_init__(self):
        if self.regime == "head":
            self.regime = "head_only"
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if min(self.max_epochs, self.patience, self.batch_size) <= 0 or self.lr <= 0:
            raise ConfigError("max_epochs, patience, batch_size and lr must be positive")
        self.eval_ids = tuple(self.eval_ids)


@dataclass
class NerDataset:
    id: str
    train: list[TaggedSentence]
    dev: list[TaggedSentence] | None = None

    def splits(self) -> tuple[list[TaggedSentence], list[TaggedSentence]]:
        """(train, dev); without a dev file every tenth sentence (index % 10 == 9) is held out."""
        if self.dev is not None:
            return self.train, self.dev
        train = [s for i, s in enumerate(self.train) if i % 10 != 9]
        dev = [s for i, s in enumerate(self.train) if i % 10 == 9]
        return train, dev


def load_conll(path) -> list[TaggedSentence]:
    return read_conll(path)


def load_dataset(dataset_id: str, train_path, dev_path=None) -> NerDataset:
    return NerDataset(dataset_id, read_conll(train_path), read_conll(dev_path) if dev_path else None)


def concat_datasets(dataset_id: str, parts: Sequence[NerDataset]) -> NerDataset:
    """A mixture source: training sentences concatenated (reshuffled every epoch by the trainer)."""
    return NerDataset(dataset_id, [s for p in parts for s in p.splits()[0]], [s for p in parts for s in p.splits()[1]])


class DataAudit:
    """Log of which dataset ids reached training vs evaluation code paths."""

    def __init__(self):
        self._lock = threading.Lock()
        self.events: list[tuple[str, str]] = []

    def record(self, dataset_id: str, role: str) -> None:
        with self._lock:
            self.events.append((dataset_id, role))

    def trained_on(self) -> set[str]:
        return {d for d, r in self.events if r == "train"}

    def check_zero_shot(self, eval_ids: Sequence[str]) -> None:
        leaked = self.trained_on() & set(eval_ids)
        if leaked:
            raise ConfigError(f"evaluation datasets were used for training: {sorted(leaked)}")


class EarlyStopper:
    """Stop once ``patience`` consecutive epochs fail to beat the best dev score."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1
        self.since_best = 0

    def update(self, epoch: int, score: float) -> tuple[bool, bool]:
        """Returns (improved, stop)."""
        if score > self.best:
            self.best, self.best_epoch, self.since_best = score, epoch, 0
            return True, False
        self.since_best += 1
        return False, self.since_best >= self.patience


class Tagger:
    """Decoder backbone + CRF head over word-level tokens."""

    def __init__(self, params: DecoderParams, vocab: Vocab, crf: CrfParams, step: int | None = None,
                 checkpoint: str | None = None):
        if len(vocab) > params.config.vocab_size:
            raise ConfigError(f"vocabulary of {len(vocab)} exceeds the model's {params.config.vocab_size}")
        self.params = params
        self.vocab = vocab
        self.crf = crf
        self.step = step
        self.checkpoint = checkpoint

    def encode(self, words: Sequence[str]) -> np.ndarray:
        return self.vocab.encode(words)

    def batch_features(self, sentences: Sequence[Sequence[str]]) -> tuple[Tensor, np.ndarray]:
        """Hidden states (B, T, d) of padded sentences and the (B, T) validity mask.

        Sentences longer than the context window are cut into independent windows.
        """
        ids = [self.encode(s) for s in sentences]
        t_max = max(len(x) for x in ids)
        batch = np.full((len(ids), t_max), PAD, dtype=np.int64)
        mask = np.zeros((len(ids), t_max), dtype=bool)
        for i, x in enumerate(ids):
            batch[i, :len(x)] = x
            mask[i, :len(x)] = True
        window = self.params.config.max_seq_len
        if t_max <= window:
            return hidden_states(batch, self.params), mask
        parts = [hidden_states(batch[:, a:a + window], self.params) for a in range(0, t_max, window)]
        return T.concat(parts, axis=1), mask

    def emissions(self, words: Sequence[str]) -> np.ndarray:
        with no_grad():
            h, _ = self.batch_features([words])
            return self.crf.emissions(h).data[0]

    def marginals(self, words: Sequence[str]) -> np.ndarray:
        return marginals(self.emissions(words), self.crf)

    def predict(self, words: Sequence[str], constrained: bool = True) -> list[str]:
        return self.crf.scheme.decode(viterbi_decode(self.emissions(words), self.crf, constrained))

    def predict_many(self, sentences: Sequence[Sequence[str]], constrained: bool = True,
                     batch_size: int = 64) -> list[list[str]]:
        out = []
        for a in range(0, len(sentences), batch_size):
            chunk = sentences[a:a + batch_size]
            with no_grad():
                h, mask = self.batch_features(chunk)
                em = self.crf.emissions(h).data
            for e, m in zip(em, mask):
                out.append(self.crf.scheme.decode(viterbi_decode(e[m], self.crf, constrained)))
        return out

    def save_head(self, path, extra: dict | None = None) -> None:
        meta = {"step": self.step, "checkpoint": self.checkpoint, "labels": list(self.crf.scheme.labels),
                **(extra or {})}
        arrays = {f"crf.{k}": v for k, v in self.crf.state().items()}
        if extra and extra.get("regime") == "full":
            arrays.update({f"model.{k}": v for k, v in self.params.state().items()})
        tmp = Path(str(path) + ".tmp.npz")
        np.savez(tmp, meta=np.array(json.dumps(meta)), **arrays)
        os.replace(tmp, path)


def tagger_from_checkpoint(checkpoint, vocab: Vocab | None = None, rng: np.random.Generator | None = None,
                           dtype=np.float32) -> Tagger:
    """Backbone from a checkpoint directory with a freshly initialized CRF head."""
    ck = load_checkpoint(checkpoint)
    if vocab is None:
        vocab_path = Path(checkpoint) / "vocab.json"
        if not vocab_path.exists():
            raise DataError(f"{checkpoint}: no vocab.json; pass the vocabulary explicitly")
        vocab = Vocab.load(vocab_path)
    params = DecoderParams.from_state(ck.model_config, {k: v.astype(dtype) for k, v in ck.params.items()},
                                      requires_grad=False)
    crf = CrfParams(ck.model_config.d_model, DEFAULT_SCHEME, rng, dtype=dtype)
    return Tagger(params, vocab, crf, ck.step, str(checkpoint))


def load_tagger(tuned_path, checkpoints_dir=None) -> Tagger:
    """Rebuild a tuned tagger from a saved head file (+ its backbone checkpoint)."""
    with np.load(tuned_path) as z:
        meta = json.loads(str(z["meta"]))
        arrays = {k: z[k] for k in z.files if k != "meta"}
    ck = meta["checkpoint"]
    if checkpoints_dir is not None:
        ck = Path(checkpoints_dir) / Path(ck).name
    tagger = tagger_from_checkpoint(ck)
    tagger.crf.load_state({k[4:]: v for k, v in arrays.items() if k.startswith("crf.")})
    model = {k[6:]: v for k, v in arrays.items() if k.startswith("model.")}
    for k, v in model.items():
        tagger.params[k].data = v
    return tagger


@dataclass
class EvalReport:
    datasets: dict[str, dict]
    final_train_loss: float | None = None
    epochs: int = 0
    best_epoch: int | None = None
    metadata: dict = field(default_factory=dict)
    dev_history: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def _fingerprint(params: DecoderParams) -> str:
    h = hashlib.sha256()
    for k, v in params.items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v.data).tobytes())
    return h.hexdigest()


def evaluate_model(tagger: Tagger, datasets: dict[str, Sequence[TaggedSentence]], scoring: str = "span",
                   constrained: bool = True, audit: DataAudit | None = None) -> EvalReport:
    """Decode (constrained Viterbi) and score every dataset; never touches weights."""
    reports = {}
    for ds_id, sents in datasets.items():
        if audit is not None:
            audit.record(ds_id, "eval")
        pred = tagger.predict_many([s.words for s in sents], constrained)
        reports[ds_id] = evaluation_report(pred, [s.tags for s in sents], scoring)
    return EvalReport(reports, metadata={"checkpoint": tagger.checkpoint, "step": tagger.step})


def _pad_features(feats: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    t_max = max(len(f) for f in feats)
    out = np.zeros((len(feats), t_max, feats[0].shape[1]), dtype=feats[0].dtype)
    mask = np.zeros((len(feats), t_max), dtype=bool)
    for i, f in enumerate(feats):
        out[i, :len(f)] = f
        mask[i, :len(f)] = True
    return out, mask


def _pad_labels(labels: list[np.ndarray], t_max: int) -> np.ndarray:
    out = np.zeros((len(labels), t_max), dtype=np.int64)
    for i, y in enumerate(labels):
        out[i, :len(y)] = y
    return out


def finetune_run(tagger: Tagger, dataset: NerDataset, config: FinetuneConfig,
                 eval_sets: dict[str, Sequence[TaggedSentence]] | None = None, audit: DataAudit | None = None,
                 dev_score_fn: Callable[[int, Tagger], float] | None = None) -> tuple[Tagger, EvalReport]:
    """Train the CRF head (and the backbone under ``full``) with dev-F1 early stopping.

    The best-dev weights are restored before returning.  ``dev_score_fn``
    replaces dev scoring (used to test the stopping rule).
    """
    train, dev = dataset.splits()
    if not train:
        raise DataError(f"dataset {dataset.id!r} has an empty train split")
    if audit is not None:
        audit.record(dataset.id, "train")
        audit.check_zero_shot(list(eval_sets or {}))
    scheme = tagger.crf.scheme
    head_only = config.regime == "head_only"
    labels = [scheme.encode(s.tags) for s in train]
    backbone_ids = {id(t) for _, t in tagger.params.items()}
    before = _fingerprint(tagger.params) if head_only else None

    named = {f"crf.{k}": v for k, v in tagger.crf.tensors().items()}
    if head_only:
        tagger.params.set_requires_grad(False)
        feats = []
        with no_grad():
            for a in range(0, len(train), 64):
                h, mask = tagger.batch_features([s.words for s in train[a:a + 64]])
                feats += [x[m] for x, m in zip(h.data, mask)]
    else:
        tagger.params.set_requires_grad(True)
        named.update({f"model.{k}": v for k, v in tagger.params.items()})
    opt = AdamW(named, weight_decay=config.weight_decay)

    stopper = EarlyStopper(config.patience)
    best_state: dict[str, np.ndarray] | None = None
    history: list[float] = []
    epoch_loss = float("nan")
    epochs = 0
    for epoch in range(config.max_epochs):
        order = stream(config.seed, epoch).permutation(len(train))
        losses = []
        for a in range(0, len(order), config.batch_size):
            idx = order[a:a + config.batch_size]
            with Tape() as tape:
                if head_only:
                    x, mask = _pad_features([feats[i] for i in idx])
                    h = Tensor(x, dtype=x.dtype)
                else:
                    h, mask = tagger.batch_features([train[i].words for i in idx])
                y = _pad_labels([labels[i] for i in idx], mask.shape[1])
                loss = crf_nll(tagger.crf.emissions(h), y, tagger.crf, mask)
            if head_only and tape.input_ids() & backbone_ids:
                raise PicoError("backbone tensor reached the head-only training graph")
            backward(loss, tape)
            opt.step(config.lr)
            opt.zero_grad()
            losses.append(float(loss.data))
        epochs = epoch + 1
        epoch_loss = float(np.mean(losses))
        if dev_score_fn is not None:
            score = dev_score_fn(epoch, tagger)
        else:
            pred = tagger.predict_many([s.words for s in dev], config.constrained) if dev else []
            score = evaluation_report(pred, [s.tags for s in dev], config.scoring)["micro"]["f1"] if dev else 0.0
        history.append(score)
        improved, stop = stopper.update(epoch, score)
        if improved:
            best_state = {k: v.data.copy() for k, v in named.items()}
        log.info("epoch %d loss=%.4f dev_f1=%.4f", epochs, epoch_loss, score)
        if stop:
            break
    if best_state is not None:
        for k, v in best_state.items():
            named[k].data = v
    tagger.params.set_requires_grad(False)
    if head_only and _fingerprint(tagger.params) != before:
        raise PicoError("head-only finetuning modified the backbone")

    report = evaluate_model(tagger, eval_sets or {}, config.scoring, config.constrained, audit)
    report.final_train_loss = epoch_loss
    report.epochs = epochs
    report.best_epoch = stopper.best_epoch + 1 if stopper.best_epoch >= 0 else None
    report.dev_history = history
    report.metadata.update({"regime": config.regime, "seed": config.seed, "source": dataset.id,
                            "scoring": config.scoring})
    return tagger, report


# ---------------------------------------------------------------------------
# sweeps


def _step_of(path: Path) -> int:
    try:
        return int(path.name.split("_")[-1])
    except ValueError:
        raise DataError(f"{path}: checkpoint directories must be named step_<N>") from None


def read_sweep_table(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sweep_checkpoints(checkpoint_dir, dataset: NerDataset, config: FinetuneConfig,
                      eval_sets: dict[str, Sequence[TaggedSentence]], table_path, tuned_dir=None,
                      workers: int | None = None, vocab: Vocab | None = None) -> list[dict]:
    """Finetune + evaluate every ``step_*`` checkpoint; rows are appended as cells finish.

    Steps that already have rows in ``table_path`` are skipped, so an
    interrupted sweep resumes where it stopped.  A corrupt checkpoint yields
    rows with status ``failed``.
    """
    ck_dirs = sorted((p for p in Path(checkpoint_dir).glob("step_*") if p.is_dir()), key=_step_of)
    if not ck_dirs:
        raise DataError(f"{checkpoint_dir}: no step_* checkpoints")
    table_path = Path(table_path)
    done = {int(r["step"]) for r in read_sweep_table(table_path)}
    todo = [p for p in ck_dirs if _step_of(p) not in done]
    if tuned_dir is not None:
        Path(tuned_dir).mkdir(parents=True, exist_ok=True)
    lock = threading.Lock()
    if not table_path.exists():
        table_path.parent.mkdir(parents=True, exist_ok=True)
        with open(table_path, "w", newline="") as fh:
            csv.writer(fh).writerow(SWEEP_COLUMNS)
    audit = DataAudit()

    def cell(path: Path) -> list[dict]:
        step = _step_of(path)
        base = {"step": step, "regime": config.regime, "source": dataset.id}
        try:
            tagger = tagger_from_checkpoint(path, vocab, stream(config.seed, step, 1))
            tagger, report = finetune_run(tagger, dataset, config, eval_sets, audit)
        except (CorruptCheckpointError, DataError) as exc:
            log.warning("step %d: %s", step, exc)
            rows = [{**base, "eval_id": e, "status": "failed"} for e in eval_sets]
        else:
            if tuned_dir is not None:
                tagger.save_head(Path(tuned_dir) / f"step_{step:06d}.npz", {"regime": config.regime})
            rows = []
            for e, rep in report.datasets.items():
                pt = rep["per_type"]
                rows.append({**base, "eval_id": e, "micro_f1": rep["micro"]["f1"], "per_f1": pt["PER"]["f1"],
                             "loc_f1": pt["LOC"]["f1"], "org_f1": pt["ORG"]["f1"],
                             "final_train_loss": report.final_train_loss, "epochs": report.epochs,
                             "status": "ok"})
        with lock, open(table_path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
            for r in rows:
                writer.writerow({k: r.get(k, "") for k in SWEEP_COLUMNS})
        return rows

    workers = workers or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(cell, todo))
    audit.check_zero_shot(list(eval_sets))
    rows = read_sweep_table(table_path)
    return sorted(rows, key=lambda r: (int(r["step"]), r["eval_id"]))
