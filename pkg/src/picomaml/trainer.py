"""Hybrid autoregressive / first-order MAML pretraining.

Every outer step draws one Bernoulli(rho) branch on rank 0 and broadcasts it.
The AR branch accumulates ``accum_steps`` next-token micro-batches; the MAML
branch accumulates ``accum_steps`` SMLMT episodes.  Randomness is derived from
``(seed, purpose, step, micro)`` counters, so a run is reproducible from its
seed, resumable from any checkpoint, and independent of the number of ranks.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import tensor as T
from .analysis import effective_rank_proportional
from .collectives import Communicator, RankGroup
from .data import PretokenizedCorpus, Vocab, sample_lm_batch
from .episodes import Episode, sample_episode
from .errors import ConfigError, CorruptCheckpointError, EpisodeError, TrainingError
from .model import DecoderParams, ModelConfig, hidden_states, init_params, next_token_loss
from .tensor import Tape, Tensor, backward, no_grad

log = logging.getLogger(__name__)

# purpose keys for counter-based random streams
_INIT, _HEAD_INIT, _BRANCH, _AR, _EPISODE, _DROPOUT = range(6)


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *map(int, keys)])


@dataclass
class TrainConfig:
    peak_lr: float = 3e-4
    warmup_steps: int = 2500
    total_steps: int = 6000
    accum_steps: int = 8
    micro_batch: int = 256
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    schedule: str = "cosine"
    checkpoint_every: int = 100
    log_every: int = 100
    eval_batch: int = 16
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.warmup_steps >= self.total_steps:
            raise ConfigError("warmup_steps must be < total_steps")
        for name in ("total_steps", "accum_steps", "micro_batch", "checkpoint_every", "log_every", "eval_batch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.warmup_steps < 0 or self.peak_lr < 0:
            raise ConfigError("warmup_steps and peak_lr must be non-negative")
        if self.schedule not in ("cosine", "linear"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")


@dataclass
class MetaConfig:
    enabled: bool = True
    rho: float = 0.5
    n_ways: int = 32
    k_shots: int = 4
    q_queries: int = 2
    inner_steps: int = 10
    inner_lr: float = 1e-3
    head_layers: int = 4
    head_hidden: int = 128
    head_dropout: float = 0.1
    head_outer_grad: bool = True
    max_word_fraction: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        if min(self.n_ways, self.k_shots, self.q_queries, self.head_layers, self.head_hidden) <= 0:
            raise ConfigError("episode sizes and head dims must be positive")
        if self.inner_steps < 0 or not 0.0 <= self.head_dropout < 1.0:
            raise ConfigError("inner_steps must be >= 0 and head_dropout in [0, 1)")


def desk_train_config(**overrides) -> TrainConfig:
    base = dict(peak_lr=3e-3, warmup_steps=50, total_steps=500, accum_steps=2, micro_batch=8, log_every=10)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``peak_lr`` then cosine (or linear) decay to 0 at ``total_steps``."""
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    frac = min(1.0, (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps))
    if cfg.schedule == "linear":
        return cfg.peak_lr * (1.0 - frac)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def checkpoint_steps(total_steps: int, every: int) -> list[int]:
    return list(range(0, total_steps + 1, every))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One decoupled-weight-decay Adam update, in place, for the tensors present in ``grads``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        data = p.data * (1.0 - lr * weight_decay)
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    """AdamW over a name -> Tensor mapping, with micro-batch accumulation.

    ``tick`` counts micro-batches and steps every ``accum_steps``; tensors whose
    grad is None at step time are skipped entirely.  ``pre_step`` (if set) runs
    right before each update, e.g. to all-reduce gradients.
    """

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState({k: np.zeros_like(p.data) for k, p in params.items()},
                                    {k: np.zeros_like(p.data) for k, p in params.items()})
        self.pre_step: Callable[[], None] | None = None
        self._micro = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        if self.pre_step is not None:
            self.pre_step()
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, self.state, lr, self.betas, self.eps, self.weight_decay)

    def tick(self, lr: float, accum_steps: int = 1) -> bool:
        self._micro += 1
        if self._micro % accum_steps:
            return False
        self._micro = 0
        self.step(lr)
        self.zero_grad()
        return True


# ---------------------------------------------------------------------------
# episode head


class EpisodeHead:
    """MLP classifier over backbone features: ``layers`` linear maps, ReLU + dropout between."""

    def __init__(self, d_in: int, n_ways: int, hidden: int = 128, layers: int = 4, dropout: float = 0.1,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng()
        self.dropout = dropout
        dims = [d_in] + [hidden] * (layers - 1) + [n_ways]
        self.dims = dims
        self.params: dict[str, Tensor] = {}
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            limit = math.sqrt(6.0 / (a + b))
            self.params[f"fc{i}.weight"] = Tensor(rng.uniform(-limit, limit, size=(a, b)).astype(dtype),
                                                  requires_grad=True, name=f"fc{i}.weight", dtype=dtype)
            self.params[f"fc{i}.bias"] = Tensor(np.zeros(b, dtype=dtype), requires_grad=True,
                                                name=f"fc{i}.bias", dtype=dtype)

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def dropout_masks(self, rng: np.random.Generator, batch: int) -> list[np.ndarray]:
        if self.dropout <= 0:
            return []
        keep = 1.0 - self.dropout
        dtype = self.params["fc0.weight"].dtype
        return [((rng.random((batch, h)) < keep) / keep).astype(dtype) for h in self.dims[1:-1]]

    def forward(self, feats: Tensor, weights: dict[str, Tensor] | None = None,
                masks: list[np.ndarray] | None = None) -> Tensor:
        w = self.params if weights is None else weights
        x = feats
        for i in range(self.n_layers):
            x = x @ w[f"fc{i}.weight"] + w[f"fc{i}.bias"]
            if i < self.n_layers - 1:
                x = T.relu(x)
                if masks:
                    x = x * Tensor(masks[i], dtype=x.dtype)
        return x

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].data = v.copy()

    def weight_stats(self) -> tuple[float, float]:
        flat = np.concatenate([v.data.reshape(-1).astype(np.float64)
                               for k, v in self.params.items() if k.endswith("weight")])
        return float(flat.mean()), float(flat.std())


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


@dataclass
class EpisodeResult:
    query_loss: float
    support_acc: float
    query_acc: float
    support_acc_before: float
    inner_tapes: list[Tape] = field(default_factory=list, repr=False)
    outer_tape: Tape | None = field(default=None, repr=False)


def _take_positions(h: Tensor, positions: np.ndarray) -> Tensor:
    return T.index(h, (np.arange(len(positions)), positions))


def maml_episode_update(episode: Episode, params: DecoderParams, head: EpisodeHead, inner_steps: int = 10,
                        inner_lr: float = 1e-3, *, loss_scale: float = 1.0,
                        dropout_rng: np.random.Generator | None = None, comm: Communicator | None = None,
                        outer_head_grad: bool = True, keep_tapes: bool = False) -> EpisodeResult:
    """First-order MAML on one episode; accumulates query-loss gradients.

    1. snapshot the head, 2. run ``inner_steps`` SGD steps of the head alone on
    detached support features, 3. score the query set with the adapted head,
    4. restore the head, 5. backpropagate the query loss into the backbone and
    (first-order) into the restored head.

    With ``comm`` the episode is this rank's shard: support features are
    all-gathered so every rank runs identical inner steps, and the query
    shard's gradients are left for the caller's all-reduce.
    """
    world = comm.world_size if comm is not None else 1
    rank = comm.rank if comm is not None else 0
    if dropout_rng is None:
        dropout_rng = np.random.default_rng(0)

    with no_grad():
        s_feats = _take_positions(hidden_states(episode.support_tokens, params), episode.support_positions).data
    s_labels = episode.support_labels
    if comm is not None:
        s_feats = comm.all_gather(s_feats, tag="maml/support_feats")
        s_labels = comm.all_gather(s_labels, tag="maml/support_labels")
    n_support = len(s_labels)
    n_query_local = len(episode.query_labels)

    phi0 = head.snapshot()
    feats_const = Tensor(s_feats, dtype=s_feats.dtype)
    with no_grad():
        acc_before = _accuracy(head.forward(feats_const).data, s_labels)

    phi = {k: v.copy() for k, v in phi0.items()}
    inner_tapes: list[Tape] = []
    for _ in range(inner_steps):
        leaves = {k: Tensor(v, requires_grad=True, dtype=v.dtype) for k, v in phi.items()}
        with Tape() as tape:
            logits = head.forward(feats_const, leaves, head.dropout_masks(dropout_rng, n_support))
            loss = T.cross_entropy_from_logits(logits, s_labels)
        backward(loss, tape)
        phi = {k: phi[k] - inner_lr * leaves[k].grad for k in phi}
        inner_tapes.append(tape)

    with no_grad():
        support_acc = _accuracy(head.forward(feats_const, {k: Tensor(v, dtype=v.dtype) for k, v in phi.items()}).data,
                                s_labels)

    # query masks are drawn for the whole query set and sliced, so shards see the masks a single rank would
    q_masks = head.dropout_masks(dropout_rng, n_query_local * world)
    q_masks = [m[rank * n_query_local:(rank + 1) * n_query_local] for m in q_masks]
    phi_t = {k: Tensor(v, requires_grad=outer_head_grad, dtype=v.dtype) for k, v in phi.items()}
    with Tape() as outer:
        h = _take_positions(hidden_states(episode.query_tokens, params), episode.query_positions)
        logits = head.forward(h, phi_t, q_masks)
        q_loss = T.cross_entropy_from_logits(logits, episode.query_labels)
        scaled = T.scale(q_loss, loss_scale)
    head.restore(phi0)

    inner_out = set().union(*(t.output_ids() for t in inner_tapes)) if inner_tapes else set()
    if outer.input_ids() & inner_out:
        raise EpisodeError("query loss depends on inner-loop intermediates")
    if scaled.requires_grad:
        backward(scaled, outer)
    if outer_head_grad:
        for k, p in head.params.items():
            g = phi_t[k].grad
            if g is not None:
                p.grad = g.copy() if p.grad is None else p.grad + g

    with no_grad():
        q_acc = _accuracy(head.forward(h.detach(), {k: Tensor(v, dtype=v.dtype) for k, v in phi.items()}).data,
                          episode.query_labels)
    q_loss_val = float(q_loss.data)
    if comm is not None:
        q_loss_val = float(comm.all_reduce_mean(np.array([q_loss_val]), tag="maml/query_loss")[0])
        q_acc = float(comm.all_reduce_mean(np.array([q_acc]), tag="maml/query_acc")[0])
    return EpisodeResult(q_loss_val, support_acc, q_acc, acc_before,
                         inner_tapes if keep_tapes else [], outer if keep_tapes else None)


def ar_update(batch: np.ndarray, params: DecoderParams, optimizer: AdamW, lr: float, accum_steps: int = 1) -> float:
    """Accumulate grads of ``next_token_loss / accum_steps``; step every ``accum_steps`` calls."""
    with Tape() as tape:
        loss = next_token_loss(batch, params)
        scaled = T.scale(loss, 1.0 / accum_steps)
    backward(scaled, tape)
    optimizer.tick(lr, accum_steps)
    return float(loss.data)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "picomaml-checkpoint/1"


@dataclass
class Checkpoint:
    step: int
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    head: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    optimizer_step: int
    config: dict
    rng: str
    path: str | None = None

    @property
    def seed(self) -> int:
        return int(self.rng, 16)


def save_checkpoint(path, step: int, params: DecoderParams, head: EpisodeHead | None = None,
                    optimizer: AdamW | None = None, config: dict | None = None, seed: int = 0,
                    vocab: Vocab | None = None) -> Path:
    """Write ``manifest.json`` + ``weights.bin`` (little-endian f32, manifest order) atomically."""
    path = Path(path)
    tensors: list[tuple[str, np.ndarray]] = [(f"model.{k}", v.data) for k, v in params.items()]
    if head is not None:
        tensors += [(f"head.{k}", v.data) for k, v in head.params.items()]
    if optimizer is not None:
        tensors += [(f"adam_m.{k}", v) for k, v in optimizer.state.m.items()]
        tensors += [(f"adam_v.{k}", v) for k, v in optimizer.state.v.items()]
    entries, offset = [], 0
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    with open(tmp / "weights.bin", "wb") as fh:
        for name, arr in tensors:
            buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset})
            fh.write(buf)
            offset += len(buf)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "step": int(step),
        "tensors": entries,
        "config": {"model": params.config.to_dict(), **(config or {})},
        "optimizer_step": optimizer.state.step if optimizer is not None else 0,
        "rng": f"{int(seed) & (2**64 - 1):016x}",
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1))
    if vocab is not None:
        vocab.save(tmp / "vocab.json")
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "weights.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    try:
        entries = manifest["tensors"]
        step = int(manifest["step"])
        model_cfg = ModelConfig(**manifest["config"]["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"{path}: malformed manifest ({exc})") from exc
    groups: dict[str, dict[str, np.ndarray]] = {"model": {}, "head": {}, "adam_m": {}, "adam_v": {}}
    expected = 0
    for e in entries:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if e.get("dtype") != "f32" or e["offset"] != expected:
            raise CorruptCheckpointError(f"{path}: tensor {e['name']} has a bad dtype or offset")
        end = expected + 4 * n
        if end > len(blob):
            raise CorruptCheckpointError(f"{path}: weights.bin is truncated at {e['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=expected).reshape(e["shape"]).astype(np.float32)
        group, _, name = e["name"].partition(".")
        if group not in groups:
            raise CorruptCheckpointError(f"{path}: unknown tensor group {group!r}")
        groups[group][name] = arr
        expected = end
    if expected != len(blob):
        raise CorruptCheckpointError(f"{path}: weights.bin has {len(blob)} bytes, manifest describes {expected}")
    cfg = {k: v for k, v in manifest["config"].items() if k != "model"}
    return Checkpoint(step, model_cfg, groups["model"], groups["head"], groups["adam_m"], groups["adam_v"],
                      int(manifest.get("optimizer_step", 0)), cfg, manifest.get("rng", "0" * 16), str(path))


# ---------------------------------------------------------------------------
# metrics

PER_MATRICES = ("q_proj", "v_proj", "o_proj", "w_gate", "w_up", "w_down")


def heldout_loss(params: DecoderParams, heldout: PretokenizedCorpus, batch: int = 16) -> float:
    seqs = heldout.sequences[:batch]
    with no_grad():
        return float(next_token_loss(seqs, params).data)


def log_step_metrics(step: int, branch: str, train_loss: float, params: DecoderParams, head: EpisodeHead | None,
                     heldout: PretokenizedCorpus | None = None, episode: EpisodeResult | dict | None = None,
                     lr: float | None = None, eval_batch: int = 16) -> dict:
    """One metrics record; fields are always present (null when not applicable)."""
    last = params.config.n_layers - 1
    per = {}
    for key in PER_MATRICES:
        name = f"layers.{last}.{key}"
        per[name] = effective_rank_proportional(params[name].data)
    h_loss = heldout_loss(params, heldout, eval_batch) if heldout is not None and len(heldout) else None
    mean, std = head.weight_stats() if head is not None else (None, None)
    if isinstance(episode, EpisodeResult):
        episode = {"support_acc": episode.support_acc, "query_acc": episode.query_acc}
    return {
        "step": int(step),
        "branch": branch,
        "lr": lr,
        "train_loss": float(train_loss),
        "heldout_loss": h_loss,
        "heldout_ppl": None if h_loss is None else float(np.exp(h_loss)),
        "support_acc": None if episode is None else episode["support_acc"],
        "query_acc": None if episode is None else episode["query_acc"],
        "head_weight_mean": mean,
        "head_weight_std": std,
        "per": per,
    }


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    params: DecoderParams
    head: EpisodeHead | None
    optimizer: AdamW
    metrics: list[dict]
    checkpoints: list[Path]
    branches: list[list[str]]
    step: int


class HybridTrainer:
    def __init__(self, corpus: PretokenizedCorpus, model_config: ModelConfig, train: TrainConfig,
                 meta: MetaConfig | None = None, *, heldout: PretokenizedCorpus | None = None,
                 vocab: Vocab | None = None, out_dir=None, world_size: int = 1, sync_branch: bool = True,
                 sync_data: bool = True, resume: Checkpoint | None = None, stop_step: int | None = None,
                 dtype=np.float32, extra_config: dict | None = None):
        self.corpus = corpus
        self.model_config = model_config
        self.train = train
        self.meta = meta if meta is not None else MetaConfig(enabled=False)
        self.heldout = heldout
        self.vocab = vocab
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.world_size = world_size
        self.sync_branch = sync_branch
        self.sync_data = sync_data
        self.resume = resume
        self.stop_step = train.total_steps if stop_step is None else stop_step
        self.dtype = dtype
        self.extra_config = extra_config or {}
        if corpus.seq_len - 1 > model_config.max_seq_len:
            raise ConfigError(f"corpus sequences of length {corpus.seq_len} exceed max_seq_len+1")
        if train.micro_batch % world_size:
            raise ConfigError("micro_batch must be divisible by world_size")
        if self.meta.enabled:
            for n in (self.meta.n_ways * self.meta.k_shots, self.meta.n_ways * self.meta.q_queries):
                if n % world_size:
                    raise ConfigError("episode support/query sizes must be divisible by world_size")

    @property
    def seed(self) -> int:
        return self.train.seed if self.resume is None else self.resume.seed

    def config_dict(self) -> dict:
        return {"train": dataclasses.asdict(self.train), "meta": dataclasses.asdict(self.meta), **self.extra_config}

    def _build_state(self) -> tuple[DecoderParams, EpisodeHead | None, AdamW, int]:
        cfg = self.model_config
        params = init_params(cfg, stream(self.seed, _INIT), dtype=self.dtype)
        head = None
        if self.meta.enabled:
            head = EpisodeHead(cfg.d_model, self.meta.n_ways, self.meta.head_hidden, self.meta.head_layers,
                               self.meta.head_dropout, stream(self.seed, _HEAD_INIT), dtype=self.dtype)
        named = {f"model.{k}": v for k, v in params.items()}
        if head is not None:
            named.update({f"head.{k}": v for k, v in head.params.items()})
        opt = AdamW(named, self.train.betas, self.train.adam_eps, self.train.weight_decay)
        start = 0
        ck = self.resume
        if ck is not None:
            for k, v in ck.params.items():
                params[k].data = v.astype(self.dtype)
            if head is not None:
                if set(ck.head) != set(head.params):
                    raise CorruptCheckpointError("checkpoint head does not match the meta configuration")
                for k, v in ck.head.items():
                    head.params[k].data = v.astype(self.dtype)
            for k in named:
                if k in ck.adam_m:
                    opt.state.m[k] = ck.adam_m[k].astype(self.dtype)
                    opt.state.v[k] = ck.adam_v[k].astype(self.dtype)
            opt.state.step = ck.optimizer_step
            start = ck.step
        return params, head, opt, start

    def _draw_branch(self, comm: Communicator, step: int) -> str:
        if not self.meta.enabled:
            return "ar"
        if self.sync_branch:
            r = stream(self.seed, _BRANCH, step).random() if comm.rank == 0 else None
            r = comm.broadcast(r, root=0, tag="branch")
        else:
            r = stream(self.seed, _BRANCH, step, comm.rank).random()
        return "maml" if r < self.meta.rho else "ar"

    def _ar_micro(self, comm: Communicator, step: int, micro: int, params: DecoderParams) -> float:
        world, local = comm.world_size, self.train.micro_batch // comm.world_size
        if self.sync_data:
            shards = None
            if comm.rank == 0:
                batch = sample_lm_batch(self.corpus, self.train.micro_batch, stream(self.seed, _AR, step, micro))
                shards = [batch[r * local:(r + 1) * local] for r in range(world)]
            shard = comm.scatter(shards, root=0, tag="ar/batch")
        else:
            shard = sample_lm_batch(self.corpus, local, stream(self.seed, _AR, step, micro, comm.rank))
        with Tape() as tape:
            loss = next_token_loss(shard, params)
            scaled = T.scale(loss, 1.0 / self.train.accum_steps)
        backward(scaled, tape)
        return float(loss.data)

    def _episode_shards(self, ep: Episode, world: int) -> list[Episode]:
        ns, nq = len(ep.support_labels) // world, len(ep.query_labels) // world
        out = []
        for r in range(world):
            s, q = slice(r * ns, (r + 1) * ns), slice(r * nq, (r + 1) * nq)
            out.append(Episode(ep.n_ways, ep.k_shots, ep.q_queries, ep.class_words,
                               ep.support_tokens[s], ep.support_labels[s], ep.support_positions[s],
                               ep.support_rows[s], ep.query_tokens[q], ep.query_labels[q],
                               ep.query_positions[q], ep.query_rows[q], ep.support_masks[s], ep.query_masks[q]))
        return out

    def _maml_micro(self, comm: Communicator, step: int, micro: int, params: DecoderParams,
                    head: EpisodeHead) -> EpisodeResult:
        m = self.meta
        if self.sync_data:
            shards = None
            if comm.rank == 0:
                ep = sample_episode(self.corpus, self.vocab, m.n_ways, m.k_shots, m.q_queries,
                                    stream(self.seed, _EPISODE, step, micro), m.max_word_fraction)
                shards = self._episode_shards(ep, comm.world_size)
            local = comm.scatter(shards, root=0, tag="maml/episode")
        else:
            ep = sample_episode(self.corpus, self.vocab, m.n_ways, m.k_shots, m.q_queries,
                                stream(self.seed, _EPISODE, step, micro, comm.rank), m.max_word_fraction)
            local = self._episode_shards(ep, comm.world_size)[comm.rank]
        return maml_episode_update(local, params, head, m.inner_steps, m.inner_lr,
                                   loss_scale=1.0 / self.train.accum_steps,
                                   dropout_rng=stream(self.seed, _DROPOUT, step, micro), comm=comm,
                                   outer_head_grad=m.head_outer_grad)

    def _worker(self, comm: Communicator) -> dict[str, Any]:
        params, head, opt, start = self._build_state()
        tc = self.train

        def reduce_grads() -> None:
            names = [k for k, p in opt.params.items() if p.grad is not None]
            if not names:
                return
            flat = np.concatenate([opt.params[k].grad.reshape(-1) for k in names])
            flat = comm.all_reduce_mean(flat, tag="grads/" + ",".join(n.split(".")[0] for n in names[:1] + names[-1:]))
            offset = 0
            for k in names:
                p = opt.params[k]
                p.grad = flat[offset:offset + p.size].reshape(p.shape)
                offset += p.size

        opt.pre_step = reduce_grads
        metrics: list[dict] = []
        checkpoints: list[Path] = []
        branches: list[str] = []
        is_root = comm.rank == 0
        ck_dir = self.out_dir / "checkpoints" if self.out_dir is not None else None
        metrics_fh = None
        if is_root and self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            metrics_fh = open(self.out_dir / "metrics.jsonl", "a" if self.resume is not None else "w")

        def maybe_checkpoint(step: int) -> None:
            if ck_dir is None or step % tc.checkpoint_every or (self.resume is not None and step == start):
                return
            if is_root:
                checkpoints.append(save_checkpoint(ck_dir / f"step_{step:06d}", step, params, head, opt,
                                                   self.config_dict(), self.seed, self.vocab))

        try:
            for step in range(start, self.stop_step):
                maybe_checkpoint(step)
                branch = self._draw_branch(comm, step)
                branches.append(branch)
                lr = lr_at(step, tc)
                losses, episodes = [], []
                for micro in range(tc.accum_steps):
                    if branch == "maml":
                        res = self._maml_micro(comm, step, micro, params, head)
                        losses.append(res.query_loss)
                        episodes.append(res)
                    else:
                        losses.append(self._ar_micro(comm, step, micro, params))
                    opt.tick(lr, tc.accum_steps)
                train_loss = float(comm.all_reduce_mean(np.array([np.mean(losses)]), tag="log/loss")[0])
                if (step + 1) % tc.log_every == 0 and is_root:
                    ep_stats = None
                    if episodes:
                        ep_stats = {"support_acc": float(np.mean([e.support_acc for e in episodes])),
                                    "query_acc": float(np.mean([e.query_acc for e in episodes]))}
                    rec = log_step_metrics(step + 1, branch, train_loss, params, head, self.heldout, ep_stats,
                                           lr, tc.eval_batch)
                    metrics.append(rec)
                    if metrics_fh is not None:
                        metrics_fh.write(json.dumps(rec) + "\n")
                        metrics_fh.flush()
                    log.info("step %d %s loss=%.4f", step + 1, branch, train_loss)
                comm.barrier(tag="step")
            maybe_checkpoint(self.stop_step)
        finally:
            if metrics_fh is not None:
                metrics_fh.close()
        return {"params": params, "head": head, "opt": opt, "metrics": metrics, "checkpoints": checkpoints,
                "branches": branches}

    def run(self) -> TrainResult:
        results = RankGroup(self.world_size).run(self._worker)
        r0 = results[0]
        return TrainResult(r0["params"], r0["head"], r0["opt"], r0["metrics"], r0["checkpoints"],
                           [r["branches"] for r in results], self.stop_step)


def hybrid_train_loop(corpus: PretokenizedCorpus, model_config: ModelConfig, train: TrainConfig,
                      meta: MetaConfig | None = None, **kwargs) -> TrainResult:
    return HybridTrainer(corpus, model_config, train, meta, **kwargs).run()
