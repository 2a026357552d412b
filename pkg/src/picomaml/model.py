"""LLaMa-style causal decoder: RMSNorm, grouped-query attention with RoPE, SwiGLU."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, LengthError, VocabularyError
from .tensor import Tensor

# Widths of the named capacity tiers; every other hyper-parameter is shared.
CAPACITY_TIERS = {
    "tiny": 96,
    "small": 384,
    "medium": 768,
    "large": 1536,
}

# Nominal parameter counts per tier.
TIER_PARAM_COUNTS = {"tiny": 11e6, "small": 65e6, "medium": 181e6, "large": 570e6}


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 768
    n_layers: int = 12
    n_heads: int = 12
    n_kv_heads: int = 4
    d_ff: int = 3072
    vocab_size: int = 50304
    max_seq_len: int = 2048
    norm_eps: float = 1e-6
    rope_theta: float = 10000.0

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "n_kv_heads", "d_ff", "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.norm_eps <= 0 or self.rope_theta <= 0:
            raise ConfigError("norm_eps and rope_theta must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_heads {self.n_heads} not divisible by n_kv_heads {self.n_kv_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head dimension {self.head_dim} must be even for rotary positions")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.head_dim * self.n_kv_heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def tier_config(name: str, **overrides) -> ModelConfig:
    """Named configuration: one of the capacity tiers or the seconds-scale ``desk`` tier."""
    if name == "desk":
        base = dict(d_model=16, n_layers=2, n_heads=2, n_kv_heads=1, d_ff=64,
                    vocab_size=512, max_seq_len=32)
    elif name in CAPACITY_TIERS:
        d = CAPACITY_TIERS[name]
        base = dict(d_model=d, d_ff=4 * d)
    else:
        raise ConfigError(f"unknown tier {name!r}")
    base.update(overrides)
    cfg = ModelConfig(**base)
    if name in CAPACITY_TIERS and cfg.d_ff != 4 * cfg.d_model:
        raise ConfigError(f"tier {name} requires d_ff == 4*d_model")
    return cfg


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count (untied output projection)."""
    d, f = cfg.d_model, cfg.d_ff
    per_layer = 2 * d * d + 2 * d * cfg.kv_dim + 3 * d * f + 2 * d
    return 2 * cfg.vocab_size * d + cfg.n_layers * per_layer + d


LAYER_KEYS = ("attn_norm", "q_proj", "k_proj", "v_proj", "o_proj", "ffn_norm", "w_gate", "w_up", "w_down")


class DecoderParams:
    """Flat, ordered name -> Tensor mapping plus the config it was built for."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def layer(self, i: int) -> dict[str, Tensor]:
        return {k: self.tensors[f"layers.{i}.{k}"] for k in LAYER_KEYS}

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.tensors.items()}

    def numel(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def copy(self, requires_grad: bool | None = None) -> "DecoderParams":
        return DecoderParams(self.config, {
            k: Tensor(v.data.copy(), requires_grad=v.requires_grad if requires_grad is None else requires_grad,
                      name=k, dtype=v.dtype)
            for k, v in self.tensors.items()})

    @classmethod
    def from_state(cls, config: ModelConfig, state: dict[str, np.ndarray], requires_grad: bool = True,
                   dtype=None) -> "DecoderParams":
        expected = expected_shapes(config)
        if set(state) != set(expected):
            raise ConfigError(f"parameter names do not match config: {sorted(set(state) ^ set(expected))}")
        tensors = {}
        for k, shp in expected.items():
            arr = np.asarray(state[k], dtype=dtype)
            if arr.shape != shp:
                raise ConfigError(f"{k}: shape {arr.shape} != expected {shp}")
            tensors[k] = Tensor(arr.copy(), requires_grad=requires_grad, name=k, dtype=arr.dtype)
        return cls(config, tensors)


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"tok_embedding": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn_norm": (d,),
            p + "q_proj": (d, d),
            p + "k_proj": (d, cfg.kv_dim),
            p + "v_proj": (d, cfg.kv_dim),
            p + "o_proj": (d, d),
            p + "ffn_norm": (d,),
            p + "w_gate": (d, f),
            p + "w_up": (d, f),
            p + "w_down": (f, d),
        })
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (cfg.vocab_size, d)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32, std: float = 0.02,
                zero_output: bool = False) -> DecoderParams:
    """Matrices ~ N(0, std^2), RMS gains = 1."""
    tensors = {}
    for name, shp in expected_shapes(cfg).items():
        if name.endswith("norm"):
            arr = np.ones(shp)
        elif name == "lm_head" and zero_output:
            arr = np.zeros(shp)
        else:
            arr = rng.normal(0.0, std, size=shp)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name, dtype=dtype)
    return DecoderParams(cfg, tensors)


# ---------------------------------------------------------------------------
# blocks


def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    return T.rms_norm(x, gain, eps)


def rope_apply(q: Tensor, k: Tensor, positions, theta: float = 10000.0) -> tuple[Tensor, Tensor]:
    """Apply rotary embeddings to ``q (..., h, T, d_h)`` and ``k (..., h_kv, T, d_h)``."""
    if q.shape[-1] % 2 or k.shape[-1] % 2:
        raise ConfigError(f"rotary embeddings need an even head dimension, got {q.shape[-1]}")
    if np.any(np.asarray(positions) < 0):
        raise ConfigError("rotary positions must be non-negative")
    return T.rope(q, positions, theta), T.rope(k, positions, theta)


def _causal_mask(t: int, dtype) -> np.ndarray:
    mask = np.zeros((t, t), dtype=dtype)
    mask[np.triu_indices(t, 1)] = -np.inf
    return mask


def gqa_attention(x: Tensor, layer: dict[str, Tensor], cfg: ModelConfig, causal: bool = True,
                  positions=None) -> Tensor:
    """Grouped-query self-attention over ``x`` of shape ``(T, d)`` or ``(B, T, d)``."""
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    b, t, d = x.shape
    if t > cfg.max_seq_len:
        raise LengthError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    h, hkv, dh = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    if positions is None:
        positions = np.arange(t)

    q = T.transpose(T.reshape(x @ layer["q_proj"], (b, t, h, dh)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(x @ layer["k_proj"], (b, t, hkv, dh)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(x @ layer["v_proj"], (b, t, hkv, dh)), (0, 2, 1, 3))
    q, k = rope_apply(q, k, positions, cfg.rope_theta)
    if hkv != h:
        k = T.repeat(k, h // hkv, axis=1)
        v = T.repeat(v, h // hkv, axis=1)

    scores = T.scale(q @ T.swapaxes(k, -1, -2), 1.0 / np.sqrt(dh))
    if causal:
        scores = scores + Tensor(_causal_mask(t, x.dtype), dtype=x.dtype)
    attn = T.softmax(scores, axis=-1)
    out = T.reshape(T.transpose(attn @ v, (0, 2, 1, 3)), (b, t, d))
    out = out @ layer["o_proj"]
    return T.reshape(out, (t, d)) if squeeze else out


def swiglu_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    return T.swiglu_gate(x @ w_gate, x @ w_up) @ w_down


def _check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.dtype.kind not in "iu":
        raise VocabularyError(f"token ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise VocabularyError(f"token id out of range [0, {cfg.vocab_size})")
    if ids.shape[-1] > cfg.max_seq_len:
        raise LengthError(f"sequence length {ids.shape[-1]} exceeds max_seq_len {cfg.max_seq_len}")
    return ids


def hidden_states(tokens, params: DecoderParams) -> Tensor:
    """Final-norm hidden states, ``(T, d)`` or ``(B, T, d)`` matching ``tokens``."""
    cfg = params.config
    ids = _check_tokens(tokens, cfg)
    x = T.embedding(params["tok_embedding"], ids)
    for i in range(cfg.n_layers):
        lp = params.layer(i)
        x = x + gqa_attention(rmsnorm(x, lp["attn_norm"], cfg.norm_eps), lp, cfg)
        x = x + swiglu_ffn(rmsnorm(x, lp["ffn_norm"], cfg.norm_eps), lp["w_gate"], lp["w_up"], lp["w_down"])
    return rmsnorm(x, params["final_norm"], cfg.norm_eps)


def forward_logits(tokens, params: DecoderParams) -> Tensor:
    h = hidden_states(tokens, params)
    return h @ T.transpose(params["lm_head"], (1, 0))


def next_token_loss(tokens, params: DecoderParams) -> Tensor:
    """Mean next-token cross-entropy over ``tokens[..., :-1] -> tokens[..., 1:]``."""
    ids = np.asarray(tokens)
    if ids.shape[-1] < 2:
        raise LengthError("next_token_loss needs at least 2 tokens")
    logits = forward_logits(ids[..., :-1], params)
    return T.cross_entropy_from_logits(logits, ids[..., 1:])


def perplexity(loss: float) -> float:
    return float(np.exp(loss))
