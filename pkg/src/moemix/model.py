"""Byte-level decoder-only transformer built on the autodiff tape.

The backbone (embedding, rotary attention, pre-norm residual wiring, final
norm and head) is one function, parameterized by a feedforward callback.
The dense model plugs in a gated SwiGLU block; the mixture model plugs in
its routed dispatch. Everything else is shared, so branched variants stay
architecturally identical by construction.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names
(``layers.2.attn.wq.weight`` and so on). Model surgery and checkpointing
operate on that dict directly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError

NEG_MASK = -1e9


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the desk-scale setting."""

    vocab_size: int = 256
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 256
    rope_base: float = 10000.0
    rms_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if (self.d_model // self.n_heads) % 2:
            raise ContractError("head dim must be even for pairwise rotation")
        for field in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, field) <= 0:
                raise ContractError(f"{field} must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
            "rope_base": self.rope_base,
            "rms_eps": self.rms_eps,
            "init_std": self.init_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def scaled(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)


def init_seed(config: ModelConfig, rng_seed: int) -> dict[str, Tensor]:
    """Fresh dense parameters: Gaussian(0, init_std) matrices, unit norm weights.

    Draw order is fixed (embedding, per-layer blocks in order, final norm,
    head), so a given (config, seed) pair always produces identical bytes.
    """
    rng = np.random.default_rng(rng_seed)
    std = config.init_std
    d, f, v = config.d_model, config.d_ff, config.vocab_size

    def mat(*shape):
        return Tensor(rng.normal(0.0, std, size=shape))

    params: dict[str, Tensor] = {"embed.weight": mat(v, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}"
        params[f"{p}.attn_norm.weight"] = Tensor(np.ones(d))
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{p}.attn.{name}.weight"] = mat(d, d)
        params[f"{p}.ff_norm.weight"] = Tensor(np.ones(d))
        params[f"{p}.ff.w1.weight"] = mat(d, f)
        params[f"{p}.ff.w2.weight"] = mat(f, d)
        params[f"{p}.ff.w3.weight"] = mat(d, f)
    params["final_norm.weight"] = Tensor(np.ones(d))
    params["head.weight"] = mat(d, v)
    return params


def param_count(params: dict[str, Tensor]) -> int:
    return sum(t.data.size for t in params.values())


_MASK_CACHE: dict[tuple, np.ndarray] = {}


def causal_mask(n: int, dtype) -> np.ndarray:
    """Additive [n, n] mask: 0 on and below the diagonal, a large negative
    above. After max-shifted softmax the masked weights underflow to exact
    zero, so future tokens cannot perturb past positions even at the bit level."""
    key = (n, np.dtype(dtype).str)
    hit = _MASK_CACHE.get(key)
    if hit is None:
        m = np.zeros((n, n), dtype=dtype)
        m[np.triu_indices(n, 1)] = NEG_MASK
        hit = _MASK_CACHE[key] = m
    return hit


def swiglu(x: Tensor, w1: Tensor, w2: Tensor, w3: Tensor) -> Tensor:
    """Gated feedforward: W2 (silu(x W1) * (x W3))."""
    return ad.matmul(ad.mul(ad.silu(ad.matmul(x, w1)), ad.matmul(x, w3)), w2)


FFApply = Callable[[int, Tensor], Tensor]


def run_backbone(
    config: ModelConfig,
    params: dict[str, Tensor],
    tokens: np.ndarray,
    ff_apply: FFApply,
    trace: list | None = None,
) -> Tensor:
    """Full forward pass from token ids [B, T] to logits [B, T, vocab].

    ``ff_apply(layer_index, normed_hidden)`` returns the feedforward branch
    of that layer; the residual add happens here. When ``trace`` is a list,
    the post-attention residual stream of each layer is appended to it.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be [batch, time], got {tokens.shape}")
    b, t = tokens.shape
    if t > config.max_seq_len:
        raise DimensionError(f"sequence length {t} exceeds max_seq_len {config.max_seq_len}")
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= config.vocab_size:
        raise IndexError(f"token ids out of range [0, {config.vocab_size})")

    d, nh, hd = config.d_model, config.n_heads, config.head_dim
    positions = np.arange(t)
    h = ad.take_rows(params["embed.weight"], tokens)  # [B, T, d]
    mask = causal_mask(t, h.dtype)
    inv_sqrt = 1.0 / np.sqrt(hd)

    def heads(x: Tensor) -> Tensor:
        # [B, T, d] -> [B*nh, T, hd]
        return ad.reshape(ad.transpose(ad.reshape(x, (b, t, nh, hd)), (0, 2, 1, 3)), (b * nh, t, hd))

    def unheads(x: Tensor) -> Tensor:
        return ad.reshape(ad.transpose(ad.reshape(x, (b, nh, t, hd)), (0, 2, 1, 3)), (b, t, d))

    for i in range(config.n_layers):
        p = f"layers.{i}"
        x = ad.rms_norm(h, params[f"{p}.attn_norm.weight"], config.rms_eps)
        q = heads(ad.matmul(x, params[f"{p}.attn.wq.weight"]))
        k = heads(ad.matmul(x, params[f"{p}.attn.wk.weight"]))
        v = heads(ad.matmul(x, params[f"{p}.attn.wv.weight"]))
        q = ad.rope_rotate(q, positions, config.rope_base)
        k = ad.rope_rotate(k, positions, config.rope_base)
        scores = ad.add(ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), inv_sqrt), Tensor(mask, dtype=mask.dtype))
        att = ad.softmax(scores, axis=-1)
        ctx = unheads(ad.matmul(att, v))
        h = ad.add(h, ad.matmul(ctx, params[f"{p}.attn.wo.weight"]))
        if trace is not None:
            trace.append(h)

        x2 = ad.rms_norm(h, params[f"{p}.ff_norm.weight"], config.rms_eps)
        h = ad.add(h, ff_apply(i, x2))

    final = ad.rms_norm(h, params["final_norm.weight"], config.rms_eps)
    return ad.matmul(final, params["head.weight"])


def dense_ff_apply(params: dict[str, Tensor]) -> FFApply:
    def apply(i: int, x: Tensor) -> Tensor:
        return swiglu(
            x,
            params[f"layers.{i}.ff.w1.weight"],
            params[f"layers.{i}.ff.w2.weight"],
            params[f"layers.{i}.ff.w3.weight"],
        )

    return apply


def forward(config: ModelConfig, params: dict[str, Tensor], tokens: np.ndarray,
            trace: list | None = None) -> Tensor:
    """Dense-model logits [B, T, vocab] for token ids [B, T]."""
    return run_backbone(config, params, tokens, dense_ff_apply(params), trace)


def shift_targets(batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a [B, T] token batch into (inputs [B, T-1], next-byte targets)."""
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] < 2:
        raise ContractError(f"need [batch, T>=2] tokens, got {batch.shape}")
    return batch[:, :-1], batch[:, 1:]


def sequence_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-byte negative log-likelihood of [B, T, V] logits."""
    b, t, v = logits.shape
    return ad.cross_entropy(ad.reshape(logits, (b * t, v)), np.asarray(targets).reshape(-1))


def lm_loss(config: ModelConfig, params: dict[str, Tensor], batch: np.ndarray) -> Tensor:
    """Next-byte NLL of a dense model over one token batch [B, T]."""
    inputs, targets = shift_targets(batch)
    return sequence_loss(forward(config, params, inputs), targets)


class DenseModel:
    """Plain decoder: one SwiGLU feedforward per layer, no routing."""

    kind = "dense"

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, rng_seed: int) -> "DenseModel":
        return cls(config, init_seed(config, rng_seed))

    def forward(self, tokens: np.ndarray) -> Tensor:
        return run_backbone(self.config, self.params, tokens, dense_ff_apply(self.params))

    def lm_loss(self, batch: np.ndarray) -> Tensor:
        return lm_loss(self.config, self.params, batch)

    def loss(self, batch: np.ndarray) -> tuple[Tensor, dict]:
        """(total loss, parts dict); dense models have no auxiliary terms."""
        lm = self.lm_loss(batch)
        return lm, {"lm_loss": float(lm.data), "lb_loss": 0.0}

    def param_count(self) -> int:
        return param_count(self.params)


def expected_dense_param_count(config: ModelConfig) -> int:
    """Closed-form parameter total for a dense model with this config."""
    d, f, v, l = config.d_model, config.d_ff, config.vocab_size, config.n_layers
    per_layer = 4 * d * d + 3 * d * f + 2 * d
    return v * d + l * per_layer + d + d * v
