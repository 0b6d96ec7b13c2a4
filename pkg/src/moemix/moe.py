"""Routed expert feedforward layer: four routing schemes and the balance loss.

A mixture layer holds N expert SwiGLU triples plus one router matrix W
[d_model, N]. ``moe_forward`` computes y = sum over selected experts of
gate_i * FF_i(x), evaluating only the selected experts' FF blocks, and
returns the routing record and the per-expert balance statistics that feed
the auxiliary loss.

Routing schemes:

* ``topk``    — softmax over the k largest router logits; ties go to the
                lowest expert index.
* ``switch``  — top-1 with a per-expert token capacity; overflow tokens skip
                the FF entirely (the residual stream carries them through).
* ``sample_top1`` — Gumbel-softmax sample at an annealed temperature; during
                training the kept weight is the soft sample's max entry so
                gradients flow through it, at inference a hard categorical
                sample with weight 1. The first layer routes softly.
* ``soft``    — full softmax over all experts, every expert evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .model import ModelConfig, run_backbone, sequence_loss, shift_targets, swiglu

ROUTING_METHODS = ("topk", "switch", "sample_top1", "soft")


@dataclass(frozen=True)
class RouterConfig:
    """Routing scheme and its knobs.

    ``dispatch_fraction_u`` switches the balance statistic u_i from the batch
    mean of the gate values (the literal formula, default) to the fraction of
    tokens dispatched to expert i (the Switch-style variant, not differentiable
    through the router).
    """

    method: str = "topk"
    k: int = 2
    capacity_factor: float = 1.5
    alpha: float = 0.01
    gumbel_rate: float = 1e-4
    first_layer_soft: bool = True
    dispatch_fraction_u: bool = False

    def __post_init__(self):
        if self.method not in ROUTING_METHODS:
            raise ContractError(f"unknown routing method {self.method!r}")
        if self.k < 1:
            raise ContractError(f"k must be >= 1, got {self.k}")
        if self.alpha < 0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")
        if self.capacity_factor <= 0:
            raise ContractError(f"capacity_factor must be > 0, got {self.capacity_factor}")
        if self.gumbel_rate <= 0:
            raise ContractError(f"gumbel_rate must be > 0, got {self.gumbel_rate}")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "k": self.k,
            "capacity_factor": self.capacity_factor,
            "alpha": self.alpha,
            "gumbel_rate": self.gumbel_rate,
            "first_layer_soft": self.first_layer_soft,
            "dispatch_fraction_u": self.dispatch_fraction_u,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RouterConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def scaled(self, **kw) -> "RouterConfig":
        return replace(self, **kw)


class MoELayerParams:
    """View over one layer's expert FF triples (w1, w2, w3) and router matrix."""

    def __init__(self, experts: Sequence[tuple[Tensor, Tensor, Tensor]], router: Tensor):
        if not experts:
            raise ContractError("a mixture layer needs at least one expert")
        shapes = {tuple(t.shape for t in e) for e in experts}
        if len(shapes) != 1:
            raise DimensionError(f"experts disagree on shapes: {shapes}")
        d = experts[0][0].shape[0]
        if router.shape != (d, len(experts)):
            raise DimensionError(
                f"router shape {router.shape} != ({d}, {len(experts)})"
            )
        self.experts = list(experts)
        self.router = router

    @property
    def n_experts(self) -> int:
        return len(self.experts)


@dataclass
class GumbelState:
    """Annealed sampling temperature: tau = max(0.5, exp(-rate * step))."""

    step: int
    rate: float = 1e-4

    @property
    def temperature(self) -> float:
        return gumbel_temperature(self.step, self.rate)


def gumbel_temperature(t: int, r: float = 1e-4) -> float:
    if t < 0:
        raise ContractError(f"step must be >= 0, got {t}")
    return max(0.5, math.exp(-r * t))


def gumbel_noise(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    """Standard Gumbel(0,1) draws: -ln(-ln(U)) with U uniform on (0,1)."""
    u = rng.random(shape)
    # rng.random can return exactly 0.0; nudge into the open interval
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return (-np.log(-np.log(u))).astype(dtype)


@dataclass
class RoutingRecord:
    """Per-token routing outcome of one layer on one batch.

    ``indices``/``weights`` are [tokens, s] where s is the per-token selection
    count (k, 1, or N); ``probs`` is the full [tokens, N] router softmax.
    Tokens a switch layer dropped have ``routed`` False and zero weight.
    """

    layer_index: int
    method: str
    indices: np.ndarray
    weights: np.ndarray
    probs: np.ndarray
    routed: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.probs.shape[0]

    @property
    def n_experts(self) -> int:
        return self.probs.shape[1]


@dataclass
class BalanceStats:
    """Per-expert statistics of one layer: u = mean gate value, p = mean
    router softmax probability, both over the token batch. u and p stay
    differentiable Tensors so the balance loss can train the router.
    ``ff_evals`` counts tokens actually run through each expert's FF."""

    u: Tensor
    p: Tensor
    ff_evals: np.ndarray
    n_tokens: int


# ---------------------------------------------------------------------------
# reference routing functions (single call, numpy in / numpy out)


def route_topk(router_logits: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the k largest logits (ties to the lowest index, descending
    logit order) and the softmax over exactly those k logits."""
    logits = np.asarray(router_logits, dtype=np.float64)
    n = logits.shape[-1]
    if k > n:
        raise ContractError(f"k={k} exceeds expert count {n}")
    if not np.isfinite(logits).all():
        raise ContractError("router logits must be finite")
    idx = np.argsort(-logits, kind="stable")[:k]
    sel = logits[idx]
    e = np.exp(sel - sel.max())
    return idx, e / e.sum()


def route_switch(
    router_logits_batch: np.ndarray, capacity_factor: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Top-1 routing with a batch-level capacity.

    Returns (expert index per token, full-softmax weight per token, routed
    mask, capacity). Each expert accepts at most ceil(capacity_factor *
    tokens / N) tokens in arrival order; later tokens are dropped (mask
    False, weight 0).
    """
    logits = np.asarray(router_logits_batch, dtype=np.float64)
    tokens, n = logits.shape
    capacity = math.ceil(capacity_factor * tokens / n)
    choice = logits.argmax(axis=1)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    weight = probs[np.arange(tokens), choice]
    routed = np.ones(tokens, dtype=bool)
    for ex in range(n):
        positions = np.nonzero(choice == ex)[0]
        routed[positions[capacity:]] = False
    weight = np.where(routed, weight, 0.0)
    return choice, weight, routed, capacity


def route_sample_top1(
    router_logits: np.ndarray,
    gumbel: GumbelState,
    mode: str,
    rng: np.random.Generator,
) -> tuple[int, float]:
    """One token's sampled expert.

    train: Gumbel-softmax at the annealed temperature, keep the argmax and its
    soft value as the weight. infer: hard categorical sample, weight 1.
    """
    logits = np.asarray(router_logits, dtype=np.float64)
    if mode == "train":
        tau = gumbel.temperature
        z = (logits + gumbel_noise(rng, logits.shape, np.float64)) / tau
        e = np.exp(z - z.max())
        y = e / e.sum()
        i = int(y.argmax())
        return i, float(y[i])
    if mode == "infer":
        e = np.exp(logits - logits.max())
        p = e / e.sum()
        return int(rng.choice(len(p), p=p)), 1.0
    raise ContractError(f"mode must be train or infer, got {mode!r}")


# ---------------------------------------------------------------------------
# the mixture layer


def _dispatch_sparse(
    x: Tensor,
    layer: MoELayerParams,
    indices: np.ndarray,
    weights: Tensor,
    ff_evals: np.ndarray,
) -> Tensor:
    """Gather each expert's tokens, run its FF once, scale by the gate and
    scatter-add back. ``indices``/``weights`` are [tokens, s]."""
    tokens = x.shape[0]
    s = indices.shape[1]
    flat_w = ad.reshape(weights, (tokens * s,))
    y = None
    for e, (w1, w2, w3) in enumerate(layer.experts):
        rows, slots = np.nonzero(indices == e)
        if rows.size == 0:
            continue
        ff_evals[e] += rows.size
        out = swiglu(ad.take_rows(x, rows), w1, w2, w3)
        gate = ad.reshape(ad.take_rows(flat_w, rows * s + slots), (rows.size, 1))
        contrib = ad.put_rows(tokens, rows, ad.mul(out, gate))
        y = contrib if y is None else ad.add(y, contrib)
    if y is None:  # every token dropped: zero FF output
        y = Tensor(np.zeros_like(x.data))
    return y


def moe_forward(
    x: Tensor,
    layer: MoELayerParams,
    cfg: RouterConfig,
    layer_index: int,
    mode: str = "train",
    gumbel: GumbelState | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, RoutingRecord, BalanceStats]:
    """Mixture layer on flat tokens [tokens, d_model].

    Only selected experts' FF blocks run. Returns the combined output, the
    per-token routing record, and differentiable balance statistics.
    """
    if not isinstance(x, Tensor) or x.data.ndim != 2:
        raise DimensionError(f"moe_forward expects [tokens, d] Tensor, got {getattr(x, 'shape', None)}")
    n = layer.n_experts
    d = layer.experts[0][0].shape[0]
    if x.shape[1] != d:
        raise DimensionError(f"token width {x.shape[1]} != expert width {d}")
    if cfg.k > n:
        raise ContractError(f"k={cfg.k} exceeds expert count {n}")
    tokens = x.shape[0]

    logits = ad.matmul(x, layer.router)  # [tokens, N]
    full = ad.softmax(logits, axis=-1)
    p = ad.reduce_mean(full, axis=0)
    ff_evals = np.zeros(n, dtype=np.int64)
    routed = np.ones(tokens, dtype=bool)

    method = cfg.method
    if method == "sample_top1" and cfg.first_layer_soft and layer_index == 0:
        method = "soft"

    if method == "soft":
        y = None
        for e, (w1, w2, w3) in enumerate(layer.experts):
            ff_evals[e] += tokens
            gate = ad.narrow(full, 1, e, 1)
            contrib = ad.mul(swiglu(x, w1, w2, w3), gate)
            y = contrib if y is None else ad.add(y, contrib)
        indices = np.tile(np.arange(n), (tokens, 1))
        gates = full
        u = ad.reduce_mean(full, axis=0)

    elif method == "topk":
        indices = np.argsort(-logits.data, axis=1, kind="stable")[:, : cfg.k]
        gates = ad.softmax(ad.take_along(logits, indices, axis=-1), axis=-1)
        y = _dispatch_sparse(x, layer, indices, gates, ff_evals)
        u = ad.reduce_mean(ad.scatter_cols(n, indices, gates), axis=0)

    elif method == "switch":
        choice, _, routed, _ = route_switch(logits.data, cfg.capacity_factor)
        indices = choice[:, None]
        w = ad.take_along(full, indices, axis=-1)  # [tokens, 1] full-softmax prob
        gates = ad.mul(w, Tensor(routed[:, None].astype(x.dtype), dtype=x.dtype))
        kept = indices.copy()
        kept[~routed, 0] = -1  # never matches an expert id
        y = _dispatch_sparse(x, layer, kept, gates, ff_evals)
        u = ad.reduce_mean(ad.scatter_cols(n, indices, gates), axis=0)

    elif method == "sample_top1":
        if rng is None:
            raise ContractError("sample_top1 routing needs an rng handle")
        if mode == "train":
            state = gumbel or GumbelState(0, cfg.gumbel_rate)
            tau = state.temperature
            noise = gumbel_noise(rng, (tokens, n), x.dtype)
            y_soft = ad.softmax(ad.scale(ad.add(logits, Tensor(noise, dtype=x.dtype)), 1.0 / tau), axis=-1)
            indices = y_soft.data.argmax(axis=1)[:, None]
            gates = ad.take_along(y_soft, indices, axis=-1)
        elif mode == "infer":
            cdf = np.cumsum(full.data, axis=1)
            draw = rng.random((tokens, 1))
            indices = (draw > cdf[:, :-1]).sum(axis=1, keepdims=True) if n > 1 else np.zeros((tokens, 1), dtype=np.int64)
            indices = indices.astype(np.int64)
            gates = Tensor(np.ones((tokens, 1)), dtype=x.dtype)
        else:
            raise ContractError(f"mode must be train or infer, got {mode!r}")
        y = _dispatch_sparse(x, layer, indices, gates, ff_evals)
        u = ad.reduce_mean(ad.scatter_cols(n, indices, gates), axis=0)

    else:  # pragma: no cover - RouterConfig already validated
        raise ContractError(f"unknown routing method {method!r}")

    if cfg.dispatch_fraction_u:
        counts = np.bincount(indices[routed].reshape(-1), minlength=n).astype(x.dtype)
        u = Tensor(counts / tokens, dtype=x.dtype)

    record = RoutingRecord(
        layer_index=layer_index,
        method=method,
        indices=np.asarray(indices, dtype=np.int64),
        weights=gates.data.copy(),
        probs=full.data.copy(),
        routed=routed,
    )
    stats = BalanceStats(u=u, p=p, ff_evals=ff_evals, n_tokens=tokens)
    return y, record, stats


def load_balance_loss(stats: BalanceStats, alpha: float) -> Tensor:
    """One layer's auxiliary loss alpha * N * sum_i(u_i * p_i).

    Uniform u = p = 1/N gives exactly alpha (N a power of two makes every
    intermediate a power-of-two scaling, so the identity is bit-exact).
    """
    n = stats.u.shape[0]
    return ad.scale(ad.reduce_sum(ad.mul(stats.u, stats.p)), alpha * n)


def total_balance_loss(stats_list: Sequence[BalanceStats], alpha: float) -> Tensor:
    """Sum of the per-layer balance losses, the term added to the NLL."""
    if not stats_list:
        raise ContractError("no balance statistics collected")
    total = None
    for stats in stats_list:
        term = load_balance_loss(stats, alpha)
        total = term if total is None else ad.add(total, term)
    return total


def utilization_from_records(records: Sequence[RoutingRecord], n_experts: int) -> np.ndarray:
    """[n_layers, N] share of routed token-slots each expert handled.

    The denominator is tokens x slots-per-token accumulated over all records
    of a layer, so a layer's row sums to 1 minus its dropped-token fraction.
    """
    if not records:
        raise ContractError("no routing records collected")
    layers = sorted({r.layer_index for r in records})
    row = {li: i for i, li in enumerate(layers)}
    counts = np.zeros((len(layers), n_experts), dtype=np.float64)
    denom = np.zeros(len(layers), dtype=np.float64)
    for rec in records:
        i = row[rec.layer_index]
        kept = rec.indices[rec.routed]
        counts[i] += np.bincount(kept.reshape(-1), minlength=n_experts)
        denom[i] += rec.indices.shape[0] * rec.indices.shape[1]
    return counts / denom[:, None]


def count_moe_experts(params: dict[str, Tensor]) -> int:
    """Number of experts encoded in a mixture parameter dict."""
    n = 0
    while f"layers.0.moe.experts.{n}.w1.weight" in params:
        n += 1
    if n == 0:
        raise ContractError("parameter dict holds no mixture experts")
    return n


class MoEModel:
    """Decoder whose FF sublayers are mixture layers sharing one backbone.

    Parameter names extend the dense convention: each layer i carries
    ``layers.i.moe.router.weight`` plus ``layers.i.moe.experts.e.w{1,2,3}.weight``
    for e in [0, N); everything outside the FF keeps its dense name.
    """

    kind = "moe"

    def __init__(
        self,
        config: ModelConfig,
        router_cfg: RouterConfig,
        params: dict[str, Tensor],
        provenance: list[str] | None = None,
    ):
        self.config = config
        self.router_cfg = router_cfg
        self.params = params
        self.n_experts = count_moe_experts(params)
        self.provenance = list(provenance) if provenance else None
        if provenance and len(provenance) != self.n_experts:
            raise ContractError(
                f"provenance lists {len(provenance)} names for {self.n_experts} experts"
            )
        if router_cfg.k > self.n_experts:
            raise ContractError(f"k={router_cfg.k} exceeds expert count {self.n_experts}")

    def layer_params(self, i: int) -> MoELayerParams:
        p = self.params
        experts = [
            (
                p[f"layers.{i}.moe.experts.{e}.w1.weight"],
                p[f"layers.{i}.moe.experts.{e}.w2.weight"],
                p[f"layers.{i}.moe.experts.{e}.w3.weight"],
            )
            for e in range(self.n_experts)
        ]
        return MoELayerParams(experts, p[f"layers.{i}.moe.router.weight"])

    def forward(
        self,
        tokens: np.ndarray,
        mode: str = "train",
        step: int = 0,
        rng: np.random.Generator | None = None,
        records: list | None = None,
        stats: list | None = None,
    ) -> Tensor:
        gumbel = GumbelState(step, self.router_cfg.gumbel_rate)

        def ff(i: int, x: Tensor) -> Tensor:
            b, t, d = x.shape
            y, rec, st = moe_forward(
                ad.reshape(x, (b * t, d)),
                self.layer_params(i),
                self.router_cfg,
                i,
                mode=mode,
                gumbel=gumbel,
                rng=rng,
            )
            if records is not None:
                records.append(rec)
            if stats is not None:
                stats.append(st)
            return ad.reshape(y, (b, t, d))

        return run_backbone(self.config, self.params, tokens, ff)

    def lm_loss(
        self,
        batch: np.ndarray,
        mode: str = "train",
        step: int = 0,
        rng: np.random.Generator | None = None,
        records: list | None = None,
    ) -> Tensor:
        inputs, targets = shift_targets(batch)
        logits = self.forward(inputs, mode=mode, step=step, rng=rng, records=records)
        return sequence_loss(logits, targets)

    def loss(
        self,
        batch: np.ndarray,
        mode: str = "train",
        step: int = 0,
        rng: np.random.Generator | None = None,
        records: list | None = None,
    ) -> tuple[Tensor, dict]:
        """Total objective: next-byte NLL plus the summed balance losses."""
        inputs, targets = shift_targets(batch)
        stats: list[BalanceStats] = []
        logits = self.forward(inputs, mode=mode, step=step, rng=rng, records=records, stats=stats)
        lm = sequence_loss(logits, targets)
        if self.router_cfg.alpha > 0:
            lb = total_balance_loss(stats, self.router_cfg.alpha)
            total = ad.add(lm, lb)
            lb_val = float(lb.data)
        else:
            total, lb_val = lm, 0.0
        return total, {"lm_loss": float(lm.data), "lb_loss": lb_val}

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())
