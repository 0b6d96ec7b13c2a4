"""Checkpoint surgery: branch, average, assemble mixtures, upcycle, split,
blend, freeze.

All operations work on flat name->Tensor parameter dicts. Dense feedforward
entries live under ``layers.i.ff.*``; a mixture stores its expert banks under
``layers.i.moe.experts.e.*`` plus one ``layers.i.moe.router.weight`` per
layer. Everything else (embeddings, attention, norms, head) keeps identical
names across dense and mixture models, which is what makes averaging and
re-assembly straightforward dictionary arithmetic.

The only parameters a mixture introduces beyond its sources are the router
matrices; every surgery op below preserves that accounting, and the tests
audit it by exact element counts.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, default_dtype
from .errors import SurgeryError
from .model import ModelConfig
from .moe import MoEModel, RouterConfig

FF_MARKER = ".ff."


def is_ff_name(name: str) -> bool:
    return FF_MARKER in name


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), dtype=v.dtype) for k, v in params.items()}


def params_equal(a: dict[str, Tensor], b: dict[str, Tensor]) -> bool:
    return a.keys() == b.keys() and all(
        np.array_equal(a[k].data, b[k].data) for k in a
    )


def _check_compatible(params_list: list[dict[str, Tensor]]) -> None:
    if not params_list:
        raise SurgeryError("empty parameter list")
    ref = params_list[0]
    for i, p in enumerate(params_list[1:], 1):
        if p.keys() != ref.keys():
            raise SurgeryError(f"model {i} parameter names differ from model 0")
        for k in ref:
            if p[k].shape != ref[k].shape:
                raise SurgeryError(f"model {i} shape mismatch at {k}: {p[k].shape} vs {ref[k].shape}")


def branch(seed: dict[str, Tensor], n: int) -> list[dict[str, Tensor]]:
    """n independent bit-identical copies of the seed parameters."""
    if n < 1:
        raise SurgeryError(f"branch count must be >= 1, got {n}")
    return [clone_params(seed) for _ in range(n)]


def average_params(
    params_list: list[dict[str, Tensor]], scope: str = "all"
) -> dict[str, Tensor]:
    """Entrywise arithmetic mean over the list, accumulated in 64-bit.

    scope "all" averages every entry; scope "non_ff" averages only entries
    outside the feedforward triples and copies FF entries from the first
    model unchanged.
    """
    if scope not in ("all", "non_ff"):
        raise SurgeryError(f"scope must be 'all' or 'non_ff', got {scope!r}")
    _check_compatible(params_list)
    out: dict[str, Tensor] = {}
    for name in params_list[0]:
        if scope == "non_ff" and is_ff_name(name):
            out[name] = Tensor(params_list[0][name].data.copy())
            continue
        stack = np.stack([p[name].data for p in params_list]).astype(np.float64)
        out[name] = Tensor(stack.mean(axis=0).astype(default_dtype()))
    return out


def _init_routers(config: ModelConfig, n_experts: int, rng_seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(rng_seed)
    return {
        f"layers.{i}.moe.router.weight": Tensor(
            rng.normal(0.0, config.init_std, size=(config.d_model, n_experts))
        )
        for i in range(config.n_layers)
    }


def _install_expert(params: dict[str, Tensor], layer: int, slot: int,
                    w1: np.ndarray, w2: np.ndarray, w3: np.ndarray) -> None:
    base = f"layers.{layer}.moe.experts.{slot}"
    params[f"{base}.w1.weight"] = Tensor(np.ascontiguousarray(w1))
    params[f"{base}.w2.weight"] = Tensor(np.ascontiguousarray(w2))
    params[f"{base}.w3.weight"] = Tensor(np.ascontiguousarray(w3))


def mix_to_moe(
    experts: list[dict[str, Tensor]],
    router_cfg: RouterConfig,
    rng_seed: int,
    config: ModelConfig,
    names: list[str] | None = None,
    generalist: dict[str, Tensor] | None = None,
    generalist_in_average: bool = True,
) -> MoEModel:
    """Assemble a mixture from trained branches.

    Per layer, source i's FF triple becomes expert i in input order, with the
    generalist (if given) appended last. Non-FF parameters are averaged over
    the same sources (``generalist_in_average=False`` leaves the generalist's
    non-FF weights out of that mean). Routers are fresh Gaussian(0, init_std)
    draws from ``rng_seed`` — the only new parameters.
    """
    if len(experts) + (generalist is not None) < 2:
        raise SurgeryError("need at least 2 source models to build a mixture")
    sources = list(experts) + ([generalist] if generalist is not None else [])
    _check_compatible(sources)
    if names is None:
        names = [f"expert{i}" for i in range(len(experts))]
    if len(names) != len(experts):
        raise SurgeryError(f"{len(names)} names for {len(experts)} experts")
    provenance = list(names) + (["generalist"] if generalist is not None else [])

    avg_over = sources if (generalist_in_average or generalist is None) else experts
    params = {
        k: v
        for k, v in average_params(avg_over, scope="all").items()
        if not is_ff_name(k)
    }
    for i in range(config.n_layers):
        for e, src in enumerate(sources):
            _install_expert(
                params, i, e,
                src[f"layers.{i}.ff.w1.weight"].data.copy(),
                src[f"layers.{i}.ff.w2.weight"].data.copy(),
                src[f"layers.{i}.ff.w3.weight"].data.copy(),
            )
    params.update(_init_routers(config, len(sources), rng_seed))
    return MoEModel(config, router_cfg, params, provenance=provenance)


def upcycle(
    seed: dict[str, Tensor],
    n_experts: int,
    router_cfg: RouterConfig,
    rng_seed: int,
    config: ModelConfig,
) -> MoEModel:
    """Mixture initialized from one dense model: N identical FF copies, the
    seed's non-FF weights verbatim, and a random router."""
    if n_experts < 2:
        raise SurgeryError(f"upcycling needs >= 2 experts, got {n_experts}")
    params = {k: Tensor(v.data.copy()) for k, v in seed.items() if not is_ff_name(k)}
    for i in range(config.n_layers):
        for e in range(n_experts):
            _install_expert(
                params, i, e,
                seed[f"layers.{i}.ff.w1.weight"].data.copy(),
                seed[f"layers.{i}.ff.w2.weight"].data.copy(),
                seed[f"layers.{i}.ff.w3.weight"].data.copy(),
            )
    params.update(_init_routers(config, n_experts, rng_seed))
    return MoEModel(config, router_cfg, params, provenance=["seed"] * n_experts)


def split_experts(moe: MoEModel, c: int, rng_seed: int) -> MoEModel:
    """Partition each expert's hidden units into c contiguous chunks.

    Chunk j of expert i becomes new expert i*c + j, holding the matching
    column slices of w1/w3 and row slice of w2. Summing the c sibling chunk
    outputs reproduces the unsplit expert exactly (the hidden sum just gets
    reassociated). The router is rebuilt at the new arity from ``rng_seed``.
    """
    f = moe.config.d_ff
    if c < 1 or f % c:
        raise SurgeryError(f"d_ff={f} not divisible into {c} chunks")
    w = f // c
    new_cfg = moe.config.scaled(d_ff=w)
    params = {
        k: Tensor(v.data.copy())
        for k, v in moe.params.items()
        if ".moe.experts." not in k and ".moe.router." not in k
    }
    for i in range(moe.config.n_layers):
        for e in range(moe.n_experts):
            base = f"layers.{i}.moe.experts.{e}"
            w1 = moe.params[f"{base}.w1.weight"].data
            w2 = moe.params[f"{base}.w2.weight"].data
            w3 = moe.params[f"{base}.w3.weight"].data
            for j in range(c):
                cols = slice(j * w, (j + 1) * w)
                _install_expert(params, i, e * c + j, w1[:, cols], w2[cols, :], w3[:, cols])
    params.update(_init_routers(new_cfg, moe.n_experts * c, rng_seed))
    provenance = [f"{name}/chunk{j}" for name in (moe.provenance or []) for j in range(c)] or None
    return MoEModel(new_cfg, moe.router_cfg, params, provenance=provenance)


def blend_experts(
    experts: list[dict[str, Tensor]],
    router_cfg: RouterConfig,
    rng_seed: int,
    config: ModelConfig,
    names: list[str] | None = None,
) -> MoEModel:
    """Mixture whose every expert holds one chunk from every domain.

    Each domain's FF is chunked as in split_experts with c = N. Blended
    expert n keeps every chunk in its home hidden-unit range but sources
    chunk position j from domain (j + n) mod N, so each expert carries
    exactly one chunk of every domain and identical sources reassemble to
    the common FF bit for bit. Non-FF weights are averaged.
    """
    n = len(experts)
    if n < 2:
        raise SurgeryError(f"blending needs >= 2 experts, got {n}")
    f = config.d_ff
    if f % n:
        raise SurgeryError(f"d_ff={f} not divisible by expert count {n}")
    _check_compatible(experts)
    w = f // n
    if names is None:
        names = [f"expert{i}" for i in range(n)]
    params = {
        k: v
        for k, v in average_params(experts, scope="all").items()
        if not is_ff_name(k)
    }
    for i in range(config.n_layers):
        w1s = [experts[d][f"layers.{i}.ff.w1.weight"].data for d in range(n)]
        w2s = [experts[d][f"layers.{i}.ff.w2.weight"].data for d in range(n)]
        w3s = [experts[d][f"layers.{i}.ff.w3.weight"].data for d in range(n)]
        for slot in range(n):
            chunks = [(slice(j * w, (j + 1) * w), (j + slot) % n) for j in range(n)]
            _install_expert(
                params, i, slot,
                np.concatenate([w1s[d][:, cols] for cols, d in chunks], axis=1),
                np.concatenate([w2s[d][cols, :] for cols, d in chunks], axis=0),
                np.concatenate([w3s[d][:, cols] for cols, d in chunks], axis=1),
            )
    params.update(_init_routers(config, n, rng_seed))
    provenance = [f"blend{slot}({'+'.join(names)})" for slot in range(n)]
    return MoEModel(config, router_cfg, params, provenance=provenance)


class FreezeMask:
    """Per-parameter trainability; router matrices can never be frozen."""

    def __init__(self, trainable: dict[str, bool]):
        for name, flag in trainable.items():
            if ".moe.router." in name and not flag:
                raise SurgeryError(f"router {name} must stay trainable")
        self._trainable = dict(trainable)

    def is_trainable(self, name: str) -> bool:
        return self._trainable.get(name, True)

    def frozen_names(self) -> list[str]:
        return sorted(n for n, flag in self._trainable.items() if not flag)


def build_freeze_mask(moe: MoEModel, freeze_ff: bool = False) -> FreezeMask:
    """Trainability mask over a mixture's parameters: with ``freeze_ff`` the
    expert FF banks stay fixed while routers and shared weights train."""
    return FreezeMask(
        {name: not (freeze_ff and ".moe.experts." in name) for name in moe.params}
    )
