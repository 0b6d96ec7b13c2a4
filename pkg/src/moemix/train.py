"""Optimization and artifact plumbing.

AdamW with decoupled weight decay, a warmup-plus-cosine learning-rate
schedule with exact boundary values, the two training drivers (single-domain
expert stage, mixed-stream mixture finetune) plus the data-matched dense
baseline, and a checksummed binary checkpoint format.

Every driver is a pure function of its inputs and seeds: two runs with the
same arguments produce bit-identical checkpoints, which is what makes the
expert stage embarrassingly parallel (jobs share no mutable state) and every
experiment rerunnable.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import (
    DEFAULT_CORPUS_BYTES,
    CorpusSpec,
    MixtureSpec,
    sample_batch,
    single_corpus_mixture,
)
from .errors import CheckpointError, ContractError, NumericError
from .merge import FreezeMask, build_freeze_mask
from .model import DenseModel, ModelConfig
from .moe import MoEModel, RouterConfig, utilization_from_records

CHECKPOINT_MAGIC = b"BTXF"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# learning-rate schedule


@dataclass(frozen=True)
class Schedule:
    """Linear warmup to the peak, cosine decay to a floor fraction of it."""

    total_steps: int
    peak_lr: float = 1e-4
    warmup_steps: int = 100
    floor_fraction: float = 0.1

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ContractError(f"total_steps must be positive, got {self.total_steps}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ContractError(
                f"warmup_steps must lie in [0, total_steps), got {self.warmup_steps}"
            )
        if not 0.0 < self.floor_fraction < 1.0:
            raise ContractError(f"floor_fraction must be in (0, 1), got {self.floor_fraction}")
        if self.peak_lr <= 0:
            raise ContractError(f"peak_lr must be positive, got {self.peak_lr}")


def lr_at(schedule: Schedule, step: int) -> float:
    """Learning rate at a step in [0, total].

    Exact identities: lr_at(warmup) == peak_lr and lr_at(total) ==
    floor_fraction * peak_lr, with no floating-point slack (cos(0) and
    cos(pi) are exact, as is floor + (1 - floor)).
    """
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.peak_lr * (step / schedule.warmup_steps)
    span = schedule.total_steps - schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / span
    floor = schedule.floor_fraction
    return schedule.peak_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Bias-corrected Adam with decoupled weight decay and global-norm
    gradient clipping. Frozen parameter groups are never touched, moments
    included."""

    def __init__(
        self,
        params: dict[str, Tensor],
        beta1: float = 0.9,
        beta2: float = 0.95,
        eps: float = 1e-8,
        weight_decay: float = 0.1,
        clip_norm: float | None = 1.0,
        freeze_mask: FreezeMask | None = None,
    ):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.freeze_mask = freeze_mask if freeze_mask is not None else FreezeMask({})
        self.step_count = 0
        names = [n for n in params if self.freeze_mask.is_trainable(n)]
        self.m = {n: np.zeros_like(params[n].data) for n in names}
        self.v = {n: np.zeros_like(params[n].data) for n in names}

    def _prepare(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            g = grads.get(name)
            if g is None:  # parameter unused this step (e.g. idle expert)
                g = np.zeros_like(self.params[name].data)
            elif not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            out[name] = g
        return out

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        grads = self._prepare(grads)
        if self.clip_norm is not None:
            sq = math.fsum(float(np.square(g, dtype=np.float64).sum()) for g in grads.values())
            norm = math.sqrt(sq)
            if norm > self.clip_norm:
                factor = self.clip_norm / norm
                grads = {n: g * factor for n, g in grads.items()}
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, g in grads.items():
            p, m, v = self.params[name], self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def to_state(self) -> dict:
        return {"t": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        for name in self.m:
            if name not in state["m"]:
                raise CheckpointError(f"optimizer state missing moments for {name!r}")
            self.m[name] = np.array(state["m"][name], dtype=self.m[name].dtype)
            self.v[name] = np.array(state["v"][name], dtype=self.v[name].dtype)
        self.step_count = int(state["t"])


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """On-disk model state: config, flat f32 parameter table, mixture
    metadata when present, and optionally the optimizer moments."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    kind: str = "dense"
    router_cfg: RouterConfig | None = None
    provenance: list[str] | None = None
    step: int = 0
    optim: dict | None = None
    extra: dict = field(default_factory=dict)


def checkpoint_from_model(model, step: int = 0, optim: AdamW | None = None,
                          extra: dict | None = None) -> Checkpoint:
    return Checkpoint(
        config=model.config,
        params={n: np.array(t.data, dtype=np.float32) for n, t in model.params.items()},
        kind=model.kind,
        router_cfg=model.router_cfg if model.kind == "moe" else None,
        provenance=model.provenance if model.kind == "moe" else None,
        step=step,
        optim=optim.to_state() if optim is not None else None,
        extra=dict(extra or {}),
    )


def model_from_checkpoint(ckpt: Checkpoint):
    # copy so training a model never mutates the checkpoint it came from
    params = {
        n: Tensor(np.array(a, dtype=ad.default_dtype())) for n, a in ckpt.params.items()
    }
    if ckpt.kind == "moe":
        if ckpt.router_cfg is None:
            raise CheckpointError("mixture checkpoint lacks router metadata")
        return MoEModel(ckpt.config, ckpt.router_cfg, params, provenance=ckpt.provenance)
    if ckpt.kind != "dense":
        raise CheckpointError(f"unknown model kind {ckpt.kind!r}")
    return DenseModel(ckpt.config, params)


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb
    head += struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
    return head + data.tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "config": ckpt.config.to_dict(),
        "kind": ckpt.kind,
        "router": ckpt.router_cfg.to_dict() if ckpt.router_cfg else None,
        "provenance": ckpt.provenance,
        "step": ckpt.step,
        "optim_step": None if ckpt.optim is None else int(ckpt.optim["t"]),
        "extra": ckpt.extra,
    }
    tensors = dict(ckpt.params)
    if ckpt.optim is not None:
        for name, arr in ckpt.optim["m"].items():
            tensors[f"optim.m.{name}"] = arr
        for name, arr in ckpt.optim["v"].items():
            tensors[f"optim.v.{name}"] = arr

    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf += struct.pack("<I", len(hb)) + hb
    buf += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        buf += _pack_tensor(name, tensors[name])
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.off = raw, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError("checkpoint truncated")
        chunk = self.raw[self.off : self.off + n]
        self.off += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    stored = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) != stored:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    r = _Reader(raw[:-4])
    r.take(4)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(r.take(r.u32()).decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
    if r.off != len(r.raw):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")

    params, m, v = {}, {}, {}
    for name, arr in tensors.items():
        if name.startswith("optim.m."):
            m[name[len("optim.m."):]] = arr
        elif name.startswith("optim.v."):
            v[name[len("optim.v."):]] = arr
        else:
            params[name] = arr
    optim = None
    if header["optim_step"] is not None:
        optim = {"t": int(header["optim_step"]), "m": m, "v": v}
    elif m or v:
        raise CheckpointError(f"{path}: orphaned optimizer moments")
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        params=params,
        kind=header["kind"],
        router_cfg=RouterConfig.from_dict(header["router"]) if header["router"] else None,
        provenance=header["provenance"],
        step=int(header["step"]),
        optim=optim,
        extra=header.get("extra", {}),
    )


# ---------------------------------------------------------------------------
# training drivers


@dataclass
class TrainConfig:
    """Hyperparameters shared by every training stage."""

    steps: int
    batch_size: int = 16
    seq_len: int = 256
    peak_lr: float = 1e-4
    warmup_steps: int = 100
    floor_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    data_seed: int = 0
    routing_seed: int = 0
    corpus_bytes: int = DEFAULT_CORPUS_BYTES
    log_every: int = 50

    def __post_init__(self):
        if self.steps <= 0:
            raise ContractError(f"steps must be positive, got {self.steps}")
        if self.batch_size <= 0 or self.seq_len < 2:
            raise ContractError("batch_size must be positive and seq_len at least 2")

    def schedule(self) -> Schedule:
        warmup = min(self.warmup_steps, self.steps - 1)
        return Schedule(
            total_steps=self.steps,
            peak_lr=self.peak_lr,
            warmup_steps=warmup,
            floor_fraction=self.floor_fraction,
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


LOG_FIELDS = ("step", "lr", "lm_loss", "lb_loss")


def write_log_csv(path, rows: list[dict], n_experts: int = 0) -> None:
    fields = list(LOG_FIELDS) + [f"util_{e}" for e in range(n_experts)]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})


def token_budget(steps: int, cfg: TrainConfig) -> int:
    return steps * cfg.batch_size * cfg.seq_len


def _grads_and_reset(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    grads = {}
    for name, t in params.items():
        if t.grad is not None:
            grads[name] = t.grad
        t.zero_grad()
    return grads


def _run_stage(
    model,
    mixture: MixtureSpec,
    cfg: TrainConfig,
    freeze_mask: FreezeMask | None = None,
) -> list[dict]:
    """Shared inner loop: sample, forward, backward, clip, step, log."""
    schedule = cfg.schedule()
    opt = AdamW(
        model.params,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
        clip_norm=cfg.clip_norm,
        freeze_mask=freeze_mask,
    )
    data_rng = np.random.default_rng(cfg.data_seed)
    route_rng = np.random.default_rng(cfg.routing_seed)
    rows: list[dict] = []
    n_experts = model.n_experts if model.kind == "moe" else 0
    for step in range(1, cfg.steps + 1):
        batch = sample_batch(mixture, cfg.batch_size, cfg.seq_len, data_rng)
        records: list = []
        tape = Tape()
        with tape:
            if model.kind == "moe":
                loss, parts = model.loss(
                    batch.tokens, mode="train", step=step - 1, rng=route_rng, records=records
                )
            else:
                loss, parts = model.loss(batch.tokens)
        if not math.isfinite(parts["lm_loss"]):
            raise NumericError(f"non-finite loss at step {step}")
        tape.backward(loss)
        grads = _grads_and_reset(model.params)
        opt.step(grads, lr_at(schedule, step))
        if step % cfg.log_every == 0 or step == cfg.steps or step == 1:
            row = {
                "step": step,
                "lr": lr_at(schedule, step),
                "lm_loss": parts["lm_loss"],
                "lb_loss": parts["lb_loss"],
            }
            if records:
                util = utilization_from_records(records, n_experts).mean(axis=0)
                row.update({f"util_{e}": float(u) for e, u in enumerate(util)})
            rows.append(row)
    return rows


def train_expert(
    seed_ckpt: Checkpoint,
    corpus: CorpusSpec,
    cfg: TrainConfig,
    log_path=None,
) -> Checkpoint:
    """Continue the seed on one domain. Independent of any sibling job."""
    model = model_from_checkpoint(seed_ckpt)
    if model.kind != "dense":
        raise CheckpointError("expert training starts from a dense checkpoint")
    mixture = single_corpus_mixture(corpus, corpus_bytes=cfg.corpus_bytes)
    rows = _run_stage(model, mixture, cfg)
    if log_path is not None:
        write_log_csv(log_path, rows)
    return checkpoint_from_model(
        model, step=seed_ckpt.step + cfg.steps, extra={"domain": corpus.name}
    )


def finetune_moe(
    moe_ckpt: Checkpoint,
    mixture: MixtureSpec,
    cfg: TrainConfig,
    freeze_ff: bool = False,
    log_path=None,
) -> Checkpoint:
    """Train routers plus unfrozen weights on the combined stream.

    The load-balance term rides on the LM loss inside the model; the sampled
    router's temperature anneals with the step counter. A mixture that shares
    no corpus names with the expert provenance is suspicious but not fatal.
    """
    if moe_ckpt.kind != "moe":
        raise CheckpointError("finetune_moe needs a mixture checkpoint")
    model = model_from_checkpoint(moe_ckpt)
    # replicated-seed mixtures carry no domain names, so nothing to mismatch
    domain_origins = set(model.provenance or []) - {"seed", "generalist"}
    if domain_origins:
        mixture_names = {spec.name for spec, _ in mixture.components}
        if not (mixture_names & domain_origins):
            warnings.warn(
                "finetune mixture shares no corpus names with expert provenance "
                f"({sorted(mixture_names)} vs {sorted(domain_origins)})",
                stacklevel=2,
            )
    mask = build_freeze_mask(model, freeze_ff=freeze_ff)
    rows = _run_stage(model, mixture, cfg, freeze_mask=mask)
    if log_path is not None:
        write_log_csv(log_path, rows, n_experts=model.n_experts)
    return checkpoint_from_model(model, step=moe_ckpt.step + cfg.steps)


def train_dense(
    ckpt: Checkpoint,
    mixture: MixtureSpec,
    cfg: TrainConfig,
    log_path=None,
    extra: dict | None = None,
) -> Checkpoint:
    """One dense training phase on a mixed stream (seed pretraining etc.)."""
    model = model_from_checkpoint(ckpt)
    if model.kind != "dense":
        raise CheckpointError("dense training starts from a dense checkpoint")
    rows = _run_stage(model, mixture, cfg)
    if log_path is not None:
        write_log_csv(log_path, rows)
    return checkpoint_from_model(model, step=ckpt.step + cfg.steps, extra=dict(extra or {}))


def train_dense_continue(
    seed_ckpt: Checkpoint,
    phase1_specs: list[CorpusSpec],
    phase2_mixture: MixtureSpec,
    phase1_steps: int,
    phase2_steps: int,
    cfg: TrainConfig,
    log_path=None,
) -> Checkpoint:
    """Data-matched single-model baseline: phase 1 consumes the expert
    domains (uniformly mixed, same total token budget as all expert jobs
    combined), phase 2 consumes the finetune mixture."""
    model = model_from_checkpoint(seed_ckpt)
    if model.kind != "dense":
        raise CheckpointError("dense baseline starts from a dense checkpoint")
    phase1 = MixtureSpec([(s, 1.0) for s in phase1_specs], corpus_bytes=cfg.corpus_bytes)
    rows = _run_stage(model, phase1, replace(cfg, steps=phase1_steps))
    phase2_rows = _run_stage(
        model,
        phase2_mixture,
        replace(cfg, steps=phase2_steps, data_seed=cfg.data_seed + 1),
    )
    for row in phase2_rows:
        row["step"] += phase1_steps
    rows.extend(phase2_rows)
    if log_path is not None:
        write_log_csv(log_path, rows)
    total = phase1_steps + phase2_steps
    return checkpoint_from_model(model, step=seed_ckpt.step + total)
