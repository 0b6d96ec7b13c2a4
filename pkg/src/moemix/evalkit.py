"""Held-out evaluation and routing analytics.

Teacher-forced per-domain NLL/perplexity reports, routing utilization and
gate-probability histograms per layer and domain, per-token routing exports
for external rendering, and side-by-side comparison tables. Everything here
is a pure function of (model, holdout stream, seed): re-running writes
byte-identical JSON and CSV artifacts.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Corpus, heldout_batches
from .errors import AlignmentError, ContractError
from .moe import RoutingRecord

DEAD_EXPERT_THRESHOLD = 0.01
HISTOGRAM_BINS = 20


def config_digest(model) -> str:
    """Short stable fingerprint of a model's architecture and routing setup."""
    payload = {"config": model.config.to_dict(), "kind": model.kind}
    if model.kind == "moe":
        payload["router"] = model.router_cfg.to_dict()
        payload["n_experts"] = model.n_experts
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# perplexity reports


@dataclass
class EvalReport:
    """Per-domain held-out NLL and perplexity for one model."""

    model_name: str
    config_digest: str
    domains: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        for name, entry in self.domains.items():
            nll = entry["nll"]
            if nll < 0:
                raise ContractError(f"negative NLL for domain {name!r}")
            if not math.isclose(entry["ppl"], math.exp(nll), rel_tol=1e-9):
                raise ContractError(f"perplexity of {name!r} is not exp(NLL)")

    def nll(self, domain: str) -> float:
        return self.domains[domain]["nll"]

    def ppl(self, domain: str) -> float:
        return self.domains[domain]["ppl"]

    @property
    def domain_names(self) -> list[str]:
        return sorted(self.domains)

    def mean_nll(self) -> float:
        return sum(self.nll(d) for d in self.domain_names) / len(self.domains)

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "config_digest": self.config_digest,
            "domains": self.domains,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            model_name=d["model_name"],
            config_digest=d["config_digest"],
            domains=d["domains"],
        )


def _batch_nll(model, batch: np.ndarray, rng) -> float:
    if model.kind == "moe":
        return float(model.lm_loss(batch, mode="infer", rng=rng).data)
    return float(model.lm_loss(batch).data)


def eval_perplexity(
    model,
    holdouts: dict[str, Corpus],
    model_name: str = "model",
    batch_size: int = 8,
    seq_len: int | None = None,
    limit: int | None = None,
    eval_seed: int = 0,
) -> EvalReport:
    """Teacher-forced NLL over each domain's deterministic holdout stream.

    A window of T tokens scores T-1 predictions; domain NLL is the
    token-weighted mean over all its windows. Sampled routing uses a fresh
    seeded generator per domain, so identical models yield identical reports.
    """
    if not holdouts:
        raise ContractError("no holdout corpora supplied")
    t = seq_len if seq_len is not None else model.config.max_seq_len + 1
    domains = {}
    for name in sorted(holdouts):
        rng = np.random.default_rng(eval_seed)
        total = 0.0
        tokens = 0
        for batch in heldout_batches(holdouts[name], batch_size, t, limit=limit):
            scored = batch.shape[0] * (batch.shape[1] - 1)
            total += _batch_nll(model, batch, rng) * scored
            tokens += scored
        nll = total / tokens
        domains[name] = {"nll": nll, "ppl": math.exp(nll), "tokens": tokens}
    return EvalReport(model_name=model_name, config_digest=config_digest(model), domains=domains)


def save_report(path, report: EvalReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# routing analytics


@dataclass
class RoutingStats:
    """Routing behaviour of one mixture model over domain holdout streams.

    ``utilization[l, d, e]`` is the share of layer l's routed selections on
    domain d that went to expert e (selection-counted for sparse methods,
    mean router probability for soft, where selection is degenerate); the
    denominator equals tokens x k whenever nothing is dropped.
    ``gate_mass`` is the gate-weight-weighted variant. ``histogram[l, e]``
    bins the full router softmax over [0, 1] across all domains.
    """

    domains: list[str]
    n_layers: int
    n_experts: int
    utilization: np.ndarray  # [L, D, N]
    gate_mass: np.ndarray  # [L, D, N]
    histogram: np.ndarray  # [L, N, HISTOGRAM_BINS] int64
    tokens: np.ndarray  # [L, D] int64
    dead_threshold: float = DEAD_EXPERT_THRESHOLD

    @property
    def dead_flags(self) -> np.ndarray:
        return self.utilization < self.dead_threshold

    def min_utilization_per_layer(self) -> np.ndarray:
        """Worst-served expert per layer, pooled over domains by token count."""
        weights = self.tokens[:, :, None] / self.tokens.sum(axis=1)[:, None, None]
        pooled = (self.utilization * weights).sum(axis=1)
        return pooled.min(axis=1)


def collect_routing(
    model,
    holdouts: dict[str, Corpus],
    batch_size: int = 8,
    seq_len: int | None = None,
    limit: int | None = None,
    eval_seed: int = 0,
) -> tuple[RoutingStats, list[dict]]:
    """Routing statistics plus the flat per-token record export.

    Per-token rows carry (layer, token_position, expert_id, gate_weight,
    softmax_prob, task_tag) with token_position indexing the domain's
    flattened holdout stream; dropped tokens appear with zero gate weight.
    """
    if model.kind != "moe":
        raise ContractError("routing analytics need a mixture model")
    t = seq_len if seq_len is not None else model.config.max_seq_len + 1
    domains = sorted(holdouts)
    L, N = model.config.n_layers, model.n_experts
    bins = np.linspace(0.0, 1.0, HISTOGRAM_BINS + 1)

    selections = np.zeros((L, len(domains), N), dtype=np.float64)
    routed_total = np.zeros((L, len(domains)), dtype=np.float64)
    gate_sum = np.zeros((L, len(domains), N), dtype=np.float64)
    prob_sum = np.zeros((L, len(domains), N), dtype=np.float64)
    histogram = np.zeros((L, N, HISTOGRAM_BINS), dtype=np.int64)
    tokens = np.zeros((L, len(domains)), dtype=np.int64)
    soft_layer = np.zeros(L, dtype=bool)
    per_token: list[dict] = []

    for d, name in enumerate(domains):
        rng = np.random.default_rng(eval_seed)
        position = 0
        for batch in heldout_batches(holdouts[name], batch_size, t, limit=limit):
            records: list[RoutingRecord] = []
            model.lm_loss(batch, mode="infer", rng=rng, records=records)
            for rec in records:
                li = rec.layer_index
                soft_layer[li] = rec.method == "soft"
                kept = rec.indices[rec.routed]
                selections[li, d] += np.bincount(kept.reshape(-1), minlength=N)
                routed_total[li, d] += kept.size
                np.add.at(gate_sum[li, d], rec.indices.reshape(-1), rec.weights.reshape(-1))
                prob_sum[li, d] += rec.probs.sum(axis=0)
                tokens[li, d] += rec.n_tokens
                for e in range(N):
                    histogram[li, e] += np.histogram(rec.probs[:, e], bins=bins)[0]
                for ti in range(rec.indices.shape[0]):
                    for s in range(rec.indices.shape[1]):
                        e = int(rec.indices[ti, s])
                        per_token.append(
                            {
                                "layer": li,
                                "token_position": position + ti,
                                "expert_id": e,
                                "gate_weight": float(rec.weights[ti, s]),
                                "softmax_prob": float(rec.probs[ti, e]),
                                "task_tag": name,
                            }
                        )
            position += batch.shape[0] * (batch.shape[1] - 1)

    utilization = np.zeros_like(selections)
    for li in range(L):
        for d in range(len(domains)):
            if soft_layer[li]:
                utilization[li, d] = prob_sum[li, d] / tokens[li, d]
            else:
                utilization[li, d] = selections[li, d] / routed_total[li, d]
    gate_mass = gate_sum / tokens[:, :, None]
    stats = RoutingStats(
        domains=domains,
        n_layers=L,
        n_experts=N,
        utilization=utilization,
        gate_mass=gate_mass,
        histogram=histogram,
        tokens=tokens,
    )
    return stats, per_token


# ---------------------------------------------------------------------------
# CSV emission


def write_routing_csv(path, stats: RoutingStats) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "domain", "expert", "utilization", "gate_mass", "dead_flag"])
        dead = stats.dead_flags
        for li in range(stats.n_layers):
            for d, name in enumerate(stats.domains):
                for e in range(stats.n_experts):
                    writer.writerow(
                        [
                            li,
                            name,
                            e,
                            stats.utilization[li, d, e],
                            stats.gate_mass[li, d, e],
                            int(dead[li, d, e]),
                        ]
                    )


def write_histogram_csv(path, stats: RoutingStats) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "expert", "bin_lo", "bin_hi", "count"])
        for li in range(stats.n_layers):
            for e in range(stats.n_experts):
                for b in range(HISTOGRAM_BINS):
                    writer.writerow(
                        [
                            li,
                            e,
                            f"{b / HISTOGRAM_BINS:.2f}",
                            f"{(b + 1) / HISTOGRAM_BINS:.2f}",
                            stats.histogram[li, e, b],
                        ]
                    )


def write_per_token_csv(path, rows: list[dict]) -> None:
    fields = ["layer", "token_position", "expert_id", "gate_weight", "softmax_prob", "task_tag"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# run comparison


def compare_runs(reports: list[EvalReport], baseline: str | None = None) -> list[dict]:
    """Per-domain NLL table with deltas against a named baseline row.

    Rows keep the input order; columns are the model name, each domain's NLL
    and its delta (sorted domain order), then the cross-domain mean of both.
    """
    if len(reports) < 2:
        raise ContractError("comparison needs at least two reports")
    domain_sets = {tuple(r.domain_names) for r in reports}
    if len(domain_sets) != 1:
        raise AlignmentError(f"reports cover different domains: {sorted(domain_sets)}")
    names = [r.model_name for r in reports]
    base_name = baseline if baseline is not None else names[0]
    if base_name not in names:
        raise AlignmentError(f"baseline {base_name!r} not among reports {names}")
    base = reports[names.index(base_name)]
    domains = base.domain_names
    rows = []
    for r in reports:
        row = {"model": r.model_name, "baseline": base_name}
        for d in domains:
            row[f"nll_{d}"] = r.nll(d)
            row[f"delta_{d}"] = r.nll(d) - base.nll(d)
        row["mean_nll"] = r.mean_nll()
        row["mean_delta"] = r.mean_nll() - base.mean_nll()
        rows.append(row)
    return rows


def write_comparison_csv(path, rows: list[dict]) -> None:
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
