"""Inspect who the router sends tokens to, domain by domain.

Builds a small Top-2 mixture by upcycling a briefly pretrained seed,
finetunes it for a few hundred steps with the load-balance term on, then
prints the per-layer, per-domain utilization matrix, flags dead experts,
and summarizes the gate-weight histogram. The same tables land in CSV form
via `moemix route-stats`.
"""

import numpy as np

from moemix import (
    CorpusSpec,
    DenseModel,
    MixtureSpec,
    ModelConfig,
    RouterConfig,
    TrainConfig,
    finetune_moe,
    model_from_checkpoint,
    train_dense,
    upcycle,
)
from moemix.evalkit import collect_routing
from moemix.train import checkpoint_from_model

SPECS = [
    CorpusSpec(name="arith", source="synthetic:arith", rng_seed=3),
    CorpusSpec(name="code", source="synthetic:code", rng_seed=4),
]
CORPUS_BYTES = 50_000
MODEL = ModelConfig(d_model=64, n_layers=2, n_heads=2, d_ff=256, max_seq_len=128)


def main():
    mixture = MixtureSpec([(s, 1.0) for s in SPECS], corpus_bytes=CORPUS_BYTES)
    train = TrainConfig(steps=120, batch_size=8, seq_len=64,
                        corpus_bytes=CORPUS_BYTES, warmup_steps=30)

    print("pretraining a small seed, upcycling it into 4 identical experts...")
    seed = checkpoint_from_model(DenseModel.init(MODEL, 0))
    seed = train_dense(seed, mixture, train)
    moe = upcycle(model_from_checkpoint(seed).params, 4,
                  RouterConfig(method="topk", k=2, alpha=0.01), 5, MODEL)

    print("finetuning so the router differentiates the copies...")
    ft = finetune_moe(checkpoint_from_model(moe), mixture,
                      TrainConfig(**{**train.to_dict(), "steps": 300}))
    model = model_from_checkpoint(ft)

    holdouts = {c.name: c for c in mixture.corpora()}
    stats, per_token = collect_routing(model, holdouts, seq_len=65)

    print(f"\nutilization (rows sum to 1; fraction of Top-2 selections)")
    header = "  ".join(f"e{e}" for e in range(stats.n_experts))
    for li in range(stats.n_layers):
        print(f"layer {li}:          {header}")
        for di, dom in enumerate(stats.domains):
            row = "  ".join(f"{u:.2f}" for u in stats.utilization[li, di])
            print(f"  {dom:<14} {row}")

    dead = stats.dead_flags
    for li in range(stats.n_layers):
        for di, dom in enumerate(stats.domains):
            for e in np.nonzero(dead[li, di])[0]:
                print(f"dead expert: layer {li}, domain {dom}, expert {e} "
                      f"(utilization {stats.utilization[li, di, e]:.4f})")
    if not dead.any():
        print("\nno dead experts at threshold", stats.dead_threshold)

    print(f"\nmin utilization per layer: "
          f"{np.round(stats.min_utilization_per_layer(), 3).tolist()}")

    # the histogram bins full router probabilities: mass near 1/N means soft,
    # undecided routing; mass near 1 means hard assignments
    hist = stats.histogram.sum(axis=(0, 1))
    edges = np.linspace(0.0, 1.0, len(hist) + 1)
    top = np.argsort(hist)[-3:][::-1]
    print("\nbusiest router-probability bins:")
    for b in top:
        print(f"  [{edges[b]:.2f}, {edges[b + 1]:.2f})  {int(hist[b])} selections")
    print(f"\nper-token records exported: {len(per_token)}")


if __name__ == "__main__":
    main()
