"""Route with tf-idf instead of a learned router.

The ensemble alternative keeps the domain experts as separate models: a
tf-idf classifier picks the k most similar experts for each context and
their output distributions are averaged. This script fits the classifier
on three synthetic domains, shows its held-out routing accuracy, and
scores a few windows with the Top-2 ensemble. No mixture model, no router
weights, no joint finetuning.
"""

import numpy as np

from moemix import CorpusSpec, DenseModel, ModelConfig, TrainConfig, build_corpus
from moemix.btm import (
    btm_sequence_nll,
    expert_centroids,
    fit_tfidf,
    select_experts,
)
from moemix.data import heldout_stream
from moemix.train import checkpoint_from_model, model_from_checkpoint, train_expert

SPECS = [
    CorpusSpec(name="arith", source="synthetic:arith", rng_seed=6),
    CorpusSpec(name="code", source="synthetic:code", rng_seed=7),
    CorpusSpec(name="text", source="synthetic:text", rng_seed=8),
]
CORPUS_BYTES = 60_000
MODEL = ModelConfig(d_model=64, n_layers=2, n_heads=2, d_ff=256, max_seq_len=128)


def main():
    corpora = {s.name: build_corpus(s, CORPUS_BYTES) for s in SPECS}

    print("fitting tf-idf byte-bigram statistics and one centroid per domain")
    train_docs = {n: c.train_documents for n, c in corpora.items()}
    stats = fit_tfidf(train_docs)
    centroids = expert_centroids(stats, train_docs)
    print(f"  vocabulary: {stats.n_terms} bigrams over {stats.n_docs} documents")

    hits = total = 0
    for name, corpus in corpora.items():
        for doc in corpus.holdout_documents:
            sel = select_experts(doc[:64], stats, centroids, k=1)
            hits += sel.names[0] == name
            total += 1
    print(f"  top-1 routing accuracy on held-out contexts: {hits / total:.1%}")

    print("\ntraining one small expert per domain (a few minutes)...")
    seed = checkpoint_from_model(DenseModel.init(MODEL, 0))
    experts = {}
    for i, spec in enumerate(SPECS):
        cfg = TrainConfig(steps=150, batch_size=8, seq_len=64,
                          corpus_bytes=CORPUS_BYTES, warmup_steps=30, data_seed=i)
        experts[spec.name] = model_from_checkpoint(train_expert(seed, spec, cfg))

    print("\nTop-2 ensemble NLL on held-out windows (selected experts shown):")
    for name, corpus in corpora.items():
        window = heldout_stream(corpus, 65)[0]
        nll, sel = btm_sequence_nll(window, experts, stats, centroids, k=2)
        solo, _ = btm_sequence_nll(window, experts, stats, centroids, k=1)
        print(f"  {name:<6} picked {sel.names}  ensemble {nll:.3f}  top-1 {solo:.3f}")
    print("\nCompare with `moemix btm-eval`, which runs this over every window.")


if __name__ == "__main__":
    main()
