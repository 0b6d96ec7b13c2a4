"""Pipeline orchestration from one JSON config.

Each subcommand wraps exactly one library operation: seed-init pretrains the
shared ancestor, train-expert branches it per domain (optionally as parallel
OS processes), mix assembles the experts into a mixture model, finetune
trains it on the combined stream, and dense/upcycle/btm-fit/btm-eval build
the baselines. eval, route-stats and compare emit the JSON/CSV artifacts.

Every stage records its input and output file digests in an append-only
manifest (manifest.jsonl); rerunning a stage whose recorded digests still
match the files on disk is a no-op unless --force is given, and a completed
pipeline rerun from the same config and seeds reproduces every artifact
byte for byte.

Exit codes: 0 success, 1 usage or contract violation, 2 missing/invalid
data or artifacts, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import btm as btm_lib
from . import evalkit
from .data import Corpus, CorpusSpec, MixtureSpec, build_corpus, heldout_stream
from .errors import (
    AlignmentError,
    CheckpointError,
    ContractError,
    DataError,
    NumericError,
    SurgeryError,
)
from .merge import mix_to_moe, upcycle
from .model import DenseModel, ModelConfig
from .moe import RouterConfig
from .train import (
    TrainConfig,
    checkpoint_from_model,
    finetune_moe,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    token_budget,
    train_dense,
    train_dense_continue,
    train_expert,
)


# ---------------------------------------------------------------------------
# configuration


class PipelineConfig:
    """Parsed pipeline config: model/router setup, corpora, stage budgets."""

    def __init__(self, raw: dict):
        self.raw = raw
        self.out_dir = Path(raw.get("out_dir", "runs/out"))
        self.global_seed = int(raw.get("global_seed", 0))
        self.corpus_bytes = int(raw.get("corpus_bytes", 200_000))
        self.model = ModelConfig.from_dict(raw.get("model", {}))
        self.router = RouterConfig.from_dict(raw.get("router", {}))

        corpora_raw = raw.get("corpora")
        if not corpora_raw:
            raise DataError("config needs a nonempty 'corpora' list")
        self.corpora = [CorpusSpec.from_dict(c) for c in corpora_raw]
        names = [c.name for c in self.corpora]
        if len(set(names)) != len(names):
            raise DataError(f"corpus names must be unique, got {names}")

        mixture_raw = raw.get("finetune_mixture") or [
            {"name": n, "weight": 1.0} for n in names
        ]
        self.finetune_weights = [(m["name"], float(m["weight"])) for m in mixture_raw]
        unknown = [n for n, _ in self.finetune_weights if n not in names]
        if unknown:
            raise DataError(f"finetune mixture references unknown corpora {unknown}")

        gs, cb = self.global_seed, self.corpus_bytes
        self.seed_train = self._train_block(
            raw, "seed_train", steps=100, data_seed=gs, corpus_bytes=cb
        )
        self.expert_train = self._train_block(
            raw, "expert_train", steps=400, data_seed=gs + 100, corpus_bytes=cb
        )
        self.finetune_train = self._train_block(
            raw, "finetune_train", steps=300, data_seed=gs + 200,
            routing_seed=gs + 300, corpus_bytes=cb,
        )

        self.eval_opts = {
            "batch_size": 8, "seq_len": None, "limit": None, "seed": 0,
            **raw.get("eval", {}),
        }
        self.mix_opts = {"include_seed": True, "rng_seed": gs + 1, **raw.get("mix", {})}
        self.btm_opts = {"k": 2, "weighted": False, **raw.get("btm", {})}
        self.baselines = {"dense": True, "upcycle": True, "btm": True, **raw.get("baselines", {})}
        self._corpora_cache: dict[str, Corpus] = {}

    @staticmethod
    def _train_block(raw: dict, key: str, **defaults) -> TrainConfig:
        block = {**defaults, **raw.get(key, {})}
        return TrainConfig.from_dict(block)

    @classmethod
    def load(cls, path, overrides: list[str] | None = None) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"config {path} is not valid JSON: {exc}") from exc
        for item in overrides or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise DataError(f"--set needs KEY=VALUE, got {item!r}")
            try:
                parsed = json.loads(value)
            except json.JSONDecodeError:
                parsed = value
            node = raw
            parts = key.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = parsed
        return cls(raw)

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def corpus_names(self) -> list[str]:
        return [c.name for c in self.corpora]

    def corpus(self, name: str) -> Corpus:
        if name not in self._corpora_cache:
            spec = next((c for c in self.corpora if c.name == name), None)
            if spec is None:
                raise DataError(f"unknown corpus {name!r}")
            self._corpora_cache[name] = build_corpus(spec, self.corpus_bytes)
        return self._corpora_cache[name]

    def holdouts(self) -> dict[str, Corpus]:
        return {n: self.corpus(n) for n in self.corpus_names()}

    def finetune_mixture_spec(self) -> MixtureSpec:
        by_name = {c.name: c for c in self.corpora}
        return MixtureSpec(
            [(by_name[n], w) for n, w in self.finetune_weights],
            corpus_bytes=self.corpus_bytes,
        )

    def union_mixture_spec(self) -> MixtureSpec:
        return MixtureSpec(
            [(c, 1.0) for c in self.corpora], corpus_bytes=self.corpus_bytes
        )

    def n_mix_experts(self) -> int:
        return len(self.corpora) + (1 if self.mix_opts["include_seed"] else 0)


# ---------------------------------------------------------------------------
# manifest


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Manifest:
    """Append-only JSONL stage journal with file digests."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]

    def append(self, entry: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def latest(self, stage: str) -> dict | None:
        found = None
        for entry in self.entries():
            if entry.get("stage") == stage:
                found = entry
        return found

    def stage_current(self, stage: str, config_digest: str) -> bool:
        """True when the last run of this stage used the same effective config
        and recorded digests that still match every input and output file."""
        entry = self.latest(stage)
        if entry is None or entry.get("config") != config_digest:
            return False
        for table in ("inputs", "outputs"):
            for name, digest in entry.get(table, {}).items():
                p = Path(name)
                if not p.exists() or _sha256(p) != digest:
                    return False
        return True


def _require(path: Path, producer: str) -> Path:
    if not Path(path).exists():
        raise DataError(f"missing artifact {path}; run `moemix {producer}` first")
    return Path(path)


def _execute_stage(
    cfg: PipelineConfig,
    stage: str,
    inputs: list[Path],
    outputs: list[Path],
    tokens: int,
    force: bool,
    fn,
) -> bool:
    manifest = Manifest(cfg.path("manifest.jsonl"))
    cfg_digest = hashlib.sha256(
        json.dumps(cfg.raw, sort_keys=True).encode()
    ).hexdigest()
    if not force and manifest.stage_current(stage, cfg_digest):
        print(f"[{stage}] up to date; use --force to rerun")
        return False
    start = time.perf_counter()
    fn()
    wall = time.perf_counter() - start
    manifest.append(
        {
            "stage": stage,
            "config": cfg_digest,
            "inputs": {str(p): _sha256(p) for p in inputs},
            "outputs": {str(p): _sha256(p) for p in outputs},
            "tokens": tokens,
            "wall_time_s": round(wall, 3),
        }
    )
    print(f"[{stage}] done in {wall:.1f}s: " + ", ".join(str(p) for p in outputs))
    return True


# ---------------------------------------------------------------------------
# stage implementations


def _load_cfg(args) -> PipelineConfig:
    return PipelineConfig.load(args.config, args.set)


def _write_config_snapshot(cfg: PipelineConfig) -> None:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = json.dumps(cfg.raw, sort_keys=True, indent=2) + "\n"
    cfg.path("config.json").write_text(snapshot)


def cmd_seed_init(args) -> int:
    cfg = _load_cfg(args)
    _write_config_snapshot(cfg)
    out, log = cfg.path("seed.ckpt"), cfg.path("seed_log.csv")

    def fn():
        model = DenseModel.init(cfg.model, cfg.global_seed)
        ckpt = checkpoint_from_model(model, extra={"stage": "seed"})
        ckpt = train_dense(
            ckpt, cfg.union_mixture_spec(), cfg.seed_train, log_path=log,
            extra={"stage": "seed"},
        )
        save_checkpoint(out, ckpt)

    _execute_stage(
        cfg, "seed-init", [], [out, log],
        token_budget(cfg.seed_train.steps, cfg.seed_train), args.force, fn,
    )
    return 0


def _train_one_expert(cfg: PipelineConfig, name: str, force: bool) -> None:
    index = cfg.corpus_names().index(name)
    seed_path = _require(cfg.path("seed.ckpt"), "seed-init")
    out, log = cfg.path(f"expert_{name}.ckpt"), cfg.path(f"expert_{name}_log.csv")
    spec = cfg.corpora[index]
    # offset the stream seed per expert so parallel jobs see different data
    train_cfg = replace(cfg.expert_train, data_seed=cfg.expert_train.data_seed + index)

    def fn():
        ckpt = train_expert(load_checkpoint(seed_path), spec, train_cfg, log_path=log)
        save_checkpoint(out, ckpt)

    _execute_stage(
        cfg, f"train-expert:{name}", [seed_path], [out, log],
        token_budget(train_cfg.steps, train_cfg), force, fn,
    )


def cmd_train_expert(args) -> int:
    cfg = _load_cfg(args)
    if args.all:
        names = cfg.corpus_names()
    else:
        if not args.name:
            raise DataError("train-expert needs --name or --all")
        if args.name not in cfg.corpus_names():
            raise DataError(f"unknown expert {args.name!r}; corpora: {cfg.corpus_names()}")
        names = [args.name]

    if args.parallel and len(names) > 1:
        # independent OS workers, no shared mutable state
        base = [sys.executable, "-m", "moemix.cli", "train-expert", "--config", str(args.config)]
        base += [f"--set={s}" for s in args.set]
        if args.force:
            base.append("--force")
        procs = [subprocess.Popen(base + ["--name", n]) for n in names]
        codes = [p.wait() for p in procs]
        if any(codes):
            print(f"error: expert workers exited with {codes}", file=sys.stderr)
            return max(codes)
        return 0

    for name in names:
        _train_one_expert(cfg, name, args.force)
    return 0


def cmd_mix(args) -> int:
    cfg = _load_cfg(args)
    include_seed = (
        cfg.mix_opts["include_seed"] if args.include_seed is None else args.include_seed
    )
    names = cfg.corpus_names()
    inputs = [_require(cfg.path(f"expert_{n}.ckpt"), "train-expert --all") for n in names]
    if include_seed:
        inputs.append(_require(cfg.path("seed.ckpt"), "seed-init"))
    out = cfg.path("btx.ckpt")

    def fn():
        experts = [
            model_from_checkpoint(load_checkpoint(cfg.path(f"expert_{n}.ckpt"))).params
            for n in names
        ]
        generalist = (
            model_from_checkpoint(load_checkpoint(cfg.path("seed.ckpt"))).params
            if include_seed
            else None
        )
        moe = mix_to_moe(
            experts, cfg.router, cfg.mix_opts["rng_seed"], cfg.model,
            names=names, generalist=generalist,
        )
        save_checkpoint(out, checkpoint_from_model(moe, step=cfg.expert_train.steps))

    _execute_stage(cfg, "mix", inputs, [out], 0, args.force, fn)
    return 0


def cmd_upcycle(args) -> int:
    cfg = _load_cfg(args)
    seed_path = _require(cfg.path("seed.ckpt"), "seed-init")
    n = args.n_experts or cfg.n_mix_experts()
    out = cfg.path("upcycled.ckpt")

    def fn():
        seed_model = model_from_checkpoint(load_checkpoint(seed_path))
        moe = upcycle(seed_model.params, n, cfg.router, cfg.mix_opts["rng_seed"], cfg.model)
        save_checkpoint(out, checkpoint_from_model(moe))

    _execute_stage(cfg, "upcycle", [seed_path], [out], 0, args.force, fn)
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_cfg(args)
    input_path = cfg.path(args.input)
    producer = {"btx.ckpt": "mix", "upcycled.ckpt": "upcycle"}.get(args.input, "the producing stage")
    _require(input_path, producer)
    stem = Path(args.output).stem
    out, log = cfg.path(args.output), cfg.path(f"{stem}_log.csv")

    def fn():
        ckpt = finetune_moe(
            load_checkpoint(input_path),
            cfg.finetune_mixture_spec(),
            cfg.finetune_train,
            freeze_ff=args.freeze_ff,
            log_path=log,
        )
        save_checkpoint(out, ckpt)

    _execute_stage(
        cfg, f"finetune:{stem}", [input_path], [out, log],
        token_budget(cfg.finetune_train.steps, cfg.finetune_train), args.force, fn,
    )
    return 0


def cmd_dense(args) -> int:
    cfg = _load_cfg(args)
    seed_path = _require(cfg.path("seed.ckpt"), "seed-init")
    out, log = cfg.path("dense.ckpt"), cfg.path("dense_log.csv")
    phase1 = cfg.expert_train.steps * len(cfg.corpora)  # data-matched to all expert jobs
    phase2 = cfg.finetune_train.steps
    train_cfg = cfg.expert_train

    def fn():
        ckpt = train_dense_continue(
            load_checkpoint(seed_path), cfg.corpora, cfg.finetune_mixture_spec(),
            phase1, phase2, train_cfg, log_path=log,
        )
        save_checkpoint(out, ckpt)

    _execute_stage(
        cfg, "dense", [seed_path], [out, log],
        token_budget(phase1 + phase2, train_cfg), args.force, fn,
    )
    return 0


def _btm_corpora(cfg: PipelineConfig, include_seed: bool) -> dict:
    corpora = {n: cfg.corpus(n).train_documents for n in cfg.corpus_names()}
    if include_seed:
        union: list[bytes] = []
        for n in cfg.corpus_names():
            union.extend(corpora[n])
        corpora["generalist"] = union
    return corpora


def cmd_btm_fit(args) -> int:
    cfg = _load_cfg(args)
    include_seed = (
        cfg.mix_opts["include_seed"] if args.include_seed is None else args.include_seed
    )
    out = cfg.path("centroids.bin")

    def fn():
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        corpora = _btm_corpora(cfg, include_seed)
        stats = btm_lib.fit_tfidf(corpora)
        centroids = btm_lib.expert_centroids(stats, corpora)
        btm_lib.save_centroids(out, stats, centroids)

    _execute_stage(cfg, "btm-fit", [], [out], 0, args.force, fn)
    return 0


def cmd_btm_eval(args) -> int:
    cfg = _load_cfg(args)
    k = args.k or cfg.btm_opts["k"]
    store = _require(cfg.path("centroids.bin"), "btm-fit")
    stats, centroids = btm_lib.load_centroids(store)
    inputs = [store]
    experts = {}
    for c in centroids:
        path = (
            cfg.path("seed.ckpt")
            if c.name == "generalist"
            else cfg.path(f"expert_{c.name}.ckpt")
        )
        producer = "seed-init" if c.name == "generalist" else "train-expert --all"
        inputs.append(_require(path, producer))
        experts[c.name] = model_from_checkpoint(load_checkpoint(path))
    out = cfg.path(f"btm_top{k}_report.json")

    def fn():
        t = cfg.eval_opts["seq_len"] or cfg.model.max_seq_len + 1
        limit = cfg.eval_opts["limit"]
        domains = {}
        for name in sorted(cfg.corpus_names()):
            windows = heldout_stream(cfg.corpus(name), t)
            if limit is not None:
                windows = windows[:limit]
            nlls = [
                btm_lib.btm_sequence_nll(
                    w, experts, stats, centroids, k, weighted=cfg.btm_opts["weighted"]
                )[0]
                for w in windows
            ]
            nll = float(np.mean(nlls))
            domains[name] = {
                "nll": nll,
                "ppl": float(np.exp(nll)),
                "tokens": len(windows) * (t - 1),
            }
        report = evalkit.EvalReport(
            model_name=f"btm_top{k}",
            config_digest=evalkit.config_digest(next(iter(experts.values()))),
            domains=domains,
        )
        evalkit.save_report(out, report)

    _execute_stage(cfg, f"btm-eval:top{k}", inputs, [out], 0, args.force, fn)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    model_path = _require(cfg.path(args.model), "the stage that writes it")
    name = args.name or Path(args.model).stem
    out = cfg.path(f"{name}_report.json")

    def fn():
        model = model_from_checkpoint(load_checkpoint(model_path))
        report = evalkit.eval_perplexity(
            model,
            cfg.holdouts(),
            model_name=name,
            batch_size=cfg.eval_opts["batch_size"],
            seq_len=cfg.eval_opts["seq_len"],
            limit=cfg.eval_opts["limit"],
            eval_seed=cfg.eval_opts["seed"],
        )
        evalkit.save_report(out, report)

    _execute_stage(cfg, f"eval:{name}", [model_path], [out], 0, args.force, fn)
    return 0


def cmd_route_stats(args) -> int:
    cfg = _load_cfg(args)
    model_path = _require(cfg.path(args.model), "finetune")
    stem = Path(args.model).stem
    outs = {
        "stats": cfg.path(f"{stem}_routing.csv"),
        "hist": cfg.path(f"{stem}_gate_hist.csv"),
        "tokens": cfg.path(f"{stem}_tokens.csv"),
    }

    def fn():
        model = model_from_checkpoint(load_checkpoint(model_path))
        stats, rows = evalkit.collect_routing(
            model,
            cfg.holdouts(),
            batch_size=cfg.eval_opts["batch_size"],
            seq_len=cfg.eval_opts["seq_len"],
            limit=cfg.eval_opts["limit"],
            eval_seed=cfg.eval_opts["seed"],
        )
        evalkit.write_routing_csv(outs["stats"], stats)
        evalkit.write_histogram_csv(outs["hist"], stats)
        evalkit.write_per_token_csv(outs["tokens"], rows)

    _execute_stage(
        cfg, f"route-stats:{stem}", [model_path], list(outs.values()), 0, args.force, fn
    )
    return 0


def cmd_compare(args) -> int:
    cfg = _load_cfg(args)
    report_names = args.reports or sorted(
        p.name for p in cfg.out_dir.glob("*_report.json")
    )
    if len(report_names) < 2:
        raise DataError(
            "compare needs at least two report files; run `moemix eval` (and btm-eval) first"
        )
    paths = [_require(cfg.path(r), "eval") for r in report_names]
    out = cfg.path("comparison.csv")

    def fn():
        reports = [evalkit.load_report(p) for p in paths]
        rows = evalkit.compare_runs(reports, baseline=args.baseline)
        evalkit.write_comparison_csv(out, rows)
        for row in rows:
            cells = [f"{row['model']}"] + [
                f"{k}={row[k]:.4f}" for k in row if k.startswith(("nll_", "mean_"))
            ]
            print("  ".join(cells))

    _execute_stage(cfg, "compare", paths, [out], 0, args.force, fn)
    return 0


# ---------------------------------------------------------------------------
# parser and entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline config JSON file")
    common.add_argument(
        "--force", action="store_true", help="rerun the stage even if its digests are current"
    )
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override a config key (dotted path, JSON-parsed value); repeatable",
    )

    parser = _Parser(prog="moemix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    add("seed-init", cmd_seed_init, "initialize and pretrain the shared seed model")

    p = add("train-expert", cmd_train_expert, "branch the seed and train one domain expert")
    p.add_argument("--name", help="corpus name of the expert to train")
    p.add_argument("--all", action="store_true", help="train every expert in the config")
    p.add_argument(
        "--parallel", action="store_true",
        help="with --all, run one independent OS worker per expert",
    )

    p = add("mix", cmd_mix, "assemble trained experts into one mixture model")
    p.add_argument(
        "--include-seed", action=argparse.BooleanOptionalAction, default=None,
        help="also install the seed as a generalist expert (default from config)",
    )

    p = add("finetune", cmd_finetune, "finetune a mixture model on the combined stream")
    p.add_argument("--input", default="btx.ckpt", help="mixture checkpoint to start from")
    p.add_argument("--output", default="btx_ft.ckpt", help="finetuned checkpoint filename")
    p.add_argument(
        "--freeze-ff", action="store_true", help="train only routers and shared weights"
    )

    add("dense", cmd_dense, "data-matched continued dense training baseline")

    p = add("upcycle", cmd_upcycle, "replicate the seed FF into an untrained mixture")
    p.add_argument(
        "--n-experts", type=int, default=None,
        help="expert count (default: number of corpora plus the generalist)",
    )

    p = add("btm-fit", cmd_btm_fit, "fit tf-idf statistics and expert centroids")
    p.add_argument(
        "--include-seed", action=argparse.BooleanOptionalAction, default=None,
        help="add a generalist centroid over the union of all domains",
    )

    p = add("btm-eval", cmd_btm_eval, "evaluate the expert-ensemble baseline")
    p.add_argument("--k", type=int, default=None, help="experts per context (default from config)")

    p = add("eval", cmd_eval, "per-domain held-out perplexity report for one checkpoint")
    p.add_argument("--model", required=True, help="checkpoint filename inside out_dir")
    p.add_argument("--name", default=None, help="model name for the report (default: file stem)")

    p = add("route-stats", cmd_route_stats, "routing utilization, histograms, per-token export")
    p.add_argument("--model", default="btx_ft.ckpt", help="mixture checkpoint to analyze")

    p = add("compare", cmd_compare, "side-by-side NLL table with deltas vs a baseline")
    p.add_argument(
        "--reports", nargs="*", default=None,
        help="report filenames inside out_dir (default: every *_report.json)",
    )
    p.add_argument("--baseline", default=None, help="model name of the baseline row")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return args.func(args)
    except (DataError, CheckpointError, AlignmentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ContractError, SurgeryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
