"""End-to-end pipeline driver: stage orchestration, manifest, exit codes."""

import json
import sys

import numpy as np
import pytest

from moemix import cli
from moemix.train import load_checkpoint


def _config(out_dir, **overrides):
    cfg = {
        "out_dir": str(out_dir),
        "global_seed": 3,
        "corpus_bytes": 6_000,
        "model": {
            "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32,
            "max_seq_len": 32,
        },
        "router": {"method": "topk", "k": 2, "alpha": 0.01},
        "corpora": [
            {"name": "arith", "source": "synthetic:arith", "rng_seed": 1},
            {"name": "prose", "source": "synthetic:text", "rng_seed": 2},
        ],
        "seed_train": {"steps": 2, "batch_size": 2, "seq_len": 16, "warmup_steps": 1},
        "expert_train": {"steps": 2, "batch_size": 2, "seq_len": 16, "warmup_steps": 1},
        "finetune_train": {"steps": 2, "batch_size": 2, "seq_len": 16, "warmup_steps": 1},
        "eval": {"batch_size": 4, "seq_len": 17, "limit": 2},
        "btm": {"k": 2},
    }
    cfg.update(overrides)
    return cfg


def _write(tmp, cfg) -> str:
    path = tmp / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def _digest(path) -> bytes:
    return path.read_bytes()


# ---------------------------------------------------------------------------
# full pipeline


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Every stage run once, in order, into one output directory."""
    root = tmp_path_factory.mktemp("pipe")
    out = root / "run"
    cfg_path = _write(root, _config(out))
    stages = [
        ["seed-init"],
        ["train-expert", "--all"],
        ["mix"],
        ["finetune"],
        ["upcycle"],
        ["finetune", "--input", "upcycled.ckpt", "--output", "upcycled_ft.ckpt"],
        ["dense"],
        ["btm-fit"],
        ["btm-eval"],
        ["eval", "--model", "btx_ft.ckpt"],
        ["eval", "--model", "dense.ckpt"],
        ["route-stats"],
        ["compare", "--baseline", "dense"],
    ]
    for argv in stages:
        code = cli.main(argv + ["--config", cfg_path])
        assert code == 0, f"stage {argv} exited {code}"
    return cfg_path, out


def test_pipeline_writes_every_artifact(pipeline):
    _, out = pipeline
    expected = [
        "config.json", "seed.ckpt", "seed_log.csv",
        "expert_arith.ckpt", "expert_prose.ckpt",
        "btx.ckpt", "btx_ft.ckpt", "btx_ft_log.csv",
        "upcycled.ckpt", "upcycled_ft.ckpt", "dense.ckpt", "dense_log.csv",
        "centroids.bin", "btm_top2_report.json",
        "btx_ft_report.json", "dense_report.json",
        "btx_ft_routing.csv", "btx_ft_gate_hist.csv", "btx_ft_tokens.csv",
        "comparison.csv", "manifest.jsonl",
    ]
    for name in expected:
        assert (out / name).exists(), name


def test_mixture_holds_three_experts_including_generalist(pipeline):
    _, out = pipeline
    ckpt = load_checkpoint(out / "btx.ckpt")
    assert ckpt.kind == "moe"
    assert ckpt.provenance == ["arith", "prose", "generalist"]


def test_manifest_records_stages_with_digests(pipeline):
    _, out = pipeline
    entries = [
        json.loads(line)
        for line in (out / "manifest.jsonl").read_text().splitlines()
    ]
    stages = [e["stage"] for e in entries]
    assert "seed-init" in stages and "mix" in stages and "compare" in stages
    seed = next(e for e in entries if e["stage"] == "seed-init")
    assert seed["tokens"] == 2 * 2 * 16  # steps * batch * seq_len
    for name, digest in seed["outputs"].items():
        assert len(digest) == 64 and (out / name.split("/")[-1]).exists()


def test_reports_cover_all_domains(pipeline):
    _, out = pipeline
    for name in ("btx_ft_report.json", "dense_report.json", "btm_top2_report.json"):
        report = json.loads((out / name).read_text())
        assert sorted(report["domains"]) == ["arith", "prose"]


def test_comparison_has_one_row_per_model(pipeline):
    _, out = pipeline
    lines = (out / "comparison.csv").read_text().strip().splitlines()
    models = {line.split(",")[0] for line in lines[1:]}
    assert models == {"btm_top2", "btx_ft", "dense"}


def test_rerun_is_noop_and_force_is_byte_identical(pipeline, capsys):
    cfg_path, out = pipeline
    before = _digest(out / "seed.ckpt")
    assert cli.main(["seed-init", "--config", cfg_path]) == 0
    assert "up to date" in capsys.readouterr().out
    assert _digest(out / "seed.ckpt") == before
    assert cli.main(["seed-init", "--config", cfg_path, "--force"]) == 0
    assert _digest(out / "seed.ckpt") == before


def test_eval_is_deterministic_across_reruns(pipeline):
    cfg_path, out = pipeline
    report = out / "btx_ft_report.json"
    before = _digest(report)
    assert cli.main(["eval", "--model", "btx_ft.ckpt", "--config", cfg_path, "--force"]) == 0
    assert _digest(report) == before


# ---------------------------------------------------------------------------
# isolated behaviors


def test_two_runs_from_same_config_are_byte_identical(tmp_path):
    digests = []
    for sub in ("a", "b"):
        out = tmp_path / sub / "run"
        cfg_path = tmp_path / f"{sub}.json"
        cfg_path.write_text(json.dumps(_config(out)))
        assert cli.main(["seed-init", "--config", str(cfg_path)]) == 0
        assert cli.main(["train-expert", "--all", "--config", str(cfg_path)]) == 0
        digests.append(
            tuple(
                (out / n).read_bytes()
                for n in ("seed.ckpt", "expert_arith.ckpt", "expert_prose.ckpt")
            )
        )
    assert digests[0] == digests[1]


def test_parallel_expert_training_matches_serial(tmp_path):
    outs = {}
    for mode, flags in (("serial", []), ("parallel", ["--parallel"])):
        out = tmp_path / mode
        cfg_path = tmp_path / f"{mode}.json"
        cfg_path.write_text(json.dumps(_config(out)))
        assert cli.main(["seed-init", "--config", str(cfg_path)]) == 0
        assert cli.main(
            ["train-expert", "--all", "--config", str(cfg_path)] + flags
        ) == 0
        outs[mode] = {
            n: (out / n).read_bytes()
            for n in ("expert_arith.ckpt", "expert_prose.ckpt")
        }
    assert outs["serial"] == outs["parallel"]


def test_missing_upstream_artifact_names_the_producer(tmp_path, capsys):
    cfg_path = _write(tmp_path, _config(tmp_path / "empty"))
    assert cli.main(["mix", "--config", cfg_path]) == 2
    err = capsys.readouterr().err
    assert "train-expert" in err
    assert cli.main(["train-expert", "--all", "--config", cfg_path]) == 2
    assert "seed-init" in capsys.readouterr().err


def test_usage_errors_exit_one(tmp_path, capsys):
    cfg_path = _write(tmp_path, _config(tmp_path / "out"))
    assert cli.main(["definitely-not-a-command", "--config", cfg_path]) == 1
    assert cli.main(["seed-init"]) == 1  # --config is required
    assert cli.main(["train-expert", "--config", cfg_path]) == 2  # needs --name or --all
    capsys.readouterr()


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "seed-init" in capsys.readouterr().out


def test_invalid_config_exits_two(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["seed-init", "--config", str(bad)]) == 2
    no_corpora = _config(tmp_path / "out")
    no_corpora["corpora"] = []
    assert cli.main(["seed-init", "--config", _write(tmp_path, no_corpora)]) == 2
    assert cli.main(["seed-init", "--config", str(tmp_path / "ghost.json")]) == 2
    capsys.readouterr()


def test_set_override_changes_effective_config(tmp_path):
    cfg_path = _write(tmp_path, _config(tmp_path / "out"))
    cfg = cli.PipelineConfig.load(cfg_path, ["expert_train.steps=7", "mix.include_seed=false"])
    assert cfg.expert_train.steps == 7
    assert cfg.mix_opts["include_seed"] is False
    assert cfg.n_mix_experts() == 2
    with pytest.raises(Exception, match="KEY=VALUE"):
        cli.PipelineConfig.load(cfg_path, ["no-equals-sign"])


def test_set_override_invalidates_stage(tmp_path, capsys):
    out = tmp_path / "run"
    cfg_path = _write(tmp_path, _config(out))
    assert cli.main(["seed-init", "--config", cfg_path]) == 0
    assert cli.main(["seed-init", "--config", cfg_path]) == 0
    assert "up to date" in capsys.readouterr().out
    assert cli.main(["seed-init", "--config", cfg_path, "--set", "global_seed=4"]) == 0
    assert "done" in capsys.readouterr().out
    entries = (out / "manifest.jsonl").read_text().strip().splitlines()
    assert len(entries) == 2  # original run plus the override rerun


def test_duplicate_corpus_names_rejected(tmp_path):
    cfg = _config(tmp_path / "out")
    cfg["corpora"][1]["name"] = "arith"
    assert cli.main(["seed-init", "--config", _write(tmp_path, cfg)]) == 2


def test_unknown_finetune_mixture_name_rejected(tmp_path):
    cfg = _config(tmp_path / "out")
    cfg["finetune_mixture"] = [{"name": "nope", "weight": 1.0}]
    assert cli.main(["seed-init", "--config", _write(tmp_path, cfg)]) == 2


def test_compare_needs_two_reports(tmp_path, capsys):
    out = tmp_path / "run"
    out.mkdir(parents=True)
    cfg_path = _write(tmp_path, _config(out))
    assert cli.main(["compare", "--config", cfg_path]) == 2
    assert "report" in capsys.readouterr().err
