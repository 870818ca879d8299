"""Training engine: determinism, resume, metrics stamping."""

import json

import numpy as np
import pytest

from catlm.config import config_hash, load_config
from catlm.training import run_training, train_baseline_grid


def small_cfg(arch="cat", **train_kw):
    cfg = load_config(preset="mqar_cat_c4" if arch == "cat" else "mqar_dense")
    cfg["task"]["mqar"].update(seq_len=16, num_pairs=2, num_queries=2,
                               train_instances=64, test_instances=32)
    cfg["model"]["chunk_sizes"] = [2, 4] if arch == "cat" else cfg["model"]["chunk_sizes"]
    cfg["train"].update(steps=6, batch_size=4, eval_every=3, early_stop_acc=0.0,
                        fixed_chunk=0, **train_kw)
    cfg["optimizer"]["warmup_steps"] = 2
    return cfg


def loss_trace(result):
    return [r["loss"] for r in result.history]


def test_identical_runs_are_bitwise_identical(tmp_path):
    cfg = small_cfg()
    a = run_training(cfg, tmp_path / "a", quiet=True)
    b = run_training(cfg, tmp_path / "b", quiet=True)
    assert loss_trace(a) == loss_trace(b)
    chunks_a = [r["chunk_size"] for r in a.history]
    chunks_b = [r["chunk_size"] for r in b.history]
    assert chunks_a == chunks_b


def test_resume_reproduces_uninterrupted_trace(tmp_path):
    cfg = small_cfg(checkpoint_every=3)
    full = run_training(cfg, tmp_path / "full", quiet=True)
    # interrupt at step 3, resume from its checkpoint
    half_cfg = json.loads(json.dumps(cfg))
    half_cfg["train"]["steps"] = 3
    run_training(half_cfg, tmp_path / "half", quiet=True)
    resumed = run_training(cfg, tmp_path / "resumed",
                           resume_from=tmp_path / "half" / "ckpt_final.npz",
                           quiet=True)
    assert loss_trace(resumed) == loss_trace(full)[3:]
    # and the final parameters agree bitwise
    fa = full.model.named_params()
    fb = resumed.model.named_params()
    for name in fa:
        assert fa[name].data.tobytes() == fb[name].data.tobytes(), name


def test_metrics_files_are_stamped(tmp_path):
    cfg = small_cfg()
    result = run_training(cfg, tmp_path / "run", quiet=True)
    lines = [json.loads(l) for l in open(result.metrics.parent / "metrics.jsonl")]
    assert lines[0]["record"] == "run_header"
    h = config_hash(cfg)
    assert all(l["config_hash"] == h for l in lines)
    assert all(l["seed"] == cfg["seed"] for l in lines)
    assert result.metrics.exists()
    header = result.metrics.read_text().splitlines()[0]
    assert "config_hash" in header and "loss" in header
    steps = [l["step"] for l in lines if l["record"] == "train"]
    assert steps == sorted(steps)


def test_adaptive_run_logs_sampled_chunk_sizes(tmp_path):
    cfg = small_cfg()
    result = run_training(cfg, tmp_path / "run", quiet=True)
    sizes = {r["chunk_size"] for r in result.history}
    assert sizes <= {2, 4}
    rows = result.final_eval
    assert [r["chunk_size"] for r in rows] == [2, 4]


def test_fixed_chunk_run(tmp_path):
    cfg = small_cfg()
    cfg["train"]["fixed_chunk"] = 2
    result = run_training(cfg, tmp_path / "run", quiet=True)
    assert all(r["chunk_size"] == 2 for r in result.history)
    assert [r["chunk_size"] for r in result.final_eval] == [2]


def test_grid_returns_table_and_best(tmp_path):
    cfg = small_cfg(arch="dense")
    best, acc, table = train_baseline_grid(cfg, [1e-3, 5e-4],
                                           out_dir=tmp_path / "grid", quiet=True)
    assert len(table) == 2
    assert {row["lr"] for row in table} == {1e-3, 5e-4}
    assert acc == max(row["accuracy"] for row in table)
    with pytest.raises(ValueError):
        train_baseline_grid(cfg, [], out_dir=tmp_path / "g2")


def test_corpus_training_smoke(tmp_path):
    from catlm.tasks import write_synthetic_corpus
    corpus = write_synthetic_corpus(tmp_path / "c.txt", 30_000, seed=0)
    cfg = load_config(preset="corpus_cat_c8", overrides=[
        f"task.corpus.path={corpus}",
        "task.corpus.seq_len=64", "train.steps=4", "train.batch_size=2",
        "train.eval_every=4", "model.width=16", "model.decoder_width=32",
    ])
    result = run_training(cfg, tmp_path / "run", quiet=True)
    assert result.steps_done == 4
    assert "heldout_loss" in result.final_eval[0]


def test_strict_metrics_logs_byte_identical(tmp_path):
    cfg = small_cfg()
    run_training(cfg, tmp_path / "a", quiet=True)
    run_training(cfg, tmp_path / "b", quiet=True)
    log_a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    log_b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert log_a == log_b
    assert (tmp_path / "a" / "timings.csv").exists()
