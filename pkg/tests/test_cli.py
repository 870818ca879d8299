"""Command-line harness: smoke runs, exit codes, output artifacts."""

import csv
import json
import os
from pathlib import Path

import numpy as np
import pytest

from catlm.cli import (EXIT_AUDIT, EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA,
                       EXIT_OK, main)
from catlm.tasks import write_synthetic_corpus


def run(args, tmp_path, out="out"):
    env_out = tmp_path / out
    os.environ["CATLM_OUT_DIR"] = str(env_out)
    try:
        rc = main(args)
    finally:
        os.environ.pop("CATLM_OUT_DIR", None)
    return rc, env_out


TINY = ["--set", "task.mqar.seq_len=16", "--set", "task.mqar.num_pairs=2",
        "--set", "task.mqar.num_queries=2", "--set", "task.mqar.train_instances=32",
        "--set", "task.mqar.test_instances=16", "--set", "train.steps=3",
        "--set", "train.batch_size=4", "--set", "train.eval_every=3",
        "--set", "train.early_stop_acc=0", "--set", "model.chunk_sizes=[2]",
        "--set", "train.fixed_chunk=2", "--set", "optimizer.warmup_steps=1"]


def test_train_eval_generate_pipeline(tmp_path):
    rc, out = run(["train", "--preset", "mqar_cat_c4", *TINY, "--quiet"], tmp_path)
    assert rc == EXIT_OK
    ckpt = out / "ckpt_final.npz"
    assert ckpt.exists()
    assert (out / "metrics.jsonl").exists()
    assert (out / "summary.csv").exists()

    rc, out2 = run(["eval", "--preset", "mqar_cat_c4", *TINY, str(ckpt)],
                   tmp_path, "out_eval")
    assert rc == EXIT_OK
    assert (out2 / "eval.csv").exists()

    prompt = tmp_path / "prompt.txt"
    prompt.write_text("3 4 5 6 7")
    rc, out3 = run(["generate", "--preset", "mqar_cat_c4", *TINY, str(ckpt),
                    str(prompt), "--prompt-format", "ids", "--num-tokens", "12"],
                   tmp_path, "out_gen")
    assert rc == EXIT_OK
    trace = list(csv.DictReader(open(out3 / "occupancy_trace.csv")))
    assert len(trace) == 13
    for row in trace:
        t = int(row["t"])
        assert int(row["live_entries"]) == 1 + t // 2 + t % 2


def test_config_error_exit_code(tmp_path):
    rc, _ = run(["train", "--preset", "mqar_dense", "--set", "train.stepz=3"],
                tmp_path)
    assert rc == EXIT_CONFIG


def test_missing_checkpoint_exit_code(tmp_path):
    rc, _ = run(["eval", "--preset", "mqar_dense", *TINY[:-4],
                 str(tmp_path / "missing.npz")], tmp_path)
    assert rc == EXIT_CHECKPOINT


def test_missing_preset_exit_code(tmp_path):
    rc, _ = run(["train", "--preset", "nonexistent"], tmp_path)
    assert rc == EXIT_CONFIG


def test_malformed_prompt_exit_code(tmp_path):
    rc, out = run(["train", "--preset", "mqar_cat_c4", *TINY, "--quiet"], tmp_path)
    assert rc == EXIT_OK
    bad = tmp_path / "bad.txt"
    bad.write_text("not numbers at all")
    rc, _ = run(["generate", "--preset", "mqar_cat_c4", *TINY,
                 str(out / "ckpt_final.npz"), str(bad), "--prompt-format", "ids"],
                tmp_path, "out_g2")
    assert rc == EXIT_DATA


def test_mask_audit_pass_and_render(tmp_path):
    rc, _ = run(["mask-audit", "cat", "128", "--chunk-size", "16"], tmp_path)
    assert rc == EXIT_OK
    render = tmp_path / "grid.txt"
    rc, _ = run(["mask-audit", "cat", "8", "--chunk-size", "2",
                 "--render", str(render)], tmp_path)
    assert rc == EXIT_OK
    text = render.read_text()
    assert "#" in text and "." in text and "R" in text and "I" in text


def test_mask_audit_dense(tmp_path):
    rc, _ = run(["mask-audit", "dense", "64"], tmp_path)
    assert rc == EXIT_OK


def test_bench_emits_ratio_table(tmp_path):
    rc, out = run(["bench", "--preset", "corpus_adaptive", "--lengths", "256,4096"],
                  tmp_path)
    assert rc == EXIT_OK
    rows = list(csv.DictReader(open(out / "bench.csv")))
    by_key = {(int(r["n"]), int(r["c"])): r for r in rows}
    floors = {4: 3.8, 8: 7.3, 16: 13.4, 32: 22.5}
    for c, floor in floors.items():
        assert float(by_key[(4096, c)]["entry_ratio"]) >= floor
    assert by_key[(4096, 4)]["saves_memory"] == "True"


def test_gradcheck_command(tmp_path):
    rc, _ = run(["gradcheck", "--entries", "4"], tmp_path)
    assert rc == EXIT_OK


def test_make_corpus_command(tmp_path):
    target = tmp_path / "corpus.txt"
    rc, _ = run(["make-corpus", str(target), "--bytes", "20000"], tmp_path)
    assert rc == EXIT_OK
    assert target.stat().st_size >= 20000


def test_eval_emits_row_per_chunk_size(tmp_path):
    args = ["train", "--preset", "mqar_cat_c4",
            "--set", "task.mqar.seq_len=16", "--set", "task.mqar.num_pairs=2",
            "--set", "task.mqar.num_queries=2", "--set", "task.mqar.train_instances=32",
            "--set", "task.mqar.test_instances=16", "--set", "train.steps=2",
            "--set", "train.batch_size=4", "--set", "train.eval_every=0",
            "--set", "train.early_stop_acc=0", "--set", "model.chunk_sizes=[2,4,8]",
            "--set", "train.fixed_chunk=0", "--quiet"]
    rc, out = run(args, tmp_path)
    assert rc == EXIT_OK
    rc, out2 = run(["eval", *args[1:-1], str(out / "ckpt_final.npz")],
                   tmp_path, "out_eval")
    assert rc == EXIT_OK
    rows = list(csv.DictReader(open(out2 / "eval.csv")))
    assert len(rows) == 3  # one row per supported chunk size
