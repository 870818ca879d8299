"""Shared training engine for the chunk-compressing model and its baselines.

One step = draw a deterministic per-step batch, run the arch's forward, apply
AdamW with global-norm clipping. All randomness flows through named streams
keyed by (seed, purpose, step), so a resumed run replays the exact batch and
chunk-size sequence of the uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .baselines import BaselineConfig, BaselineModel, baseline_forward
from .blocks import BlockConfig
from .catlayer import CatLayerConfig, CatLayerModel
from .checkpoint import load_checkpoint, restore_params, save_checkpoint
from .config import config_hash
from .costs import cat_context_pairs, dense_pairs
from .model import CatModel, default_config, forward_train
from .optim import OptimizerState, adamw_step, zero_grads
from .rng import RngTree
from .tasks import (BYTE_PAD_ID, BYTE_VOCAB_SIZE, CorpusDataset, MqarDataset,
                    MqarVocab, load_corpus, mqar_accuracy, mqar_dataset)

ARTIFACT_VERSION = "0.1.0"


class MetricsLogger:
    """Line-delimited JSON log plus a final CSV summary table.

    In strict mode wall-clock times go to a separate timings.csv so that two
    runs with the same config hash leave byte-identical metrics logs.
    """

    def __init__(self, out_dir: Path, cfg_hash: str, seed: int, strict: bool = True):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.jsonl = self.out_dir / "metrics.jsonl"
        self.timings = self.out_dir / "timings.csv"
        self.strict = strict
        self.stamp = {"config_hash": cfg_hash, "seed": seed,
                      "artifact_version": ARTIFACT_VERSION}
        self.rows: list[dict] = []
        with open(self.jsonl, "w") as fh:
            fh.write(json.dumps({"record": "run_header", **self.stamp}) + "\n")
        with open(self.timings, "w") as fh:
            fh.write("step,wall_s\n")

    def log(self, wall_s: Optional[float] = None, **fields) -> None:
        row = {**self.stamp, **fields}
        if wall_s is not None:
            with open(self.timings, "a") as fh:
                fh.write(f"{fields.get('step', '')},{wall_s:.4f}\n")
            if not self.strict:
                row["wall_s"] = wall_s
        self.rows.append(row)
        with open(self.jsonl, "a") as fh:
            fh.write(json.dumps(row) + "\n")

    def write_summary(self, name: str = "summary.csv") -> Path:
        path = self.out_dir / name
        keys: list[str] = []
        for row in self.rows:
            for k in row:
                if k not in keys:
                    keys.append(k)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)
        return path


# -- model / task factories -----------------------------------------------------


def vocab_for_task(cfg: dict) -> tuple[int, int]:
    """(vocab_size, pad_id) implied by the task section."""
    if cfg["task"]["kind"] == "mqar":
        m = cfg["task"]["mqar"]
        vocab = MqarVocab(m["num_keys"], m["num_values"])
        return vocab.size, vocab.pad
    return BYTE_VOCAB_SIZE, BYTE_PAD_ID


def build_model(cfg: dict, rng: RngTree):
    arch = cfg["arch"]
    m = cfg["model"]
    vocab_size = m["vocab_size"] if m["vocab_size"] else vocab_for_task(cfg)[0]
    pad_id = m["pad_id"] if m["vocab_size"] else vocab_for_task(cfg)[1]
    if arch == "cat":
        model_cfg = default_config(
            vocab_size=vocab_size, pad_id=pad_id, width=m["width"], depth=m["depth"],
            chunk_sizes=tuple(m["chunk_sizes"]), heads=m["heads"],
            decoder_width=m["decoder_width"] or None,
            compressor_depth=m["compressor_depth"] or None)
        return CatModel(model_cfg, rng)
    if arch == "cat_layer":
        chunk_sizes = m["chunk_sizes"]
        if len(chunk_sizes) != 1:
            raise ValueError("the per-layer variant uses a single fixed chunk size")
        layer_cfg = CatLayerConfig(
            vocab_size=vocab_size, pad_id=pad_id, width=m["width"], depth=m["depth"],
            num_heads=m["heads"], chunk_size=chunk_sizes[0])
        return CatLayerModel(layer_cfg, rng)
    block = BlockConfig(hidden_size=m["width"], num_heads=m["heads"])
    base_cfg = BaselineConfig(
        arch=arch, depth=m["depth"], block=block, vocab_size=vocab_size,
        pad_id=pad_id, window=m["window"], chunk_size=m["sparse_chunk"])
    return BaselineModel(base_cfg, rng)


@dataclass
class MqarTask:
    train: MqarDataset
    test: MqarDataset

    def batch(self, step: int, rng: RngTree, batch_size: int):
        idx = rng.child("batch").child(step).integers(0, len(self.train), size=batch_size)
        return self.train.batch(idx)


@dataclass
class CorpusTask:
    ds: CorpusDataset
    test_windows: np.ndarray = field(init=False)

    def __post_init__(self):
        n = min(self.ds.num_windows("test"), 16)
        region = self.ds.region("test")
        self.test_windows = np.stack([
            region[w * self.ds.seq_len:(w + 1) * self.ds.seq_len]
            for w in range(n)]).astype(np.int64)

    def batch(self, step: int, rng: RngTree, batch_size: int):
        n_win = self.ds.num_windows("train")
        idx = rng.child("batch").child(step).integers(0, n_win, size=batch_size)
        region = self.ds.region("train")
        toks = np.stack([region[w * self.ds.seq_len:(w + 1) * self.ds.seq_len]
                         for w in idx]).astype(np.int64)
        return toks, None


def build_task(cfg: dict):
    if cfg["task"]["kind"] == "mqar":
        m = cfg["task"]["mqar"]
        vocab = MqarVocab(m["num_keys"], m["num_values"])
        nq = m["num_queries"] or None
        train = mqar_dataset(m["train_instances"], m["num_pairs"], m["seq_len"],
                             vocab, RngTree(cfg["seed"]).child("mqar-train"), nq)
        test = mqar_dataset(m["test_instances"], m["num_pairs"], m["seq_len"],
                            vocab, RngTree(cfg["seed"]).child("mqar-test"), nq)
        return MqarTask(train, test)
    c = cfg["task"]["corpus"]
    if not c["path"]:
        raise ValueError("task.corpus.path: a corpus file is required")
    return CorpusTask(load_corpus(c["path"], c["seq_len"], c["train_frac"]))


# -- forward dispatch ------------------------------------------------------------


def training_loss(model, tokens: np.ndarray, loss_mask: Optional[np.ndarray],
                  c: Optional[int]) -> T.Tensor:
    if isinstance(model, CatModel):
        return forward_train(model, tokens, c, loss_mask)[1]
    if isinstance(model, CatLayerModel):
        return model.forward(tokens, loss_mask)[1]
    return baseline_forward(model, tokens, loss_mask)[1]


def eval_logits_fn(model, c: Optional[int]) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, CatModel):
        def fn(tokens):
            with T.no_grad():
                logits, _ = forward_train(model, tokens, c)
            return logits.data
        return fn
    return model.eval_logits


def heldout_loss(model, windows: np.ndarray, c: Optional[int],
                 batch_size: int = 8) -> float:
    """Mean next-byte loss (nats) over fixed held-out windows."""
    total, count = 0.0, 0
    for start in range(0, len(windows), batch_size):
        toks = windows[start:start + batch_size]
        with T.no_grad():
            loss = training_loss(model, toks, None, c)
        total += loss.item() * len(toks)
        count += len(toks)
    return total / count


def evaluate(model, task, cfg: dict) -> list[dict]:
    """One row per supported chunk size (a single row for baselines)."""
    rows = []
    if isinstance(model, CatModel):
        sizes = model.cfg.chunk_sizes
        fixed = cfg["train"]["fixed_chunk"]
        if fixed:
            sizes = (fixed,)
    else:
        sizes = (None,)
    for c in sizes:
        if isinstance(task, MqarTask):
            acc = mqar_accuracy(eval_logits_fn(model, c), task.test)
            rows.append({"chunk_size": c, "accuracy": acc})
        else:
            rows.append({"chunk_size": c,
                         "heldout_loss": heldout_loss(model, task.test_windows, c)})
    return rows


# -- the loop ---------------------------------------------------------------------


def lr_at(step: int, total_steps: int, opt_cfg: dict) -> float:
    peak = opt_cfg["lr"]
    warmup = opt_cfg["warmup_steps"]
    if warmup > 0 and step < warmup:
        return peak * (step + 1) / warmup
    if opt_cfg["schedule"] == "cosine":
        frac = (step - warmup) / max(1, total_steps - warmup)
        floor = peak * opt_cfg["min_lr_frac"]
        return floor + 0.5 * (peak - floor) * (1 + np.cos(np.pi * min(1.0, frac)))
    return peak


def chunk_for_step(model, cfg: dict, seed: int, step: int) -> Optional[int]:
    if not isinstance(model, CatModel):
        return None
    fixed = cfg["train"]["fixed_chunk"]
    if fixed:
        return fixed
    sizes = model.cfg.chunk_sizes
    if len(sizes) == 1:
        return sizes[0]
    draw = RngTree(seed).child("chunk").child(step).integers(0, len(sizes))
    return int(sizes[draw])


def train_step_pairs(model, c: Optional[int], seq_len: int) -> int:
    if isinstance(model, CatModel):
        n = seq_len + (-seq_len) % c
        return cat_context_pairs(n, c)
    return dense_pairs(seq_len)


@dataclass
class TrainResult:
    model: object
    final_eval: list[dict]
    steps_done: int
    checkpoint: Path
    metrics: Path
    history: list[dict]


def run_training(cfg: dict, out_dir: Optional[Path] = None,
                 resume_from: Optional[str] = None,
                 quiet: bool = False) -> TrainResult:
    out_dir = Path(out_dir or cfg["out_dir"])
    cfg_hash = config_hash(cfg)
    seed = cfg["seed"]
    rng = RngTree(seed)
    model = build_model(cfg, rng.child("init"))
    task = build_task(cfg)
    ocfg = cfg["optimizer"]
    opt = OptimizerState(
        lr=ocfg["lr"], beta1=ocfg["beta1"], beta2=ocfg["beta2"], eps=ocfg["eps"],
        weight_decay=ocfg["weight_decay"],
        grad_clip_norm=ocfg["grad_clip_norm"] or None)
    start_step = 0
    if resume_from:
        meta, arrays, saved_opt = load_checkpoint(resume_from)
        restore_params(model.named_params(), arrays)
        if saved_opt is not None:
            opt = saved_opt
        start_step = meta["step"]
    logger = MetricsLogger(out_dir, cfg_hash, seed, strict=cfg["train"]["strict"])
    tcfg = cfg["train"]
    params = model.named_params()
    steps = tcfg["steps"]
    stop_acc = tcfg["early_stop_acc"]
    history = []
    step = start_step
    while step < steps:
        t0 = time.perf_counter()
        opt.lr = lr_at(step, steps, ocfg)
        tokens, loss_mask = task.batch(step, rng, tcfg["batch_size"])
        c = chunk_for_step(model, cfg, seed, step)
        zero_grads(params)
        loss = training_loss(model, tokens, loss_mask, c)
        val = loss.item()
        if not np.isfinite(val):
            raise T.NonFiniteError(f"training loss diverged at step {step}")
        loss.backward()
        grad_norm = adamw_step(params, opt)
        step += 1
        record = {
            "record": "train", "step": step, "loss": round(val, 6),
            "lr": round(opt.lr, 8), "chunk_size": c,
            "grad_norm": round(grad_norm, 5),
            "attn_pairs": train_step_pairs(model, c, tokens.shape[-1]),
        }
        logger.log(wall_s=time.perf_counter() - t0, **record)
        history.append(record)
        stop = False
        if tcfg["eval_every"] and (step % tcfg["eval_every"] == 0 or step == steps):
            rows = evaluate(model, task, cfg)
            for row in rows:
                logger.log(record="eval", step=step, **row)
                if not quiet:
                    print(f"  step {step}: eval {row}", flush=True)
            accs = [row["accuracy"] for row in rows if "accuracy" in row]
            # adaptive runs stop only once every supported chunk size clears the bar
            if stop_acc and accs and all(a >= stop_acc for a in accs):
                stop = True
        if tcfg["checkpoint_every"] and step % tcfg["checkpoint_every"] == 0:
            save_checkpoint(out_dir / f"ckpt_{step}.npz", params, cfg, step, opt)
        if stop:
            break
    final_eval = evaluate(model, task, cfg)
    for row in final_eval:
        logger.log(record="final_eval", step=step, **row)
    ckpt = out_dir / "ckpt_final.npz"
    save_checkpoint(ckpt, params, cfg, step, opt)
    metrics = logger.write_summary()
    return TrainResult(model=model, final_eval=final_eval, steps_done=step,
                       checkpoint=ckpt, metrics=metrics, history=history)


def train_baseline_grid(cfg: dict, lrs: list[float],
                        out_dir: Optional[Path] = None,
                        quiet: bool = False) -> tuple[TrainResult, float, list[dict]]:
    """Train one config per learning rate; return the best run by accuracy.

    The per-cell accuracy table is part of the result so reports can show the
    whole grid, not just the winner.
    """
    if not lrs:
        raise ValueError("learning-rate grid must be nonempty")
    out_dir = Path(out_dir or cfg["out_dir"])
    table = []
    best: Optional[tuple[float, TrainResult]] = None
    for lr in lrs:
        cell = json.loads(json.dumps(cfg))
        cell["optimizer"]["lr"] = lr
        result = run_training(cell, out_dir / f"lr_{lr:g}", quiet=quiet)
        acc = max((row.get("accuracy", 0.0) for row in result.final_eval), default=0.0)
        table.append({"lr": lr, "accuracy": acc, "steps": result.steps_done})
        if best is None or acc > best[0]:
            best = (acc, result)
    return best[1], best[0], table
