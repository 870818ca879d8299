"""Command-line harness: train, eval, generate, bench, mask-audit, gradcheck.

Every command takes a config (file and/or packaged preset plus dotted
overrides), stamps outputs with the config hash + seed + artifact version,
and exits nonzero with a category code on failure:

    2 config error, 3 data error, 4 checkpoint error, 5 audit failure, 1 other.

The output directory comes from the config; the CATLM_OUT_DIR environment
variable overrides it (the only env var the harness reads).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, restore_params
from .config import ConfigError, config_hash, list_presets, load_config
from .costs import AuditError, build_report, cat_train_pairs, enumerate_interleaved_pairs
from .gradcheck import finite_diff_check, max_rel_err
from .generate import SamplerConfig, generate
from .masks import InterleaveLayout, build_mask, cat_interleaved, dense_causal, \
    sliding_window, sparse_strided
from .model import CatModel
from .rng import RngTree
from .tasks import BYTE_PAD_ID, write_synthetic_corpus
from .training import (ARTIFACT_VERSION, build_model, build_task, evaluate,
                       run_training, train_baseline_grid)

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_AUDIT = 5


def _out_dir(cfg: dict) -> Path:
    return Path(os.environ.get("CATLM_OUT_DIR", cfg["out_dir"]))


def _load_cfg(args) -> dict:
    cfg = load_config(path=args.config, preset=args.preset, overrides=args.set)
    return cfg


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--preset", help=f"packaged preset ({', '.join(list_presets())})")
    p.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE",
                   help="override a config value (repeatable)")


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg)
    if args.lr_grid:
        lrs = [float(x) for x in args.lr_grid.split(",")]
        best, acc, table = train_baseline_grid(cfg, lrs, out_dir=out, quiet=args.quiet)
        with open(out / "grid.json", "w") as fh:
            json.dump({"config_hash": config_hash(cfg), "best_accuracy": acc,
                       "table": table}, fh, indent=2)
        print(f"grid best accuracy {acc:.4f} over {len(table)} cells -> {out}")
        return EXIT_OK
    result = run_training(cfg, out_dir=out, resume_from=args.resume, quiet=args.quiet)
    print(f"trained {result.steps_done} steps -> {result.checkpoint}")
    for row in result.final_eval:
        print(f"  final eval: {row}")
    return EXIT_OK


def _restore(args, cfg: dict):
    model = build_model(cfg, RngTree(cfg["seed"]).child("init"))
    meta, arrays, _ = load_checkpoint(args.checkpoint)
    restore_params(model.named_params(), arrays)
    return model, meta


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    model, _ = _restore(args, cfg)
    task = build_task(cfg)
    rows = evaluate(model, task, cfg)
    out = _out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["config_hash", "seed",
                                                "artifact_version", *rows[0]])
        writer.writeheader()
        for row in rows:
            writer.writerow({"config_hash": config_hash(cfg), "seed": cfg["seed"],
                             "artifact_version": ARTIFACT_VERSION, **row})
    for row in rows:
        print(row)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    model, _ = _restore(args, cfg)
    if not isinstance(model, CatModel):
        print("generation requires a chunk-compressing model checkpoint", file=sys.stderr)
        return EXIT_CONFIG
    raw = Path(args.prompt).read_bytes()
    if args.prompt_format == "bytes":
        prompt = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    else:
        try:
            prompt = np.array(raw.decode().split(), dtype=np.int64)
        except ValueError as e:
            print(f"malformed prompt file: {e}", file=sys.stderr)
            return EXIT_DATA
    if prompt.size == 0:
        print("prompt file is empty", file=sys.stderr)
        return EXIT_DATA
    c = args.chunk_size or model.cfg.chunk_sizes[0]
    sampler = SamplerConfig(mode="temperature", temperature=args.temperature,
                            seed=cfg["seed"]) if args.temperature else SamplerConfig()
    tokens, trace = generate(model, prompt, args.num_tokens, c, sampler)
    out = _out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    if args.prompt_format == "bytes":
        (out / "continuation.txt").write_bytes(
            bytes(int(t) % 256 for t in tokens if t != BYTE_PAD_ID))
    (out / "continuation_ids.txt").write_text(" ".join(map(str, tokens)) + "\n")
    trace_path = out / "occupancy_trace.csv"
    with open(trace_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "live_entries", "attended_keys",
                         "reps_filled", "chunk_tokens_filled"])
        for e in trace:
            writer.writerow([e.t, e.live_entries, e.attended_keys,
                             e.reps_filled, e.chunk_tokens_filled])
    peak = max(e.live_entries for e in trace)
    print(f"generated {len(tokens)} tokens at C={c}; peak live entries {peak} "
          f"vs dense {trace[-1].t}; trace -> {trace_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_cfg(args)
    sizes = cfg["model"]["chunk_sizes"]
    n_grid = [int(x) for x in args.lengths.split(",")]
    out = _out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bench.csv"
    fields = ["n", "c", "train_attention_pairs", "train_context_pairs",
              "compress_attention_pairs", "dense_attention_pairs",
              "state_size_values", "dense_state_size_values",
              "cache_capacity_entries", "peak_live_entries",
              "dense_cache_entries", "entry_ratio", "saves_memory",
              "cache_bytes_estimate", "dense_cache_bytes_estimate"]
    rows = []
    for n in n_grid:
        for c in sizes:
            if n % c != 0:
                continue
            r = build_report(n, c, cfg["model"]["width"], cfg["model"]["depth"])
            row = {k: getattr(r, k) for k in fields if k not in ("saves_memory",)}
            row["saves_memory"] = r.entry_ratio > 1.0
            rows.append(row)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    print(f"# bytes columns assume 4-byte floats, K and V, {cfg['model']['depth']} layers")
    for row in rows:
        print(f"N={row['n']:>6} C={row['c']:>3} entry_ratio={row['entry_ratio']:.2f} "
              f"train_pairs={row['train_attention_pairs']} "
              f"dense_pairs={row['dense_attention_pairs']}")
    print(f"wrote {path}")
    return EXIT_OK


def _render_mask(allowed: np.ndarray, layout=None) -> str:
    """Text grid: '#' allowed, '.' blocked; rep rows/cols marked in the gutter."""
    marks = []
    for i in range(allowed.shape[0]):
        if layout is None:
            marks.append(" ")
        elif layout.with_indicator and i == layout.indicator_index:
            marks.append("I")
        elif layout.is_rep_slot[i]:
            marks.append("R")
        else:
            marks.append("t")
    header = "   " + "".join(marks) + "\n"
    lines = [header]
    for i, row in enumerate(allowed):
        lines.append(f"{marks[i]}  " + "".join("#" if a else "." for a in row) + "\n")
    return "".join(lines)


def cmd_mask_audit(args) -> int:
    n, c = args.length, args.chunk_size
    if args.kind == "cat":
        breakdown = cat_train_pairs(n, c)  # raises AuditError on mismatch
        enum = enumerate_interleaved_pairs(n, c)
        layout = InterleaveLayout.build(n // c, c, with_indicator=True)
        mask = build_mask(cat_interleaved(c), layout.total_length, layout)
        print(f"mask kind=cat N={n} C={c} interleaved_length={layout.total_length}")
        print(f"  context-row pairs (formula)    = {breakdown.context_rows}")
        print(f"  context-row pairs (enumerated) = {enum.context_rows}")
        print(f"  chunk-final rows               = {breakdown.boundary_rows}")
        print(f"  indicator row                  = {breakdown.indicator_row}")
        print(f"  total mask pairs               = {breakdown.total}")
        print("PASS: enumeration matches the closed form")
    else:
        spec = {"dense": dense_causal(),
                "sliding": sliding_window(args.window),
                "sparse": sparse_strided(c)}[args.kind]
        mask = build_mask(spec, n)
        layout = None
        print(f"mask kind={args.kind} N={n} allowed={mask.allowed_count()}")
        if args.kind == "dense" and mask.allowed_count() != n * (n + 1) // 2:
            raise AuditError("dense mask count differs from N(N+1)/2")
        print("PASS")
    if args.render:
        text = _render_mask(mask.allowed, layout)
        out = Path(args.render)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        print(f"rendered grid -> {out}")
        if mask.length <= 80:
            print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .blocks import BlockConfig
    from .model import CatModelConfig, forward_train

    cfg = CatModelConfig(
        vocab_size=13, pad_id=0, chunk_sizes=(2,),
        compressor=BlockConfig(hidden_size=8, num_heads=2),
        compressor_depth=1,
        decoder=BlockConfig(hidden_size=8, num_heads=2),
        decoder_depth=1)
    model = CatModel(cfg, RngTree(args.seed), dtype=np.float64)
    tokens = RngTree(args.seed).child("tok").integers(1, 13, size=8)
    params = model.named_params()
    results = finite_diff_check(
        lambda: forward_train(model, tokens, 2)[1], params,
        h=1e-4, max_entries=args.entries)
    worst = max_rel_err(results)
    for r in sorted(results, key=lambda r: -r.max_rel_err)[:10]:
        print(f"  {r.name:<40} rel_err={r.max_rel_err:.2e}")
    print(f"worst relative error {worst:.3e} over {len(results)} parameters "
          f"(tolerance {args.tol})")
    if worst > args.tol:
        print("FAIL", file=sys.stderr)
        return EXIT_AUDIT
    print("PASS")
    return EXIT_OK


def cmd_make_corpus(args) -> int:
    path = write_synthetic_corpus(args.out, args.bytes, seed=args.seed)
    print(f"wrote {path} ({path.stat().st_size} bytes)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="catlm", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model per config")
    _add_config_args(t)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--lr-grid", help="comma-separated LRs; grid-search instead")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (one row per chunk size)")
    _add_config_args(e)
    e.add_argument("checkpoint")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("generate", help="generate with the compressed cache")
    _add_config_args(g)
    g.add_argument("checkpoint")
    g.add_argument("prompt", help="prompt file")
    g.add_argument("--prompt-format", choices=["bytes", "ids"], default="bytes")
    g.add_argument("--num-tokens", type=int, default=128)
    g.add_argument("--chunk-size", type=int, default=0)
    g.add_argument("--temperature", type=float, default=0.0,
                   help="0 = greedy")
    g.set_defaults(fn=cmd_generate)

    b = sub.add_parser("bench", help="cost table over sequence lengths and chunk sizes")
    _add_config_args(b)
    b.add_argument("--lengths", default="256,1024,4096")
    b.set_defaults(fn=cmd_bench)

    m = sub.add_parser("mask-audit", help="verify mask counts against closed forms")
    m.add_argument("kind", choices=["cat", "dense", "sliding", "sparse"])
    m.add_argument("length", type=int)
    m.add_argument("--chunk-size", type=int, default=16)
    m.add_argument("--window", type=int, default=64)
    m.add_argument("--render", help="write a text grid of the mask here")
    m.set_defaults(fn=cmd_mask_audit)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--entries", type=int, default=24)
    gc.add_argument("--tol", type=float, default=1e-3)
    gc.set_defaults(fn=cmd_gradcheck)

    mc = sub.add_parser("make-corpus", help="write a synthetic byte corpus")
    mc.add_argument("out")
    mc.add_argument("--bytes", type=int, default=1_200_000)
    mc.add_argument("--seed", type=int, default=0)
    mc.set_defaults(fn=cmd_make_corpus)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except AuditError as e:
        print(f"audit failure: {e}", file=sys.stderr)
        return EXIT_AUDIT
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except T.NonFiniteError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
