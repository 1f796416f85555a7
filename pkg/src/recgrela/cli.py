"""Command-line entry point: dataset preparation, training, evaluation,
benchmarking, and rank probing.

Every command writes a ``manifest.txt`` (config echo, seed, version, wall
time) under its output directory, sufficient to re-run exactly.  All
randomness flows from ``--seed``; ``train`` draws and prints one when the
seed is unset.  Config precedence: defaults < config file < RECGRELA_*
environment variables < ``--set KEY=VALUE``.

On failure the last stderr line is ``ERROR <class>: message`` with a stable
kebab-case class, and the exit code is nonzero.
"""

import argparse
import json
import secrets
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, bench, kernels
from .config import (
    SCHEMA,
    format_config,
    model_config_from,
    parse_config_text,
    parse_overrides,
    resolve,
)
from .data import (
    build_dataset,
    dataset_stats,
    format_stats_table,
    load_cache,
    load_interactions,
    save_cache,
    synth_markov,
)
from .errors import ContractError, EngineError
from .grela import GrelaModel, forward_features, load_checkpoint, save_checkpoint
from .numerics import make_rng
from .training import (
    TrainConfig,
    evaluate,
    train,
    write_history_jsonl,
    write_report_table,
)

MANIFEST_NAME = "manifest.txt"
DATASET_NAME = "dataset.cache"
CHECKPOINT_NAME = "checkpoint.grela"
HISTORY_NAME = "metrics.jsonl"
REPORT_NAME = "report.tsv"
BENCH_TSV = "bench.tsv"
BENCH_JSONL = "bench.jsonl"
RANK_GRID = "rank_grid.txt"
RANK_SUMMARY = "rank_summary.json"


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, seed, started: float,
                    entries: dict):
    lines = [f"command = {command}",
             f"version = {__version__}",
             f"seed = {seed}",
             f"kernel_backend = {kernels.active_backend()}",
             f"wall_time_s = {time.perf_counter() - started:.3f}"]
    lines += [f"{k} = {v}" for k, v in entries.items()]
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _resolved_values(args) -> dict:
    file_values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ContractError(f"config file not found: {path}")
        file_values = parse_config_text(path.read_text(encoding="utf-8"),
                                        source=str(path))
    return resolve(file_values, parse_overrides(getattr(args, "set", None)))


def _train_config(values: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=values["learning_rate"], batch_size=values["batch_size"],
        max_epochs=values["max_epochs"], patience=values["patience"],
        adam_beta1=values["adam_beta1"], adam_beta2=values["adam_beta2"],
        adam_eps=values["adam_eps"], clip_norm=values["clip_norm"],
        seed=seed, eval_metric=values["eval_metric"],
        eval_batch_size=values["eval_batch_size"],
        mask_seen=values["mask_seen"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    started = time.perf_counter()
    out = _out_dir(args.out)
    if args.synthetic:
        seed = args.seed if args.seed is not None else 0
        ds = synth_markov(num_users=args.users, vocab=args.vocab,
                          sharpness=args.sharpness, seed=seed,
                          seq_len=args.seq_len)
        source = f"synthetic(users={args.users}, vocab={args.vocab}, " \
                 f"sharpness={args.sharpness})"
    else:
        if not args.input:
            raise ContractError("prepare needs --input or --synthetic")
        records = load_interactions(args.input, fmt=args.format,
                                    user_col=args.user_col,
                                    item_col=args.item_col,
                                    time_col=args.time_col)
        ds = build_dataset(records, min_user=args.min_user,
                           min_item=args.min_item, max_len=args.max_len,
                           one_pass=args.one_pass)
        seed = args.seed if args.seed is not None else 0
        source = str(args.input)
    cache_path = out / DATASET_NAME
    save_cache(ds, cache_path)
    stats = dataset_stats(ds)
    print(format_stats_table(stats, name=Path(source).stem if not args.synthetic
                             else "synthetic"))
    print(f"dataset cache written to {cache_path}")
    _write_manifest(out, "prepare", seed, started,
                    {"source": source, "cache": cache_path,
                     **{f"stats_{k}": v for k, v in stats.items()}})
    return 0


def _run_train(values: dict, data_path: str, out: Path, seed: int) -> None:
    started = time.perf_counter()
    ds = load_cache(data_path)
    model_cfg = model_config_from(values, vocab_size=ds.vocab_size)
    print(f"long-term regime: {model_cfg.long_term} "
          f"(max_len {model_cfg.max_len} vs 1.5*dim = {1.5 * model_cfg.dim:.0f})")
    model = GrelaModel(model_cfg, seed=seed)
    train_cfg = _train_config(values, seed)
    result = train(model, ds, train_cfg)
    ckpt = out / CHECKPOINT_NAME
    save_checkpoint(model, ckpt, extra={"best_epoch": result.best_epoch,
                                        "best_metric": result.best_metric})
    write_history_jsonl(result, out / HISTORY_NAME)
    test_report = evaluate(model, ds, "test", topk=train_cfg.topk,
                           batch_size=train_cfg.eval_batch_size,
                           mask_seen=train_cfg.mask_seen,
                           epoch=result.best_epoch)
    best_valid = result.history[result.best_epoch - 1]
    write_report_table([best_valid, test_report], out / REPORT_NAME)
    echo = dict(values)
    echo["seed"] = seed
    echo["data"] = data_path
    echo["out"] = str(out)
    (out / "config.echo").write_text(format_config(echo), encoding="utf-8")
    _write_manifest(out, "train", seed, started,
                    {"epochs_run": result.epochs_run,
                     "best_epoch": result.best_epoch,
                     f"valid_{train_cfg.eval_metric}": result.best_metric,
                     "checkpoint": ckpt, "data": data_path})
    metrics = " ".join(f"{k}={v:.4f}" for k, v in sorted(test_report.metrics.items()))
    print(f"best epoch {result.best_epoch} "
          f"(valid {train_cfg.eval_metric}={result.best_metric:.4f})")
    print(f"test: {metrics}")


def cmd_train(args) -> int:
    values = _resolved_values(args)
    data_path = args.data or values["data"]
    if not data_path:
        raise ContractError("train needs --data (or a data= config entry)")
    out_base = args.out or values["out"]
    if not out_base:
        raise ContractError("train needs --out (or an out= config entry)")
    if args.seed is not None:
        seed = args.seed
    elif values["seed"]:
        seed = values["seed"]
    else:
        seed = secrets.randbelow(2 ** 31)
        print(f"drew seed {seed}")
    if args.sweep:
        key, _, raw = args.sweep.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ContractError(f"--sweep: unknown config key {key!r}")
        for raw_value in raw.split(","):
            point = SCHEMA[key].parse(raw_value.strip())
            sub = dict(values)
            sub[key] = point
            sub_out = _out_dir(Path(out_base) / f"{key}={point}")
            print(f"== sweep point {key}={point} -> {sub_out}")
            _run_train(sub, data_path, sub_out, seed)
        return 0
    _run_train(values, data_path, _out_dir(out_base), seed)
    return 0


def cmd_eval(args) -> int:
    started = time.perf_counter()
    out = _out_dir(args.out)
    values = _resolved_values(args)
    model, extra = load_checkpoint(args.checkpoint)
    ds = load_cache(args.data)
    topk = tuple(int(k) for k in args.topk.split(","))
    report = evaluate(model, ds, args.split, topk=topk,
                      batch_size=values["eval_batch_size"],
                      mask_seen=values["mask_seen"])
    write_report_table([report], out / REPORT_NAME, topk=topk)
    metrics = " ".join(f"{k}={v:.4f}" for k, v in sorted(report.metrics.items()))
    print(f"{args.split}: {metrics}")
    _write_manifest(out, "eval", model.seed, started,
                    {"checkpoint": args.checkpoint, "split": args.split,
                     "data": args.data,
                     **{k: f"{v:.6f}" for k, v in report.metrics.items()}})
    return 0


def cmd_bench(args) -> int:
    started = time.perf_counter()
    out = _out_dir(args.out)
    values = [int(v) for v in args.values.split(",")]
    if args.backend == "both":
        backends = kernels.available_backends()
    elif args.backend == "auto":
        backends = (kernels.active_backend(),)
    else:
        backends = (args.backend,)
    records = []
    exponents = {}
    for backend in backends:
        report = bench.runtime_sweep(args.variant, args.axis, values,
                                     repeats=args.repeats,
                                     base={"dim": args.dim},
                                     backend=backend, causal=args.causal,
                                     seed=args.seed or 0)
        suffix = f".{backend}" if len(backends) > 1 else ""
        bench.write_report_tsv(report, out / (BENCH_TSV + suffix))
        records.extend(bench.report_records(report))
        exponents[backend] = report.exponent
        for p in report.points:
            print(f"{backend:>7} {args.variant} {args.axis}={p.axis_value:<6} "
                  f"{p.status:>4} time={p.median_time:.6f}s "
                  f"mem={p.mem_peak_bytes}B flops={p.flops:.3e}")
        print(f"{backend:>7} fitted {args.axis}-exponent: {report.exponent:.3f}")
    with open(out / BENCH_JSONL, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    _write_manifest(out, "bench", args.seed or 0, started,
                    {"variant": args.variant, "axis": args.axis,
                     "values": args.values,
                     **{f"exponent_{b}": f"{e:.4f}" for b, e in exponents.items()}})
    return 0


def cmd_rank(args) -> int:
    started = time.perf_counter()
    out = _out_dir(args.out)
    seed = args.seed or 0
    summary = {}
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        gen = make_rng((seed, 3))
        n = min(args.n, model.config.max_len)
        ids = gen.integers(1, model.config.vocab_size, size=(1, n))
        feats = forward_features(model, ids).data[0]
        rank_value, grid = bench.rank_probe(feats)
        summary["source"] = f"checkpoint:{args.checkpoint}"
        summary["feature_rank"] = rank_value
        summary["shape"] = list(feats.shape)
        print(f"feature map rank: {rank_value} / {min(feats.shape)}")
    else:
        gen = make_rng((seed, 4))
        q = gen.normal(size=(args.n, args.d))
        k = gen.normal(size=(args.n, args.d))
        from .attention import materialize_mixing_matrix

        mix = materialize_mixing_matrix(q, k, "linear")
        rank_value, grid = bench.rank_probe(mix)
        summary["source"] = "random"
        summary["mixing_rank"] = rank_value
        summary["width_bound"] = args.d
        print(f"mixing matrix rank: {rank_value} (bound: width d = {args.d})")
        compare = bench.block_output_rank_compare(seeds=args.seeds, n=args.n,
                                                  dim=args.d,
                                                  seed_base=seed)
        summary["block_compare"] = {k2: v for k2, v in compare.items()
                                    if not k2.startswith("ranks_")}
        print(f"block output rank median: with conv branch "
              f"{compare['median_with']:.0f}, without {compare['median_without']:.0f}")
        print(f"fused-representation rank median: with {compare['fused_median_with']:.0f}, "
              f"without {compare['fused_median_without']:.0f} "
              f"(cap {compare['max_possible']})")
    bench.write_grid(grid, out / RANK_GRID)
    (out / RANK_SUMMARY).write_text(json.dumps(summary, indent=2) + "\n",
                                    encoding="utf-8")
    _write_manifest(out, "rank", seed, started, summary if "block_compare" not in summary
                    else {k: v for k, v in summary.items() if k != "block_compare"})
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recgrela",
        description="Gated rotary-enhanced linear attention engine for "
                    "sequential recommendation",
        epilog="Every config key accepts an environment override "
               "RECGRELA_<KEY> (e.g. RECGRELA_LEARNING_RATE).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a dataset cache")
    p.add_argument("--input", help="interaction log (tsv/csv with header)")
    p.add_argument("--format", choices=("tsv", "csv"), default="tsv")
    p.add_argument("--user-col", default="user_id")
    p.add_argument("--item-col", default="item_id")
    p.add_argument("--time-col", default="timestamp")
    p.add_argument("--min-user", type=int, default=5)
    p.add_argument("--min-item", type=int, default=5)
    p.add_argument("--max-len", type=int, default=200)
    p.add_argument("--one-pass", action="store_true",
                   help="single filtering pass instead of iterating to a fixed point")
    p.add_argument("--synthetic", action="store_true",
                   help="generate a first-order synthetic dataset instead")
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--vocab", type=int, default=100)
    p.add_argument("--sharpness", type=float, default=0.8)
    p.add_argument("--seq-len", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--data", help="dataset cache from prepare")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override (repeatable)")
    p.add_argument("--sweep", metavar="KEY=V1,V2,...",
                   help="train once per value, under out/<key>=<value>/")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--topk", default="5,10")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="runtime/memory scaling sweep")
    p.add_argument("--variant", choices=("rela", "linear", "dot_product"),
                   default="rela")
    p.add_argument("--axis", choices=("N", "L", "h"), default="N")
    p.add_argument("--values", default="128,256,512,1024,2048,4096")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--causal", action="store_true")
    p.add_argument("--backend", default="auto",
                   choices=("auto", "numpy", "cython", "both"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("rank", help="numerical-rank probes")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--random", action="store_true")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--seeds", type=int, default=20,
                   help="seeds for the conv-branch comparison")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EngineError as exc:
        print(f"ERROR {exc.error_class}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"ERROR io-error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # keep one parseable line even for bugs
        print(f"ERROR internal-error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
