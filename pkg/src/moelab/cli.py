"""Command-line entry points.

One subcommand per experiment driver; every command writes CSV and JSON
results into a per-run directory, with the config hash and seed embedded in
each output. Exit codes: 0 on success, 3 if a training run halted, 1 if any
comparison run failed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiments as X
from .data import Corpus, batches, make_skewed_synthetic
from .training import TrainRunConfig, load_checkpoint, train


def corpus_from_spec(spec: dict) -> Corpus:
    """data section of a config file: {"kind": "skewed" | "files", ...}."""
    kind = spec.get("kind")
    if kind == "skewed":
        keys = ("n_tokens", "modes", "seed", "tile_len", "segment_len",
                "val_fraction", "mutation_rate")
        return make_skewed_synthetic(**{k: spec[k] for k in keys if k in spec})
    if kind == "files":
        return Corpus.from_paths(spec["paths"],
                                 val_fraction=spec.get("val_fraction", 0.1))
    raise ValueError(f"unknown data kind {kind!r}; expected 'skewed' or 'files'")


def _load_config(path):
    cfg = json.loads(Path(path).read_text())
    return TrainRunConfig.from_dict(cfg["run"]), cfg["data"]


def _ints(s: str) -> list:
    return [int(x) for x in s.split(",") if x]


def _floats(s: str) -> list:
    return [float(x) for x in s.split(",") if x]


def _eval_stream(run: TrainRunConfig, corpus: Corpus, n: int) -> list:
    stream = list(batches(corpus, run.batch_size, run.seq_len,
                          seed=run.seed + 1, split="val", epochs=1))
    return stream[:n]


def _ckpt_setup(args):
    model, _, manifest = load_checkpoint(args.ckpt)
    run = TrainRunConfig.from_dict(manifest["config"])
    corpus = corpus_from_spec(json.loads(Path(args.data).read_text()))
    return model, run, _eval_stream(run, corpus, args.eval_batches)


def _write_rows_csv(path, fieldnames: list, rows: list, provenance: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {provenance}\n")
        fh.write(",".join(fieldnames) + "\n")
        for row in rows:
            fh.write(",".join(X._fmt(row[k]) for k in fieldnames) + "\n")


def cmd_train(args) -> int:
    run, data = _load_config(args.config)
    corpus = corpus_from_spec(data)
    result = train(run, corpus, args.out)
    print(f"status={result.status} steps={result.steps} out={result.out_dir}")
    if result.final_report is not None:
        print(f"perplexity={result.final_report.perplexity:.6g} "
              f"min_pes={result.final_report.min_pes:.6g}")
    if result.status != "ok":
        print(f"halted: {result.halted_reason}", file=sys.stderr)
        return 3
    return 0


def cmd_bench_ortho(args) -> int:
    table = X.bench_orthogonality(rows=args.rows, cols=args.cols,
                                  trials=args.trials, steps=args.steps,
                                  seed=args.seed,
                                  include_projected=args.projected,
                                  include_bf16=args.bf16)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "bench_ortho.csv")
    table.to_json(out / "bench_ortho.json")
    for row in table.rows:
        print(f"{row['name']:22s} max_dev={row['max_dev_mean']:.3e} "
              f"l1={row['l1_mean']:.3e}")
    print(f"wrote {out / 'bench_ortho.csv'}")
    return 0


def cmd_compare(args) -> int:
    base, data = _load_config(args.config)
    corpus = corpus_from_spec(data)
    table, details = X.run_comparison(base, args.strategies.split(","),
                                      _ints(args.seeds), corpus, args.out,
                                      target_ppl=args.target_ppl)
    out = Path(args.out)
    table.to_csv(out / "comparison.csv")
    table.to_json(out / "comparison.json")
    (out / "comparison_details.json").write_text(
        json.dumps(details, indent=2, sort_keys=True))
    for row in table.rows:
        print(f"{row['name']:12s} ppl={row['perplexity_mean']:.4g} "
              f"min_pes={row['min_pes_mean']:.4g}")
    if details["failed"]:
        print(f"{len(details['failed'])} run(s) failed and were excluded:",
              file=sys.stderr)
        for f in details["failed"]:
            print(f"  {f['strategy']} seed={f['seed']}: {f['reason']}",
                  file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args) -> int:
    base, data = _load_config(args.config)
    corpus = corpus_from_spec(data)
    table = X.coefficient_sweep(base, _floats(args.coefficients),
                                _ints(args.seeds), corpus, args.out)
    out = Path(args.out)
    table.to_csv(out / "sweep.csv")
    table.to_json(out / "sweep.json")
    for row in table.rows:
        print(f"coeff={row['name']:8s} ppl={row['perplexity_mean']:.4g} "
              f"min_pes={row['min_pes_mean']:.4g}")
    return 0


def cmd_drop_experts(args) -> int:
    model, run, stream = _ckpt_setup(args)
    results, counts = X.drop_top_experts(model, _ints(args.k_list), stream)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = f"config_hash={run.hash()} seed={run.seed}"
    _write_rows_csv(out / "drop_experts.csv", ["k", "perplexity"],
                    results, prov)
    (out / "drop_experts.json").write_text(json.dumps(
        {"config_hash": run.hash(), "seed": run.seed, "results": results,
         "selection_counts": counts.tolist()}, indent=2, sort_keys=True))
    for r in results:
        print(f"k={r['k']} perplexity={r['perplexity']:.6g}")
    return 0


def cmd_prune_eval(args) -> int:
    model, run, stream = _ckpt_setup(args)
    results = X.prune_eval(model, _floats(args.thresholds), stream)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = f"config_hash={run.hash()} seed={run.seed}"
    # wall times go to a separate file: they are not reproducible and must
    # not break byte-identical reruns of the metric CSV
    _write_rows_csv(out / "prune_eval.csv",
                    ["threshold", "perplexity", "expert_evals"], results, prov)
    (out / "timings.json").write_text(json.dumps(
        {"config_hash": run.hash(), "seed": run.seed,
         "wall_time_s": {str(r["threshold"]): r["wall_time_s"]
                         for r in results}}, indent=2, sort_keys=True))
    for r in results:
        print(f"threshold={r['threshold']:g} perplexity={r['perplexity']:.6g} "
              f"expert_evals={r['expert_evals']}")
    return 0


def cmd_pes_series(args) -> int:
    corpus = corpus_from_spec(json.loads(Path(args.data).read_text()))
    series = X.pes_over_checkpoints(args.run_dir, corpus,
                                    max_batches=args.eval_batches)
    run_cfg = json.loads((Path(args.run_dir) / "config.json").read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    X.write_pes_series_csv(out / "pes_series.csv", series)
    depth = len(series["per_layer"])
    rate_rows = [{"step_from": series["steps"][k],
                  "step_to": series["steps"][k + 1],
                  **{f"rate_layer{i}": series["rates"][i][k]
                     for i in range(depth)}}
                 for k in range(len(series["steps"]) - 1)]
    _write_rows_csv(out / "pes_rates.csv",
                    ["step_from", "step_to"]
                    + [f"rate_layer{i}" for i in range(depth)],
                    rate_rows,
                    f"config_hash={run_cfg['config_hash']} seed={run_cfg['seed']}")
    (out / "pes_series.json").write_text(json.dumps(
        {"config_hash": run_cfg["config_hash"], "seed": run_cfg["seed"],
         **series}, indent=2, sort_keys=True))
    print(f"wrote {out / 'pes_series.csv'} ({len(series['steps'])} checkpoints)")
    return 0


def cmd_flops(args) -> int:
    import hashlib
    v = X.estimate_flops(args.active, args.embed, args.tokens)
    print(f"flops={v:.17g} display={X.format_flops(v)}")
    if args.out:
        params = {"active_params": args.active, "embed_params": args.embed,
                  "tokens": args.tokens}
        blob = json.dumps(params, sort_keys=True)
        Path(args.out).write_text(json.dumps(
            {**params, "config_hash": hashlib.sha256(blob.encode()).hexdigest()[:16],
             "flops": v, "display": X.format_flops(v)}, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moelab",
                                description="MoE balancing experiments")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training configuration")
    t.add_argument("--config", required=True, help="JSON with 'run' and 'data'")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    b = sub.add_parser("bench-ortho", help="orthogonalization microbenchmark")
    b.add_argument("--rows", type=int, default=1536)
    b.add_argument("--cols", type=int, default=32)
    b.add_argument("--trials", type=int, default=20)
    b.add_argument("--steps", type=int, default=100)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--projected", action="store_true",
                   help="include the QR-retraction baseline")
    b.add_argument("--bf16", action="store_true",
                   help="add brain-float-cast rows for each method")
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_bench_ortho)

    c = sub.add_parser("compare", help="train strategies side by side")
    c.add_argument("--config", required=True)
    c.add_argument("--strategies", default="none,lbl,simbal")
    c.add_argument("--seeds", default="0,1,2")
    c.add_argument("--target-ppl", type=float, default=None)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_compare)

    s = sub.add_parser("sweep", help="similarity-loss coefficient sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--coefficients", default="1.0,0.1,0.01")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)

    d = sub.add_parser("drop-experts", help="mask the most-used experts")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True, help="JSON data spec")
    d.add_argument("--k-list", default="0,1,2")
    d.add_argument("--eval-batches", type=int, default=8)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_drop_experts)

    pr = sub.add_parser("prune-eval", help="gate-probability pruning study")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--thresholds", default="0,0.1,0.15,0.2")
    pr.add_argument("--eval-batches", type=int, default=8)
    pr.add_argument("--out", required=True)
    pr.set_defaults(fn=cmd_prune_eval)

    ps = sub.add_parser("pes-series", help="expert similarity across checkpoints")
    ps.add_argument("--run-dir", required=True)
    ps.add_argument("--data", required=True)
    ps.add_argument("--eval-batches", type=int, default=4)
    ps.add_argument("--out", required=True)
    ps.set_defaults(fn=cmd_pes_series)

    f = sub.add_parser("flops", help="training compute estimate")
    f.add_argument("--active", type=float, required=True)
    f.add_argument("--embed", type=float, required=True)
    f.add_argument("--tokens", type=float, required=True)
    f.add_argument("--out", default=None)
    f.set_defaults(fn=cmd_flops)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
