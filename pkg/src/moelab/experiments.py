"""Experiment drivers: the orthogonalization microbenchmark, strategy
comparisons, the coefficient sweep, expert dropping and pruning studies,
similarity-over-training series, and the compute estimator.

Every driver is deterministic given (config, seeds); wall-clock timings are
reported separately so the metric files stay byte-reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics as MX
from . import tensor as T
from .balancing import BalancingSpec, simbal_loss
from .data import Corpus, batches
from .model import Model
from .tensor import Graph, Tensor
from .training import (OptimizerState, ScheduleConfig, TrainRunConfig,
                       _qr_orthonormal, adamw_step, load_checkpoint, lr_at,
                       orthogonal_init, train)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


@dataclass
class ResultTable:
    """Rows of named measurements, mean and stddev over trials.

    stddev columns are written only when a row has at least two samples;
    single-trial rows leave them empty.
    """
    title: str
    metrics: list[str]
    rows: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def add_row(self, name: str, samples: dict) -> None:
        row = {"name": name, "trials": 0}
        for metric in self.metrics:
            values = [float(v) for v in samples[metric]]
            row["trials"] = max(row["trials"], len(values))
            row[f"{metric}_mean"] = float(np.mean(values))
            row[f"{metric}_std"] = (float(np.std(values, ddof=1))
                                    if len(values) >= 2 else None)
            row[f"{metric}_values"] = values
        self.rows.append(row)

    def mean(self, name: str, metric: str) -> float:
        for row in self.rows:
            if row["name"] == name:
                return row[f"{metric}_mean"]
        raise KeyError(name)

    def to_csv(self, path) -> None:
        cols = ["name", "trials"]
        for m in self.metrics:
            cols += [f"{m}_mean", f"{m}_std"]
        prov = " ".join(f"{k}={v}" for k, v in sorted(self.provenance.items()))
        with open(path, "w") as fh:
            fh.write(f"# {self.title}" + (f" {prov}" if prov else "") + "\n")
            fh.write(",".join(cols) + "\n")
            for row in self.rows:
                fh.write(",".join(
                    "" if row[c] is None else _fmt(row[c]) for c in cols) + "\n")

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(
            {"title": self.title, "provenance": self.provenance,
             "metrics": self.metrics, "rows": self.rows},
            indent=2, sort_keys=True))


# -- orthogonalization microbenchmark ----------------------------------------


def cast_bf16(a: np.ndarray) -> np.ndarray:
    """Round-to-nearest-even truncation of float32 to the brain-float grid."""
    bits = np.asarray(a, dtype=np.float32).view(np.uint32)
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) & np.uint32(0xFFFF0000)
    return rounded.view(np.float32).astype(np.float64)


def _train_orthogonality(r0: np.ndarray, steps: int, project: bool = False) -> np.ndarray:
    """Minimize the router-similarity loss from r0 with decoupled Adam,
    no weight decay, cosine 1e-4 -> 1e-5 over `steps`."""
    sched = ScheduleConfig(peak_lr=1e-4, total_steps=steps, warmup_steps=0)
    r = Tensor(r0.copy(), requires_grad=True)
    params = {"R": r}
    opt = OptimizerState(weight_decay=0.0)
    for step in range(steps):
        r.zero_grad()
        with Graph() as g:
            g.backward(simbal_loss(r))
        adamw_step(params, opt, lr_at(step, sched))
        if project:
            q = _qr_orthonormal(r.data)
            if q is not None:
                r.data = q
    return r.data


def bench_orthogonality(rows: int = 1536, cols: int = 32, trials: int = 20,
                        steps: int = 100, seed: int = 0,
                        include_projected: bool = False,
                        include_bf16: bool = False) -> ResultTable:
    """Gram-matrix deviation of a router trained against the similarity
    loss, versus the orthogonal initializer and a random-init control.

    Reported statistics per method: max |R^T R - I| and the mean-L1
    distance, aggregated over trials.
    """
    if rows < cols:
        raise ValueError("needs rows >= cols")
    methods = ["Trained", "OrthoInit", "RandomInit"]
    if include_projected:
        methods.append("Projected")
    if include_bf16:
        methods += [m + "(bf16cast)" for m in list(methods)]
    samples = {m: {"max_dev": [], "l1": []} for m in methods}

    def record(method, r):
        max_dev, l1, _ = MX.gram_deviation(r)
        samples[method]["max_dev"].append(max_dev)
        samples[method]["l1"].append(l1)
        if include_bf16:
            max_dev, l1, _ = MX.gram_deviation(cast_bf16(r))
            samples[method + "(bf16cast)"]["max_dev"].append(max_dev)
            samples[method + "(bf16cast)"]["l1"].append(l1)

    for trial in range(trials):
        rng = np.random.default_rng(seed + trial)
        r0 = rng.standard_normal((rows, cols))
        r0 /= np.linalg.norm(r0, axis=0, keepdims=True)  # unit-norm columns
        record("RandomInit", r0)
        record("OrthoInit", orthogonal_init(rows, cols, seed + trial))
        record("Trained", _train_orthogonality(r0, steps))
        if include_projected:
            record("Projected", _train_orthogonality(r0, steps, project=True))

    table = ResultTable(
        title="orthogonality-benchmark", metrics=["max_dev", "l1"],
        provenance={"rows": rows, "cols": cols, "trials": trials,
                    "steps": steps, "seed": seed})
    for m in methods:
        table.add_row(m, samples[m])
    return table


# -- strategy comparison ------------------------------------------------------


def _tokens_curve(run_dir):
    """(tokens_seen, perplexity) points from a run's checkpoint reports."""
    path = Path(run_dir) / "metrics.csv"
    if not path.exists():
        return []
    rows = [line.split(",") for line in path.read_text().splitlines()]
    header = rows[0]
    step_i, scope_i = header.index("step"), header.index("scope")
    ppl_i = header.index("perplexity")
    cfg = json.loads((Path(run_dir) / "config.json").read_text())["config"]
    per_step = cfg["batch_size"] * cfg["seq_len"]
    out = []
    for row in rows[1:]:
        if row[scope_i] == "model" and row[ppl_i]:
            out.append((int(row[step_i]) * per_step, float(row[ppl_i])))
    return out


def run_comparison(base: TrainRunConfig, strategies: list, seeds: list,
                   corpus: Corpus, out_dir, target_ppl: float | None = None):
    """Train one model per (strategy, seed); aggregate the final metrics.

    Returns (table, details). Runs that halt on a non-finite value are
    excluded from the aggregates and listed under details["failed"].
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_strategy = {s: [] for s in strategies}
    failed = []
    for strategy in strategies:
        for seed in seeds:
            run = replace(base, balancing=replace(base.balancing, strategy=strategy),
                          seed=seed)
            run_dir = out / f"{strategy.replace('+', '_')}_seed{seed}"
            result = train(run, corpus, run_dir)
            if result.status != "ok" or result.final_report is None:
                failed.append({"strategy": strategy, "seed": seed,
                               "status": result.status,
                               "reason": result.halted_reason})
                continue
            rep = result.final_report
            per_strategy[strategy].append({
                "seed": seed, "run_dir": str(run_dir),
                "perplexity": rep.perplexity,
                "min_pes": rep.min_pes,
                "seu": rep.mean_seu,
                "gram_mse_max": max(l["gram_mse"] for l in rep.layers),
                "unique_experts_min": min(l["unique_experts"] for l in rep.layers),
                "curve": _tokens_curve(run_dir),
            })

    table = ResultTable(
        title="strategy-comparison",
        metrics=["perplexity", "min_pes", "seu", "gram_mse_max",
                 "unique_experts_min", "tokens_to_target"],
        provenance={"config_hash": base.hash(), "seeds": "|".join(map(str, seeds)),
                    "strategies": "|".join(strategies)})
    finals = [r["perplexity"] for rs in per_strategy.values() for r in rs]
    if target_ppl is None and finals:
        target_ppl = max(finals)  # worst final: every surviving run reaches it
    for strategy in strategies:
        rs = per_strategy[strategy]
        if not rs:
            continue
        for r in rs:
            r["tokens_to_target"] = next(
                (tok for tok, ppl in r["curve"] if ppl <= target_ppl),
                float("nan"))
        table.add_row(strategy, {
            m: [r[m] for r in rs] for m in table.metrics})
    details = {"per_strategy": per_strategy, "failed": failed,
               "target_ppl": target_ppl}
    return table, details


def coefficient_sweep(base: TrainRunConfig, coefficients: list, seeds: list,
                      corpus: Corpus, out_dir) -> ResultTable:
    """Perplexity and min-PES per similarity-loss coefficient."""
    if not base.balancing.uses_simbal:
        raise ValueError("sweep requires a simbal strategy")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = ResultTable(
        title="coefficient-sweep", metrics=["perplexity", "min_pes"],
        provenance={"config_hash": base.hash(),
                    "seeds": "|".join(map(str, seeds))})
    for coeff in coefficients:
        rows = {"perplexity": [], "min_pes": []}
        for seed in seeds:
            run = replace(base, seed=seed,
                          balancing=replace(base.balancing, simbal_coeff=coeff))
            result = train(run, corpus, out / f"coeff{coeff:g}_seed{seed}")
            rows["perplexity"].append(result.final_report.perplexity)
            rows["min_pes"].append(result.final_report.min_pes)
        table.add_row(f"{coeff:g}", rows)
    return table


# -- inference-time studies ---------------------------------------------------


def selection_frequencies(model: Model, eval_stream: list) -> np.ndarray:
    """[depth, E] selection counts over the stream (zero-weight picks excluded)."""
    counts = np.zeros((model.cfg.depth, model.cfg.n_experts), dtype=np.int64)
    for batch in eval_stream:
        _, records = model.forward(batch.inputs)
        for layer, rec in enumerate(records):
            live = rec.indices[rec.weights.data > 0]
            counts[layer] += np.bincount(live.reshape(-1),
                                         minlength=model.cfg.n_experts)
    return counts


def drop_top_experts(model: Model, k_list: list, eval_stream: list):
    """Mask the k most-selected experts per layer; perplexity per k.

    The "top" experts are measured on the evaluation stream itself. Masking
    is per layer and keeps at least top_a experts routable.
    """
    e, a = model.cfg.n_experts, model.cfg.top_a
    for k in k_list:
        if not 0 <= k <= e - a:
            raise ValueError(f"k={k} out of range [0, {e - a}]: "
                             f"{a} experts must stay routable")
    counts = selection_frequencies(model, eval_stream)
    results = []
    for k in k_list:
        mask = np.zeros_like(counts, dtype=bool)
        for layer in range(model.cfg.depth):
            # stable top-k: ties drop the lower expert index first
            order = np.argsort(-counts[layer], kind="stable")
            mask[layer, order[:k]] = True
        ppl = MX.perplexity(model, eval_stream,
                            drop_mask=mask if k else None)
        results.append({"k": int(k), "perplexity": ppl,
                        "dropped": [sorted(map(int, np.nonzero(mask[l])[0]))
                                    for l in range(model.cfg.depth)]})
    return results, counts


def prune_eval(model: Model, thresholds: list, eval_stream: list):
    """Drop selected experts whose gate probability falls below each
    threshold (top-1 always kept); perplexity, evaluation counts, wall time.

    Wall times are measurement noise at this scale; the expert-evaluation
    counter is the assertable quantity.
    """
    for t in thresholds:
        if not 0.0 <= t < 1.0:
            raise ValueError(f"threshold {t} outside [0, 1)")
    results = []
    for t in thresholds:
        counters = {}
        t0 = time.perf_counter()
        ppl = MX.perplexity(model, eval_stream, prune_threshold=t,
                            counters=counters)
        wall = time.perf_counter() - t0
        results.append({"threshold": float(t), "perplexity": ppl,
                        "expert_evals": counters.get("expert_evals", 0),
                        "wall_time_s": wall})
    return results


# -- similarity over training -------------------------------------------------


def pes_over_checkpoints(run_dir, corpus: Corpus, max_batches: int = 4):
    """Per-layer expert-similarity series across a run's checkpoints,
    plus finite-difference rates and the min-over-layers series."""
    ckpts = sorted(Path(run_dir).glob("ckpt_*"),
                   key=lambda p: int(p.name.split("_")[1]))
    if len(ckpts) < 2:
        raise ValueError("need at least 2 checkpoints")
    steps, per_layer = [], None
    for ckpt in ckpts:
        model, _, manifest = load_checkpoint(ckpt)
        run = TrainRunConfig.from_dict(manifest["config"])
        stream = list(batches(corpus, run.batch_size, run.seq_len,
                              seed=run.seed + 1, split="val",
                              epochs=1))[: max_batches]
        report = MX.compute_report(model, stream, manifest["step"],
                                   pes_max_tokens=run.pes_tokens)
        steps.append(manifest["step"])
        if per_layer is None:
            per_layer = [[] for _ in report.layers]
        for i, layer in enumerate(report.layers):
            per_layer[i].append(layer["pes"])
    rates = []
    for series in per_layer:
        rates.append([(series[i + 1] - series[i]) / (steps[i + 1] - steps[i])
                      for i in range(len(steps) - 1)])
    min_series = [min(col) for col in zip(*per_layer)]
    return {"steps": steps, "per_layer": per_layer, "rates": rates,
            "min_series": min_series}


def write_pes_series_csv(path, series: dict) -> None:
    depth = len(series["per_layer"])
    with open(path, "w") as fh:
        fh.write("step," + ",".join(f"pes_layer{i}" for i in range(depth))
                 + ",min_pes\n")
        for k, step in enumerate(series["steps"]):
            vals = [series["per_layer"][i][k] for i in range(depth)]
            fh.write(",".join([str(step)] + [_fmt(v) for v in vals]
                              + [_fmt(series["min_series"][k])]) + "\n")


# -- compute estimator --------------------------------------------------------


def estimate_flops(active_params: float, embed_params: float,
                   tokens: float) -> float:
    """6 * (active - embed) * tokens: matmul FLOPs per token, embeddings
    excluded (a lookup does no multiplies)."""
    if active_params < embed_params:
        raise ValueError("active parameter count below embedding count")
    return 6.0 * (active_params - embed_params) * tokens


def format_flops(v: float) -> str:
    """4 significant figures, truncated (not rounded), scientific."""
    if v == 0:
        return "0"
    exp = int(np.floor(np.log10(abs(v))))
    mantissa = v / 10.0 ** exp
    mantissa = np.floor(mantissa * 1000) / 1000
    return f"{mantissa:.3f}e{exp}"
