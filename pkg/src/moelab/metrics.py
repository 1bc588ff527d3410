"""Redundancy and balance measurement: pairwise expert similarity, expert
utilization, routing entropy, Gram deviation, perplexity."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import Model, RoutingRecord, cross_entropy
from .tensor import Tensor


def pes(expert_outputs: np.ndarray) -> float:
    """Mean pairwise cosine similarity of all experts' outputs.

    expert_outputs: [E, samples, D], every expert evaluated densely on the
    same samples. Per sample the mean runs over all E*(E-1)/2 unordered
    pairs; the result is the average over samples. Pairs involving a
    zero-norm output are excluded (with a warning) rather than smoothed,
    which would bias the similarity toward zero.
    """
    e, n, d = expert_outputs.shape
    if e < 2:
        raise ValueError("need at least 2 experts")
    norms = np.linalg.norm(expert_outputs, axis=-1)  # [E, n]
    ok = norms > 0
    if not ok.all():
        warnings.warn("zero-norm expert outputs excluded from similarity pairs")
    safe = np.where(ok, norms, 1.0)
    unit = expert_outputs / safe[:, :, None]
    gram = np.einsum("etd,ftd->tef", unit, unit)  # [n, E, E]
    iu, ju = np.triu_indices(e, k=1)
    pair_ok = (ok[iu] & ok[ju]).T.astype(float)   # [n, pairs]
    sims = gram[:, iu, ju] * pair_ok
    counts = pair_ok.sum(axis=1)
    has_pairs = counts > 0
    if not has_pairs.any():
        raise ValueError("no valid expert pairs in any sample")
    per_sample = sims[has_pairs].sum(axis=1) / counts[has_pairs]
    return float(per_sample.mean())


def seu(records: list[RoutingRecord], n_experts: int) -> float:
    """Mean over sequences of (distinct selected experts) / E."""
    fractions = []
    for rec in records:
        idx = rec.indices.reshape(rec.n_seqs, rec.seq_len, -1)
        live = rec.weights.data.reshape(rec.n_seqs, rec.seq_len, -1) > 0
        for s in range(rec.n_seqs):
            distinct = len(set(idx[s][live[s]].reshape(-1).tolist()))
            fractions.append(distinct / n_experts)
    if not fractions:
        raise ValueError("no sequences")
    return float(np.mean(fractions))


def routing_entropy(records: list[RoutingRecord]) -> float:
    """Mean token entropy (nats) of the full pre-selection distribution."""
    total, count = 0.0, 0
    for rec in records:
        if rec.gating != "softmax":
            raise ValueError("entropy is defined for softmax gating only")
        p = rec.probs.data
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        total += float(-plogp.sum(axis=1).sum())
        count += rec.n_tokens
    return total / count


def unique_experts(records: list[RoutingRecord], n_experts: int) -> int:
    """Experts selected (with nonzero gate) at least once across the set."""
    seen = np.zeros(n_experts, dtype=bool)
    for rec in records:
        live = rec.weights.data > 0
        seen[np.unique(rec.indices[live])] = True
    return int(seen.sum())


def gram_deviation(R) -> tuple[float, float, float]:
    """(max |G-I|, mean |G-I|, mean (G-I)^2) for G = R^T R."""
    r = R.data if isinstance(R, Tensor) else np.asarray(R)
    g = r.T @ r - np.eye(r.shape[1])
    a = np.abs(g)
    return float(a.max()), float(a.mean()), float((g * g).mean())


def perplexity(model: Model, eval_stream, **forward_kwargs) -> float:
    """exp(mean next-token negative log-likelihood) over the stream."""
    nll_sum, count = 0.0, 0
    for batch in eval_stream:
        logits, _ = model.forward(batch.inputs, **forward_kwargs)
        ce = cross_entropy(logits, batch.targets)
        n = batch.targets.size
        nll_sum += float(ce.data) * n
        count += n
    if count == 0:
        raise ValueError("empty evaluation stream")
    return float(np.exp(nll_sum / count))


@dataclass
class MetricsReport:
    step: int
    layers: list = field(default_factory=list)  # dicts, one per layer
    min_pes: float = float("nan")
    mean_seu: float = float("nan")
    perplexity: float = float("nan")

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step,
            "layers": self.layers,
            "min_pes": self.min_pes,
            "mean_seu": self.mean_seu,
            "perplexity": self.perplexity,
        }, indent=2, sort_keys=True)

    CSV_FIELDS = ["step", "scope", "pes", "seu", "entropy", "unique_experts",
                  "gram_max_dev", "gram_l1", "gram_mse",
                  "min_pes", "mean_seu", "perplexity"]

    def csv_rows(self) -> list[dict]:
        rows = []
        for i, layer in enumerate(self.layers):
            row = {"step": self.step, "scope": f"layer{i}"}
            row.update({k: _fmt(v) for k, v in layer.items()})
            rows.append(row)
        rows.append({"step": self.step, "scope": "model",
                     "min_pes": _fmt(self.min_pes),
                     "mean_seu": _fmt(self.mean_seu),
                     "perplexity": _fmt(self.perplexity)})
        return rows


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return v


def write_reports_csv(path, reports: list[MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MetricsReport.CSV_FIELDS,
                                restval="")
        writer.writeheader()
        for report in reports:
            for row in report.csv_rows():
                writer.writerow(row)


def compute_report(model: Model, eval_batches: list, step: int,
                   pes_max_tokens: int = 65536) -> MetricsReport:
    """Measure everything on a fixed evaluation batch list.

    Dense expert outputs for the similarity metric are taken on the MoE
    inputs captured during the perplexity pass, truncated to
    pes_max_tokens samples per layer.
    """
    depth = model.cfg.depth
    e = model.cfg.n_experts
    per_layer_records: list[list[RoutingRecord]] = [[] for _ in range(depth)]
    per_layer_inputs: list[list[np.ndarray]] = [[] for _ in range(depth)]
    nll_sum, count = 0.0, 0
    for batch in eval_batches:
        captured: list[np.ndarray] = []
        logits, recs = model.forward(batch.inputs, capture_moe_inputs=captured)
        nll_sum += float(cross_entropy(logits, batch.targets).data) * batch.targets.size
        count += batch.targets.size
        for i in range(depth):
            per_layer_records[i].append(recs[i])
            per_layer_inputs[i].append(captured[i])

    report = MetricsReport(step=step)
    pes_values = []
    seu_values = []
    for i in range(depth):
        xn = np.concatenate(per_layer_inputs[i])[:pes_max_tokens]
        dense = model.expert_outputs_dense(i, xn)
        layer_pes = pes(dense)
        layer_seu = seu(per_layer_records[i], e)
        max_dev, l1, mse = gram_deviation(model.routers[i].R)
        report.layers.append({
            "pes": layer_pes,
            "seu": layer_seu,
            "entropy": routing_entropy(per_layer_records[i]),
            "unique_experts": unique_experts(per_layer_records[i], e),
            "gram_max_dev": max_dev,
            "gram_l1": l1,
            "gram_mse": mse,
        })
        pes_values.append(layer_pes)
        seu_values.append(layer_seu)
    report.min_pes = float(min(pes_values))
    report.mean_seu = float(np.mean(seu_values))
    report.perplexity = float(np.exp(nll_sum / count))
    return report
