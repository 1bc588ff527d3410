"""MoE transformer: embeddings, causal RoPE attention, top-A routed experts.

Layout convention is row-vectors: activations are [tokens, d_model] and
weights multiply on the right. Routing selection runs on plain numpy
(selection is piecewise-constant, so it carries no gradient); everything
downstream of selection lives on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor

NORM_EPS = 1e-6
MASK_PENALTY = -1e30  # large-but-finite: inf would turn softmax into NaN


@dataclass
class ModelConfig:
    d_model: int
    depth: int
    heads: int
    d_expert: int
    n_experts: int
    top_a: int
    vocab_size: int = 256
    max_seq_len: int = 256
    rope_theta: float = 1e4
    gating: str = "softmax"
    renormalize_gates: bool = False
    tie_lm_head: bool = False

    def __post_init__(self):
        if not 1 <= self.top_a <= self.n_experts:
            raise ValueError(f"top_a must be in [1, {self.n_experts}], got {self.top_a}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.gating not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown gating '{self.gating}'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# 32-expert top-4 reference shapes at desk width; "l" uses the larger
# rope base and the deeper/wider ratios of the bigger reference model.
PRESETS = {
    "m": dict(d_model=128, depth=8, heads=8, d_expert=128, n_experts=32,
              top_a=4, vocab_size=256, max_seq_len=256, rope_theta=1e4),
    "l": dict(d_model=192, depth=12, heads=12, d_expert=192, n_experts=32,
              top_a=4, vocab_size=256, max_seq_len=256, rope_theta=1e5),
}


def preset(name: str, **overrides) -> ModelConfig:
    cfg = dict(PRESETS[name])
    cfg.update(overrides)
    return ModelConfig(**cfg)


@dataclass
class RouterState:
    """Learned router matrix plus the selection-only bias vector.

    R lives on the gradient tape. lf_bias never does: it is stepped
    directly by the balancing rule, influences which experts are selected,
    and must never leak into gate weights.
    """
    R: Tensor
    lf_bias: np.ndarray


@dataclass
class ExpertParams:
    w_gate: Tensor
    b_gate: Tensor
    w_up: Tensor
    b_up: Tensor
    w_down: Tensor
    b_down: Tensor


@dataclass
class RoutingRecord:
    """Per-token routing outcome for one MoE layer.

    probs: full length-E gate distribution from unbiased scores (tape).
    indices: top-A expert ids per token, selection order (numpy).
    weights: the A gate values actually applied (tape).
    """
    probs: Tensor
    indices: np.ndarray
    weights: Tensor
    n_seqs: int
    seq_len: int
    gating: str = "softmax"

    @property
    def n_tokens(self) -> int:
        return self.indices.shape[0]

    def sparse_gates(self) -> np.ndarray:
        """Dense [tokens, E] gate matrix, zero off the selected experts."""
        out = np.zeros_like(self.probs.data)
        rows = np.repeat(np.arange(self.n_tokens), self.indices.shape[1])
        np.add.at(out, (rows, self.indices.reshape(-1)), self.weights.data.reshape(-1))
        return out


def ffn_swiglu(x: Tensor, p: ExpertParams) -> Tensor:
    """w_down(silu(x w_gate + b_gate) * (x w_up + b_up)) + b_down.

    The matmuls run on the row-stable kernel: expert groups are regrouped
    whenever any token's routing changes, and tokens whose routing did not
    change must keep bitwise-identical outputs.
    """
    g = T.silu(T.matmul(x, p.w_gate, row_stable=True) + p.b_gate)
    u = T.matmul(x, p.w_up, row_stable=True) + p.b_up
    return T.matmul(g * u, p.w_down, row_stable=True) + p.b_down


def route(x: Tensor, rs: RouterState, cfg: ModelConfig,
          drop_mask: np.ndarray | None = None,
          prune_threshold: float | None = None) -> RoutingRecord:
    """Score tokens against experts and pick the top-A.

    Gate probabilities always come from the unbiased scores x R, so the
    selection bias (lf_bias, drop masks) changes which experts win but
    never the weight an expert receives. Ties break toward the lowest
    expert index. prune_threshold zeroes selected gates below the
    threshold, keeping each token's first pick.
    """
    n, a = x.shape[0], cfg.top_a
    raw = T.matmul(x, rs.R)
    if cfg.gating == "softmax":
        probs = T.softmax(raw, axis=-1)
    else:
        probs = T.sigmoid(raw)

    sel = raw.data.copy()
    if rs.lf_bias is not None:
        sel += rs.lf_bias
    if drop_mask is not None:
        sel += np.where(drop_mask, MASK_PENALTY, 0.0)
    # stable sort on negated scores: equal scores keep index order
    indices = np.argsort(-sel, axis=1, kind="stable")[:, :a]

    rows = np.repeat(np.arange(n), a)
    weights = T.gather_pairs(probs, rows, indices.reshape(-1)).reshape((n, a))
    if cfg.renormalize_gates:
        weights = weights / weights.sum(axis=1, keepdims=True)
    if prune_threshold is not None and prune_threshold > 0:
        keep = probs.data[rows, indices.reshape(-1)].reshape(n, a) >= prune_threshold
        keep[:, 0] = True  # a token never loses its first pick
        weights = weights * Tensor(keep.astype(weights.data.dtype))
    return RoutingRecord(probs=probs, indices=indices, weights=weights,
                         n_seqs=1, seq_len=n, gating=cfg.gating)


def moe_forward(x: Tensor, experts: list, record: RoutingRecord,
                counters: dict | None = None) -> Tensor:
    """Weighted sum of each token's selected expert outputs.

    Experts are visited in index order so the accumulation order never
    depends on routing of other tokens. Zero-weight entries (pruned gates)
    are skipped, not evaluated.
    """
    n = x.shape[0]
    out = None
    for e, p in enumerate(experts):
        pos, slot = np.nonzero((record.indices == e) & (record.weights.data > 0))
        if pos.size == 0:
            continue
        if counters is not None:
            counters["expert_evals"] = counters.get("expert_evals", 0) + int(pos.size)
        ys = ffn_swiglu(T.take_rows(x, pos), p)
        w = T.gather_pairs(record.weights, pos, slot).reshape((-1, 1))
        contrib = T.scatter_rows(ys * w, pos, n)
        out = contrib if out is None else out + contrib
    if out is None:
        out = Tensor(np.zeros_like(x.data))
    return out


class Model:
    """The full network. Parameters live in an ordered name -> Tensor map."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, router_init: str = "normal"):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.routers: list[RouterState] = []
        self.experts: list[list[ExpertParams]] = []
        rng = np.random.default_rng(seed)
        d, de, e = cfg.d_model, cfg.d_expert, cfg.n_experts

        def param(name, shape, scale=None):
            if scale is None:
                scale = 1.0 / np.sqrt(shape[0])
            t = Tensor(rng.standard_normal(shape) * scale, requires_grad=True)
            self.params[name] = t
            return t

        def zeros(name, shape):
            t = Tensor(np.zeros(shape), requires_grad=True)
            self.params[name] = t
            return t

        def ones(name, shape):
            t = Tensor(np.ones(shape), requires_grad=True)
            self.params[name] = t
            return t

        param("embed", (cfg.vocab_size, d), scale=0.02)
        for i in range(cfg.depth):
            ones(f"layer{i}.attn_norm", (d,))
            for w in ("wq", "wk", "wv", "wo"):
                param(f"layer{i}.{w}", (d, d))
            ones(f"layer{i}.moe_norm", (d,))
            if router_init == "orthogonal":
                from .training import orthogonal_init
                r = Tensor(orthogonal_init(d, e, seed=int(rng.integers(2**31))),
                           requires_grad=True)
                self.params[f"layer{i}.router"] = r
            elif router_init == "normal":
                r = param(f"layer{i}.router", (d, e))
            else:
                raise ValueError(f"unknown router_init '{router_init}'")
            self.routers.append(RouterState(R=r, lf_bias=np.zeros(e)))
            layer_experts = []
            for j in range(e):
                layer_experts.append(ExpertParams(
                    w_gate=param(f"layer{i}.expert{j}.w_gate", (d, de)),
                    b_gate=zeros(f"layer{i}.expert{j}.b_gate", (de,)),
                    w_up=param(f"layer{i}.expert{j}.w_up", (d, de)),
                    b_up=zeros(f"layer{i}.expert{j}.b_up", (de,)),
                    w_down=param(f"layer{i}.expert{j}.w_down", (de, d)),
                    b_down=zeros(f"layer{i}.expert{j}.b_down", (d,)),
                ))
            self.experts.append(layer_experts)
        ones("final_norm", (d,))
        if not cfg.tie_lm_head:
            param("lm_head", (d, cfg.vocab_size))
        self._rope_cache: dict[int, tuple] = {}

    # -- pieces -----------------------------------------------------------

    def rmsnorm(self, x: Tensor, gain: Tensor) -> Tensor:
        ms = T.mean(T.square(x), axis=-1, keepdims=True)
        return x * T.rsqrt(ms + NORM_EPS) * gain

    def _rope_tables(self, s: int):
        if s not in self._rope_cache:
            hd = self.cfg.d_model // self.cfg.heads
            inv = self.cfg.rope_theta ** (-np.arange(0, hd, 2) / hd)
            ang = np.arange(s)[:, None] * inv[None, :]
            self._rope_cache[s] = (np.cos(ang), np.sin(ang))
        return self._rope_cache[s]

    def attention_block(self, x: Tensor, layer: int, n_seqs: int, seq_len: int) -> Tensor:
        """Pre-norm multi-head causal self-attention with RoPE, plus residual."""
        cfg = self.cfg
        if seq_len > cfg.max_seq_len:
            raise ValueError(f"sequence length {seq_len} exceeds max {cfg.max_seq_len}")
        h, hd = cfg.heads, cfg.d_model // cfg.heads
        xn = self.rmsnorm(x, self.params[f"layer{layer}.attn_norm"])

        def heads(t):  # [N, D] -> [B*H, S, hd]
            t = T.reshape(t, (n_seqs, seq_len, h, hd))
            t = T.transpose(t, (0, 2, 1, 3))
            return T.reshape(t, (n_seqs * h, seq_len, hd))

        q = heads(T.matmul(xn, self.params[f"layer{layer}.wq"]))
        k = heads(T.matmul(xn, self.params[f"layer{layer}.wk"]))
        v = heads(T.matmul(xn, self.params[f"layer{layer}.wv"]))
        cos, sin = self._rope_tables(seq_len)
        q = T.rope(q, cos, sin)
        k = T.rope(k, cos, sin)

        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(hd))
        mask = np.triu(np.full((seq_len, seq_len), MASK_PENALTY), k=1)
        scores = scores + Tensor(mask[None, :, :])
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, v)  # masked weights are exact zeros

        ctx = T.reshape(ctx, (n_seqs, h, seq_len, hd))
        ctx = T.transpose(ctx, (0, 2, 1, 3))
        ctx = T.reshape(ctx, (n_seqs * seq_len, cfg.d_model))
        return x + T.matmul(ctx, self.params[f"layer{layer}.wo"])

    def moe_block(self, x: Tensor, layer: int, n_seqs: int, seq_len: int,
                  drop_mask=None, prune_threshold=None, counters=None,
                  capture=None) -> tuple[Tensor, RoutingRecord]:
        xn = self.rmsnorm(x, self.params[f"layer{layer}.moe_norm"])
        if capture is not None:
            capture.append(xn.data.copy())
        record = route(xn, self.routers[layer], self.cfg,
                       drop_mask=None if drop_mask is None else drop_mask[layer],
                       prune_threshold=prune_threshold)
        record.n_seqs, record.seq_len = n_seqs, seq_len
        y = moe_forward(xn, self.experts[layer], record, counters=counters)
        return x + y, record

    def forward(self, tokens, drop_mask=None, prune_threshold=None,
                counters=None, capture_moe_inputs=None):
        """tokens: int ids, [S] or [B, S]. Returns (logits [B*S, V], records)."""
        ids = np.asarray(tokens)
        if ids.ndim == 1:
            ids = ids[None, :]
        b, s = ids.shape
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise ValueError(f"token id out of range [0, {self.cfg.vocab_size})")
        x = T.take_rows(self.params["embed"], ids.reshape(-1))
        records = []
        for i in range(self.cfg.depth):
            x = self.attention_block(x, i, b, s)
            x, rec = self.moe_block(x, i, b, s, drop_mask=drop_mask,
                                    prune_threshold=prune_threshold,
                                    counters=counters, capture=capture_moe_inputs)
            records.append(rec)
        x = self.rmsnorm(x, self.params["final_norm"])
        head = (T.transpose(self.params["embed"]) if self.cfg.tie_lm_head
                else self.params["lm_head"])
        logits = T.matmul(x, head)
        return logits, records

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def expert_outputs_dense(self, layer: int, xn: np.ndarray) -> np.ndarray:
        """All E experts evaluated on every row of xn; returns [E, n, D]."""
        x = Tensor(xn)
        return np.stack([ffn_swiglu(x, p).data for p in self.experts[layer]])

    def active_param_count(self) -> int:
        """Parameters touched per token: everything except inactive experts."""
        total = 0
        per_expert = 0
        for name, p in self.params.items():
            if ".expert" in name:
                per_expert += p.data.size
            else:
                total += p.data.size
        per_expert //= self.cfg.n_experts * self.cfg.depth
        return total + per_expert * self.cfg.top_a * self.cfg.depth

    def embed_param_count(self) -> int:
        # the lookup itself costs no matmul FLOPs; the LM-head matmul does,
        # so only the embedding table is excluded from compute estimates
        return self.params["embed"].data.size


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token negative log-likelihood over all positions."""
    t = np.asarray(targets).reshape(-1)
    logp = T.log_softmax(logits, axis=-1)
    picked = T.gather_pairs(logp, np.arange(t.size), t)
    return -T.mean(picked)
