"""Optimization: AdamW, warmup+cosine schedule, orthogonal initialization,
the training loop with auxiliary-loss assembly and selection-bias stepping,
and checkpointing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import balancing as B
from . import metrics as MX
from .data import Corpus, batches
from .model import Model, ModelConfig, cross_entropy
from .tensor import Graph, NonFiniteError


@dataclass
class ScheduleConfig:
    peak_lr: float
    total_steps: int
    warmup_steps: int | None = None
    floor_fraction: float = 0.1

    def __post_init__(self):
        if self.warmup_steps is None:
            # small runs keep the reference warmup fraction (2000 of 40k),
            # not its absolute step count
            if self.total_steps < 40000:
                self.warmup_steps = max(1, self.total_steps // 20)
            else:
                self.warmup_steps = 2000
        if not self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must be below total_steps")

    def to_dict(self) -> dict:
        return dict(peak_lr=self.peak_lr, total_steps=self.total_steps,
                    warmup_steps=self.warmup_steps, floor_fraction=self.floor_fraction)


def lr_at(step: int, sched: ScheduleConfig) -> float:
    """Linear floor->peak over warmup, cosine peak->floor to total_steps."""
    floor = sched.floor_fraction * sched.peak_lr
    if step >= sched.total_steps:
        return floor
    if step < sched.warmup_steps:
        return floor + (sched.peak_lr - floor) * (step / sched.warmup_steps)
    t = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return floor + 0.5 * (sched.peak_lr - floor) * (1.0 + np.cos(np.pi * t))


@dataclass
class OptimizerState:
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, state: OptimizerState, lr: float,
               exclude_decay: set | None = None) -> None:
    """Decoupled-weight-decay Adam update, in place.

    Raises on non-finite gradients before touching any parameter, so an
    aborted step leaves the model unchanged.
    """
    exclude_decay = exclude_decay or set()
    for name, p in params.items():
        if p.grad is None or not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
    state.t += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay and name not in exclude_decay:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def _qr_orthonormal(a: np.ndarray):
    """QR-orthonormalize columns; None signals a rank-deficient draw."""
    q, r = np.linalg.qr(a)
    d = np.diag(r)
    if np.any(np.abs(d) < 1e-12):
        return None
    return q * np.sign(d)  # positive-diagonal convention fixes the sign freedom


def orthogonal_init(rows: int, cols: int, seed: int) -> np.ndarray:
    """Seeded near-orthonormal matrix: orthonormal columns when rows >= cols,
    orthonormal rows otherwise (transpose-and-flip)."""
    if rows < cols:
        return orthogonal_init(cols, rows, seed).T.copy()
    s = seed
    while True:
        q = _qr_orthonormal(np.random.default_rng(s).standard_normal((rows, cols)))
        if q is not None:
            return q
        s += 1  # a degenerate draw redraws with the next seed


@dataclass
class TrainRunConfig:
    model: ModelConfig
    balancing: B.BalancingSpec
    schedule: ScheduleConfig
    seed: int = 0
    batch_size: int = 8
    seq_len: int = 64
    checkpoint_every: int = 0   # 0: only the final checkpoint
    eval_batches: int = 4
    pes_tokens: int = 65536
    router_init: str = "auto"   # orthogonal with simbal, normal otherwise
    include_router_decay: bool = False
    grad_clip: float | None = None

    def resolved_router_init(self) -> str:
        if self.router_init != "auto":
            return self.router_init
        return "orthogonal" if self.balancing.uses_simbal else "normal"

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "balancing": self.balancing.to_dict(),
            "schedule": self.schedule.to_dict(),
            "seed": self.seed,
            "batch_size": self.batch_size,
            "seq_len": self.seq_len,
            "checkpoint_every": self.checkpoint_every,
            "eval_batches": self.eval_batches,
            "pes_tokens": self.pes_tokens,
            "router_init": self.router_init,
            "include_router_decay": self.include_router_decay,
            "grad_clip": self.grad_clip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        d["balancing"] = B.BalancingSpec(**d["balancing"])
        d["schedule"] = ScheduleConfig(**d["schedule"])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model: Model, opt: OptimizerState, step: int,
                    run: TrainRunConfig, batches_consumed: int) -> None:
    """manifest.json plus params.bin (raw little-endian float64 arrays).

    The stream position is serialized as (seed, batches consumed): the
    batch stream is a pure function of its seed, so skipping that many
    batches reproduces the exact generator state.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, p in model.params.items():
        arrays[f"param:{name}"] = p.data
    for name in model.params:
        if name in opt.m:
            arrays[f"adam_m:{name}"] = opt.m[name]
            arrays[f"adam_v:{name}"] = opt.v[name]
    for i, rs in enumerate(model.routers):
        arrays[f"lf_bias:{i}"] = rs.lf_bias
    index = {}
    offset = 0
    with open(path / "params.bin", "wb") as fh:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            index[name] = {"offset": offset, "shape": list(arr.shape)}
            fh.write(raw)
            offset += len(raw)
    manifest = {
        "config": run.to_dict(),
        "config_hash": run.hash(),
        "step": step,
        "optimizer_t": opt.t,
        "rng_state": {"kind": "stream-position", "data_seed": run.seed,
                      "batches_consumed": batches_consumed},
        "dtype": "<f8",
        "params": index,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Returns (model, optimizer state, manifest)."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    run = TrainRunConfig.from_dict(manifest["config"])
    model = Model(run.model, seed=run.seed, router_init=run.resolved_router_init())
    raw = (path / "params.bin").read_bytes()

    def read(name):
        entry = manifest["params"][name]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count,
                            offset=entry["offset"]).reshape(shape)
        return arr.astype(np.float64)

    opt = OptimizerState(t=manifest["optimizer_t"])
    for name, p in model.params.items():
        p.data = read(f"param:{name}")
        p.grad = np.zeros_like(p.data)
        if f"adam_m:{name}" in manifest["params"]:
            opt.m[name] = read(f"adam_m:{name}")
            opt.v[name] = read(f"adam_v:{name}")
    for i, rs in enumerate(model.routers):
        # in place: route() and LfBiasState hold references to this array
        rs.lf_bias[:] = read(f"lf_bias:{i}")
    return model, opt, manifest


@dataclass
class TrainResult:
    status: str
    steps: int
    out_dir: str
    csv_path: str
    checkpoints: list
    final_report: MX.MetricsReport | None = None
    halted_reason: str = ""


def _csv_line(values) -> str:
    parts = []
    for v in values:
        parts.append(f"{v:.17g}" if isinstance(v, float) else str(v))
    return ",".join(parts) + "\n"


def train(run: TrainRunConfig, corpus: Corpus, out_dir) -> TrainResult:
    """Run the full loop; emits step metrics CSV and checkpoints.

    Deterministic for a fixed (config, seed, corpus): reruns produce
    byte-identical CSVs. A non-finite loss or gradient halts the run,
    keeping the last completed checkpoint.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(
        {"config": run.to_dict(), "config_hash": run.hash(), "seed": run.seed},
        indent=2, sort_keys=True))

    model = Model(run.model, seed=run.seed, router_init=run.resolved_router_init())
    opt = OptimizerState()
    exclude = set()
    if run.balancing.uses_simbal and not run.include_router_decay:
        exclude = {f"layer{i}.router" for i in range(run.model.depth)}
    lf_state = B.LfBiasState.from_model(model)
    stream = batches(corpus, run.batch_size, run.seq_len, seed=run.seed)
    try:
        eval_stream = list(batches(corpus, run.batch_size, run.seq_len,
                                   seed=run.seed + 1, split="val", epochs=1))
    except ValueError:
        eval_stream = []
    eval_stream = eval_stream[: run.eval_batches]

    csv_path = out / "train_metrics.csv"
    reports: list[MX.MetricsReport] = []
    checkpoints: list[str] = []
    tokens_per_step = run.batch_size * run.seq_len
    status, halted_reason = "ok", ""
    steps_done = 0

    def checkpoint(step):
        path = out / f"ckpt_{step:06d}"
        save_checkpoint(path, model, opt, step, run, batches_consumed=step)
        checkpoints.append(str(path))
        if eval_stream:
            try:
                reports.append(MX.compute_report(model, eval_stream, step,
                                                 pes_max_tokens=run.pes_tokens))
            except NonFiniteError:
                pass  # metrics on a halted run's last state may overflow too

    if run.checkpoint_every:
        checkpoint(0)  # periodic series include the untrained state
    with open(csv_path, "w") as fh:
        fh.write(f"# config_hash={run.hash()} seed={run.seed}\n")
        fh.write("step,lr,ce,lbl,simbal,zloss,total,tokens_seen\n")
        for step in range(run.schedule.total_steps):
            batch = next(stream)
            lr = lr_at(step, run.schedule)
            try:
                model.zero_grad()
                with Graph() as g:
                    logits, records = model.forward(batch.inputs)
                    ce = cross_entropy(logits, batch.targets)
                    total, comps = B.assemble_loss(ce, run.balancing, records,
                                                   model.routers, logits=logits)
                    g.backward(total)
                if run.grad_clip:
                    _clip_gradients(model.params, run.grad_clip)
                adamw_step(model.params, opt, lr, exclude_decay=exclude)
            except NonFiniteError as err:
                status, halted_reason = "halted_nonfinite", str(err)
                break
            if run.balancing.uses_lf:
                fractions = [B.selection_fractions(rec) for rec in records]
                lf_state.step(fractions, run.balancing.gamma)
            steps_done = step + 1
            fh.write(_csv_line([step, lr, comps["ce"], comps["lbl"],
                                comps["simbal"], comps["zloss"], comps["total"],
                                (step + 1) * tokens_per_step]))
            if run.checkpoint_every and steps_done % run.checkpoint_every == 0:
                checkpoint(steps_done)
    # a failed step raises before mutating parameters, so even on a halt the
    # in-memory state is the last good one; checkpoint it unless already saved
    last = str(out / f"ckpt_{steps_done:06d}")
    if not checkpoints or checkpoints[-1] != last:
        checkpoint(steps_done)
    if reports:
        MX.write_reports_csv(out / "metrics.csv", reports)
    return TrainResult(status=status, steps=steps_done, out_dir=str(out),
                       csv_path=str(csv_path), checkpoints=checkpoints,
                       final_report=reports[-1] if reports else None,
                       halted_reason=halted_reason)


def _clip_gradients(params: dict, max_norm: float) -> None:
    total = 0.0
    for p in params.values():
        total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            p.grad *= scale


def resume(checkpoint_path, corpus: Corpus, out_dir,
           extra_steps: int | None = None) -> TrainResult:
    """Continue a checkpointed run to its scheduled end (or extra_steps more)."""
    model, opt, manifest = load_checkpoint(checkpoint_path)
    run = TrainRunConfig.from_dict(manifest["config"])
    start = manifest["step"]
    total = run.schedule.total_steps if extra_steps is None else start + extra_steps
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exclude = set()
    if run.balancing.uses_simbal and not run.include_router_decay:
        exclude = {f"layer{i}.router" for i in range(run.model.depth)}
    lf_state = B.LfBiasState.from_model(model)
    stream = batches(corpus, run.batch_size, run.seq_len, seed=run.seed)
    for _ in range(manifest["rng_state"]["batches_consumed"]):
        next(stream)
    csv_path = out / "train_metrics.csv"
    tokens_per_step = run.batch_size * run.seq_len
    status, halted_reason = "ok", ""
    steps_done = start
    with open(csv_path, "w") as fh:
        fh.write(f"# config_hash={run.hash()} seed={run.seed} resumed_from={start}\n")
        fh.write("step,lr,ce,lbl,simbal,zloss,total,tokens_seen\n")
        for step in range(start, total):
            batch = next(stream)
            lr = lr_at(step, run.schedule)
            try:
                model.zero_grad()
                with Graph() as g:
                    logits, records = model.forward(batch.inputs)
                    ce = cross_entropy(logits, batch.targets)
                    total_loss, comps = B.assemble_loss(ce, run.balancing, records,
                                                        model.routers, logits=logits)
                    g.backward(total_loss)
                if run.grad_clip:
                    _clip_gradients(model.params, run.grad_clip)
                adamw_step(model.params, opt, lr, exclude_decay=exclude)
            except NonFiniteError as err:
                status, halted_reason = "halted_nonfinite", str(err)
                break
            if run.balancing.uses_lf:
                fractions = [B.selection_fractions(rec) for rec in records]
                lf_state.step(fractions, run.balancing.gamma)
            steps_done = step + 1
            fh.write(_csv_line([step, lr, comps["ce"], comps["lbl"],
                                comps["simbal"], comps["zloss"], comps["total"],
                                (step + 1) * tokens_per_step]))
    final = out / f"ckpt_{steps_done:06d}"
    save_checkpoint(final, model, opt, steps_done, run, batches_consumed=steps_done)
    return TrainResult(status=status, steps=steps_done, out_dir=str(out),
                       csv_path=str(csv_path), checkpoints=[str(final)],
                       halted_reason=halted_reason)
