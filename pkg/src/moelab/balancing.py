"""Auxiliary balancing: load-balancing loss, router-similarity loss,
selection-bias stepping, and the logit z-loss.

Coefficients multiply at the assembly site, never inside the individual
loss functions, so each function returns the raw quantity.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .model import RoutingRecord

STRATEGIES = ("none", "lbl", "simbal", "lf", "lf+lbl", "lf+simbal")


@dataclass
class BalancingSpec:
    strategy: str = "none"
    alpha: float = 0.01          # LBL coefficient
    simbal_coeff: float = 0.1    # similarity-loss coefficient
    gamma: float = 0.001         # selection-bias step size
    zloss_coeff: float = 1e-5
    lbl_sum_layers: bool = False  # default: mean over layers

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy '{self.strategy}', expected one of {STRATEGIES}")

    @property
    def uses_lbl(self) -> bool:
        return self.strategy in ("lbl", "lf+lbl")

    @property
    def uses_simbal(self) -> bool:
        return self.strategy in ("simbal", "lf+simbal")

    @property
    def uses_lf(self) -> bool:
        return self.strategy.startswith("lf")

    def to_dict(self) -> dict:
        return dict(strategy=self.strategy, alpha=self.alpha,
                    simbal_coeff=self.simbal_coeff, gamma=self.gamma,
                    zloss_coeff=self.zloss_coeff, lbl_sum_layers=self.lbl_sum_layers)


@dataclass
class LfBiasState:
    """Per-layer selection-bias vectors, stepped once per optimizer step.

    The arrays are shared with the model's router states, so stepping here
    is what the next forward pass sees. They are never gradient-updated and
    never weight-decayed.
    """
    biases: list

    @classmethod
    def from_model(cls, model) -> "LfBiasState":
        return cls([rs.lf_bias for rs in model.routers])

    def step(self, fractions_per_layer: list, gamma: float) -> None:
        for b, f in zip(self.biases, fractions_per_layer):
            b += gamma * np.sign(1.0 / len(b) - np.asarray(f))


def selection_fractions(record: RoutingRecord) -> np.ndarray:
    """f_i = fraction of tokens whose top-A selection includes expert i."""
    e = record.probs.data.shape[1]
    mask = record.weights.data > 0
    counts = np.bincount(record.indices[mask].reshape(-1), minlength=e)
    return counts / record.n_tokens


def lbl_loss(records: list, n_experts: int) -> Tensor:
    """Mean over layers of E * sum_i f_i * P_i on the sparse gates.

    f_i is the selection frequency of expert i over all batch tokens; P_i
    is the mean sparse gate mass it receives. Only P carries gradient
    (f is an indicator). Identity used: sum_i f_i * mean_t gate[t,i]
    equals mean_t sum_slots f[idx[t,slot]] * w[t,slot].
    """
    if not records:
        raise ValueError("no routing records")
    per_layer = []
    for rec in records:
        if rec.n_tokens == 0:
            raise ValueError("routing record with zero tokens")
        f = selection_fractions(rec)
        f_sel = Tensor(f[rec.indices])  # constant [tokens, A]
        layer = (f_sel * rec.weights).sum() * (n_experts / rec.n_tokens)
        per_layer.append(layer)
    total = per_layer[0]
    for layer in per_layer[1:]:
        total = total + layer
    return total * (1.0 / len(per_layer))


def lbl_loss_value(records: list, n_experts: int, sum_layers: bool = False) -> Tensor:
    loss = lbl_loss(records, n_experts)
    return loss * float(len(records)) if sum_layers else loss


def simbal_loss(R: Tensor) -> Tensor:
    """Entrywise L1 deviation of the router Gram matrix from identity.

    Pulls columns toward orthonormality; exact zeros contribute zero
    subgradient. Wide routers (more experts than dimensions) cannot reach
    zero, hence the warning.
    """
    d, e = R.shape
    if d < e:
        warnings.warn(f"router is wide ({d} < {e}); the Gram matrix cannot reach identity")
    gram = T.matmul(T.transpose(R), R)
    return T.abs_(gram - Tensor(np.eye(e))).sum()


def simbal_total(routers: list) -> Tensor:
    """Sum over layers: each router is pushed toward orthogonality independently."""
    total = simbal_loss(routers[0].R)
    for rs in routers[1:]:
        total = total + simbal_loss(rs.R)
    return total


def lf_update(f, bias: np.ndarray, gamma: float) -> np.ndarray:
    """b'_i = b_i + gamma * sign(1/E - f_i); sign(0) = 0 at exact balance."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("usage fractions must be non-negative")
    return bias + gamma * np.sign(1.0 / len(bias) - f)


def z_loss(logits: Tensor) -> Tensor:
    """Mean squared log-partition of the output logits."""
    return T.mean(T.square(T.logsumexp(logits, axis=-1)))


def assemble_loss(ce: Tensor, spec: BalancingSpec, records: list, routers: list,
                  logits: Tensor | None = None):
    """Combine cross-entropy with the active auxiliary terms.

    Returns (total, components); components holds the float value of every
    addend so logs can reconstruct the exact sum. The lf strategy adds no
    loss term (it acts through selection biases). Inactive terms are not
    added at all, so strategy "none" with zloss_coeff 0 returns ce itself.
    """
    components = {"ce": float(ce.data), "lbl": 0.0, "simbal": 0.0, "zloss": 0.0}
    total = ce
    if spec.uses_lbl:
        n_experts = records[0].probs.data.shape[1]
        term = lbl_loss_value(records, n_experts, spec.lbl_sum_layers) * spec.alpha
        components["lbl"] = float(term.data)
        total = total + term
    if spec.uses_simbal:
        term = simbal_total(routers) * spec.simbal_coeff
        components["simbal"] = float(term.data)
        total = total + term
    if spec.zloss_coeff:
        if logits is None:
            raise ValueError("z-loss requires logits")
        term = z_loss(logits) * spec.zloss_coeff
        components["zloss"] = float(term.data)
        total = total + term
    components["total"] = float(total.data)
    return total, components
