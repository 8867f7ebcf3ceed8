"""Fuse K distilled base models into one MoE and tune it with experts frozen."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import tensor_sha256
from .clustering import running_mean
from .models import DenseLm, MoeConfig, MoeLm, fit, is_expert_param, lm_step_loss, param_shapes
from .tensor import Tensor, no_grad

GATE_STD = 0.02


class FreezeViolation(RuntimeError):
    pass


@dataclass
class MergeReport:
    provenance: dict[str, str] = field(default_factory=dict)
    expert_sha256: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"provenance": self.provenance, "expert_sha256": self.expert_sha256}


def expert_checksums(moe: MoeLm) -> dict[str, str]:
    return {n: tensor_sha256(moe.params[n].data) for n in moe.expert_names()}


def merge(bases: Sequence[DenseLm], moe_config: MoeConfig, seed: int) -> tuple[MoeLm, MergeReport]:
    """Expert i takes base i's FFN tensors verbatim; every other tensor is the mean over bases.

    The gate is freshly drawn from N(0, GATE_STD**2).
    """
    k = moe_config.n_experts
    if len(bases) != k:
        raise ValueError(f"need {k} base models, got {len(bases)}")
    for i, b in enumerate(bases):
        if b.config != moe_config.backbone:
            raise ValueError(f"base model {i} config does not match the MoE backbone")
    rng = np.random.default_rng(seed)
    report = MergeReport()
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(moe_config).items():
        if is_expert_param(name):
            prefix, rest = name.split(".experts.", 1)
            e, leaf = rest.split(".", 1)
            src = f"{prefix}.ffn.{leaf}"
            params[name] = Tensor(bases[int(e)].params[src].data, requires_grad=True)
            report.provenance[name] = f"base[{e}].{src}"
        elif name.endswith(".gate.w"):
            params[name] = Tensor(rng.normal(0.0, GATE_STD, size=shape), requires_grad=True)
            report.provenance[name] = f"init:normal(0,{GATE_STD})"
        else:
            params[name] = Tensor(running_mean([b.params[name].data for b in bases]), requires_grad=True)
            report.provenance[name] = f"mean(base[0..{k - 1}].{name})"
    moe = MoeLm(moe_config, params)
    report.expert_sha256 = expert_checksums(moe)
    return moe, report


def trainable_fraction(moe: MoeLm) -> float:
    total = moe.parameter_count()
    frozen = sum(moe.params[n].size for n in moe.expert_names())
    return (total - frozen) / total


def tune_global(moe: MoeLm, public: np.ndarray, epochs: int, lr: float, seed: int,
                batch_size: int = 16) -> tuple[MoeLm, list[float]]:
    """Fine-tune everything except the expert FFNs on the public corpus."""
    tuned = moe.copy()
    before = expert_checksums(tuned)
    trainable = []
    for name, p in tuned.params.items():
        p.requires_grad = not is_expert_param(name)
        if p.requires_grad:
            trainable.append(p)
    res = fit(trainable, lm_step_loss(tuned), public, epochs, lr, seed, batch_size, label="tune_global")
    after = expert_checksums(tuned)
    bad = [n for n in before if before[n] != after[n]]
    if bad:
        raise FreezeViolation(f"expert tensors changed during tuning: {bad[:3]}")
    return tuned, res.losses


@dataclass
class RoutingStats:
    n_experts: int
    top_k: int
    frequency: list[list[float]]
    domain_matrix: dict[str, list[list[float]]]

    def to_dict(self) -> dict:
        return {"n_experts": self.n_experts, "top_k": self.top_k, "frequency": self.frequency,
                "domain_matrix": self.domain_matrix}


def routing_stats(moe: MoeLm, corpus: np.ndarray, domains: Sequence | None = None,
                  chunk: int = 64) -> RoutingStats:
    """Per-layer activation frequency of every expert (percent of tokens that selected it).

    ``domains`` labels each window; the per-domain matrix holds the same
    frequencies restricted to that domain's tokens.
    """
    corpus = np.asarray(corpus)
    if domains is None:
        domains = ["all"] * len(corpus)
    domains = np.asarray([str(d) for d in domains])
    n_layers = moe.backbone.n_layers
    k_exp = moe.config.n_experts
    counts: dict[str, np.ndarray] = {}
    tokens: dict[str, int] = {}
    with no_grad():
        for s in range(0, len(corpus), chunk):
            part = corpus[s:s + chunk, :-1]
            labels = domains[s:s + chunk]
            routing: list[np.ndarray] = []
            moe.forward(part, routing=routing)
            for dom in np.unique(labels):
                rows = labels == dom
                c = counts.setdefault(dom, np.zeros((n_layers, k_exp)))
                for layer, sel in enumerate(routing):
                    c[layer] += np.bincount(sel[rows].reshape(-1), minlength=k_exp)
                tokens[dom] = tokens.get(dom, 0) + int(rows.sum()) * part.shape[1]
    total_counts = sum(counts.values())
    total_tokens = sum(tokens.values())
    freq = (100.0 * total_counts / total_tokens).tolist()
    per_dom = {d: (100.0 * counts[d] / tokens[d]).tolist() for d in sorted(counts)}
    return RoutingStats(k_exp, moe.config.top_k, freq, per_dom)


def dominant_expert_by_domain(stats: RoutingStats) -> dict[str, int]:
    """Most-activated expert per domain, summed over layers."""
    return {d: int(np.argmax(np.asarray(m).sum(axis=0))) for d, m in stats.domain_matrix.items()}
