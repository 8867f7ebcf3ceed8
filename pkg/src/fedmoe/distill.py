"""Cross-architecture distillation through a view-aligned attention adapter.

The adapter pools each student stage feature onto ``P_q / J`` segments,
projects it to a common width, lets all ``P_q`` stage queries attend to each
other, then projects each stage group to the teacher's feature width so a
plain MSE can compare them. It only exists during distillation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .models import DenseLm, TrainResult, fit, loss_ce
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class StagePlan:
    n_stages: int
    teacher_stages: tuple[tuple[int, ...], ...]
    student_stages: tuple[tuple[int, ...], ...]

    @property
    def teacher_ends(self) -> list[int]:
        return [s[-1] for s in self.teacher_stages]

    @property
    def student_ends(self) -> list[int]:
        return [s[-1] for s in self.student_stages]

    def to_dict(self) -> dict:
        return {"n_stages": self.n_stages, "teacher_stages": [list(s) for s in self.teacher_stages],
                "student_stages": [list(s) for s in self.student_stages]}


def split_layers(n_layers: int, n_stages: int) -> tuple[tuple[int, ...], ...]:
    """Contiguous split of 0-based layer ids; remainder layers go to the later stages."""
    if not 1 <= n_stages <= n_layers:
        raise ValueError(f"cannot split {n_layers} layers into {n_stages} stages")
    sizes = [n_layers // n_stages] * n_stages
    for i in range(n_layers % n_stages):
        sizes[n_stages - 1 - i] += 1
    out, start = [], 0
    for s in sizes:
        out.append(tuple(range(start, start + s)))
        start += s
    return tuple(out)


def plan_stages(teacher_layers: int, student_layers: int, n_stages: int) -> StagePlan:
    return StagePlan(n_stages, split_layers(teacher_layers, n_stages), split_layers(student_layers, n_stages))


@dataclass
class DistillConfig:
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 2.0
    epochs: int = 4
    lr: float = 3e-3
    seed: int = 0
    batch_size: int = 16
    n_stages: int = 2
    n_queries: int = 8
    vaa_dim: int = 32
    vaa_heads: int = 2
    literal_scale: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class VaaModule:
    """Trainable adapter from student stage features to teacher-shaped views."""

    def __init__(self, student_width: int, teacher_widths: list[int], n_queries: int = 8, dim: int = 32,
                 n_heads: int = 2, seed: int = 0, literal_scale: bool = False):
        n_stages = len(teacher_widths)
        if n_queries % n_stages:
            raise ValueError(f"n_queries={n_queries} not divisible by {n_stages} stages")
        if dim % n_heads:
            raise ValueError(f"dim={dim} not divisible by n_heads={n_heads}")
        self.n_stages = n_stages
        self.n_queries = n_queries
        self.dim = dim
        self.n_heads = 1 if literal_scale else n_heads
        self.literal_scale = literal_scale
        rng = np.random.default_rng(seed)

        def w(fan_in, fan_out):
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)), requires_grad=True)

        self.params: dict[str, Tensor] = {}
        for j in range(n_stages):
            self.params[f"c.{j}.w"] = w(student_width, dim)
            self.params[f"c.{j}.b"] = Tensor(np.zeros(dim), requires_grad=True)
        for name in ("wq", "wk", "wv"):
            self.params[name] = w(dim, dim)
        for j, tw in enumerate(teacher_widths):
            self.params[f"o.{j}.w"] = w(dim, tw)

    @property
    def segments(self) -> int:
        return self.n_queries // self.n_stages

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, stage_features: list[Tensor]) -> list[Tensor]:
        P = self.params
        if len(stage_features) != self.n_stages:
            raise ValueError(f"expected {self.n_stages} stage features, got {len(stage_features)}")
        seg = self.segments
        patches = []
        for j, f in enumerate(stage_features):
            if f.shape[-2] < seg:
                raise ValueError(f"sequence length {f.shape[-2]} shorter than {seg} segments")
            patches.append(T.mean_pool(f, seg) @ P[f"c.{j}.w"] + P[f"c.{j}.b"])
        fs = T.concat(patches, axis=-2)
        bsz = fs.shape[0]
        h = self.n_heads
        dh = self.dim // h

        def heads(t):
            return T.transpose(t.reshape(bsz, self.n_queries, h, dh), (0, 2, 1, 3))

        q, k, v = heads(fs @ P["wq"]), heads(fs @ P["wk"]), heads(fs @ P["wv"])
        scale = 1.0 / math.sqrt(self.dim if self.literal_scale else dh)
        att = T.softmax((q @ T.transpose(k, (0, 1, 3, 2))) * scale, axis=-1)
        blended = T.transpose(att @ v, (0, 2, 1, 3)).reshape(bsz, self.n_queries, self.dim)
        return [g @ P[f"o.{j}.w"] for j, g in enumerate(T.split(blended, self.n_stages, axis=-2))]


def vaa_forward(stage_features: list[Tensor], module: VaaModule) -> list[Tensor]:
    return module.forward(stage_features)


def loss_fm(teacher_features, blended: list[Tensor]) -> Tensor:
    """Sum over stages of the per-stage mean squared error."""
    if len(teacher_features) != len(blended):
        raise T.ShapeError("stage count mismatch")
    total = None
    for t, s in zip(teacher_features, blended):
        term = T.mse(T.as_tensor(t), s)
        total = term if total is None else total + term
    return total


def loss_kl(teacher_logits, student_logits: Tensor, tau: float) -> Tensor:
    """``tau**2 * mean_positions KL(softmax(t/tau) || softmax(s/tau))``; teacher side is constant."""
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if t.shape != student_logits.shape:
        raise T.ShapeError(f"logits shapes differ: {t.shape} vs {student_logits.shape}")
    c = 1.0 / tau
    log_p = T._log_softmax_np(t * c, -1)
    p = np.exp(log_p)
    log_q = T.log_softmax(student_logits * c, axis=-1)
    n_pos = int(np.prod(t.shape[:-1]))
    per_elem = Tensor._wrap(p) * (Tensor._wrap(log_p) - log_q)
    return T.sum_(per_elem) * (tau * tau / n_pos)


def teacher_views(teacher: DenseLm, inputs: np.ndarray, plan: StagePlan, segments: int):
    """Frozen teacher logits and its stage features pooled onto the adapter grid."""
    with no_grad():
        logits, hidden = teacher.forward(inputs)
        feats = [T.mean_pool(hidden[e], segments).data for e in plan.teacher_ends]
    return logits.data, feats


def loss_kd(batch, teacher: DenseLm, student: DenseLm, vaa: VaaModule, plan: StagePlan, config: DistillConfig,
            teacher_out=None) -> tuple[Tensor, dict[str, float]]:
    """``L_CE + alpha * L_FM + beta * L_KL`` and its components."""
    batch = np.asarray(batch)
    inputs = batch[:, :-1]
    if teacher_out is None:
        teacher_out = teacher_views(teacher, inputs, plan, vaa.segments)
    t_logits, t_feats = teacher_out
    logits, hidden = student.forward(inputs)
    ce = loss_ce(logits, batch)
    fm = loss_fm(t_feats, vaa.forward([hidden[e] for e in plan.student_ends]))
    kl = loss_kl(t_logits, logits, config.tau)
    total = ce + fm * config.alpha + kl * config.beta
    return total, {"ce": ce.item(), "fm": fm.item(), "kl": kl.item(), "kd": total.item()}


@dataclass
class DistillResult:
    plan: StagePlan
    curves: list[dict[str, float]] = field(default_factory=list)


def distill(teacher: DenseLm, student_init: DenseLm, public: np.ndarray, config: DistillConfig,
            label: str = "distill") -> tuple[DenseLm, DistillResult]:
    """Train a copy of ``student_init`` (and a fresh adapter) against the frozen teacher."""
    plan = plan_stages(teacher.backbone.n_layers, student_init.backbone.n_layers, config.n_stages)
    result = DistillResult(plan)
    student = student_init.copy().requires_grad_(True)
    if config.epochs <= 0:
        return student, result
    frozen = teacher.copy().requires_grad_(False)
    vaa = VaaModule(student.backbone.d_model, [frozen.backbone.d_model] * config.n_stages,
                    config.n_queries, config.vaa_dim, config.vaa_heads, seed=config.seed,
                    literal_scale=config.literal_scale)
    public = np.asarray(public)
    t_logits, t_feats = teacher_views(frozen, public[:, :-1], plan, vaa.segments)
    row_of = {w.tobytes(): i for i, w in enumerate(public)}

    def step(batch):
        rows = [row_of[w.tobytes()] for w in batch]
        cached = (t_logits[rows], [f[rows] for f in t_feats])
        return loss_kd(batch, frozen, student, vaa, plan, config, teacher_out=cached)

    res: TrainResult = fit(student.parameters() + vaa.parameters(), step, public, config.epochs,
                           config.lr, config.seed, config.batch_size, label=label)
    for epoch, comps in enumerate(res.components, start=1):
        result.curves.append({"epoch": epoch, **comps})
    return student, result
