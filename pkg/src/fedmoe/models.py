"""Decoder-only transformer LMs: heterogeneous dense device models and the MoE LM.

Blocks are pre-norm with learned absolute position embeddings. Every model in a
run shares one vocabulary, so logits are always comparable across models.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Adam, NonFiniteError, Tensor, no_grad

MASK_VALUE = -1e9


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class LmConfig:
    arch_family: str
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ffn: int
    max_seq_len: int
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LmConfig":
        return cls(**d)


@dataclass(frozen=True)
class MoeConfig:
    backbone: LmConfig
    n_experts: int
    top_k: int

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k={self.top_k} must lie in [1, n_experts={self.n_experts}]")

    def to_dict(self) -> dict:
        return {"backbone": self.backbone.to_dict(), "n_experts": self.n_experts, "top_k": self.top_k}

    @classmethod
    def from_dict(cls, d: dict) -> "MoeConfig":
        return cls(LmConfig.from_dict(d["backbone"]), d["n_experts"], d["top_k"])


# Built-in families. "base" is the backbone of the server-side students and the MoE.
ARCH_FAMILIES: dict[str, dict] = {
    "tinyA": dict(d_model=32, n_layers=2, n_heads=4, d_ffn=128),
    "tinyB": dict(d_model=48, n_layers=3, n_heads=4, d_ffn=192),
    "tinyC": dict(d_model=64, n_layers=4, n_heads=4, d_ffn=256),
    "base": dict(d_model=64, n_layers=4, n_heads=4, d_ffn=128),
}


def family_config(family: str, vocab_size: int = 64, max_seq_len: int = 32, **overrides) -> LmConfig:
    spec = dict(ARCH_FAMILIES[family])
    spec.update(overrides)
    return LmConfig(arch_family=family, vocab_size=vocab_size, max_seq_len=max_seq_len, **spec)


FFN_KEYS = ("w1", "b1", "w2", "b2")


def ffn_shapes(cfg: LmConfig) -> dict[str, tuple[int, ...]]:
    return {"w1": (cfg.d_model, cfg.d_ffn), "b1": (cfg.d_ffn,),
            "w2": (cfg.d_ffn, cfg.d_model), "b2": (cfg.d_model,)}


def param_shapes(cfg: LmConfig | MoeConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape in canonical (checkpoint manifest) order."""
    moe = isinstance(cfg, MoeConfig)
    b = cfg.backbone if moe else cfg
    d, v = b.d_model, b.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (v, d), "pos_emb": (b.max_seq_len, d)}
    for i in range(b.n_layers):
        p = f"h.{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + w] = (d, d)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        if moe:
            shapes[p + "gate.w"] = (d, cfg.n_experts)
            for e in range(cfg.n_experts):
                for k, s in ffn_shapes(b).items():
                    shapes[f"{p}experts.{e}.{k}"] = s
        else:
            for k, s in ffn_shapes(b).items():
                shapes[p + "ffn." + k] = s
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    if not b.tie_embeddings:
        shapes["head.w"] = (d, v)
    shapes["head.b"] = (v,)
    return shapes


def parameter_count(cfg: LmConfig | MoeConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def is_expert_param(name: str) -> bool:
    return ".experts." in name


def _init_array(name: str, shape, rng: np.random.Generator, n_layers: int) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf in ("b", "b1", "b2") or name == "head.b":
        return np.zeros(shape)
    std = 0.02
    if leaf in ("wo", "w2"):
        std = 0.02 / math.sqrt(2 * n_layers)
    return rng.normal(0.0, std, size=shape)


class _Lm:
    config: LmConfig | MoeConfig
    params: dict[str, Tensor]

    @property
    def backbone(self) -> LmConfig:
        c = self.config
        return c.backbone if isinstance(c, MoeConfig) else c

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self):
        new = object.__new__(type(self))
        new.config = self.config
        new.params = {k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.params.items()}
        return new

    def requires_grad_(self, flag: bool = True):
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def _ffn(self, layer: int, x: Tensor, routing: list | None) -> Tensor:
        raise NotImplementedError

    def forward(self, ids, routing: list | None = None) -> tuple[Tensor, list[Tensor]]:
        """Return ``(logits, hidden)``; ``hidden[l]`` is the residual stream after layer ``l``."""
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        cfg = self.backbone
        bsz, seq = ids.shape
        if seq > cfg.max_seq_len:
            raise ValueError(f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
        P = self.params
        x = T.embedding(P["tok_emb"], ids) + P["pos_emb"][:seq]
        mask = np.triu(np.full((seq, seq), MASK_VALUE), k=1)
        mask_t = Tensor._wrap(mask)
        hidden = []
        for i in range(cfg.n_layers):
            x = x + self._attention(i, T.layer_norm(x, P[f"h.{i}.ln1.g"], P[f"h.{i}.ln1.b"]), mask_t)
            x = x + self._ffn(i, T.layer_norm(x, P[f"h.{i}.ln2.g"], P[f"h.{i}.ln2.b"]), routing)
            hidden.append(x)
        h = T.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
        w_out = P["head.w"] if "head.w" in P else T.transpose(P["tok_emb"], (1, 0))
        logits = h @ w_out + P["head.b"]
        return logits, hidden

    def _attention(self, i: int, x: Tensor, mask: Tensor) -> Tensor:
        cfg = self.backbone
        P = self.params
        bsz, seq, d = x.shape
        nh = cfg.n_heads
        dh = d // nh

        def heads(t: Tensor) -> Tensor:
            return T.transpose(t.reshape(bsz, seq, nh, dh), (0, 2, 1, 3))

        q = heads(x @ P[f"h.{i}.attn.wq"])
        k = heads(x @ P[f"h.{i}.attn.wk"])
        v = heads(x @ P[f"h.{i}.attn.wv"])
        scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh)) + mask
        att = T.softmax(scores, axis=-1)
        out = T.transpose(att @ v, (0, 2, 1, 3)).reshape(bsz, seq, d)
        return out @ P[f"h.{i}.attn.wo"]


def ffn_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return T.gelu(x @ w1 + b1) @ w2 + b2


class DenseLm(_Lm):
    def __init__(self, config: LmConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: LmConfig, seed: int) -> "DenseLm":
        rng = np.random.default_rng(seed)
        params = {n: Tensor(_init_array(n, s, rng, config.n_layers), requires_grad=True)
                  for n, s in param_shapes(config).items()}
        return cls(config, params)

    @classmethod
    def zeros(cls, config: LmConfig) -> "DenseLm":
        return cls(config, {n: Tensor(np.zeros(s), requires_grad=True) for n, s in param_shapes(config).items()})

    def _ffn(self, layer, x, routing):
        p = f"h.{layer}.ffn."
        P = self.params
        return ffn_forward(x, P[p + "w1"], P[p + "b1"], P[p + "w2"], P[p + "b2"])


@dataclass
class MoeBlock:
    """Gate plus expert FFN tensors of one layer."""

    gate: Tensor
    experts: list[tuple[Tensor, Tensor, Tensor, Tensor]]
    top_k: int


def top_k_mask(p: np.ndarray, k: int) -> np.ndarray:
    """0/1 mask of the k largest entries along the last axis; ties go to the lower index."""
    order = np.argsort(-p, axis=-1, kind="stable")[..., :k]
    mask = np.zeros_like(p)
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return mask


def moe_block_forward(block: MoeBlock, x: Tensor, routing: list | None = None) -> Tensor:
    """``y = sum_{i in top_k} p_i * expert_i(x)`` with raw (un-renormalised) gate probabilities."""
    n_exp = len(block.experts)
    if not 1 <= block.top_k <= n_exp:
        raise ValueError("top_k out of range")
    lead = x.shape[:-1]
    d = x.shape[-1]
    p = T.softmax(x @ block.gate, axis=-1)
    mask = top_k_mask(p.data, block.top_k)
    if routing is not None:
        routing.append(np.argsort(-p.data, axis=-1, kind="stable")[..., :block.top_k])
    w = p * Tensor._wrap(mask)
    ys = [ffn_forward(x, *e).reshape(lead + (1, d)) for e in block.experts]
    stacked = T.concat(ys, axis=-2)
    y = w.reshape(lead + (1, n_exp)) @ stacked
    return y.reshape(lead + (d,))


class MoeLm(_Lm):
    def __init__(self, config: MoeConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: MoeConfig, seed: int) -> "MoeLm":
        rng = np.random.default_rng(seed)
        n_layers = config.backbone.n_layers
        params = {n: Tensor(_init_array(n, s, rng, n_layers), requires_grad=True)
                  for n, s in param_shapes(config).items()}
        return cls(config, params)

    def block(self, layer: int) -> MoeBlock:
        P = self.params
        p = f"h.{layer}."
        experts = [tuple(P[f"{p}experts.{e}.{k}"] for k in FFN_KEYS) for e in range(self.config.n_experts)]
        return MoeBlock(P[p + "gate.w"], experts, self.config.top_k)

    def expert_names(self) -> list[str]:
        return [n for n in self.params if is_expert_param(n)]

    def _ffn(self, layer, x, routing):
        return moe_block_forward(self.block(layer), x, routing)


# objective and metrics ------------------------------------------------------


def loss_ce(logits: Tensor, batch) -> Tensor:
    """Mean next-token NLL: token t+1 is predicted from the logits at position t.

    ``logits`` may come from the full window (last position unused) or from
    ``batch[:, :-1]``.
    """
    batch = np.asarray(batch)
    if batch.ndim == 1:
        batch = batch[None, :]
    if logits.ndim != 3 or logits.shape[0] != batch.shape[0]:
        raise T.ShapeError(f"logits {logits.shape} do not match batch {batch.shape}")
    if logits.shape[1] == batch.shape[1]:
        logits = logits[:, :-1, :]
    elif logits.shape[1] != batch.shape[1] - 1:
        raise T.ShapeError(f"logits {logits.shape} do not match batch {batch.shape}")
    return T.cross_entropy(logits, batch[:, 1:])


def _iter_chunks(corpus: np.ndarray, chunk: int) -> Iterator[np.ndarray]:
    for s in range(0, len(corpus), chunk):
        yield corpus[s:s + chunk]


def _check_corpus(corpus) -> np.ndarray:
    corpus = np.asarray(corpus)
    if corpus.ndim == 1:
        corpus = corpus[None, :]
    if corpus.size == 0 or corpus.shape[1] < 2:
        raise ValueError("empty corpus")
    return corpus


def nll_stats(model: _Lm, corpus, chunk: int = 64) -> tuple[float, int]:
    """Total next-token NLL and number of predicted positions over ``(n, T+1)`` windows."""
    corpus = _check_corpus(corpus)
    total = 0.0
    count = 0
    with no_grad():
        for part in _iter_chunks(corpus, chunk):
            logits, _ = model.forward(part[:, :-1])
            logp = T._log_softmax_np(logits.data, -1)
            tgt = part[:, 1:]
            total += float(-np.take_along_axis(logp, tgt[..., None], axis=-1).sum())
            count += tgt.size
    return total, count


def log_perplexity(model: _Lm, corpus) -> float:
    total, count = nll_stats(model, corpus)
    return total / count


def perplexity(model: _Lm, corpus) -> float:
    return math.exp(log_perplexity(model, corpus))


def token_accuracy(model: _Lm, corpus, chunk: int = 64) -> float:
    """Teacher-forced greedy next-token match rate, in percent."""
    corpus = _check_corpus(corpus)
    hits = 0
    count = 0
    with no_grad():
        for part in _iter_chunks(corpus, chunk):
            logits, _ = model.forward(part[:, :-1])
            pred = np.argmax(logits.data, axis=-1)
            hits += int((pred == part[:, 1:]).sum())
            count += pred.size
    return 100.0 * hits / count


# training ---------------------------------------------------------------------


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    components: list[dict[str, float]] = field(default_factory=list)


def fit(params: list[Tensor], step_loss: Callable[[np.ndarray], tuple[Tensor, dict]], corpus: np.ndarray,
        epochs: int, lr: float, seed: int, batch_size: int = 16, clip_norm: float | None = 1.0,
        label: str = "train") -> TrainResult:
    """Minibatch Adam over ``corpus`` windows, reshuffled each epoch from ``seed``.

    ``step_loss`` maps a batch to ``(scalar loss tensor, component floats)``.
    Returns per-epoch means of the loss and of every component.
    """
    corpus = _check_corpus(corpus)
    result = TrainResult()
    if epochs <= 0:
        return result
    rng = np.random.default_rng(seed)
    opt = Adam(params, lr=lr, clip_norm=clip_norm)
    for epoch in range(epochs):
        order = rng.permutation(len(corpus))
        tot = 0.0
        comp_tot: dict[str, float] = {}
        n_batches = 0
        for s in range(0, len(order), batch_size):
            batch = corpus[order[s:s + batch_size]]
            opt.zero_grad()
            try:
                loss, comps = step_loss(batch)
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"{label}: non-finite value at epoch {epoch}, step {n_batches}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"{label}: loss became {value} at epoch {epoch}")
            opt.step()
            tot += value
            for k, v in comps.items():
                comp_tot[k] = comp_tot.get(k, 0.0) + v
            n_batches += 1
        result.losses.append(tot / n_batches)
        result.components.append({k: v / n_batches for k, v in comp_tot.items()})
    return result


def lm_step_loss(model: _Lm) -> Callable[[np.ndarray], tuple[Tensor, dict]]:
    def step(batch):
        logits, _ = model.forward(batch[:, :-1])
        loss = loss_ce(logits, batch)
        return loss, {"ce": loss.item()}
    return step


def train_local(model: DenseLm, corpus, epochs: int, lr: float, seed: int,
                batch_size: int = 16) -> tuple[DenseLm, list[float]]:
    """Train a copy of ``model`` on a device shard with next-token cross-entropy."""
    trained = model.copy().requires_grad_(True)
    res = fit(trained.parameters(), lm_step_loss(trained), corpus, epochs, lr, seed, batch_size,
              label="train_local")
    return trained, res.losses
