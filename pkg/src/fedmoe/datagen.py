"""Synthetic multi-domain corpora, device shards and data embeddings.

Each knowledge domain is a first-order Markov chain over the shared vocabulary
whose mass concentrates on a domain-private "home" token subset. A corpus is a
2-D int array of windows, each ``seq_len + 1`` tokens long.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .seeding import derive_seed, rng_for

EMBED_DIM = 32
EMBED_SEED = 0x5EED_E5
TOKEN_MAGIC = b"DFTK"
TOKEN_VERSION = 1


@dataclass
class DomainSpec:
    domain_id: int
    home: np.ndarray
    transition: np.ndarray

    @property
    def vocab_size(self) -> int:
        return self.transition.shape[0]

    def sample(self, n_docs: int, doc_len: int, rng: np.random.Generator) -> np.ndarray:
        docs = np.empty((n_docs, doc_len), dtype=np.int64)
        if n_docs == 0:
            return docs
        docs[:, 0] = rng.choice(self.home, size=n_docs)
        cum = np.cumsum(self.transition, axis=1)
        cum[:, -1] = 1.0
        for t in range(1, doc_len):
            u = rng.random(n_docs)
            rows = cum[docs[:, t - 1]]
            docs[:, t] = np.minimum((rows <= u[:, None]).sum(axis=1), self.vocab_size - 1)
        return docs


def make_domains(n_domains: int, vocab_size: int, separation: float, seed: int,
                 concentration: float = 0.3) -> list[DomainSpec]:
    """``separation`` of each row's mass lands on the domain's home subset, the rest is uniform."""
    if n_domains < 1:
        raise ValueError("need at least one domain")
    if not 0.0 <= separation <= 1.0:
        raise ValueError("separation must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(vocab_size)
    homes = np.array_split(perm, n_domains)
    domains = []
    for i, home in enumerate(homes):
        home = np.sort(home)
        trans = np.full((vocab_size, vocab_size), (1.0 - separation) / vocab_size)
        weights = rng.dirichlet(np.full(len(home), concentration), size=vocab_size)
        trans[:, home] += separation * weights
        trans /= trans.sum(axis=1, keepdims=True)
        domains.append(DomainSpec(i, home, trans))
    return domains


@dataclass
class Corpora:
    domains: list[DomainSpec]
    seq_len: int
    device_shards: list[np.ndarray]
    device_domain: list[int]
    public: np.ndarray
    public_domain: np.ndarray
    test: dict[int, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def n_devices(self) -> int:
        return len(self.device_shards)

    def mixed_test(self) -> np.ndarray:
        return np.concatenate([self.test[d] for d in sorted(self.test)], axis=0)


def _dedupe(windows: np.ndarray, seen: set[bytes]) -> np.ndarray:
    keep = []
    for i, w in enumerate(windows):
        key = w.tobytes()
        if key not in seen:
            seen.add(key)
            keep.append(i)
    return windows[keep]


def gen_corpora(n_domains: int, devices_per_domain: int | Sequence[int], tokens_per_device: int, seed: int,
                vocab_size: int = 64, seq_len: int = 32, separation: float = 0.9,
                public_docs: int = 192, test_docs: int = 48, mix: float = 0.0,
                dirichlet_alpha: float = 5.0) -> Corpora:
    """Generate domain generators, uneven device shards, the public corpus and held-out test sets.

    Device shard sizes follow a seeded Dirichlet split of the total token
    budget; each device draws a fraction ``1 - mix`` of its windows from its
    own domain and the rest uniformly from the other domains.
    """
    if n_domains < 1:
        raise ValueError("n_domains must be >= 1")
    doc_len = seq_len + 1
    if tokens_per_device < doc_len:
        raise ValueError(f"tokens_per_device={tokens_per_device} < T_max+1={doc_len}")
    if isinstance(devices_per_domain, int):
        devices_per_domain = [devices_per_domain] * n_domains
    if len(devices_per_domain) != n_domains:
        raise ValueError("devices_per_domain must list one count per domain")

    domains = make_domains(n_domains, vocab_size, separation, derive_seed(seed, "domains"))
    assign_rng = rng_for(seed, "device-assignment")
    device_domain = [d for d, c in enumerate(devices_per_domain) for _ in range(c)]
    device_domain = [int(x) for x in assign_rng.permutation(device_domain)]
    n_dev = len(device_domain)
    if n_dev == 0:
        raise ValueError("no devices")

    avg_docs = tokens_per_device // doc_len
    min_docs = max(1, avg_docs // 4)
    spare = n_dev * avg_docs - n_dev * min_docs
    split = assign_rng.dirichlet(np.full(n_dev, dirichlet_alpha))
    sizes = min_docs + assign_rng.multinomial(spare, split)

    seen: set[bytes] = set()
    shards = []
    for n, (dom, size) in enumerate(zip(device_domain, sizes)):
        rng = rng_for(seed, "device-shard", n)
        n_other = int(round(mix * size)) if n_domains > 1 else 0
        parts = [domains[dom].sample(int(size) - n_other, doc_len, rng)]
        others = [d for d in range(n_domains) if d != dom]
        for o in rng.choice(others, size=n_other) if n_other else []:
            parts.append(domains[int(o)].sample(1, doc_len, rng))
        shards.append(_dedupe(np.concatenate(parts, axis=0), seen))

    rng = rng_for(seed, "public")
    pub_dom = rng.integers(0, n_domains, size=public_docs)
    public = np.empty((public_docs, doc_len), dtype=np.int64)
    for d in range(n_domains):
        idx = np.flatnonzero(pub_dom == d)
        public[idx] = domains[d].sample(len(idx), doc_len, rng)
    keep = [i for i, w in enumerate(public) if w.tobytes() not in seen]
    public, pub_dom = public[keep], pub_dom[keep]
    seen.update(w.tobytes() for w in public)

    test = {}
    for d in range(n_domains):
        rng = rng_for(seed, "test", d)
        test[d] = _dedupe(domains[d].sample(test_docs, doc_len, rng), seen)

    meta = dict(n_domains=n_domains, devices_per_domain=list(devices_per_domain),
                tokens_per_device=tokens_per_device, seed=seed, vocab_size=vocab_size,
                seq_len=seq_len, separation=separation, public_docs=public_docs,
                test_docs=test_docs, mix=mix, dirichlet_alpha=dirichlet_alpha)
    return Corpora(domains, seq_len, shards, device_domain, public, pub_dom, test, meta)


_PROJECTIONS: dict[int, np.ndarray] = {}


def projection_matrix(vocab_size: int) -> np.ndarray:
    """The single global random projection shared by every device."""
    if vocab_size not in _PROJECTIONS:
        rng = np.random.default_rng(EMBED_SEED)
        _PROJECTIONS[vocab_size] = rng.standard_normal((EMBED_DIM, vocab_size)) / np.sqrt(EMBED_DIM)
    return _PROJECTIONS[vocab_size]


def compute_embedding(shard, vocab_size: int) -> np.ndarray:
    """Unit-norm projection of the shard's centred unigram frequency histogram."""
    tokens = np.asarray(shard).reshape(-1)
    if tokens.size == 0:
        raise ValueError("empty shard")
    freq = np.bincount(tokens, minlength=vocab_size).astype(np.float64) / tokens.size
    e = projection_matrix(vocab_size) @ (freq - 1.0 / vocab_size)
    norm = np.linalg.norm(e)
    if norm == 0.0:
        raise ValueError("shard histogram is exactly uniform; embedding undefined")
    return e / norm


# persistence ------------------------------------------------------------------


def write_tokens(path, windows: np.ndarray, vocab_size: int) -> int:
    arr = np.asarray(windows)
    if arr.size and (arr.min() < 0 or arr.max() >= min(vocab_size, 1 << 16)):
        raise ValueError("token id does not fit the declared vocabulary")
    blob = TOKEN_MAGIC + struct.pack("<II", TOKEN_VERSION, vocab_size) + arr.astype("<u2").tobytes()
    Path(path).write_bytes(blob)
    return len(blob)


def read_tokens(path, seq_len: int | None = None) -> tuple[np.ndarray, int]:
    """Return ``(ids, vocab_size)``; ids are reshaped to ``(-1, seq_len + 1)`` when given."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != TOKEN_MAGIC:
        raise ValueError(f"{path}: not a token stream")
    version, vocab = struct.unpack_from("<II", blob, 4)
    if version != TOKEN_VERSION:
        raise ValueError(f"{path}: unsupported token stream version {version}")
    if (len(blob) - 12) % 2:
        raise ValueError(f"{path}: truncated token stream")
    ids = np.frombuffer(blob, dtype="<u2", offset=12).astype(np.int64)
    if seq_len is not None:
        ids = ids.reshape(-1, seq_len + 1)
    return ids, vocab


def save_corpora(corpora: Corpora, out_dir, arch_assignment: Sequence[str]) -> dict:
    """Persist every corpus as a token stream and write ``data_manifest.json``."""
    out = Path(out_dir)
    (out / "data").mkdir(parents=True, exist_ok=True)
    vocab = corpora.meta["vocab_size"]
    devices = []
    for n, shard in enumerate(corpora.device_shards):
        rel = f"data/device_{n:03d}.tok"
        write_tokens(out / rel, shard, vocab)
        devices.append({"device": n, "arch_family": arch_assignment[n], "shard": rel,
                        "domain": corpora.device_domain[n], "n_windows": int(len(shard)),
                        "embedding": compute_embedding(shard, vocab).tolist()})
    write_tokens(out / "data/public.tok", corpora.public, vocab)
    tests = {}
    for d, arr in corpora.test.items():
        rel = f"data/test_domain_{d}.tok"
        write_tokens(out / rel, arr, vocab)
        tests[str(d)] = rel
    manifest = {"meta": corpora.meta, "devices": devices, "public": "data/public.tok",
                "public_domain": corpora.public_domain.tolist(), "test": tests}
    (out / "data_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_corpora(out_dir) -> tuple[Corpora, dict]:
    out = Path(out_dir)
    manifest = json.loads((out / "data_manifest.json").read_text())
    meta = manifest["meta"]
    seq = meta["seq_len"]
    domains = make_domains(meta["n_domains"], meta["vocab_size"], meta["separation"],
                           derive_seed(meta["seed"], "domains"))
    shards = [read_tokens(out / d["shard"], seq)[0] for d in manifest["devices"]]
    public = read_tokens(out / manifest["public"], seq)[0]
    test = {int(d): read_tokens(out / p, seq)[0] for d, p in manifest["test"].items()}
    corpora = Corpora(domains, seq, shards, [d["domain"] for d in manifest["devices"]], public,
                      np.asarray(manifest["public_domain"]), test, meta)
    return corpora, manifest
