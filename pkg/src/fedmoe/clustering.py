"""Knowledge clustering of uploaded device models and proxy-teacher construction."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .models import DenseLm
from .tensor import Tensor


def similarity_matrix(embeddings) -> np.ndarray:
    """Pairwise cosine similarity; symmetric with a unit diagonal."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2:
        raise ValueError("embeddings must be an (N, dim) array")
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding")
    u = e / norms[:, None]
    sim = np.clip(u @ u.T, -1.0, 1.0)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[int(rng.integers(n))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(np.argmax(d2))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _repair_empty(x: np.ndarray, labels: np.ndarray, centers: np.ndarray, k: int) -> None:
    """Move the member farthest from the largest cluster's centroid into each empty cluster."""
    for c in range(k):
        if np.any(labels == c):
            continue
        sizes = np.bincount(labels, minlength=k)
        big = int(np.argmax(sizes))
        members = np.flatnonzero(labels == big)
        dist = ((x[members] - centers[big]) ** 2).sum(axis=1)
        far = members[int(np.flatnonzero(dist == dist.max())[0])]
        labels[far] = c
        centers[c] = x[far]


def kmeans_domains(embeddings, k: int, seed: int, max_iter: int = 300, tol: float = 1e-9) -> list[list[int]]:
    """Euclidean KMeans on unit-normalised embeddings.

    Returns ``k`` non-empty member lists, ordered by their lowest device id.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = len(x)
    if n < k:
        raise ValueError(f"cannot form {k} clusters from {n} embeddings")
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        _repair_empty(x, labels, centers, k)
        new = np.array([x[labels == c].mean(axis=0) for c in range(k)])
        shift = float(np.max(np.linalg.norm(new - centers, axis=1)))
        centers = new
        if shift < tol:
            break
    clusters = [sorted(int(i) for i in np.flatnonzero(labels == c)) for c in range(k)]
    return sorted(clusters, key=lambda m: m[0])


def running_mean(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Incremental mean in the given order: ``mu += (x - mu) / n``.

    Exact for identical inputs and for antisymmetric pairs, unlike ``sum / n``.
    """
    mu = np.array(arrays[0], dtype=np.float64, copy=True)
    for n, a in enumerate(arrays[1:], start=2):
        mu += (a - mu) / n
    return mu


@dataclass
class KnowledgeCluster:
    cluster_id: int
    members: list[int]
    dominant_family: str
    used: list[int] = field(default_factory=list)
    excluded: list[int] = field(default_factory=list)
    proxy: DenseLm | None = None

    def report(self, sim: np.ndarray | None = None) -> dict:
        out = {"cluster": self.cluster_id, "members": self.members, "dominant_family": self.dominant_family,
               "averaged": self.used, "excluded": self.excluded}
        if sim is not None:
            m = self.members
            if len(m) > 1:
                block = sim[np.ix_(m, m)]
                out["intra_mean_cosine"] = float(block[~np.eye(len(m), dtype=bool)].mean())
            else:
                out["intra_mean_cosine"] = 1.0
        return out


def dominant_family(members: Sequence[int], families: Sequence[str], tokens: Sequence[int]) -> str:
    """Majority family; ties go to more aggregate training tokens, then the smaller tag."""
    counts = Counter(families[m] for m in members)
    tok = Counter()
    for m in members:
        tok[families[m]] += tokens[m]
    return min(counts, key=lambda f: (-counts[f], -tok[f], f))


def build_proxy(cluster_id: int, members: Sequence[int], models: Sequence[DenseLm],
                tokens: Sequence[int] | None = None, weighted: bool = False) -> KnowledgeCluster:
    """Average the weights of the cluster members that share the dominant architecture."""
    if not members:
        raise ValueError("empty cluster")
    members = sorted(members)
    families = [m.config.arch_family for m in models]
    if tokens is None:
        tokens = [0] * len(models)
    fam = dominant_family(members, families, tokens)
    used = [m for m in members if families[m] == fam]
    excluded = [m for m in members if families[m] != fam]
    ref = models[used[0]]
    if any(models[m].config != ref.config for m in used):
        raise ValueError(f"cluster {cluster_id}: members of family {fam} disagree on config")
    params = {}
    for name in ref.params:
        arrays = [models[m].params[name].data for m in used]
        if weighted and len(used) > 1:
            w = np.asarray([tokens[m] for m in used], dtype=np.float64)
            acc = sum(wi * a for wi, a in zip(w / w.sum(), arrays))
        else:
            acc = running_mean(arrays)
        params[name] = Tensor(acc, requires_grad=False)
    proxy = DenseLm(ref.config, params)
    return KnowledgeCluster(cluster_id, list(members), fam, used, excluded, proxy)
