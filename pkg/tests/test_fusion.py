import math

import numpy as np
import pytest

from fedmoe.clustering import running_mean
from fedmoe.fusion import (FreezeViolation, dominant_expert_by_domain, expert_checksums, merge, routing_stats,
                           trainable_fraction, tune_global)
from fedmoe.models import FFN_KEYS, DenseLm, LmConfig, MoeConfig, MoeLm, family_config, is_expert_param, log_perplexity

BACKBONE = LmConfig("b", 11, 8, 2, 2, 16, 12)


def _bases(k, seed=0, cfg=BACKBONE):
    out = []
    for i in range(k):
        m = DenseLm.init(cfg, seed + i)
        rng = np.random.default_rng(100 + seed + i)
        for p in m.parameters():
            p.data = rng.standard_normal(p.shape)
        out.append(m)
    return out


def _source(name):
    prefix, rest = name.split(".experts.", 1)
    e, leaf = rest.split(".", 1)
    return int(e), f"{prefix}.ffn.{leaf}"


def test_merge_identical_bases():
    base = _bases(1)[0]
    moe, _ = merge([base.copy() for _ in range(3)], MoeConfig(BACKBONE, 3, 2), seed=0)
    for name, p in moe.params.items():
        if is_expert_param(name):
            assert np.array_equal(p.data, base.params[_source(name)[1]].data)
        elif ".gate." not in name:
            assert np.array_equal(p.data, base.params[name].data)


def test_merge_opposite_bases():
    a = _bases(1)[0]
    b = a.copy()
    for p in b.parameters():
        p.data = -p.data
    moe, _ = merge([a, b], MoeConfig(BACKBONE, 2, 1), seed=0)
    for name, p in moe.params.items():
        if is_expert_param(name):
            e, src = _source(name)
            assert np.array_equal(p.data, [a, b][e].params[src].data)
        elif ".gate." not in name:
            assert not p.data.any()


def _ascending_mean(arrays):
    # independent accumulation in ascending base order
    mu = arrays[0].copy()
    for i in range(1, len(arrays)):
        mu = mu + (arrays[i] - mu) / (i + 1)
    return mu


def test_merge_random_bases_exact():
    bases = _bases(3, seed=5)
    moe, report = merge(bases, MoeConfig(BACKBONE, 3, 2), seed=1)
    assert set(report.provenance) == set(moe.params)
    for name, p in moe.params.items():
        if is_expert_param(name):
            e, src = _source(name)
            assert p.data.tobytes() == bases[e].params[src].data.tobytes()
        elif ".gate." not in name:
            assert p.data.tobytes() == _ascending_mean([b.params[name].data for b in bases]).tobytes()
    assert report.expert_sha256 == expert_checksums(moe)


def test_merge_gate_is_small_and_seeded():
    bases = _bases(2)
    a, _ = merge(bases, MoeConfig(BACKBONE, 2, 1), seed=3)
    b, _ = merge(bases, MoeConfig(BACKBONE, 2, 1), seed=3)
    g = a.params["h.0.gate.w"].data
    assert np.array_equal(g, b.params["h.0.gate.w"].data)
    assert g.shape == (8, 2) and np.abs(g).max() < 0.2


def test_merge_is_permutation_equivariant():
    bases = _bases(3, seed=2)
    perm = [2, 0, 1]
    a, _ = merge(bases, MoeConfig(BACKBONE, 3, 2), seed=0)
    b, _ = merge([bases[i] for i in perm], MoeConfig(BACKBONE, 3, 2), seed=0)
    for name, p in b.params.items():
        if is_expert_param(name):
            e, src = _source(name)
            assert np.array_equal(p.data, bases[perm[e]].params[src].data)
        elif ".gate." not in name:
            np.testing.assert_allclose(p.data, a.params[name].data, rtol=0, atol=1e-15 * max(1, np.abs(p.data).max()))


def test_merge_argument_errors():
    with pytest.raises(ValueError):
        merge(_bases(2), MoeConfig(BACKBONE, 3, 2), seed=0)
    other = DenseLm.init(LmConfig("o", 11, 8, 1, 2, 16, 12), 0)
    with pytest.raises(ValueError):
        merge([_bases(1)[0], other], MoeConfig(BACKBONE, 2, 1), seed=0)


def test_trainable_fraction_default_backbone():
    moe = MoeLm.init(MoeConfig(family_config("base"), 4, 2), 0)
    assert trainable_fraction(moe) < 0.35


def _public(n=24, seed=0):
    return np.random.default_rng(seed).integers(0, 11, size=(n, 13))


def test_tune_zero_epochs_is_identity():
    moe, _ = merge(_bases(2), MoeConfig(BACKBONE, 2, 1), seed=0)
    tuned, losses = tune_global(moe, _public(), epochs=0, lr=1e-3, seed=0)
    assert losses == []
    for name, p in moe.params.items():
        assert np.array_equal(tuned.params[name].data, p.data)


def test_tune_freezes_experts_and_moves_the_rest():
    moe, report = merge(_bases(3), MoeConfig(BACKBONE, 3, 2), seed=0)
    pub = _public(48)
    tuned, losses = tune_global(moe, pub, epochs=3, lr=1e-2, seed=0)
    assert expert_checksums(tuned) == report.expert_sha256
    assert not np.array_equal(tuned.params["h.0.gate.w"].data, moe.params["h.0.gate.w"].data)
    assert not np.array_equal(tuned.params["h.0.attn.wq"].data, moe.params["h.0.attn.wq"].data)
    assert log_perplexity(tuned, pub) < log_perplexity(moe, pub)


def test_tune_detects_tampering(monkeypatch):
    from fedmoe import fusion
    moe, _ = merge(_bases(2), MoeConfig(BACKBONE, 2, 1), seed=0)
    calls = {"n": 0}
    real = fusion.expert_checksums

    def tampered(m):
        calls["n"] += 1
        if calls["n"] == 2:
            m.params["h.0.experts.0.w1"].data[0, 0] += 1.0
        return real(m)

    monkeypatch.setattr(fusion, "expert_checksums", tampered)
    with pytest.raises(FreezeViolation):
        tune_global(moe, _public(), epochs=1, lr=1e-3, seed=0)


def test_routing_full_activation():
    moe = MoeLm.init(MoeConfig(BACKBONE, 3, 3), 0)
    stats = routing_stats(moe, _public())
    assert np.array_equal(np.asarray(stats.frequency), np.full((2, 3), 100.0))


def test_routing_frequencies_sum_to_k():
    moe = MoeLm.init(MoeConfig(BACKBONE, 4, 2), 0)
    pub = _public(30)
    stats = routing_stats(moe, pub, domains=[i % 3 for i in range(30)])
    np.testing.assert_allclose(np.asarray(stats.frequency).sum(axis=1), 200.0, atol=1e-9)
    assert sorted(stats.domain_matrix) == ["0", "1", "2"]
    assert set(dominant_expert_by_domain(stats)) == {"0", "1", "2"}


def test_routing_symmetric_gate_is_multinomial():
    # Every token id is used once, attention is silenced and the gate columns
    # are orthonormal inside the layer-norm output subspace, so each token's
    # top-1 choice is an independent uniform draw over the experts.
    k_exp, d, v, seq = 4, 16, 2048, 32
    cfg = MoeConfig(LmConfig("r", v, d, 1, 2, 8, seq), k_exp, 1)
    moe = MoeLm.init(cfg, 0)
    rng = np.random.default_rng(7)
    moe.params["tok_emb"].data = rng.standard_normal((v, d))
    moe.params["pos_emb"].data = np.zeros((seq, d))
    moe.params["h.0.attn.wv"].data = np.zeros((d, d))
    basis = rng.standard_normal((d, k_exp))
    basis -= basis.mean(axis=0)
    moe.params["h.0.gate.w"].data = np.linalg.qr(basis)[0]
    ids = rng.permutation(v)
    n_win = v // (seq + 1)
    corpus = ids[: n_win * (seq + 1)].reshape(n_win, seq + 1)
    stats = routing_stats(moe, corpus)
    n_tok = n_win * seq
    sigma = 100 * math.sqrt((1 / k_exp) * (1 - 1 / k_exp) / n_tok)
    for f in stats.frequency[0]:
        assert abs(f - 100 / k_exp) < 3 * sigma
