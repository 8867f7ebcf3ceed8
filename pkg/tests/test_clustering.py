import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmoe.clustering import build_proxy, dominant_family, kmeans_domains, running_mean, similarity_matrix
from fedmoe.datagen import compute_embedding, gen_corpora
from fedmoe.models import DenseLm, LmConfig, family_config, parameter_count

SMALL = LmConfig("s", 11, 8, 1, 2, 8, 8)


def test_similarity_identical_and_orthogonal():
    sim = similarity_matrix([[1.0, 0.0], [2.0, 0.0], [0.0, 3.0]])
    assert sim[0, 1] == 1.0
    assert sim[0, 2] == 0.0


def test_similarity_hand_value():
    sim = similarity_matrix([[1.0, 0.0], [1.0, 1.0]])
    assert sim[0, 1] == pytest.approx(0.707106781187, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 10), st.integers(2, 8), st.integers(0, 2 ** 31))
def test_similarity_invariants(n, dim, seed):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((n, dim))
    sim = similarity_matrix(e)
    assert np.array_equal(sim, sim.T)
    assert np.all(np.diag(sim) == 1.0)
    assert np.all(np.abs(sim) <= 1.0)
    perm = rng.permutation(n)
    np.testing.assert_allclose(similarity_matrix(e[perm]), sim[np.ix_(perm, perm)], rtol=0, atol=1e-15)


def test_similarity_rejects_zero_vector():
    with pytest.raises(ValueError):
        similarity_matrix([[0.0, 0.0], [1.0, 0.0]])


def test_kmeans_singletons_when_n_equals_k():
    e = np.eye(4)
    assert kmeans_domains(e, 4, seed=0) == [[0], [1], [2], [3]]


def test_kmeans_degenerate_repair():
    e = np.ones((5, 3))
    clusters = kmeans_domains(e, 2, seed=0)
    assert clusters == [[0], [1, 2, 3, 4]]


def test_kmeans_too_few_points():
    with pytest.raises(ValueError):
        kmeans_domains(np.eye(2), 3, seed=0)


@pytest.fixture(scope="module")
def fixture_embeddings():
    c = gen_corpora(3, 4, 4000, seed=0)
    e = np.array([compute_embedding(s, 64) for s in c.device_shards])
    return e, c.device_domain


def _truth(domains):
    groups = {}
    for n, d in enumerate(domains):
        groups.setdefault(d, []).append(n)
    return sorted(groups.values(), key=lambda m: m[0])


def test_kmeans_recovers_fixture_domains(fixture_embeddings):
    e, dom = fixture_embeddings
    for seed in range(5):
        assert kmeans_domains(e, 3, seed=seed) == _truth(dom)


def test_kmeans_is_deterministic_and_rotation_invariant(fixture_embeddings):
    e, _ = fixture_embeddings
    q, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((e.shape[1], e.shape[1])))
    base = kmeans_domains(e, 3, seed=7)
    assert kmeans_domains(e, 3, seed=7) == base
    assert kmeans_domains(e @ q, 3, seed=7) == base


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 12), st.integers(1, 3), st.integers(0, 2 ** 31))
def test_kmeans_returns_a_partition(n, k, seed):
    rng = np.random.default_rng(seed)
    clusters = kmeans_domains(rng.standard_normal((n, 4)), k, seed=seed)
    assert len(clusters) == k and all(clusters)
    assert sorted(i for c in clusters for i in c) == list(range(n))
    assert [c[0] for c in clusters] == sorted(c[0] for c in clusters)


# proxies --------------------------------------------------------------------------


def _models(n, seed, cfg=SMALL):
    return [DenseLm.init(cfg, seed + i) for i in range(n)]


def test_proxy_of_identical_models_is_bit_identical():
    m = DenseLm.init(SMALL, 0)
    for p in m.parameters():
        p.data = np.random.default_rng(1).standard_normal(p.shape)
    models = [m.copy() for _ in range(3)]
    proxy = build_proxy(0, [0, 1, 2], models).proxy
    for name, p in m.params.items():
        assert np.array_equal(proxy.params[name].data, p.data)


def test_proxy_of_opposite_models_is_zero():
    a = DenseLm.init(SMALL, 0)
    b = a.copy()
    for p in b.parameters():
        p.data = -p.data
    proxy = build_proxy(0, [0, 1], [a, b]).proxy
    for p in proxy.parameters():
        assert not p.data.any()


def _streaming_mean(arrays):
    # independent elementwise accumulation with python floats
    flat = [a.reshape(-1).tolist() for a in arrays]
    out = []
    for j in range(len(flat[0])):
        mu = flat[0][j]
        for n in range(1, len(flat)):
            mu += (flat[n][j] - mu) / (n + 1)
        out.append(mu)
    return np.array(out).reshape(arrays[0].shape)


def test_proxy_matches_streaming_mean_oracle():
    models = _models(3, 10)
    for m in models:
        for p in m.parameters():
            p.data = np.random.default_rng(p.size).standard_normal(p.shape) + p.data
    proxy = build_proxy(0, [0, 1, 2], models).proxy
    for name, p in proxy.params.items():
        arrays = [m.params[name].data for m in models]
        assert np.array_equal(p.data, _streaming_mean(arrays))
        np.testing.assert_allclose(p.data, np.mean(arrays, axis=0), rtol=1e-13, atol=1e-15)


def test_running_mean_exact_for_identical_inputs():
    x = np.random.default_rng(0).standard_normal(1000)
    for k in range(1, 8):
        assert np.array_equal(running_mean([x] * k), x)


def test_dominant_family_rules():
    fams = ["tinyA", "tinyB", "tinyA", "tinyB", "tinyC"]
    assert dominant_family([0, 1, 2], fams, [1] * 5) == "tinyA"
    assert dominant_family([0, 1], fams, [10, 20, 0, 0, 0]) == "tinyB"
    assert dominant_family([0, 1], fams, [5, 5, 0, 0, 0]) == "tinyA"


def test_mixed_family_cluster_excludes_minority():
    models = [DenseLm.init(family_config("tinyA"), 0), DenseLm.init(family_config("tinyB"), 1),
              DenseLm.init(family_config("tinyA"), 2)]
    cl = build_proxy(4, [2, 1, 0], models, tokens=[10, 100, 10])
    assert cl.dominant_family == "tinyA"
    assert cl.used == [0, 2] and cl.excluded == [1]
    assert cl.proxy.parameter_count() == parameter_count(family_config("tinyA"))
    rep = cl.report(np.eye(3))
    assert rep["cluster"] == 4 and rep["excluded"] == [1]


def test_weighted_proxy():
    a, b = _models(2, 0)
    cl = build_proxy(0, [0, 1], [a, b], tokens=[3, 1], weighted=True)
    w = cl.proxy.params["tok_emb"].data
    np.testing.assert_allclose(w, 0.75 * a.params["tok_emb"].data + 0.25 * b.params["tok_emb"].data, atol=1e-15)


def test_empty_cluster_is_an_error():
    with pytest.raises(ValueError):
        build_proxy(0, [], _models(1, 0))
