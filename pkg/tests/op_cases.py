"""Randomised gradient-check cases, one per differentiable op (plus composites).

Each builder takes an rng and returns ``(f, inputs)`` where ``f()`` rebuilds a
scalar from the current input values.
"""

import numpy as np

from fedmoe import tensor as T
from fedmoe.distill import VaaModule, loss_fm, loss_kl
from fedmoe.models import MoeBlock, moe_block_forward
from fedmoe.tensor import Tensor


def _t(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _dims(rng, n, lo=1, hi=4):
    return [int(v) for v in rng.integers(lo, hi + 1, size=n)]


def _scalarize(build, rng):
    """Turn a vector-valued builder into a scalar via a fixed random projection."""
    r = Tensor(rng.standard_normal(build().shape))
    return lambda: T.sum_(build() * r)


def case_matmul(rng):
    m, k, n = _dims(rng, 3)
    a, b = _t(rng, m, k), _t(rng, k, n)
    return _scalarize(lambda: a @ b, rng), [a, b]


def case_matmul_weight(rng):
    bt, m, k, n = _dims(rng, 4)
    a, b = _t(rng, bt, m, k), _t(rng, k, n)
    return _scalarize(lambda: a @ b, rng), [a, b]


def case_matmul_batched(rng):
    b0, b1, m, k, n = _dims(rng, 5, hi=3)
    a, b = _t(rng, b0, b1, m, k), _t(rng, b0, b1, k, n)
    return _scalarize(lambda: a @ b, rng), [a, b]


def case_add(rng):
    s = _dims(rng, 3)
    a, b = _t(rng, *s), _t(rng, *s)
    return _scalarize(lambda: a + b, rng), [a, b]


def case_add_bias(rng):
    s = _dims(rng, 3)
    a, b = _t(rng, *s), _t(rng, s[-1])
    return _scalarize(lambda: a + b, rng), [a, b]


def case_sub(rng):
    s = _dims(rng, 2)
    a, b = _t(rng, *s), _t(rng, *s)
    return _scalarize(lambda: a - b, rng), [a, b]


def case_mul(rng):
    s = _dims(rng, 3)
    a, b = _t(rng, *s), _t(rng, *s)
    return _scalarize(lambda: a * b, rng), [a, b]


def case_mul_bias(rng):
    s = _dims(rng, 3)
    a, b = _t(rng, *s), _t(rng, *s[1:])
    c = float(rng.standard_normal())
    return _scalarize(lambda: (a * b) * c, rng), [a, b]


def case_transpose(rng):
    s = _dims(rng, 3)
    a = _t(rng, *s)
    perm = tuple(int(p) for p in rng.permutation(3))
    return _scalarize(lambda: T.transpose(a, perm), rng), [a]


def case_reshape(rng):
    s = _dims(rng, 3)
    a = _t(rng, *s)
    return _scalarize(lambda: a.reshape(s[0] * s[1], s[2]), rng), [a]


def case_concat(rng):
    s = _dims(rng, 2)
    a, b = _t(rng, s[0], s[1]), _t(rng, s[0] + 1, s[1])
    return _scalarize(lambda: T.concat([a, b], axis=0), rng), [a, b]


def case_slice(rng):
    s = _dims(rng, 2, lo=2)
    a = _t(rng, *s)
    return _scalarize(lambda: a[1:, : s[1] - 1], rng), [a]


def case_split(rng):
    n = int(rng.integers(1, 4))
    a = _t(rng, 2, 2 * n, 3)
    r = Tensor(rng.standard_normal((n, 3)))
    return (lambda: T.sum_(T.split(a, 2, axis=1)[1] * r)), [a]


def case_sum_axis(rng):
    s = _dims(rng, 3)
    ax = int(rng.integers(0, 3))
    a = _t(rng, *s)
    return _scalarize(lambda: T.sum_(a, axis=ax), rng), [a]


def case_mean(rng):
    s = _dims(rng, 2)
    a = _t(rng, *s)
    return _scalarize(lambda: T.mean(a, axis=1), rng), [a]


def case_mean_pool(rng):
    b, t, d = int(rng.integers(1, 3)), int(rng.integers(3, 8)), int(rng.integers(1, 4))
    seg = int(rng.integers(1, t + 1))
    a = _t(rng, b, t, d)
    return _scalarize(lambda: T.mean_pool(a, seg), rng), [a]


def case_embedding(rng):
    v, d = _dims(rng, 2, lo=2)
    w = _t(rng, v, d)
    ids = rng.integers(0, v, size=(2, 5))
    return _scalarize(lambda: T.embedding(w, ids), rng), [w]


def case_layer_norm(rng):
    # width 2 normalises every row to +-1, so d/dx is pure finite-difference noise
    s = _dims(rng, 2) + [int(rng.integers(3, 7))]
    x, g, b = _t(rng, *s), _t(rng, s[-1]), _t(rng, s[-1])
    return _scalarize(lambda: T.layer_norm(x, g, b), rng), [x, g, b]


def case_gelu(rng):
    a = _t(rng, *_dims(rng, 2))
    return _scalarize(lambda: T.gelu(a), rng), [a]


def case_exp(rng):
    a = _t(rng, *_dims(rng, 2))
    return _scalarize(lambda: T.exp(a), rng), [a]


def case_log(rng):
    a = _t(rng, *_dims(rng, 2), positive=True)
    return _scalarize(lambda: T.log(a), rng), [a]


def case_softmax(rng):
    s = _dims(rng, 3, lo=2)
    ax = int(rng.integers(-3, 3))
    a = _t(rng, *s)
    return _scalarize(lambda: T.softmax(a, axis=ax), rng), [a]


def case_log_softmax(rng):
    s = _dims(rng, 2, lo=2)
    a = _t(rng, *s)
    return _scalarize(lambda: T.log_softmax(a, axis=-1), rng), [a]


def case_cross_entropy(rng):
    n, v = _dims(rng, 2, lo=2)
    a = _t(rng, n, v)
    tgt = rng.integers(0, v, size=n)
    return (lambda: T.cross_entropy(a, tgt)), [a]


def case_mse(rng):
    s = _dims(rng, 2)
    a, b = _t(rng, *s), _t(rng, *s)
    return (lambda: T.mse(a, b)), [a, b]


def case_kl(rng):
    n, v = _dims(rng, 2, lo=2)
    s = _t(rng, 1, n, v)
    teacher = rng.standard_normal((1, n, v))
    tau = float(rng.uniform(0.5, 3.0))
    return (lambda: loss_kl(teacher, s, tau)), [s]


def case_moe_block(rng):
    d, k_exp, h = 3, 4, 5
    x = _t(rng, 2, 3, d)
    gate = _t(rng, d, k_exp)
    experts = [(_t(rng, d, h), _t(rng, h), _t(rng, h, d), _t(rng, d)) for _ in range(k_exp)]
    block = MoeBlock(gate, experts, top_k=2)
    params = [x, gate] + [p for e in experts for p in e]
    return _scalarize(lambda: moe_block_forward(block, x), rng), params


def case_vaa_fm(rng):
    """Composite: student stage features -> adapter -> feature-matching loss."""
    n_stages = 2
    ds, dt, t_len = 4, 3, 6
    vaa = VaaModule(ds, [dt] * n_stages, n_queries=4, dim=4, n_heads=2, seed=int(rng.integers(1 << 31)))
    feats = [_t(rng, 1, t_len, ds) for _ in range(n_stages)]
    teacher = [rng.standard_normal((1, 2, dt)) for _ in range(n_stages)]
    return (lambda: loss_fm(teacher, vaa.forward(feats))), feats + vaa.parameters()


OP_CASES = {name[5:]: fn for name, fn in dict(globals()).items() if name.startswith("case_")}
