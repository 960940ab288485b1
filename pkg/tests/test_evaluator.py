import itertools
import math
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from oneshot_nas.data import Batch
from oneshot_nas.evaluator import (
    argmax_genotype,
    arch_probabilities,
    init_alpha,
    pair_marginal_matrices,
    relaxed_forward,
    relaxed_weights,
    sample_architecture,
    sample_quadruples,
    sample_top_candidates,
    train_step_alpha,
)
from oneshot_nas.ndgraph import functional as F
from oneshot_nas.ndgraph.gradcheck import grad_check
from oneshot_nas.ndgraph.optim import adam_state
from oneshot_nas.ndgraph.primitives import STANDARD_OPS, OpKind
from oneshot_nas.ndgraph.tensor import backward
from oneshot_nas.space import (
    CELL_TYPES,
    Genotype,
    MacroConfig,
    NodeSpec,
    SpaceConfig,
    canonicalize,
    count_candidates,
    decode_function_pair,
    encode_function_pair,
    enumerate_space,
)
from oneshot_nas.supernet import forward_sampled, init_supernet

K = OpKind


def one_hot_alpha(space, g, scale=20.0):
    """Logits at +-scale encoding genotype g (nodes given as raw t, u, op1, op2)."""
    alpha = init_alpha(space)
    for kind in CELL_TYPES:
        for i, n in enumerate(g.cell(kind)):
            f, gg, h = alpha.vectors(kind, i)
            f.data[:] = -scale
            gg.data[:] = -scale
            h.data[:] = -scale
            a, b = space.position(n.op1) + 1, space.position(n.op2) + 1
            t, u = n.in1, n.in2
            if a < b:  # same node with the roles swapped
                a, b, t, u = b, a, u, t
            f.data[t] = scale
            gg.data[u] = scale
            h.data[encode_function_pair(a, b) - 1] = scale
    return alpha


def test_init_alpha_uniform():
    space = SpaceConfig(4, STANDARD_OPS)
    dist = arch_probabilities(init_alpha(space))
    f, g, h = dist.vectors("normal", 0)
    assert np.allclose(f, [0.5, 0.5]) and np.allclose(g, [0.5, 0.5])
    assert h.shape == (21,) and np.allclose(h, 1 / 21)
    for i in range(4):
        assert dist.vectors("reduction", i)[0].shape == (i + 2,)


def test_arch_probabilities_closed_form_and_shift():
    space = SpaceConfig(1, (K.SKIP_CONNECT,))
    alpha = init_alpha(space)
    alpha.params["normal.n0.f"].data[:] = [math.log(2), 0.0]
    p = arch_probabilities(alpha).probs["normal.n0.f"]
    assert np.allclose(p, [2 / 3, 1 / 3], atol=1e-15)
    alpha.params["normal.n0.f"].data += 123.0
    assert np.allclose(arch_probabilities(alpha).probs["normal.n0.f"], p, atol=1e-15)


def test_arch_probabilities_non_finite():
    alpha = init_alpha(SpaceConfig(1))
    alpha.params["normal.n0.h"].data[0] = np.nan
    with pytest.raises(ValueError):
        arch_probabilities(alpha)


def test_probabilities_normalized():
    alpha = init_alpha(SpaceConfig(3, STANDARD_OPS))
    rng = np.random.default_rng(0)
    for t in alpha.params.values():
        t.data[:] = rng.standard_normal(t.shape) * 5
    for v in arch_probabilities(alpha).probs.values():
        assert abs(v.sum() - 1) < 1e-9 and np.all(v >= 0)


def test_one_hot_alpha_always_samples_argmax(tiny_space):
    g = Genotype((NodeSpec(1, 0, K.SEP_CONV_3X3, K.SKIP_CONNECT), NodeSpec(2, 2, K.MAX_POOL_3X3, K.MAX_POOL_3X3)),
                 (NodeSpec(0, 1, K.SKIP_CONNECT, K.MAX_POOL_3X3), NodeSpec(1, 2, K.SEP_CONV_3X3, K.SEP_CONV_3X3)))
    alpha = one_hot_alpha(tiny_space, g)
    rng = np.random.default_rng(0)
    assert argmax_genotype(alpha) == canonicalize(g)
    assert all(sample_architecture(alpha, rng) == canonicalize(g) for _ in range(200))


def test_uniform_quadruples_chi_square():
    space = SpaceConfig(1, STANDARD_OPS[:3])
    alpha = init_alpha(space)
    rng = np.random.default_rng(3)
    counts = Counter(sample_quadruples(alpha, rng)["normal"][0] for _ in range(100_000))
    assert len(counts) == 2 * 2 * 6
    assert chisquare(list(counts.values())).pvalue > 0.01


def test_sampled_pairs_respect_order():
    space = SpaceConfig(3, STANDARD_OPS)
    alpha = init_alpha(space)
    rng = np.random.default_rng(1)
    for _ in range(500):
        for rows in sample_quadruples(alpha, rng).values():
            for t, u, r in rows:
                r1, r2 = decode_function_pair(r, 6)
                assert r2 <= r1


def test_pair_marginals():
    first, second = pair_marginal_matrices(3)
    # pairs in index order: (1,1) (2,1) (2,2) (3,1) (3,2) (3,3)
    assert np.array_equal(first, [[1, 0, 0, 0, 0, 0], [0, 1, 1, 0, 0, 0], [0, 0, 0, 1, 1, 1]])
    assert np.array_equal(second, [[1, 1, 0, 1, 0, 0], [0, 0, 1, 0, 1, 0], [0, 0, 0, 0, 0, 1]])


def test_relaxed_weights_match_direct_expansion(tiny_space):
    alpha = init_alpha(tiny_space)
    rng = np.random.default_rng(2)
    for t in alpha.params.values():
        t.data[:] = rng.standard_normal(t.shape)
    w = relaxed_weights(alpha)
    dist = arch_probabilities(alpha)
    for kind in CELL_TYPES:
        for i in range(2):
            f, g, h = dist.vectors(kind, i)
            n_in = len(f)
            direct = np.zeros((3, n_in))
            for r in range(1, 7):
                r1, r2 = decode_function_pair(r, 3)
                for t in range(n_in):
                    direct[r1 - 1, t] += h[r - 1] * f[t]
                    direct[r2 - 1, t] += h[r - 1] * g[t]
            assert np.allclose(w[kind][i].data, direct.ravel(), atol=1e-14)


def test_relaxed_forward_collapses_to_argmax(tiny_space, tiny_macro, tiny_data):
    net = init_supernet(tiny_space, tiny_macro, seed=0)
    g = Genotype((NodeSpec(0, 1, K.SEP_CONV_3X3, K.MAX_POOL_3X3), NodeSpec(2, 0, K.SKIP_CONNECT, K.SEP_CONV_3X3)),
                 (NodeSpec(1, 1, K.MAX_POOL_3X3, K.MAX_POOL_3X3), NodeSpec(0, 2, K.SEP_CONV_3X3, K.SKIP_CONNECT)))
    alpha = one_hot_alpha(tiny_space, g)
    target = argmax_genotype(alpha)
    x = tiny_data.images[:10]
    a = relaxed_forward(net, alpha, x).data
    b = forward_sampled(net, net.replicate(target), x).data
    assert a.shape == (10, 3)
    assert np.max(np.abs(a - b)) < 1e-5


def test_relaxed_forward_alpha_gradients():
    space = SpaceConfig(2, (K.MAX_POOL_3X3, K.SEP_CONV_3X3))
    macro = MacroConfig(N=1, C=2, num_classes=3, input_size=6)
    net = init_supernet(space, macro, seed=0)
    for t in net.params.values():
        t.requires_grad = False
    alpha = init_alpha(space)
    rng = np.random.default_rng(0)
    for t in alpha.params.values():
        t.data[:] = rng.standard_normal(t.shape)
    x = rng.standard_normal((3, 3, 6, 6))
    y = np.array([0, 2, 1])

    def loss(params):
        alpha.params = dict(params)
        return F.cross_entropy(relaxed_forward(net, alpha, x), y)

    assert grad_check(loss, dict(alpha.params)) < 1e-4


def test_alpha_gradient_nonzero_at_uniform(tiny_space, tiny_macro, tiny_data):
    net = init_supernet(tiny_space, tiny_macro, seed=0)
    alpha = init_alpha(tiny_space)
    grads = backward(F.cross_entropy(relaxed_forward(net, alpha, tiny_data.images[:16]), tiny_data.labels[:16]),
                     alpha.params)
    assert sum(float(np.abs(g).sum()) for g in grads.values() if g is not None) > 0


def val_batch(data, n=16, start=0):
    idx = np.arange(start, start + n) % len(data)
    return Batch(data.images[idx], data.labels[idx], "val")


def test_alpha_step_leaves_omega_bitwise(tiny_space, tiny_macro, tiny_data):
    net = init_supernet(tiny_space, tiny_macro, seed=0)
    before = {k: t.data.copy() for k, t in net.params.items()}
    flags = {k: t.requires_grad for k, t in net.params.items()}
    alpha = init_alpha(tiny_space)
    train_step_alpha(net, alpha, val_batch(tiny_data), adam_state())
    assert all(np.array_equal(net.params[k].data, before[k]) for k in before)
    assert all(net.params[k].requires_grad == flags[k] for k in flags)
    assert any(np.any(t.data != 0) for t in alpha.params.values())


def test_alpha_step_rejects_train_batch(tiny_space, tiny_macro, tiny_data):
    net = init_supernet(tiny_space, tiny_macro)
    b = Batch(tiny_data.images[:4], tiny_data.labels[:4], "train")
    with pytest.raises(ValueError, match="val"):
        train_step_alpha(net, init_alpha(tiny_space), b, adam_state())


def test_alpha_trajectory_deterministic(tiny_space, tiny_macro, tiny_data):
    runs = []
    for _ in range(2):
        net = init_supernet(tiny_space, tiny_macro, seed=0)
        alpha, opt = init_alpha(tiny_space), adam_state()
        for s in range(3):
            train_step_alpha(net, alpha, val_batch(tiny_data, start=16 * s), opt)
        runs.append(alpha)
    assert all(np.array_equal(runs[0].params[k].data, runs[1].params[k].data) for k in runs[0].params)


def test_rigged_supernet_concentrates_on_useful_op(rigged):
    net, data = rigged
    alpha, opt = init_alpha(net.space), adam_state(0.05, 0.0)
    for s in range(200):
        train_step_alpha(net, alpha, val_batch(data, 32, 32 * s), opt)
    skip_pos = net.space.position(K.SKIP_CONNECT) + 1
    dist = arch_probabilities(alpha)
    # The first reduction node only reaches the loss through a scale-invariant
    # conv+BN, so its op choice carries no signal; every other node does.
    for kind, i in (("normal", 0), ("normal", 1), ("reduction", 1)):
        h = dist.vectors(kind, i)[2]
        with_skip = sum(h[r - 1] for r in range(1, 7) if skip_pos in decode_function_pair(r, 3))
        assert with_skip > 0.9, (kind, i, with_skip)


def test_top_candidates_single():
    cs = sample_top_candidates(init_alpha(SpaceConfig(2)), 1, np.random.default_rng(0))
    assert len(cs.genotypes) == 1 and not cs.shortfall


def test_top_candidates_one_hot_shortfall(tiny_space):
    g = Genotype((NodeSpec(1, 0, K.SKIP_CONNECT, K.SKIP_CONNECT), NodeSpec(2, 0, K.SKIP_CONNECT, K.SKIP_CONNECT)),
                 (NodeSpec(1, 0, K.SKIP_CONNECT, K.SKIP_CONNECT), NodeSpec(2, 0, K.SKIP_CONNECT, K.SKIP_CONNECT)))
    cs = sample_top_candidates(one_hot_alpha(tiny_space, g), 10, np.random.default_rng(0), max_attempts=500)
    assert cs.genotypes == [canonicalize(g)] and cs.shortfall and cs.attempts == 500


def test_top_candidates_cover_small_space():
    space = SpaceConfig(1, (K.MAX_POOL_3X3, K.SKIP_CONNECT), "canonical")
    n = count_candidates(space)
    cs = sample_top_candidates(init_alpha(space), n, np.random.default_rng(0), max_attempts=10_000)
    assert not cs.shortfall
    assert set(cs.genotypes) == set(enumerate_space(space))
    assert len(cs.genotypes) == len(set(cs.genotypes))


def test_argmax_uniform_is_lowest_index(tiny_space):
    g = argmax_genotype(init_alpha(tiny_space))
    low = tiny_space.op_set[0]
    for n in g.normal + g.reduction:
        assert (n.in1, n.in2, n.op1, n.op2) == (0, 0, low, low)


def test_argmax_matches_empirical_mode(tiny_space):
    alpha = init_alpha(tiny_space)
    rng = np.random.default_rng(5)
    for t in alpha.params.values():
        t.data[:] = rng.standard_normal(t.shape) * 2.5
    counts = Counter(sample_architecture(alpha, rng) for _ in range(20_000))
    assert counts.most_common(1)[0][0] == argmax_genotype(alpha)


def test_argmax_maximizes_probability_product():
    space = SpaceConfig(1, (K.MAX_POOL_3X3, K.SKIP_CONNECT))
    alpha = init_alpha(space)
    rng = np.random.default_rng(8)
    for t in alpha.params.values():
        t.data[:] = rng.standard_normal(t.shape)
    dist = arch_probabilities(alpha)

    def prob(kind, node):
        f, g, h = dist.vectors(kind, 0)
        a, b = space.position(node.op1) + 1, space.position(node.op2) + 1
        return f[node.in1] * g[node.in2] * h[encode_function_pair(a, b) - 1]

    best = None
    for cells in itertools.product(itertools.product(range(2), range(2), [1, 2], [1, 2]), repeat=2):
        nodes = []
        for t, u, r1, r2 in cells:
            if r2 > r1:
                break
            nodes.append(NodeSpec(t, u, space.op_set[r1 - 1], space.op_set[r2 - 1]))
        else:
            g = Genotype((nodes[0],), (nodes[1],))
            p = prob("normal", g.normal[0]) * prob("reduction", g.reduction[0])
            if best is None or p > best[0]:
                best = (p, canonicalize(g))
    assert argmax_genotype(alpha) == best[1]
