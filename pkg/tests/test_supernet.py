import copy

import numpy as np
import pytest
from scipy.stats import binom, chisquare

from oneshot_nas.data import Batch, SyntheticSpec, generate_synthetic_dataset
from oneshot_nas.ndgraph import functional as F
from oneshot_nas.ndgraph.gradcheck import grad_check
from oneshot_nas.ndgraph.optim import sgd_state
from oneshot_nas.ndgraph.primitives import ENLARGED_OPS, STANDARD_OPS, OpKind
from oneshot_nas.ndgraph.tensor import Tensor, backward
from oneshot_nas.space import Genotype, MacroConfig, NodeSpec, SpaceConfig, canonicalize, uniform_genotype
from oneshot_nas.supernet import (
    DropPathConfig,
    NO_DROP,
    NonFiniteLoss,
    StandaloneNetwork,
    evaluate_candidate,
    extract_weights,
    forward_sampled,
    init_supernet,
    sample_paths,
    train_step_omega,
)

from conftest import TINY_OPS

K = OpKind


def used_param_names(net, paths):
    """Names of the op parameters a path sample touches."""
    names = set()
    for cell, nodes in zip(net.layout.cells, paths):
        for i, n in enumerate(nodes):
            for inp, op in ((n.in1, n.op1), (n.in2, n.op2)):
                prefix = f"cells.{cell.index}.n{i}.in{inp}.{op.label}."
                names.update(k for k in net.params if k.startswith(prefix))
    return names


def op_param_names(net):
    return {k for k in net.params if ".n" in k and ".in" in k.split(".n", 1)[1]}


def test_init_deterministic(tiny_space, tiny_macro):
    a = init_supernet(tiny_space, tiny_macro, seed=3)
    b = init_supernet(tiny_space, tiny_macro, seed=3)
    assert a.params.keys() == b.params.keys()
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_template_param_count_by_hand():
    # B=1, N=1, C=4, ops {max_pool, skip, sep3}, no affine terms; tally derived cell by cell
    stem = 12 * 3 * 9
    cell0 = 48 + 48 + 2 * 104
    cell1 = 96 + 32 + 2 * (272 + 64)
    cell2 = 32 + 64 + 2 * 272
    cell3 = 128 + 128 + 2 * (800 + 256)
    cell4 = 128 + 256 + 2 * 800
    head = 10 * 16 + 10
    net = init_supernet(SpaceConfig(1, TINY_OPS), MacroConfig(N=1, C=4, num_classes=10, input_size=16))
    assert net.param_count() == stem + cell0 + cell1 + cell2 + cell3 + cell4 + head == 6590


def test_standalone_param_count_by_hand():
    g = Genotype((NodeSpec(1, 0, K.SEP_CONV_3X3, K.SKIP_CONNECT), NodeSpec(0, 2, K.SEP_CONV_3X3, K.MAX_POOL_3X3)),
                 (NodeSpec(1, 0, K.SKIP_CONNECT, K.MAX_POOL_3X3), NodeSpec(2, 0, K.SEP_CONV_3X3, K.SKIP_CONNECT)))
    stem = 324 + 24
    cell0 = 56 + 56 + 120 + 120
    cell1 = 112 + 80 + 80 + 304 + 80
    cell2 = 80 + 144 + 304 + 304
    cell3 = 288 + 288 + 288 + 864 + 288
    cell4 = 288 + 544 + 864 + 864
    head = 330
    net = StandaloneNetwork(g, MacroConfig(N=1, C=4, num_classes=10, input_size=16), affine=True)
    assert net.param_count() == stem + cell0 + cell1 + cell2 + cell3 + cell4 + head == 7094


def test_parameter_growth_is_additive_in_ops():
    macro = MacroConfig(N=1, C=4, num_classes=10, input_size=8)

    def count(ops):
        return init_supernet(SpaceConfig(2, ops), macro).param_count()

    base = count((K.MAX_POOL_3X3,))
    cost = {o: count((K.MAX_POOL_3X3, o)) - base for o in ENLARGED_OPS if o != K.MAX_POOL_3X3}
    for ops in (TINY_OPS, STANDARD_OPS, ENLARGED_OPS):
        assert count(ops) == base + sum(cost[o] for o in ops if o != K.MAX_POOL_3X3)
    assert count(ENLARGED_OPS) / count(STANDARD_OPS) < 8 / 6 + 0.1


def test_shared_paths_identical_across_instances(tiny_space):
    macro = MacroConfig(N=2, C=4, num_classes=3, input_size=8)
    rng = np.random.default_rng(0)
    for _ in range(20):
        paths = sample_paths(tiny_space, macro, rng, share_across_cells=True)
        normals = [p for p, c in zip(paths, init_supernet(tiny_space, macro).layout.cells) if c.cell_type == "normal"]
        assert all(n == normals[0] for n in normals)


def test_unshared_paths_differ_somewhere(tiny_space, tiny_macro):
    rng = np.random.default_rng(0)
    assert any(len(set(sample_paths(tiny_space, tiny_macro, rng))) > 2 for _ in range(100))


def test_sample_paths_reproducible(tiny_space, tiny_macro):
    a = sample_paths(tiny_space, tiny_macro, np.random.default_rng(9))
    b = sample_paths(tiny_space, tiny_macro, np.random.default_rng(9))
    assert a == b


def test_sampled_op_pairs_uniform(tiny_space, tiny_macro):
    rng = np.random.default_rng(5)
    counts = {}
    for _ in range(20_000):
        for nodes in sample_paths(tiny_space, tiny_macro, rng):
            for i, n in enumerate(nodes):
                counts[(i, n.op1, n.op2)] = counts.get((i, n.op1, n.op2), 0) + 1
    for i in range(tiny_space.B):
        freq = [v for (node, _, _), v in counts.items() if node == i]
        assert len(freq) == 6
        assert chisquare(freq).pvalue > 0.01


def test_sampled_forward_equals_extracted(tiny_space, tiny_macro, tiny_data):
    net = init_supernet(tiny_space, tiny_macro, seed=1)
    rng = np.random.default_rng(2)
    for _ in range(5):
        g = uniform_genotype(tiny_space, rng)
        a = forward_sampled(net, net.replicate(g), tiny_data.images[:16], DropPathConfig(0.0), training=True, rng=rng)
        b = extract_weights(net, g).forward(tiny_data.images[:16])
        assert np.max(np.abs(a.data - b.data)) < 1e-9


def test_both_branches_dropped_gives_zero_node(tiny_space, tiny_macro, tiny_data):
    net = init_supernet(tiny_space, tiny_macro, seed=1)
    paths = sample_paths(tiny_space, tiny_macro, np.random.default_rng(0))
    cell = net.layout.cells[0]
    x = Tensor(np.random.default_rng(1).standard_normal((4, cell.c_cell, 8, 8)))
    from oneshot_nas.supernet import _drop_path

    class AlwaysDrop:
        def random(self, n):
            return np.zeros(n)

    node = paths[0][0]
    a = _drop_path(net._branch(cell, 0, node.in1, node.op1, x), 0.5, AlwaysDrop())
    b = _drop_path(net._branch(cell, 0, node.in2, node.op2, x), 0.5, AlwaysDrop())
    assert np.array_equal(F.add(a, b).data, np.zeros_like(a.data))


def test_drop_path_inverted_scaling():
    from oneshot_nas.supernet import _drop_path

    x = Tensor(np.ones((10_000, 1, 1, 1)))
    y = _drop_path(x, 0.1, np.random.default_rng(0)).data.ravel()
    assert set(np.unique(y)) <= {0.0, 1 / 0.9}
    assert abs(y.mean() - 1.0) < 0.02


def test_gradients_only_on_sampled_subgraph(tiny_space, tiny_macro, tiny_data):
    net = init_supernet(tiny_space, tiny_macro, seed=1)
    paths = sample_paths(tiny_space, tiny_macro, np.random.default_rng(4))
    loss = F.cross_entropy(forward_sampled(net, paths, tiny_data.images[:12]), tiny_data.labels[:12])
    grads = backward(loss, net.params)
    used = used_param_names(net, paths)
    for k in op_param_names(net):
        nonzero = grads[k] is not None and np.any(grads[k] != 0)
        assert nonzero == (k in used), k
    assert grads["stem.w"] is not None and grads["head.w"] is not None
    for cell, nodes in zip(net.layout.cells, paths):
        inputs = {n.in1 for n in nodes} | {n.in2 for n in nodes}
        for side in (0, 1):
            pre = [k for k in net.params if k.startswith(f"cells.{cell.index}.pre{side}.")]
            assert all((grads[k] is not None) == (side in inputs) for k in pre)


def train_batch(data, n=16):
    return Batch(data.images[:n], data.labels[:n], "train")


def test_train_step_deterministic(tiny_space, tiny_macro, tiny_data):
    nets = []
    for _ in range(2):
        net = init_supernet(tiny_space, tiny_macro, seed=0)
        opt, rng = sgd_state(), np.random.default_rng(1)
        for _ in range(2):
            train_step_omega(net, train_batch(tiny_data), opt, rng)
        nets.append(net)
    a, b = nets
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_unsampled_params_change_only_by_decay(tiny_space, tiny_macro, tiny_data):
    net = init_supernet(tiny_space, tiny_macro, seed=0)
    before = {k: t.data.copy() for k, t in net.params.items()}
    rng = np.random.default_rng(8)
    paths = sample_paths(tiny_space, tiny_macro, copy.deepcopy(rng))
    opt = sgd_state(0.05, 0.9, 3e-4)
    train_step_omega(net, train_batch(tiny_data), opt, rng, lr=0.05)
    used = used_param_names(net, paths)
    changed = 0
    for k in op_param_names(net):
        if k in used:
            changed += not np.allclose(net.params[k].data, before[k] * (1 - 0.05 * 3e-4))
        else:
            assert np.allclose(net.params[k].data, before[k] * (1 - 0.05 * 3e-4), rtol=1e-14, atol=0)
    assert changed > 0


def test_train_step_rejects_val_batch(tiny_space, tiny_macro, tiny_data):
    net = init_supernet(tiny_space, tiny_macro)
    with pytest.raises(ValueError, match="train"):
        train_step_omega(net, Batch(tiny_data.images[:4], tiny_data.labels[:4], "val"), sgd_state(),
                         np.random.default_rng(0))


def test_non_finite_loss_is_reported(tiny_space, tiny_macro, tiny_data):
    net = init_supernet(tiny_space, tiny_macro)
    net.params["head.b"].data[:] = np.inf
    with pytest.raises(NonFiniteLoss):
        train_step_omega(net, train_batch(tiny_data), sgd_state(), np.random.default_rng(0))


def test_training_reduces_loss_on_separable_data(tiny_space):
    data = generate_synthetic_dataset(SyntheticSpec(image_size=8, num_classes=2, samples_per_class=32, noise=0.1), 0)
    macro = MacroConfig(N=1, C=4, num_classes=2, input_size=8)
    net = init_supernet(tiny_space, macro, seed=0)
    opt, rng = sgd_state(0.05), np.random.default_rng(0)
    batch = Batch(data.images, data.labels, "train")
    losses = [train_step_omega(net, batch, opt, rng, dropout=DropPathConfig(0.0)) for _ in range(50)]
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:5])


def test_evaluate_candidate_pure_and_canonical(tiny_space, tiny_macro, tiny_data):
    net = init_supernet(tiny_space, tiny_macro, seed=0)
    before = {k: t.data.copy() for k, t in net.params.items()}
    g = Genotype((NodeSpec(0, 1, K.SKIP_CONNECT, K.SEP_CONV_3X3), NodeSpec(2, 2, K.MAX_POOL_3X3, K.MAX_POOL_3X3)),
                 (NodeSpec(0, 1, K.MAX_POOL_3X3, K.SKIP_CONNECT), NodeSpec(0, 2, K.SKIP_CONNECT, K.SEP_CONV_3X3)))
    r1 = evaluate_candidate(net, g, tiny_data)
    r2 = evaluate_candidate(net, g, tiny_data)
    r3 = evaluate_candidate(net, canonicalize(g), tiny_data)
    assert r1 == r2 == r3
    assert all(np.array_equal(net.params[k].data, before[k]) for k in before)


def test_canonical_forward_equivalence(tiny_space, tiny_macro, tiny_data):
    net = init_supernet(tiny_space, tiny_macro, seed=4)
    rng = np.random.default_rng(4)
    for _ in range(5):
        nodes = [tuple(NodeSpec(*rng.integers(0, i + 2, 2), *rng.choice(TINY_OPS, 2)) for i in range(2))
                 for _ in range(2)]
        g = Genotype(*nodes)
        a = forward_sampled(net, net.replicate(g), tiny_data.images[:8]).data
        b = forward_sampled(net, net.replicate(canonicalize(g)), tiny_data.images[:8]).data
        assert np.max(np.abs(a - b)) < 1e-9


def test_untrained_accuracy_near_chance(tiny_space):
    data = generate_synthetic_dataset(SyntheticSpec(image_size=8, num_classes=4, samples_per_class=60), 3)
    net = init_supernet(tiny_space, MacroConfig(N=1, C=4, num_classes=4, input_size=8), seed=0)
    n = len(data)
    lo, hi = binom.ppf(0.0015, n, 0.25) / n, binom.ppf(0.9985, n, 0.25) / n
    accs = [evaluate_candidate(net, uniform_genotype(tiny_space, np.random.default_rng(s)), data)[1] for s in range(3)]
    assert lo - 0.05 <= np.mean(accs) <= hi + 0.05


def test_evaluate_candidate_empty_set(tiny_space, tiny_macro, tiny_data):
    net = init_supernet(tiny_space, tiny_macro)
    with pytest.raises(ValueError):
        evaluate_candidate(net, uniform_genotype(tiny_space, np.random.default_rng(0)), tiny_data.subset([]))


def test_extracted_copy_is_isolated_and_smaller(tiny_space, tiny_macro, tiny_data):
    net = init_supernet(tiny_space, tiny_macro, seed=0)
    g = uniform_genotype(tiny_space, np.random.default_rng(1))
    sub = extract_weights(net, g)
    assert sub.param_count() < net.param_count()
    before = {k: t.data.copy() for k, t in net.params.items()}
    for t in sub.params.values():
        t.data += 1.0
    assert all(np.array_equal(net.params[k].data, before[k]) for k in before)


def test_sampled_cell_gradients_match_finite_differences(tiny_data):
    space = SpaceConfig(2, (K.MAX_POOL_3X3, K.SEP_CONV_3X3))
    macro = MacroConfig(N=1, C=2, num_classes=3, input_size=6)
    net = init_supernet(space, macro, seed=0)
    paths = sample_paths(space, macro, np.random.default_rng(3))
    x = np.random.default_rng(0).standard_normal((3, 3, 6, 6))
    y = np.array([0, 1, 2])
    names = sorted(used_param_names(net, paths))[:4] + ["cells.0.pre1.w", "head.w"]
    inputs = {k: net.params[k] for k in names}
    for k, t in net.params.items():
        t.requires_grad = k in inputs
    assert grad_check(lambda t: F.cross_entropy(forward_sampled(net, paths, x), y), inputs) < 1e-4
