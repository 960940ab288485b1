import numpy as np
import pytest
from hypothesis import settings

from oneshot_nas.data import SyntheticSpec, generate_synthetic_dataset
from oneshot_nas.ndgraph.primitives import OpKind
from oneshot_nas.space import MacroConfig, SpaceConfig

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

TINY_OPS = (OpKind.MAX_POOL_3X3, OpKind.SKIP_CONNECT, OpKind.SEP_CONV_3X3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_space():
    return SpaceConfig(B=2, op_set=TINY_OPS)


@pytest.fixture
def tiny_macro():
    return MacroConfig(N=1, C=4, num_classes=3, input_size=8)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic_dataset(SyntheticSpec(image_size=8, num_classes=3, samples_per_class=20, noise=0.3), 0)


def build_rigged(seed=0):
    """Template network where sep convs output zeros and skip carries the signal.

    The template is trained on all-skip paths so only skip-containing choices
    help; returns (omega, data).
    """
    from oneshot_nas.data import Batch
    from oneshot_nas.ndgraph import functional as F
    from oneshot_nas.ndgraph.optim import sgd_state, sgd_step
    from oneshot_nas.ndgraph.tensor import backward, zero_grad
    from oneshot_nas.space import Genotype, NodeSpec
    from oneshot_nas.supernet import init_supernet

    space = SpaceConfig(2, (OpKind.SKIP_CONNECT, OpKind.SEP_CONV_3X3, OpKind.SEP_CONV_5X5))
    macro = MacroConfig(N=1, C=4, num_classes=3, input_size=8)
    data = generate_synthetic_dataset(SyntheticSpec(image_size=8, num_classes=3, samples_per_class=40, noise=0.2), seed)
    net = init_supernet(space, macro, seed=seed)
    frozen = [k for k in net.params if "sep_conv" in k]
    for k in frozen:
        if ".pw2" in k:
            net.params[k].data[:] = 0.0
    skip = OpKind.SKIP_CONNECT
    g = Genotype((NodeSpec(1, 0, skip, skip), NodeSpec(2, 1, skip, skip)),
                 (NodeSpec(1, 0, skip, skip), NodeSpec(2, 1, skip, skip)))
    paths = net.replicate(g)
    trainable = {k: t for k, t in net.params.items() if k not in frozen}
    opt = sgd_state(0.05, 0.9, 0.0)
    for step in range(60):
        idx = np.arange(step * 16, step * 16 + 16) % len(data)
        zero_grad(net.params)
        loss = F.cross_entropy(net.forward_paths(data.images[idx], paths), data.labels[idx])
        sgd_step(trainable, backward(loss, trainable), opt)
    return net, data


@pytest.fixture(scope="session")
def rigged():
    return build_rigged()


ACCEPTANCE = {}


def record(criterion, ok, detail):
    ACCEPTANCE[criterion] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"criterion {name}: {'PASS' if ok else 'FAIL'}  {detail}")
