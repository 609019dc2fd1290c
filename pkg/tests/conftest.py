import numpy as np
import pytest

from lowbit import Precision, parse_net, plan_mixed_precision, quantize_graph
from lowbit.cli import seeded_input

TOY_NET = """\
# three convs and a classifier
input 1 3 8 8
weights seed=3
conv2d c1 out=8 kernel=3 pad=1
relu r1
conv2d c2 out=8 kernel=3 pad=1
relu r2
conv2d c3 out=8 kernel=3 stride=2 pad=1
relu r3
dense fc out=10
"""


def quantize_toy(text=TOY_NET, bits="2A/2W", keep=0.0, seed=0):
    g, blobs = parse_net(text)
    calib = seeded_input(g.input_shape, seed)
    plan = plan_mixed_precision(g, blobs, calib, keep, Precision.parse(bits))
    return quantize_graph(g, blobs, plan, calib)


@pytest.fixture
def toy_fp32():
    return parse_net(TOY_NET)


@pytest.fixture(scope="session")
def toy_2a2w():
    return quantize_toy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
