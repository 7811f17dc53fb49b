import numpy as np
import pytest
from hypothesis import settings

from hrgn.cell import GraphArrays, ModelConfig, init_params
from hrgn.graph import Edge, build_adjacency

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def tiny_edges():
    # s0 -> s1 -> s3, s2 -> s3; reservoir r0 sits between s0 and s1
    return [
        Edge("s0", "s1", "ss", 4000.0),
        Edge("s1", "s3", "ss", 9000.0),
        Edge("s2", "s3", "ss", 2500.0),
        Edge("s0", "r0", "sr", 1500.0),
        Edge("r0", "s1", "rs", 1200.0),
    ]


@pytest.fixture
def tiny_graph():
    return build_adjacency(tiny_edges(), segments=["s0", "s1", "s2", "s3"], reservoirs=["r0"])


@pytest.fixture
def tiny_arrays(tiny_graph):
    return GraphArrays.from_graph(tiny_graph)


@pytest.fixture
def small_config():
    return ModelConfig(hidden=6, n_drivers=3, release_dim=4, meta_dim=2, filter_width=5,
                       coupling_layers=2, coupling_width=5)


@pytest.fixture
def small_params(small_config):
    return init_params(small_config, seed=11)


@pytest.fixture
def small_inputs(small_config):
    rng = np.random.default_rng(5)
    T, n, m = 7, 4, 1
    return (rng.normal(size=(T, n, small_config.n_drivers)),
            rng.normal(size=(T, m, small_config.release_dim)),
            rng.normal(size=(m, small_config.meta_dim)))
