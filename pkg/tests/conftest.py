import numpy as np
import pytest

from trd.envs import MdpSpec, make_feature_split_env, make_gridworld_two_paths, make_periodic_chain

GAMMA = 0.95


@pytest.fixture
def grid():
    return make_gridworld_two_paths()


@pytest.fixture
def chain():
    return make_periodic_chain(period=3, slip_prob=0.0)


@pytest.fixture
def slip_chain():
    return make_periodic_chain(period=3, slip_prob=0.2)


@pytest.fixture
def split():
    return make_feature_split_env()


def random_spec(seed: int, num_states: int = 5, num_actions: int = 2) -> MdpSpec:
    """Small stochastic episodic MDP with one absorbing terminal state."""
    rng = np.random.default_rng(seed)
    S = num_states + 1
    P = rng.dirichlet(np.ones(S), size=(S, num_actions))
    P[:, :, -1] += 0.2  # guarantees eventual termination
    P /= P.sum(axis=2, keepdims=True)
    P[-1] = 0.0
    P[-1, :, -1] = 1.0
    R = rng.normal(size=(S, num_actions))
    R[-1] = 0.0
    term = np.zeros(S, dtype=bool)
    term[-1] = True
    init = np.zeros(S)
    init[0] = 1.0
    return MdpSpec(f"random{seed}", P, R, term, init)


def all_specs():
    specs = [make_gridworld_two_paths(), make_periodic_chain(), make_periodic_chain(slip_prob=0.2),
             make_periodic_chain(period=4, slip_prob=0.5, num_cycles=2), make_feature_split_env(delay=3)]
    specs += [random_spec(s) for s in range(3)]
    return specs
