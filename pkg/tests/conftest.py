import numpy as np
import pytest

from safe_fbsde.barrier import pendulum_box_barrier
from safe_fbsde.dynamics import make_pendulum
from safe_fbsde.trainer import TaskPreset, TrainConfig, make_quadratic_cost

PI = np.pi


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def pendulum_cost():
    return make_quadratic_cost([2.5, 0.05], [10.0, 0.5], 0.5, [PI, 0.0], 1)


@pytest.fixture
def tiny_pendulum_preset(pendulum_cost):
    """Small-horizon pendulum task for fast trainer tests."""
    system = make_pendulum()
    barrier = pendulum_box_barrier(2 * PI / 3, 4 * PI / 3, 0.05, 0.5)
    config = TrainConfig(batch_size=8, iterations=3, horizon_steps=12, dt=0.02, seed=11)
    return TaskPreset(
        name="pendulum-tiny",
        system=system,
        barriers=[barrier],
        cost=pendulum_cost,
        x0=np.array([PI, 0.0]),
        config=config,
    )
