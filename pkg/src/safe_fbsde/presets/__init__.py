"""Task presets and run configuration.

Each shipped task is a JSON file under `presets/` giving the system
parameters, barrier definitions, cost weights and training
hyperparameters; `RunConfig` round-trips those files losslessly and
`build_preset` turns one into the live objects a run needs. Every field
can be overridden from the command line or a user config file.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..barrier import (
    car_obstacle_barrier,
    car_pair_barrier,
    cartpole_angle_barrier,
    cartpole_position_barrier,
    pendulum_box_barrier,
)
from ..dynamics import make_car2d, make_cartpole, make_pendulum
from ..trainer import TaskPreset, TrainConfig, make_quadratic_cost

TASKS = (
    "pendulum-balance",
    "cartpole-swingup",
    "cartpole-balance-1c",
    "cartpole-balance-2c",
    "car-obstacles",
    "car-multi",
)

_BARRIER_BUILDERS = {
    "pendulum_box": pendulum_box_barrier,
    "cartpole_position": cartpole_position_barrier,
    "cartpole_angle": cartpole_angle_barrier,
    "car_obstacle": car_obstacle_barrier,
    "car_pair": car_pair_barrier,
}


@dataclass
class RunConfig:
    """Complete, serializable description of one run."""

    task: str
    seed: int
    output_dir: str
    system: dict
    barriers: list
    cost: dict
    x0: list
    train: dict

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        required = {"task", "seed", "output_dir", "system", "barriers", "cost", "x0", "train"}
        missing = required - data.keys()
        if missing:
            raise ValueError(f"run config missing fields: {sorted(missing)}")
        return RunConfig(**{k: data[k] for k in required})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"config {path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
        return RunConfig.from_dict(data)


def load_task_config(task: str) -> RunConfig:
    """Load one of the shipped task presets by name."""
    if task not in TASKS:
        raise ValueError(f"unknown task '{task}'; available: {', '.join(TASKS)}")
    text = resources.files("safe_fbsde.presets").joinpath(f"{task}.json").read_text()
    return RunConfig.from_dict(json.loads(text))


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """Apply CLI-style overrides (seed, iterations, batch, output_dir)."""
    data = config.to_dict()
    if overrides.get("seed") is not None:
        data["seed"] = int(overrides["seed"])
    if overrides.get("output_dir") is not None:
        data["output_dir"] = str(overrides["output_dir"])
    if overrides.get("iterations") is not None:
        data["train"]["iterations"] = int(overrides["iterations"])
    if overrides.get("batch") is not None:
        data["train"]["batch_size"] = int(overrides["batch"])
    return RunConfig.from_dict(data)


def build_system(system_cfg: dict):
    kind = system_cfg.get("kind")
    params = dict(system_cfg.get("params", {}))
    if kind == "pendulum":
        return make_pendulum(params)
    if kind == "cartpole":
        return make_cartpole(params)
    if kind == "car2d":
        return make_car2d(int(system_cfg.get("num_cars", 1)), params)
    raise ValueError(f"unknown system kind '{kind}'")


def build_barriers(barrier_cfgs: list) -> list:
    out = []
    for cfg in barrier_cfgs:
        cfg = dict(cfg)
        kind = cfg.pop("kind")
        builder = _BARRIER_BUILDERS.get(kind)
        if builder is None:
            raise ValueError(f"unknown barrier kind '{kind}'")
        out.append(builder(**cfg))
    return out


def build_preset(config: RunConfig) -> TaskPreset:
    system = build_system(config.system)
    barriers = build_barriers(config.barriers)
    cost = make_quadratic_cost(
        q_diag=config.cost["q_diag"],
        phi_diag=config.cost["phi_diag"],
        r=float(config.cost["r"]),
        x_goal=config.cost["x_goal"],
        n_u=system.n_u,
        wrap_mask=config.cost.get("wrap_mask"),
    )
    train_cfg = TrainConfig(seed=config.seed, **config.train)
    return TaskPreset(
        name=config.task,
        system=system,
        barriers=barriers,
        cost=cost,
        x0=np.asarray(config.x0, dtype=np.float64),
        config=train_cfg,
    )
