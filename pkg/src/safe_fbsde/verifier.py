"""Monte Carlo check of the safe-set invariance guarantee.

The continuous-time theory says a controller satisfying the barrier
inequality keeps trajectories in the safe set with probability 1, i.e.
the expected number of rollouts whose running minimum of h drops below
-epsilon is zero. This module samples that event count empirically at the
integration resolution; zero observed violations at step resolution does
not certify continuous-time paths, and every report says so.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import network as net
from .barrier import BarrierSpec
from .dynamics import SystemModel, euler_maruyama_step, sample_noise
from .exceptions import UnsafeStart
from .qp_layer import solve_qp_batch
from .trainer import _barrier_rows

DISCRETIZATION_NOTE = (
    "zero violations at step resolution does not certify continuous-time paths"
)


@dataclass
class SafetyReport:
    num_rollouts: int
    epsilon: float
    horizon_steps: int
    dt: float
    violation_count: int
    empirical_probability: float  # nan when num_rollouts == 0
    min_h_overall: float
    worst_trajectory_index: int
    per_barrier_min_h: dict
    theorem_context: str
    note: str = DISCRETIZATION_NOTE
    trajectories: np.ndarray | None = field(default=None, repr=False)
    barrier_values: np.ndarray | None = field(default=None, repr=False)  # (M, N+1, n_b)

    @property
    def probability_defined(self) -> bool:
        return self.num_rollouts > 0

    def to_dict(self) -> dict:
        return {
            "num_rollouts": self.num_rollouts,
            "epsilon": self.epsilon,
            "horizon_steps": self.horizon_steps,
            "dt": self.dt,
            "violation_count": self.violation_count,
            "empirical_probability": None
            if not self.probability_defined
            else self.empirical_probability,
            "min_h_overall": None if self.min_h_overall == np.inf else self.min_h_overall,
            "worst_trajectory_index": self.worst_trajectory_index,
            "per_barrier_min_h": self.per_barrier_min_h,
            "theorem_context": self.theorem_context,
            "note": self.note,
        }


def qp_filtered_controller(
    system: SystemModel,
    barriers: Sequence[BarrierSpec],
    r_cost: float = 1.0,
    vx_fn: Callable | None = None,
) -> Callable:
    """Controller that minimum-norm-filters a nominal pull through the safety QP.

    `vx_fn(x_batch) -> (M, n_x)` supplies the value-gradient estimate; the
    default (None) is the zero-nominal controller, whose unconstrained
    optimum is u = 0.
    """

    def controller(x: np.ndarray, t: int) -> np.ndarray:
        v_x = np.zeros((x.shape[0], system.n_x)) if vx_fn is None else vx_fn(x)
        return _filter_once(system, barriers, r_cost, x, v_x)

    return controller


def unfiltered_controller(system: SystemModel, r_cost: float, vx_fn: Callable) -> Callable:
    """Raw Hamiltonian minimizer u = -R^{-1} G(x)' V_x with no safety layer."""
    r_mat = r_cost * np.eye(system.n_u)

    def controller(x: np.ndarray, t: int) -> np.ndarray:
        q = system.actuation_pullback(x, vx_fn(x))
        return -np.linalg.solve(r_mat, q.T).T

    return controller


def network_controller(
    params: net.NetworkParams,
    system: SystemModel,
    barriers: Sequence[BarrierSpec],
    r_cost: float = 1.0,
) -> Callable:
    """QP-filtered controller driven by a trained value-gradient network.

    Stateful: the recurrent state resets whenever called with t == 0.
    """
    state = {"rec": None}

    def controller(x: np.ndarray, t: int) -> np.ndarray:
        if t == 0 or state["rec"] is None:
            state["rec"] = net.initial_state(params, x.shape[0])
        v_x, state["rec"] = net.predict_vx(params, x, state["rec"])
        return _filter_once(system, barriers, r_cost, x, v_x)

    return controller


def _filter_once(system, barriers, r_cost, x, v_x):
    m = x.shape[0]
    r_mat = r_cost * np.eye(system.n_u)
    q = system.actuation_pullback(x, v_x)
    rows_c, rows_d = _barrier_rows(system, barriers, x, system.drift(x))
    if rows_c:
        c_mats = np.stack(rows_c, axis=1)
        d_vecs = np.stack(rows_d, axis=1)
    else:
        c_mats = np.zeros((m, 0, system.n_u))
        d_vecs = np.zeros((m, 0))
    u, _, _, _, _ = solve_qp_batch(
        np.broadcast_to(r_mat, (m,) + r_mat.shape), q, c_mats, d_vecs
    )
    return u


def monte_carlo_safety(
    controller: Callable,
    system: SystemModel,
    barriers: Sequence[BarrierSpec],
    x0: np.ndarray,
    horizon: int,
    dt: float,
    num_rollouts: int,
    epsilon: float,
    stream: np.random.Generator,
) -> SafetyReport:
    """Count rollouts whose running minimum of h drops strictly below -epsilon.

    `controller(x_batch, t)` produces the control for every rollout at step
    t; all rollouts advance together on independent noise from `stream`.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    x0 = np.asarray(x0, dtype=np.float64)
    theorem_context = (
        "continuous-time guarantee: barrier-inequality controllers keep "
        "P(inf h <= -eps) = 0 for every eps > 0 (invariance with probability 1)"
    )
    if num_rollouts == 0:
        return SafetyReport(
            num_rollouts=0,
            epsilon=epsilon,
            horizon_steps=horizon,
            dt=dt,
            violation_count=0,
            empirical_probability=float("nan"),
            min_h_overall=np.inf,
            worst_trajectory_index=-1,
            per_barrier_min_h={bar.name: None for bar in barriers},
            theorem_context=theorem_context,
        )
    h0 = np.array([float(bar.eval(x0)) for bar in barriers])
    if barriers and (h0 <= 0).any():
        bad = int(np.argmin(h0))
        raise UnsafeStart(
            f"verification must start strictly inside the safe set; "
            f"barrier '{barriers[bad].name}' has h = {h0[bad]:.6f}"
        )

    m = num_rollouts
    x = np.tile(x0, (m, 1))
    n_b = max(len(barriers), 1)
    trajectories = np.empty((m, horizon + 1, system.n_x))
    h_vals = np.empty((m, horizon + 1, n_b))
    trajectories[:, 0] = x
    for k, bar in enumerate(barriers):
        h_vals[:, 0, k] = bar.eval(x)
    if not barriers:
        h_vals[:, :, 0] = np.inf

    for t in range(horizon):
        u = controller(x, t)
        dw = sample_noise(stream, system.n_w, dt, size=m)
        x = euler_maruyama_step(system, x, u, dt, dw)
        trajectories[:, t + 1] = x
        for k, bar in enumerate(barriers):
            h_vals[:, t + 1, k] = bar.eval(x)

    per_traj_min = h_vals.min(axis=(1, 2))
    violations = int((per_traj_min < -epsilon).sum())
    worst = int(np.argmin(per_traj_min))
    return SafetyReport(
        num_rollouts=m,
        epsilon=epsilon,
        horizon_steps=horizon,
        dt=dt,
        violation_count=violations,
        empirical_probability=violations / m,
        min_h_overall=float(per_traj_min.min()),
        worst_trajectory_index=worst,
        per_barrier_min_h={
            bar.name: float(h_vals[:, :, k].min()) for k, bar in enumerate(barriers)
        },
        theorem_context=theorem_context,
        trajectories=trajectories,
        barrier_values=h_vals,
    )


def worst_case_extract(trajectories, barrier: BarrierSpec):
    """Trajectory whose running minimum of the barrier value is smallest.

    `trajectories` is (M, T, n_x) or a list of (T, n_x) arrays; returns
    (trajectory, min_h).
    """
    trajs = [np.asarray(t, dtype=np.float64) for t in trajectories]
    if len(trajs) == 0:
        raise ValueError("need at least one trajectory")
    mins = [float(np.min(barrier.eval(t))) for t in trajs]
    idx = int(np.argmin(mins))
    return trajs[idx], mins[idx]
