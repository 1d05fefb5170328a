"""Training loop: batched safe rollouts, terminal targets, loss, Adam.

One iteration rolls the batch forward through network prediction, the
safety QP and the dynamics (the value estimate is propagated forward with
the SAME Brownian increments as the state), evaluates the terminal-target
loss, backpropagates through the whole horizon including every QP solve,
and applies one Adam update. Every rollout state of every iteration is
recorded, so the no-violation claim is checked against all of them; any
barrier value below zero aborts the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from . import diff_engine as de
from . import network as net
from .barrier import BarrierSpec
from .dynamics import SystemModel, sample_noise
from .exceptions import InfeasibleProblem, SafetyViolation, UnsafeStart
from .qp_layer import DEFAULT_MAX_ITERS, DEFAULT_TOL, QpBatchStats, qp_solve_op


@dataclass
class CostSpec:
    """Quadratic-control cost: running state cost, control weight, terminal cost."""

    running_q: Callable  # x -> (M,), nonnegative
    R: np.ndarray  # (n_u, n_u) SPD
    terminal_phi: Callable  # x -> (M,), nonnegative
    terminal_phi_grad: Callable  # x -> (M, n_x)
    x_goal: np.ndarray


@dataclass
class TrainConfig:
    batch_size: int = 128
    iterations: int = 201
    horizon_steps: int = 75
    dt: float = 0.02
    learning_rate: float = 1e-2
    loss_a: float = 1.0
    loss_b: float = 1.0
    loss_c: float = 0.01
    loss_d: float = 0.01
    weight_decay: float = 1e-5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    qp_tol: float = DEFAULT_TOL
    qp_max_iters: int = DEFAULT_MAX_ITERS

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 1 or self.horizon_steps < 1:
            raise ValueError("batch_size, iterations and horizon_steps must be >= 1")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        for w in (self.loss_a, self.loss_b, self.loss_c, self.loss_d, self.weight_decay):
            if w < 0:
                raise ValueError("loss weights must be nonnegative")


@dataclass
class TaskPreset:
    """Everything task-specific a training run needs."""

    name: str
    system: SystemModel
    barriers: list
    cost: CostSpec
    x0: np.ndarray
    config: TrainConfig


@dataclass
class RolloutLive:
    """Tape handles kept alive for loss construction."""

    v_terminal: Any  # (M,) propagated value at horizon
    vx_terminal: Any  # (M, n_x) network prediction at the terminal state
    x_terminal: Any  # (M, n_x)
    params: Any  # NetworkParams (of Vars when on tape)


@dataclass
class RolloutRecord:
    states: np.ndarray  # (M, N+1, n_x)
    controls: np.ndarray  # (M, N, n_u)
    values: np.ndarray  # (M, N+1)
    value_grads: np.ndarray  # (M, N, n_x)
    terminal_value_grad: np.ndarray  # (M, n_x) prediction at x_N
    noises: np.ndarray  # (M, N, n_w)
    qp_stats: list  # one QpBatchStats per step
    h_values: np.ndarray  # (M, N+1, n_barriers)
    min_h: np.ndarray  # (M, n_barriers)
    live: RolloutLive | None = None


@dataclass
class LossBreakdown:
    value_term: float
    gradient_term: float
    terminal_value_term: float
    terminal_gradient_term: float
    weight_decay_term: float
    total: float
    total_var: Any = None  # tape Var of `total` when recorded


def make_quadratic_cost(
    q_diag, phi_diag, r: float, x_goal, n_u: int, wrap_mask=None
) -> CostSpec:
    """Diagonal quadratic running/terminal costs around a goal state.

    Coordinates with wrap_mask set have their goal error wrapped to
    (-pi, pi] before squaring (angles); wrapping applies only inside the
    cost, never to rollout states.
    """
    q_diag = np.asarray(q_diag, dtype=np.float64)
    phi_diag = np.asarray(phi_diag, dtype=np.float64)
    x_goal = np.asarray(x_goal, dtype=np.float64)
    n_x = x_goal.shape[0]
    if wrap_mask is None:
        wrap_mask = np.zeros(n_x)
    wrap_mask = np.asarray(wrap_mask, dtype=np.float64)

    def error(x):
        e = x - x_goal
        if wrap_mask.any():
            e = de.wrap_angle(e) * wrap_mask + e * (1.0 - wrap_mask)
        return e

    def running_q(x):
        return de.vsum(de.square(error(x)) * q_diag, axis=1)

    def terminal_phi(x):
        return de.vsum(de.square(error(x)) * phi_diag, axis=1)

    def terminal_phi_grad(x):
        return error(x) * (2.0 * phi_diag)

    return CostSpec(
        running_q=running_q,
        R=r * np.eye(n_u),
        terminal_phi=terminal_phi,
        terminal_phi_grad=terminal_phi_grad,
        x_goal=x_goal,
    )


def _barrier_rows(system, barriers, x, drift_x):
    """Stacked (C, d) tape expressions for all barriers at the batch state."""
    rows_c, rows_d = [], []
    for bar in barriers:
        g = bar.grad(x)
        rows_c.append(-system.actuation_pullback(x, g))
        gf = de.vsum(g * drift_x, axis=1)
        rows_d.append(bar.gamma * bar.eval(x) + gf + bar.trace_term(x, system))
    return rows_c, rows_d


def rollout_batch(
    params: net.NetworkParams,
    system: SystemModel,
    barriers: Sequence[BarrierSpec],
    cost: CostSpec,
    config: TrainConfig,
    stream: np.random.Generator,
    x0: np.ndarray,
) -> RolloutRecord:
    """Propagate M trajectories and the value estimate over the horizon.

    Runs on the active tape when `params` holds Vars; with plain arrays it
    is an evaluation-mode rollout with identical numerics. Raises
    UnsafeStart if the initial state is outside the safe set and
    SafetyViolation if any recorded state leaves it.
    """
    m, n = config.batch_size, config.horizon_steps
    x0 = np.asarray(x0, dtype=np.float64)
    h0 = np.array([float(de.value_of(bar.eval(x0))) for bar in barriers])
    if (h0 < 0).any():
        bad = int(np.argmin(h0))
        raise UnsafeStart(
            f"initial state violates barrier '{barriers[bad].name}' (h = {h0[bad]:.6f})"
        )

    sigma_t = system.sigma_matrix().T
    r_mat = np.asarray(cost.R, dtype=np.float64)
    noises = sample_noise(stream, system.n_w, config.dt, size=(m, n))

    states = np.empty((m, n + 1, system.n_x))
    controls = np.empty((m, n, system.n_u))
    values = np.empty((m, n + 1))
    value_grads = np.empty((m, n, system.n_x))
    h_values = np.empty((m, n + 1, max(len(barriers), 1)))
    qp_stats: list[QpBatchStats] = []

    x = np.tile(x0, (m, 1))
    v = de.broadcast_rows(params.psi, m)
    state = net.initial_state(params, m)

    def record_h(t, xv):
        if barriers:
            for k, bar in enumerate(barriers):
                h_values[:, t, k] = de.value_of(bar.eval(xv))
        else:
            h_values[:, t, 0] = np.inf

    states[:, 0] = de.value_of(x)
    values[:, 0] = de.value_of(v)
    record_h(0, x)

    for t in range(n):
        v_x, state = net.predict_vx(params, x, state)
        f_x = system.drift(x)
        rows_c, rows_d = _barrier_rows(system, barriers, x, f_x)
        if barriers:
            c_mats = de.stack(rows_c, axis=1)
            d_vecs = de.stack(rows_d, axis=1)
        else:
            c_mats = np.zeros((m, 0, system.n_u))
            d_vecs = np.zeros((m, 0))
        q_vecs = system.actuation_pullback(x, v_x)
        try:
            u, stats = qp_solve_op(
                r_mat, q_vecs, c_mats, d_vecs, config.qp_tol, config.qp_max_iters
            )
        except InfeasibleProblem as exc:
            raise InfeasibleProblem(
                f"safety QP infeasible at step {t}: {exc} "
                f"(min h this step: {h_values[:, t].min():.6f})"
            ) from exc
        qp_stats.append(stats)

        dw = noises[:, t]
        noise_term = dw @ sigma_t
        stage = cost.running_q(x) + 0.5 * de.vsum((u @ r_mat) * u, axis=1)
        v = v - stage * config.dt + de.vsum(v_x * noise_term, axis=1)
        x = x + f_x * config.dt + system.apply_actuation(x, u) * config.dt + noise_term

        controls[:, t] = de.value_of(u)
        value_grads[:, t] = de.value_of(v_x)
        states[:, t + 1] = de.value_of(x)
        values[:, t + 1] = de.value_of(v)
        record_h(t + 1, x)

    vx_terminal, state = net.predict_vx(params, x, state)

    min_h = h_values.min(axis=1)
    if barriers and min_h.min() < 0.0:
        elem, bar_idx = np.unravel_index(np.argmin(min_h), min_h.shape)
        step = int(np.argmin(h_values[elem, :, bar_idx]))
        raise SafetyViolation(
            f"barrier '{barriers[bar_idx].name}' went negative "
            f"(h = {min_h[elem, bar_idx]:.6e} at element {elem}, step {step}; "
            f"state {states[elem, step]}); Euler-step boundary crossings are "
            "reported rather than clipped"
        )

    return RolloutRecord(
        states=states,
        controls=controls,
        values=values,
        value_grads=value_grads,
        terminal_value_grad=de.value_of(vx_terminal),
        noises=noises,
        qp_stats=qp_stats,
        h_values=h_values,
        min_h=min_h,
        live=RolloutLive(v_terminal=v, vx_terminal=vx_terminal, x_terminal=x, params=params),
    )


_DECAY_LEAVES = tuple(
    f"{ln}.{g}" for ln in ("layer1", "layer2") for g in net._GATES
) + ("head.w", "head.b")


def compute_loss(record: RolloutRecord, cost: CostSpec, config: TrainConfig) -> LossBreakdown:
    """Terminal-target loss over the batch.

    Targets are the true terminal cost and its gradient evaluated at the
    rolled-out terminal state; both target branches stay on the tape, so
    the magnitude terms steer the terminal state toward the goal.
    """
    live = record.live
    if live is None:
        raise ValueError("rollout record carries no live tape handles")
    v_star = cost.terminal_phi(live.x_terminal)
    vx_star = cost.terminal_phi_grad(live.x_terminal)

    t1 = de.vmean(de.square(v_star - live.v_terminal))
    t2 = de.vmean(de.vsum(de.square(vx_star - live.vx_terminal), axis=1))
    t3 = de.vmean(de.square(v_star))
    t4 = de.vmean(de.vsum(de.square(vx_star), axis=1))

    leaves = net.to_dict(live.params)
    t5 = None
    for name in _DECAY_LEAVES:
        contrib = de.vsum(de.square(leaves[name]))
        t5 = contrib if t5 is None else t5 + contrib

    total = (
        config.loss_a * t1
        + config.loss_b * t2
        + config.loss_c * t3
        + config.loss_d * t4
        + config.weight_decay * t5
    )
    return LossBreakdown(
        value_term=float(de.value_of(t1)),
        gradient_term=float(de.value_of(t2)),
        terminal_value_term=float(de.value_of(t3)),
        terminal_gradient_term=float(de.value_of(t4)),
        weight_decay_term=float(de.value_of(t5)),
        total=float(de.value_of(total)),
        total_var=total if isinstance(total, de.Var) else None,
    )


@dataclass
class AdamState:
    m: dict
    v: dict

    @staticmethod
    def zeros_like(params_dict: dict) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params_dict.items()},
            v={k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params_dict.items()},
        )


def adam_step(params_dict: dict, grads: dict, moments: AdamState, t: int, config: TrainConfig):
    """Standard bias-corrected Adam update; returns new (params, moments)."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    out = {}
    for name, p in params_dict.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(np.asarray(p, dtype=np.float64))
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
        moments.m[name] = config.adam_beta1 * moments.m[name] + (1 - config.adam_beta1) * g
        moments.v[name] = config.adam_beta2 * moments.v[name] + (1 - config.adam_beta2) * g * g
        m_hat = moments.m[name] / (1 - config.adam_beta1**t)
        v_hat = moments.v[name] / (1 - config.adam_beta2**t)
        out[name] = np.asarray(p, dtype=np.float64) - config.learning_rate * m_hat / (
            np.sqrt(v_hat) + config.adam_eps
        )
    return out, moments


def _aggregate_stats(qp_stats: list) -> dict:
    if not qp_stats:
        return {"qp_max_iterations": 0, "qp_mean_iterations": 0.0, "qp_max_residual": 0.0}
    return {
        "qp_max_iterations": max(s.max_iterations for s in qp_stats),
        "qp_mean_iterations": float(np.mean([s.mean_iterations for s in qp_stats])),
        "qp_max_residual": max(s.max_residual for s in qp_stats),
    }


@dataclass
class WorstCase:
    """The single training trajectory that came closest to one barrier."""

    barrier: str
    min_h: float
    iteration: int
    element: int
    states: np.ndarray  # (N+1, n_x)
    controls: np.ndarray  # (N, n_u)
    values: np.ndarray  # (N+1,)
    h: np.ndarray  # (N+1,)


@dataclass
class TrainLog:
    """Per-iteration log entries plus worst-case trajectories per barrier."""

    entries: list = field(default_factory=list)
    worst_case: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, idx):
        return self.entries[idx]

    def track_worst(self, record: RolloutRecord, barriers, iteration: int) -> None:
        for i, bar in enumerate(barriers):
            elem = int(np.argmin(record.min_h[:, i]))
            val = float(record.min_h[elem, i])
            incumbent = self.worst_case.get(bar.name)
            if incumbent is None or val < incumbent.min_h:
                self.worst_case[bar.name] = WorstCase(
                    barrier=bar.name,
                    min_h=val,
                    iteration=iteration,
                    element=elem,
                    states=record.states[elem].copy(),
                    controls=record.controls[elem].copy(),
                    values=record.values[elem].copy(),
                    h=record.h_values[elem, :, i].copy(),
                )


def train(
    preset: TaskPreset,
    config: TrainConfig | None = None,
    log_callback: Callable | None = None,
):
    """Run the full training loop; returns (trained params, per-iteration log).

    The log is a list of plain dicts (one per iteration) with the loss
    breakdown, per-barrier minimum barrier values over the whole batch and
    QP solver statistics. Aborts loudly on safety violations or infeasible
    QPs; never clips or retries, since the artifact's claim is that the
    filter keeps training trajectories safe.
    """
    config = config or preset.config
    rng = np.random.default_rng(config.seed)
    params = net.init_params(rng, preset.system.n_x)
    params_dict = {k: np.asarray(v, dtype=np.float64) for k, v in net.to_dict(params).items()}
    moments = AdamState.zeros_like(params_dict)
    log = TrainLog()
    for k in range(1, config.iterations + 1):
        var_params, leaves = net.wrap_params(net.from_dict(params_dict, preset.system.n_x))
        with de.Tape() as tape:
            record = rollout_batch(
                var_params, preset.system, preset.barriers, preset.cost, config, rng, preset.x0
            )
            loss = compute_loss(record, preset.cost, config)
        grads = de.backprop(tape, loss.total_var)
        params_dict, moments = adam_step(params_dict, grads, moments, k, config)
        log.track_worst(record, preset.barriers, k)
        entry = {
            "iteration": k,
            "loss_total": loss.total,
            "loss_value": loss.value_term,
            "loss_gradient": loss.gradient_term,
            "loss_terminal_value": loss.terminal_value_term,
            "loss_terminal_gradient": loss.terminal_gradient_term,
            "loss_weight_decay": loss.weight_decay_term,
            "min_h": {bar.name: float(record.min_h[:, i].min()) for i, bar in enumerate(preset.barriers)},
            **_aggregate_stats(record.qp_stats),
        }
        log.entries.append(entry)
        if log_callback is not None:
            log_callback(entry)
    return net.from_dict(params_dict, preset.system.n_x), log


def make_loss_computation(preset: TaskPreset, config: TrainConfig, noise_seed: int = 0):
    """Closure mapping a parameter dict to the rollout loss, for gradient checks.

    Noise is regenerated from `noise_seed` on every call, so perturbed
    evaluations share the same random numbers. Returns the tape Var of the
    loss when given Var leaves, else the plain float value.
    """

    def computation(leaves: dict):
        params = net.from_dict(leaves, preset.system.n_x)
        stream = np.random.default_rng(noise_seed)
        record = rollout_batch(
            params, preset.system, preset.barriers, preset.cost, config, stream, preset.x0
        )
        loss = compute_loss(record, preset.cost, config)
        return loss.total_var if loss.total_var is not None else loss.total

    return computation


def min_qp_strictness(record: RolloutRecord) -> float:
    """Smallest max(lam_i, s_i) across all QP solves of a rollout.

    Near-zero values flag weakly active constraints, where the QP solution
    map is not differentiable and gradient checks are meaningless.
    """
    if not record.qp_stats:
        return np.inf
    return min(s.min_strictness for s in record.qp_stats)


@dataclass
class EvalStats:
    num_rollouts: int
    terminal_error_mean: float
    terminal_error_std: float
    terminal_abs_error_mean: np.ndarray  # per coordinate
    min_h: dict
    mean_trajectory: np.ndarray  # (N+1, n_x)


def evaluate(
    params: net.NetworkParams,
    preset: TaskPreset,
    num_rollouts: int,
    stream: np.random.Generator,
):
    """Fresh-noise rollouts with the trained safe controller."""
    config = replace(preset.config, batch_size=num_rollouts)
    record = rollout_batch(
        params, preset.system, preset.barriers, preset.cost, config, stream, preset.x0
    )
    goal = preset.cost.x_goal
    err = record.states[:, -1, :] - goal
    norms = np.linalg.norm(err, axis=1)
    stats = EvalStats(
        num_rollouts=num_rollouts,
        terminal_error_mean=float(norms.mean()),
        terminal_error_std=float(norms.std()),
        terminal_abs_error_mean=np.abs(err).mean(axis=0),
        min_h={bar.name: float(record.min_h[:, i].min()) for i, bar in enumerate(preset.barriers)},
        mean_trajectory=record.states.mean(axis=0),
    )
    return stats, record
