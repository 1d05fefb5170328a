"""Acceptance suite: one test per release criterion, at stated tolerances.

Run with `pytest tests/test_acceptance.py -v -s` to see one PASS line per
criterion. The pendulum training run (criterion 4) is shared with the
test-performance criterion (5) through a module-scoped fixture.
"""

import json
import time

import numpy as np
import pytest

from safe_fbsde import cli
from safe_fbsde import diff_engine as de
from safe_fbsde import network as net
from safe_fbsde.presets import build_preset, load_task_config
from safe_fbsde.qp_layer import QpProblem, brute_force_qp_oracle, qp_backward, solve_qp_pdipm
from safe_fbsde.trainer import (
    TrainConfig,
    evaluate,
    make_loss_computation,
    min_qp_strictness,
    rollout_batch,
    train,
)
from safe_fbsde.verifier import monte_carlo_safety, qp_filtered_controller, unfiltered_controller

PI = np.pi


def _report(criterion: int, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion}: PASS - {detail}")


@pytest.fixture(scope="module")
def pendulum_run():
    """Full-scale pendulum training (M=128, K=201, N=75)."""
    preset = build_preset(load_task_config("pendulum-balance"))
    t0 = time.time()
    params, log = train(preset)
    return preset, params, log, time.time() - t0


def test_criterion_1_qp_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.time()
    worst = 0.0
    for _ in range(1000):
        n_u = int(rng.integers(1, 9))
        n_q = int(rng.integers(0, 7))
        a = rng.normal(size=(n_u, n_u))
        c = rng.normal(size=(n_q, n_u))
        interior = rng.normal(size=n_u)
        d = c @ interior + np.abs(rng.normal(size=n_q)) + 0.01
        problem = QpProblem(a @ a.T + n_u * np.eye(n_u), rng.normal(size=n_u), c, d)
        sol = solve_qp_pdipm(problem)
        ref = brute_force_qp_oracle(problem)
        worst = max(worst, float(np.abs(sol.u - ref.u).max(initial=0.0)))
    elapsed = time.time() - t0
    assert worst <= 1e-6, f"max deviation {worst:.3e}"
    assert elapsed < 30.0, f"took {elapsed:.1f}s"
    _report(1, f"1000 random QPs, max |u - u_oracle| = {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_qp_backward_matches_finite_differences():
    rng = np.random.default_rng(77)
    t0 = time.time()
    checked = 0
    worst = 0.0
    h = 1e-6
    while checked < 200:
        n_u = int(rng.integers(1, 5))
        n_q = int(rng.integers(1, 4))
        a = rng.normal(size=(n_u, n_u))
        q_mat = a @ a.T + n_u * np.eye(n_u)
        q = rng.normal(size=n_u)
        c = rng.normal(size=(n_q, n_u))
        d = c @ rng.normal(size=n_u) + np.abs(rng.normal(size=n_q)) + 0.05
        problem = QpProblem(q_mat, q, c, d)
        sol = solve_qp_pdipm(problem, tol=1e-12, max_iters=30)
        if np.any(np.maximum(sol.lam, sol.s) < 1e-3):
            continue  # only strictly active/inactive instances are differentiable
        checked += 1
        g = rng.normal(size=n_u)
        bw = qp_backward(problem, sol, g)

        def loss(p):
            return float(g @ solve_qp_pdipm(p, tol=1e-12, max_iters=30).u)

        def rel(a_val, f_val):
            # floor absorbs central-difference noise on exactly-zero gradients
            return abs(a_val - f_val) / max(abs(a_val), abs(f_val), 1e-3)

        for i in range(n_u):
            qp, qm = q.copy(), q.copy()
            qp[i] += h
            qm[i] -= h
            fd = (loss(QpProblem(q_mat, qp, c, d)) - loss(QpProblem(q_mat, qm, c, d))) / (2 * h)
            worst = max(worst, rel(bw.grad_q[i], fd))
        for i in range(n_q):
            dp, dm = d.copy(), d.copy()
            dp[i] += h
            dm[i] -= h
            fd = (loss(QpProblem(q_mat, q, c, dp)) - loss(QpProblem(q_mat, q, c, dm))) / (2 * h)
            worst = max(worst, rel(bw.grad_d[i], fd))
            for j in range(n_u):
                cp, cm = c.copy(), c.copy()
                cp[i, j] += h
                cm[i, j] -= h
                fd = (loss(QpProblem(q_mat, q, cp, d)) - loss(QpProblem(q_mat, q, cm, d))) / (
                    2 * h
                )
                worst = max(worst, rel(bw.grad_C[i, j], fd))
    elapsed = time.time() - t0
    assert worst <= 1e-5, f"max rel err {worst:.3e}"
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    _report(2, f"200 strict instances, max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_3_end_to_end_gradient_check():
    preset = build_preset(load_task_config("pendulum-balance"))
    cfg = TrainConfig(
        batch_size=2, iterations=1, horizon_steps=5, dt=0.02, seed=0,
        qp_tol=1e-12, qp_max_iters=30,
    )
    params = net.init_params(np.random.default_rng(10), preset.system.n_x)
    record = rollout_batch(
        params, preset.system, preset.barriers, preset.cost, cfg,
        np.random.default_rng(0), preset.x0,
    )
    assert min_qp_strictness(record) > 1e-5, "degenerate active set; choose another seed"
    t0 = time.time()
    computation = make_loss_computation(preset, cfg, noise_seed=0)
    report = de.finite_difference_check(
        computation, net.to_dict(params), epsilon=1e-5, floor=1e-3
    )
    elapsed = time.time() - t0
    n_params = sum(np.asarray(v).size for v in net.to_dict(params).values())
    assert n_params == net.param_count(preset.system.n_x)
    assert report.max_rel_err <= 1e-3, report.worst()
    assert elapsed < 300.0, f"took {elapsed:.1f}s"
    _report(
        3,
        f"all {n_params} parameters, max rel err {report.max_rel_err:.2e}, {elapsed:.1f}s",
    )


def test_criterion_4_safety_during_training(pendulum_run):
    preset, params, log, elapsed = pendulum_run
    cfg = preset.config
    assert cfg.batch_size == 128 and cfg.iterations == 201 and cfg.horizon_steps == 75
    assert cfg.batch_size * cfg.iterations == 25728
    min_h = min(e["min_h"]["pendulum_box"] for e in log)
    assert min_h >= 0.0, f"barrier went negative: {min_h}"
    lead = np.mean([e["loss_total"] for e in log[:20]])
    trail = np.mean([e["loss_total"] for e in log[-20:]])
    assert trail < lead, f"loss did not decrease: {lead:.3f} -> {trail:.3f}"
    _report(
        4,
        f"25,728 training trajectories, min h = {min_h:.4f} >= 0, "
        f"loss {lead:.1f} -> {trail:.3f}, {elapsed:.0f}s",
    )


def test_criterion_5_pendulum_test_performance(pendulum_run):
    preset, params, log, _ = pendulum_run
    stats, record = evaluate(params, preset, 128, np.random.default_rng(2024))
    theta = record.states[:, :, 0]
    lo, hi = 2 * PI / 3, 4 * PI / 3
    assert ((theta >= lo) & (theta <= hi)).all(), "evaluation left the angle bounds"
    mean_err = float(np.abs(record.states[:, -1, 0] - PI).mean())
    assert mean_err <= 0.2, f"mean terminal angle error {mean_err:.4f} > 0.2"
    _report(
        5,
        f"128 eval rollouts stay in bounds, mean |theta(T) - pi| = {mean_err:.4f} <= 0.2",
    )


def test_criterion_6_theorem_bound_empirical_check():
    preset = build_preset(load_task_config("pendulum-balance"))
    system, barriers, x0 = preset.system, preset.barriers, preset.x0
    horizon, dt = preset.config.horizon_steps, preset.config.dt

    filtered = qp_filtered_controller(system, barriers, r_cost=1.0)
    report = monte_carlo_safety(
        filtered, system, barriers, x0, horizon, dt, 10_000, 0.0, np.random.default_rng(99)
    )
    assert report.num_rollouts == 10_000
    assert report.violation_count == 0, f"{report.violation_count} violations"
    assert report.min_h_overall >= 0.0

    vx_stream = np.random.default_rng(100)
    raw = unfiltered_controller(
        system, 1.0, lambda x: vx_stream.normal(size=(x.shape[0], system.n_x))
    )
    negative = monte_carlo_safety(
        raw, system, barriers, x0, horizon, dt, 10_000, 0.0, np.random.default_rng(99)
    )
    assert negative.violation_count >= 1, "negative control produced no violations"
    _report(
        6,
        f"filtered: 0/10000 violations (min h {report.min_h_overall:.3f}); "
        f"unfiltered negative control: {negative.violation_count}/10000",
    )


@pytest.mark.parametrize("task", ["cartpole-swingup", "car-multi"])
def test_criterion_7_reduced_scale_smoke_runs(task):
    config = load_task_config(task)
    preset = build_preset(config)
    cfg = TrainConfig(**{**config.train, "iterations": 50}, seed=config.seed)
    t0 = time.time()
    params, log = train(preset, config=cfg)  # raises on violation or infeasible QP
    elapsed = time.time() - t0
    min_h = min(min(e["min_h"].values()) for e in log)
    assert len(log) == 50
    assert min_h >= 0.0
    _report(7, f"{task} K=50 smoke: completed, min h = {min_h:.4f} >= 0, {elapsed:.0f}s")


def test_criterion_8_deterministic_training_bit_identical(tmp_path):
    outs = []
    for name in ("first", "second"):
        out = tmp_path / name
        rc = cli.main(
            ["--deterministic", "train", "--task", "pendulum-balance",
             "--iterations", "4", "--batch", "8", "--seed", "321", "--output-dir", str(out)]
        )
        assert rc == 0
        outs.append(out)
    log_a = (outs[0] / "train_log.jsonl").read_bytes()
    log_b = (outs[1] / "train_log.jsonl").read_bytes()
    par_a = (outs[0] / "params_final.tensors").read_bytes()
    par_b = (outs[1] / "params_final.tensors").read_bytes()
    assert log_a == log_b, "loss logs differ between identical runs"
    assert par_a == par_b, "parameter archives differ between identical runs"
    _report(8, "two deterministic runs produced bit-identical logs and archives")
