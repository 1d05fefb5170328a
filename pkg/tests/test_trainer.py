import numpy as np
import pytest

from safe_fbsde import diff_engine as de
from safe_fbsde import network as net
from safe_fbsde.barrier import pendulum_box_barrier
from safe_fbsde.dynamics import make_pendulum
from safe_fbsde.exceptions import UnsafeStart
from safe_fbsde.trainer import (
    AdamState,
    TaskPreset,
    TrainConfig,
    adam_step,
    compute_loss,
    evaluate,
    make_loss_computation,
    make_quadratic_cost,
    min_qp_strictness,
    rollout_batch,
    train,
)

PI = np.pi


def small_rollout(preset, seed=0, params=None):
    params = params or net.init_params(np.random.default_rng(seed), preset.system.n_x)
    stream = np.random.default_rng(seed)
    return params, rollout_batch(
        params, preset.system, preset.barriers, preset.cost, preset.config, stream, preset.x0
    )


def test_rollout_record_shapes_and_anchors(tiny_pendulum_preset):
    p = tiny_pendulum_preset
    params, rec = small_rollout(p)
    m, n = p.config.batch_size, p.config.horizon_steps
    assert rec.states.shape == (m, n + 1, 2)
    assert rec.controls.shape == (m, n, 1)
    assert rec.values.shape == (m, n + 1)
    assert rec.value_grads.shape == (m, n, 2)
    assert rec.noises.shape == (m, n, 2)
    assert np.allclose(rec.states[:, 0], p.x0)
    assert np.allclose(rec.values[:, 0], float(params.psi))
    assert rec.min_h.shape == (m, 1)
    assert len(rec.qp_stats) == n


def test_rollout_rejects_unsafe_start(tiny_pendulum_preset):
    p = tiny_pendulum_preset
    with pytest.raises(UnsafeStart):
        rollout_batch(
            net.init_params(np.random.default_rng(0), 2),
            p.system,
            p.barriers,
            p.cost,
            p.config,
            np.random.default_rng(0),
            np.array([2 * PI / 3 - 0.3, 0.0]),
        )


def test_value_propagation_telescopes(tiny_pendulum_preset):
    p = tiny_pendulum_preset
    _, rec = small_rollout(p)
    m = p.config.batch_size
    increments = np.zeros(m)
    sigma_t = p.system.sigma_matrix().T
    for t in range(p.config.horizon_steps):
        x, u = rec.states[:, t], rec.controls[:, t]
        stage = de.value_of(p.cost.running_q(x)) + 0.5 * np.einsum(
            "mi,ij,mj->m", u, p.cost.R, u
        )
        increments += -stage * p.config.dt + np.einsum(
            "mi,mi->m", rec.value_grads[:, t], rec.noises[:, t] @ sigma_t
        )
    assert np.abs(rec.values[:, -1] - rec.values[:, 0] - increments).max() <= 1e-12


def test_same_noise_drives_state_and_value(tiny_pendulum_preset):
    """The recorded noises must reproduce the state path exactly."""
    p = tiny_pendulum_preset
    _, rec = small_rollout(p)
    sigma_t = p.system.sigma_matrix().T
    x = rec.states[:, 0]
    for t in range(p.config.horizon_steps):
        x = (
            x
            + p.system.drift(x) * p.config.dt
            + p.system.apply_actuation(x, rec.controls[:, t]) * p.config.dt
            + rec.noises[:, t] @ sigma_t
        )
        assert np.array_equal(x, rec.states[:, t + 1])


def test_rollout_deterministic_given_seed(tiny_pendulum_preset):
    p = tiny_pendulum_preset
    _, r1 = small_rollout(p, seed=5)
    _, r2 = small_rollout(p, seed=5)
    assert np.array_equal(r1.states, r2.states)
    assert np.array_equal(r1.controls, r2.controls)


def test_loss_zero_on_exact_match(tiny_pendulum_preset):
    p = tiny_pendulum_preset
    params, rec = small_rollout(p)
    x_term = rec.states[:, -1]
    rec.live.v_terminal = de.value_of(p.cost.terminal_phi(x_term))
    rec.live.vx_terminal = de.value_of(p.cost.terminal_phi_grad(x_term))
    cfg = TrainConfig(
        batch_size=p.config.batch_size,
        iterations=1,
        horizon_steps=p.config.horizon_steps,
        dt=p.config.dt,
        loss_c=0.0,
        loss_d=0.0,
        weight_decay=0.0,
    )
    loss = compute_loss(rec, p.cost, cfg)
    assert loss.total == pytest.approx(0.0, abs=1e-18)
    assert loss.value_term == pytest.approx(0.0, abs=1e-18)


def test_loss_hand_computed_single_element():
    system = make_pendulum()
    cost = make_quadratic_cost([1.0, 1.0], [2.0, 0.5], 1.0, [PI, 0.0], 1)
    cfg = TrainConfig(batch_size=1, iterations=1, horizon_steps=1, dt=0.02)
    x_term = np.array([[PI + 0.3, -0.2]])
    v_term = np.array([1.5])
    vx_pred = np.array([[0.1, 0.2]])

    phi = 2.0 * 0.3**2 + 0.5 * 0.2**2
    phi_grad = np.array([2 * 2.0 * 0.3, 2 * 0.5 * -0.2])
    t1 = (phi - 1.5) ** 2
    t2 = ((phi_grad - vx_pred[0]) ** 2).sum()
    t3 = phi**2
    t4 = (phi_grad**2).sum()

    from safe_fbsde.trainer import RolloutLive, RolloutRecord

    params = net.init_params(np.random.default_rng(0), 2)
    rec = RolloutRecord(
        states=np.zeros((1, 2, 2)),
        controls=np.zeros((1, 1, 1)),
        values=np.zeros((1, 2)),
        value_grads=np.zeros((1, 1, 2)),
        terminal_value_grad=vx_pred,
        noises=np.zeros((1, 1, 2)),
        qp_stats=[],
        h_values=np.zeros((1, 2, 1)),
        min_h=np.zeros((1, 1)),
        live=RolloutLive(v_terminal=v_term, vx_terminal=vx_pred, x_terminal=x_term, params=params),
    )
    loss = compute_loss(rec, cost, cfg)
    weight_sq = sum(
        float(np.sum(np.asarray(v) ** 2))
        for k, v in net.to_dict(params).items()
        if k.startswith(("layer1.", "layer2.", "head."))
    )
    expected = (
        cfg.loss_a * t1 + cfg.loss_b * t2 + cfg.loss_c * t3 + cfg.loss_d * t4
        + cfg.weight_decay * weight_sq
    )
    assert loss.total == pytest.approx(expected, rel=1e-12)
    assert loss.weight_decay_term == pytest.approx(weight_sq, rel=1e-12)


def test_loss_nonnegative_and_breakdown_consistent(tiny_pendulum_preset):
    p = tiny_pendulum_preset
    _, rec = small_rollout(p, seed=3)
    loss = compute_loss(rec, p.cost, p.config)
    for term in (
        loss.value_term,
        loss.gradient_term,
        loss.terminal_value_term,
        loss.terminal_gradient_term,
        loss.weight_decay_term,
        loss.total,
    ):
        assert term >= 0.0
    cfg = p.config
    recombined = (
        cfg.loss_a * loss.value_term
        + cfg.loss_b * loss.gradient_term
        + cfg.loss_c * loss.terminal_value_term
        + cfg.loss_d * loss.terminal_gradient_term
        + cfg.weight_decay * loss.weight_decay_term
    )
    assert loss.total == pytest.approx(recombined, rel=1e-12)


def test_adam_zero_gradient_keeps_parameters():
    cfg = TrainConfig()
    params = {"w": np.array([1.0, -2.0])}
    out, _ = adam_step(params, {"w": np.zeros(2)}, AdamState.zeros_like(params), 1, cfg)
    assert np.array_equal(out["w"], params["w"])
    # nonzero first moments decay toward zero under zero gradients
    moments = AdamState.zeros_like(params)
    moments.m["w"][:] = 0.5
    _, moments = adam_step(params, {"w": np.zeros(2)}, moments, 1, cfg)
    assert np.all(moments.m["w"] == 0.5 * cfg.adam_beta1)


def test_adam_constant_gradient_step_approaches_learning_rate():
    cfg = TrainConfig(learning_rate=1e-2)
    params = {"w": np.zeros(1)}
    moments = AdamState.zeros_like(params)
    g = {"w": np.array([0.37])}
    prev = params["w"].copy()
    for t in range(1, 600):
        params, moments = adam_step(params, g, moments, t, cfg)
        step = abs(params["w"][0] - prev[0])
        prev = params["w"].copy()
    assert step == pytest.approx(cfg.learning_rate, rel=1e-3)


def test_adam_rejects_nonfinite_gradients():
    cfg = TrainConfig()
    params = {"w": np.zeros(2)}
    with pytest.raises(FloatingPointError, match="w"):
        adam_step(params, {"w": np.array([np.nan, 0.0])}, AdamState.zeros_like(params), 1, cfg)


def test_train_logs_and_worst_case(tiny_pendulum_preset):
    params, log = train(tiny_pendulum_preset)
    assert len(log) == tiny_pendulum_preset.config.iterations
    entry = log[0]
    for key in ("iteration", "loss_total", "loss_value", "min_h", "qp_max_iterations"):
        assert key in entry
    assert "pendulum_box" in log.worst_case
    wc = log.worst_case["pendulum_box"]
    assert wc.min_h == min(e["min_h"]["pendulum_box"] for e in log)
    assert wc.states.shape == (tiny_pendulum_preset.config.horizon_steps + 1, 2)
    assert wc.h.min() == pytest.approx(wc.min_h)


def test_train_safety_never_negative(tiny_pendulum_preset):
    _, log = train(tiny_pendulum_preset)
    assert min(e["min_h"]["pendulum_box"] for e in log) >= 0.0


def test_evaluate_deterministic_and_reports(tiny_pendulum_preset):
    p = tiny_pendulum_preset
    params, _ = train(p)
    s1, r1 = evaluate(params, p, 16, np.random.default_rng(9))
    s2, r2 = evaluate(params, p, 16, np.random.default_rng(9))
    assert np.array_equal(r1.states, r2.states)
    assert s1.terminal_error_mean == s2.terminal_error_mean
    assert s1.num_rollouts == 16
    assert s1.mean_trajectory.shape == (p.config.horizon_steps + 1, 2)
    assert "pendulum_box" in s1.min_h


def test_loss_computation_closure_uses_common_random_numbers(tiny_pendulum_preset):
    p = tiny_pendulum_preset
    cfg = TrainConfig(batch_size=2, iterations=1, horizon_steps=4, dt=0.02, qp_tol=1e-12)
    comp = make_loss_computation(p, cfg, noise_seed=1)
    params = net.to_dict(net.init_params(np.random.default_rng(2), 2))
    a = float(de.value_of(comp(params)))
    b = float(de.value_of(comp(params)))
    assert a == b


def test_min_qp_strictness_reports(tiny_pendulum_preset):
    _, rec = small_rollout(tiny_pendulum_preset)
    assert min_qp_strictness(rec) > 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(dt=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(loss_a=-1.0)


def test_gradients_flow_through_barrier_rows(tiny_pendulum_preset):
    """Perturbing the state path must change QP rows and reach parameters."""
    p = tiny_pendulum_preset
    cfg = TrainConfig(batch_size=2, iterations=1, horizon_steps=6, dt=0.02, qp_tol=1e-12)
    params = net.init_params(np.random.default_rng(4), 2)
    var_params, leaves = net.wrap_params(params)
    with de.Tape() as tape:
        rec = rollout_batch(var_params, p.system, p.barriers, p.cost, cfg, np.random.default_rng(0), p.x0)
        loss = compute_loss(rec, p.cost, cfg)
    grads = de.backprop(tape, loss.total_var)
    nonzero = sum(1 for g in grads.values() if np.abs(g).max() > 0)
    assert nonzero == len(net.to_dict(params))
