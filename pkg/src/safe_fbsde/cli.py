"""Command-line entry point: train / evaluate / verify / gradcheck / qp-fuzz.

Artifacts are static files under --output-dir: a resolved config snapshot,
a line-delimited JSON training log, a parameter archive, worst-case
trajectory CSVs, evaluation statistics and safety reports. In
deterministic mode (the default single-threaded behavior) every artifact
is bit-exact reproducible from (config, seed).

SAFE_FBSDE_THREADS caps BLAS threads; heavy imports happen after the cap
is applied so it takes effect. SAFE_FBSDE_PURE_PY=1 forces the pure-numpy
QP kernel.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _cap_threads(limit: str | None) -> None:
    if limit:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, limit)


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _write_jsonl(path: Path, entries) -> None:
    with open(path, "w") as f:
        for e in entries:
            f.write(_json_line(e) + "\n")


def _write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def _trajectory_rows(dt, states, controls=None, values=None, h_cols=None):
    import numpy as np

    n_steps = states.shape[0]
    for t in range(n_steps):
        row = [t * dt, *states[t]]
        if controls is not None:
            row.extend(controls[t] if t < controls.shape[0] else np.full(controls.shape[1], np.nan))
        if values is not None:
            row.append(values[t])
        if h_cols is not None:
            row.extend(h[t] for h in h_cols)
        yield row


def _trajectory_header(n_x, n_u=None, with_value=False, h_names=()):
    header = ["t"] + [f"x{i}" for i in range(n_x)]
    if n_u is not None:
        header += [f"u{i}" for i in range(n_u)]
    if with_value:
        header.append("V")
    header += [f"h_{name}" for name in h_names]
    return header


def _load_config(args) -> "object":
    from .presets import RunConfig, apply_overrides, load_task_config

    if args.config:
        base = RunConfig.load(args.config)
    elif args.task:
        base = load_task_config(args.task)
    else:
        raise ValueError("provide --task or --config")
    overrides = {
        "seed": getattr(args, "seed", None),
        "iterations": getattr(args, "iterations", None),
        "batch": getattr(args, "batch", None),
        "output_dir": getattr(args, "output_dir", None),
    }
    return apply_overrides(base, overrides)


def cmd_train(args) -> int:
    import numpy as np

    from .exceptions import InfeasibleProblem, SafetyViolation, UnsafeStart
    from .network import save_params
    from .presets import build_preset
    from .trainer import train

    try:
        config = _load_config(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    preset = build_preset(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config_resolved.json")

    log_file = open(out / "train_log.jsonl", "w")

    def sink(entry):
        log_file.write(_json_line(entry) + "\n")
        if args.verbose:
            print(
                f"iter {entry['iteration']}: loss {entry['loss_total']:.4f} "
                f"min_h {min(entry['min_h'].values()) if entry['min_h'] else float('inf'):.4f}"
            )

    try:
        params, log = train(preset, log_callback=sink)
    except (SafetyViolation, InfeasibleProblem, UnsafeStart) as exc:
        log_file.close()
        print(f"run aborted: {exc}", file=sys.stderr)
        return 2
    finally:
        if not log_file.closed:
            log_file.close()

    save_params(params, out / "params_final.tensors")
    for name, wc in log.worst_case.items():
        header = _trajectory_header(
            preset.system.n_x, preset.system.n_u, with_value=True, h_names=[name]
        )
        rows = _trajectory_rows(
            preset.config.dt, wc.states, wc.controls, wc.values, h_cols=[wc.h]
        )
        _write_csv(out / f"worst_case_{name}.csv", header, rows)
    overall_min_h = min(
        (min(e["min_h"].values()) for e in log.entries if e["min_h"]), default=float("inf")
    )
    print(
        f"trained {config.task}: {len(log)} iterations, final loss "
        f"{log[-1]['loss_total']:.6f}, min barrier value {overall_min_h:.6f}"
    )
    print(f"artifacts in {out}")
    return 0


def cmd_evaluate(args) -> int:
    import numpy as np

    from .exceptions import InfeasibleProblem, SafetyViolation
    from .network import load_params
    from .presets import build_preset
    from .trainer import evaluate

    try:
        config = _load_config(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    preset = build_preset(config)
    try:
        params = load_params(args.params)
    except (OSError, ValueError) as exc:
        print(f"cannot load parameters: {exc}", file=sys.stderr)
        return 1
    if params.n_x != preset.system.n_x:
        print(
            f"parameter archive has n_x={params.n_x} but task '{config.task}' "
            f"needs n_x={preset.system.n_x}",
            file=sys.stderr,
        )
        return 1
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stream = np.random.default_rng(config.seed)
    try:
        stats, record = evaluate(params, preset, args.rollouts, stream)
    except (SafetyViolation, InfeasibleProblem) as exc:
        print(f"evaluation aborted: {exc}", file=sys.stderr)
        return 2

    payload = {
        "task": config.task,
        "num_rollouts": stats.num_rollouts,
        "terminal_error_mean": stats.terminal_error_mean,
        "terminal_error_std": stats.terminal_error_std,
        "terminal_abs_error_mean": stats.terminal_abs_error_mean.tolist(),
        "min_h": stats.min_h,
    }
    (out / "eval_stats.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    mean = record.states.mean(axis=0)
    std = record.states.std(axis=0)
    header = ["t"] + [f"x{i}_mean" for i in range(preset.system.n_x)] + [
        f"x{i}_std" for i in range(preset.system.n_x)
    ]
    rows = (
        [t * preset.config.dt, *mean[t], *std[t]] for t in range(mean.shape[0])
    )
    _write_csv(out / "eval_mean_trajectory.csv", header, rows)
    print(
        f"evaluated {config.task} over {stats.num_rollouts} rollouts: "
        f"terminal error {stats.terminal_error_mean:.4f} +/- {stats.terminal_error_std:.4f}, "
        f"min_h {stats.min_h}"
    )
    return 0


def cmd_verify(args) -> int:
    import numpy as np

    from .exceptions import UnsafeStart
    from .network import load_params
    from .presets import build_preset
    from .verifier import (
        monte_carlo_safety,
        network_controller,
        qp_filtered_controller,
        unfiltered_controller,
    )

    try:
        config = _load_config(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    preset = build_preset(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    r_cost = float(config.cost["r"])
    stream = np.random.default_rng(config.seed)
    if args.negative_control:
        vx_stream = np.random.default_rng(config.seed + 1)

        def random_vx(x):
            return vx_stream.normal(size=(x.shape[0], preset.system.n_x))

        controller = unfiltered_controller(preset.system, r_cost, random_vx)
        mode = "unfiltered-negative-control"
    elif args.params:
        params = load_params(args.params)
        controller = network_controller(params, preset.system, preset.barriers, r_cost)
        mode = "trained-network-filtered"
    else:
        controller = qp_filtered_controller(preset.system, preset.barriers, r_cost)
        mode = "zero-nominal-filtered"
    try:
        report = monte_carlo_safety(
            controller,
            preset.system,
            preset.barriers,
            preset.x0,
            preset.config.horizon_steps,
            preset.config.dt,
            args.rollouts,
            args.epsilon,
            stream,
        )
    except UnsafeStart as exc:
        print(f"verification aborted: {exc}", file=sys.stderr)
        return 2
    payload = {"controller": mode, **report.to_dict()}
    (out / "safety_report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if report.trajectories is not None and report.num_rollouts:
        worst = report.trajectories[report.worst_trajectory_index]
        h_cols = [
            report.barrier_values[report.worst_trajectory_index, :, k]
            for k in range(len(preset.barriers))
        ]
        header = _trajectory_header(
            preset.system.n_x, h_names=[b.name for b in preset.barriers]
        )
        _write_csv(
            out / "worst_trajectory.csv",
            header,
            _trajectory_rows(preset.config.dt, worst, h_cols=h_cols),
        )
    print(
        f"[{mode}] rollouts={report.num_rollouts} eps={report.epsilon} "
        f"violations={report.violation_count} "
        f"empirical_probability={report.empirical_probability} "
        f"min_h={report.min_h_overall}"
    )
    print(f"note: {report.note}")
    return 0


def cmd_gradcheck(args) -> int:
    import numpy as np

    from . import diff_engine as de
    from . import network as net
    from .presets import build_preset, load_task_config
    from .trainer import (
        TrainConfig,
        make_loss_computation,
        min_qp_strictness,
        rollout_batch,
    )

    config = load_task_config("pendulum-balance")
    preset = build_preset(config)
    cfg = TrainConfig(
        batch_size=args.batch,
        iterations=1,
        horizon_steps=args.horizon,
        dt=preset.config.dt,
        seed=args.seed,
        qp_tol=1e-12,
        qp_max_iters=30,
    )
    rng = np.random.default_rng(args.seed)
    params = net.init_params(rng, preset.system.n_x)
    record = rollout_batch(
        params, preset.system, preset.barriers, preset.cost, cfg, np.random.default_rng(args.seed), preset.x0
    )
    strict = min_qp_strictness(record)
    if strict < 1e-5:
        print(f"warning: weakly active QP encountered (strictness {strict:.2e}); pick another seed")
    computation = make_loss_computation(preset, cfg, noise_seed=args.seed)
    report = de.finite_difference_check(
        computation,
        net.to_dict(params),
        epsilon=1e-5,
        floor=1e-3,
        coords_per_param=args.sample,
        rng=np.random.default_rng(args.seed),
    )
    for name in sorted(report.per_param):
        err, idx = report.per_param[name]
        print(f"{name:12s} max rel err {err:.3e} (flat index {idx})")
    print(f"overall max rel err: {report.max_rel_err:.3e}")
    if report.max_rel_err > 1e-3:
        print("GRADCHECK FAILED (tolerance 1e-3)", file=sys.stderr)
        return 1
    print("gradcheck passed (tolerance 1e-3)")
    return 0


def cmd_qp_fuzz(args) -> int:
    import numpy as np

    from .qp_layer import COMPILED_KERNEL, QpProblem, brute_force_qp_oracle, solve_qp_pdipm

    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.instances):
        n_u = int(rng.integers(1, 9))
        n_q = int(rng.integers(0, 7))
        a_mat = rng.normal(size=(n_u, n_u))
        q_mat = a_mat @ a_mat.T + n_u * np.eye(n_u)
        q = rng.normal(size=n_u)
        c_mat = rng.normal(size=(n_q, n_u))
        interior = rng.normal(size=n_u)
        d = c_mat @ interior + np.abs(rng.normal(size=n_q)) + 0.01
        problem = QpProblem(q_mat, q, c_mat, d)
        sol = solve_qp_pdipm(problem)
        ref = brute_force_qp_oracle(problem)
        worst = max(worst, float(np.abs(sol.u - ref.u).max(initial=0.0)))
    print(
        f"qp-fuzz: {args.instances} instances, kernel="
        f"{'compiled' if COMPILED_KERNEL else 'pure-python'}, max |u - u_oracle| = {worst:.3e}"
    )
    if worst > 1e-6:
        print("QP FUZZ FAILED (tolerance 1e-6)", file=sys.stderr)
        return 1
    return 0


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=None, help="shipped task preset name")
    p.add_argument("--config", help="path to a run config JSON (overrides --task)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--output-dir", default=None, help="override the artifact directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safe-fbsde",
        description="Safe stochastic optimal control: FBSDE value learning behind a CBF-QP filter",
    )
    parser.add_argument(
        "--deterministic",
        action="store_true",
        help="force single-threaded BLAS for bit-exact reproducibility",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a safe controller")
    _add_config_args(p)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="roll out trained parameters on fresh noise")
    _add_config_args(p)
    p.add_argument("--params", required=True, help="parameter archive from train")
    p.add_argument("--rollouts", type=int, default=128)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("verify", help="Monte Carlo safety check of the QP filter")
    _add_config_args(p)
    p.add_argument("--rollouts", type=int, default=10000)
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--params", default=None, help="optional trained controller")
    p.add_argument(
        "--negative-control",
        action="store_true",
        help="disable the QP filter (random value gradients) to show violations",
    )
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("gradcheck", help="finite-difference check of rollout gradients")
    p.add_argument("--horizon", type=int, default=5)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample", type=int, default=None, help="coordinates per parameter (default all)")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("qp-fuzz", help="compare the interior-point solver against enumeration")
    p.add_argument("--instances", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_qp_fuzz)
    return parser


def main(argv=None) -> int:
    _cap_threads(os.environ.get("SAFE_FBSDE_THREADS"))
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.deterministic:
        _cap_threads("1")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
