"""Zeroing barrier functions and their safety-QP constraint rows.

All supplied barriers follow the same pattern: a position-clearance term
that vanishes on the boundary of the allowed region minus a velocity
penalty mu * (velocity)^2, which makes them relative degree 1 (control
shows up in the first time derivative through the velocity). The class-K
bound on the barrier decrease rate is linear, alpha(h) = gamma * h.

Barrier eval/grad are backend-generic like the dynamics: single state or
batch, ndarray or tape Var. The Hessian-trace correction of each barrier
is a state-independent constant (the diffusion only excites velocity rows)
and is supplied analytically.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diff_engine as de
from .dynamics import SystemModel


@dataclass(frozen=True)
class BarrierSpec:
    """One zeroing barrier: safe set is {x : eval(x) >= 0}."""

    eval: Callable
    grad: Callable
    trace_term: Callable  # (x, system) -> float, constant for supplied barriers
    mu: float
    gamma: float
    name: str


@dataclass
class ConstraintRow:
    """One inequality row c_row . u <= d of the safety QP."""

    c_row: np.ndarray
    d: np.ndarray


@dataclass
class RelativeDegreeReport:
    num_samples: int
    fraction_nonzero: float
    flagged: np.ndarray  # sample indices where grad(x)' G(x) vanishes
    tolerance: float


def _check_common(mu: float, gamma: float) -> None:
    if mu < 0:
        raise ValueError(f"velocity penalty mu must be >= 0, got {mu}")
    if gamma <= 0:
        raise ValueError(f"class-K slope gamma must be > 0, got {gamma}")


def _batched(fn):
    def wrapped(x):
        if not isinstance(x, de.Var):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim == 1:
                return fn(x[None])[0]
        return fn(x)

    return wrapped


def _sigma_of(system: SystemModel) -> float:
    return float(system.params["sigma"])


def pendulum_box_barrier(theta_l: float, theta_h: float, mu: float, gamma: float) -> BarrierSpec:
    """Angle box constraint with angular-velocity penalty."""
    if theta_h <= theta_l:
        raise ValueError(f"need theta_h > theta_l, got [{theta_l}, {theta_h}]")
    _check_common(mu, gamma)

    @_batched
    def eval_(x):
        th, om = x[:, 0], x[:, 1]
        return (theta_h - th) * (th - theta_l) - mu * de.square(om)

    @_batched
    def grad(x):
        th, om = x[:, 0], x[:, 1]
        return de.stack([theta_h - 2.0 * th + theta_l, -2.0 * mu * om], axis=1)

    def trace_term(x, system):
        return -mu * _sigma_of(system) ** 2

    return BarrierSpec(eval_, grad, trace_term, mu, gamma, name="pendulum_box")


def cartpole_position_barrier(x_l: float, x_h: float, mu: float, gamma: float) -> BarrierSpec:
    """Cart-position box constraint with cart-velocity penalty."""
    if x_h <= x_l:
        raise ValueError(f"need x_h > x_l, got [{x_l}, {x_h}]")
    _check_common(mu, gamma)

    @_batched
    def eval_(x):
        xc, xd = x[:, 0], x[:, 2]
        return (x_h - xc) * (xc - x_l) - mu * de.square(xd)

    @_batched
    def grad(x):
        xc, xd = x[:, 0], x[:, 2]
        z = np.zeros(de.value_of(xc).shape[0])
        return de.stack([x_h - 2.0 * xc + x_l, z, -2.0 * mu * xd, z], axis=1)

    def trace_term(x, system):
        return -mu * _sigma_of(system) ** 2

    return BarrierSpec(eval_, grad, trace_term, mu, gamma, name="cartpole_position")


def cartpole_angle_barrier(theta_l: float, theta_h: float, mu_theta: float, gamma: float) -> BarrierSpec:
    """Pole-angle box constraint with pole-rate penalty."""
    if theta_h <= theta_l:
        raise ValueError(f"need theta_h > theta_l, got [{theta_l}, {theta_h}]")
    _check_common(mu_theta, gamma)

    @_batched
    def eval_(x):
        th, thd = x[:, 1], x[:, 3]
        return (theta_h - th) * (th - theta_l) - mu_theta * de.square(thd)

    @_batched
    def grad(x):
        th, thd = x[:, 1], x[:, 3]
        z = np.zeros(de.value_of(th).shape[0])
        return de.stack([z, theta_h - 2.0 * th + theta_l, z, -2.0 * mu_theta * thd], axis=1)

    def trace_term(x, system):
        return -mu_theta * _sigma_of(system) ** 2

    return BarrierSpec(eval_, grad, trace_term, mu_theta, gamma, name="cartpole_angle")


def car_obstacle_barrier(o_x: float, o_y: float, o_r: float, mu: float, gamma: float) -> BarrierSpec:
    """Clearance from a circular obstacle with forward-speed penalty (single car)."""
    if o_r < 0:
        raise ValueError(f"obstacle radius must be >= 0, got {o_r}")
    _check_common(mu, gamma)

    @_batched
    def eval_(x):
        px, py, v = x[:, 0], x[:, 1], x[:, 3]
        return (
            de.square(px - o_x) + de.square(py - o_y) - o_r**2 - mu * de.square(v)
        )

    @_batched
    def grad(x):
        px, py, v = x[:, 0], x[:, 1], x[:, 3]
        z = np.zeros(de.value_of(px).shape[0])
        return de.stack(
            [2.0 * (px - o_x), 2.0 * (py - o_y), z, -2.0 * mu * v], axis=1
        )

    def trace_term(x, system):
        return -mu * _sigma_of(system) ** 2

    return BarrierSpec(eval_, grad, trace_term, mu, gamma, name=f"obstacle_{o_x}_{o_y}")


def car_pair_barrier(i: int, j: int, car_radius: float, mu: float, gamma: float) -> BarrierSpec:
    """Pairwise collision clearance between cars i and j over the stacked state.

    Boundary at center distance 2 * car_radius; penalizes both cars' speeds.
    The number of cars is inferred from the state width (4 per car).
    """
    if i == j:
        raise ValueError("car pair needs two distinct cars")
    if car_radius <= 0:
        raise ValueError(f"car radius must be > 0, got {car_radius}")
    _check_common(mu, gamma)
    min_dist_sq = (2.0 * car_radius) ** 2

    @_batched
    def eval_(x):
        dx = x[:, 4 * i] - x[:, 4 * j]
        dy = x[:, 4 * i + 1] - x[:, 4 * j + 1]
        vi, vj = x[:, 4 * i + 3], x[:, 4 * j + 3]
        return de.square(dx) + de.square(dy) - min_dist_sq - mu * (de.square(vi) + de.square(vj))

    @_batched
    def grad(x):
        num_cars = de.value_of(x).shape[1] // 4
        dx = x[:, 4 * i] - x[:, 4 * j]
        dy = x[:, 4 * i + 1] - x[:, 4 * j + 1]
        z = np.zeros(de.value_of(x).shape[0])
        cols = []
        for c in range(num_cars):
            if c == i:
                cols.extend([2.0 * dx, 2.0 * dy, z, -2.0 * mu * x[:, 4 * c + 3]])
            elif c == j:
                cols.extend([-2.0 * dx, -2.0 * dy, z, -2.0 * mu * x[:, 4 * c + 3]])
            else:
                cols.extend([z, z, z, z])
        return de.stack(cols, axis=1)

    def trace_term(x, system):
        return -2.0 * mu * _sigma_of(system) ** 2

    return BarrierSpec(eval_, grad, trace_term, mu, gamma, name=f"pair_{i}_{j}")


def constraint_row(spec: BarrierSpec, system: SystemModel, x) -> ConstraintRow:
    """Assemble the safety inequality c_row . u <= d at state x.

    c_row = -grad(x)' G(x); d = gamma h(x) + grad(x)' f(x) + trace term.
    Rows with c_row = 0 are emitted as-is; the QP layer owns feasibility.
    """
    single = not isinstance(x, de.Var) and np.asarray(x).ndim == 1
    xb = np.asarray(x, dtype=np.float64)[None] if single else x
    g = spec.grad(xb)
    c_row = -system.actuation_pullback(xb, g)
    gf = de.vsum(g * system.drift(xb), axis=1)
    d = spec.gamma * spec.eval(xb) + gf + spec.trace_term(xb, system)
    if single:
        return ConstraintRow(c_row=de.value_of(c_row)[0], d=de.value_of(d)[0])
    return ConstraintRow(c_row=c_row, d=d)


def relative_degree_check(
    spec: BarrierSpec, system: SystemModel, samples, tolerance: float = 1e-8
) -> RelativeDegreeReport:
    """Fraction of sample states where the control reaches the barrier.

    Computes grad(x)' G(x) per sample and flags samples where it vanishes
    (below tolerance in infinity norm): there the constraint row is zero
    and the barrier is momentarily uncontrollable (relative degree > 1 on
    that measure-zero set).
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    g = spec.grad(samples)
    rows = system.actuation_pullback(samples, g)
    norms = np.abs(rows).max(axis=1)
    flagged = np.nonzero(norms <= tolerance)[0]
    frac = float((norms > tolerance).mean()) if samples.shape[0] else 0.0
    return RelativeDegreeReport(
        num_samples=samples.shape[0],
        fraction_nonzero=frac,
        flagged=flagged,
        tolerance=tolerance,
    )
