"""Stochastic control-affine systems and the forward SDE integrator.

Each system is dx = (f(x) + G(x) u) dt + S dw with state-independent
diffusion S acting on the actuated velocity rows only. System functions
accept either a single state (n_x,) or a batch (M, n_x); written against
`diff_engine` dispatch helpers they also run on tape Vars, which is how
rollout gradients flow through the dynamics.

`apply_actuation` / `actuation_pullback` compute G(x)u and G(x)'w without
materializing G, keeping rollout tapes small; `actuation` returns the
explicit matrix and is cross-checked against them in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diff_engine as de


@dataclass(frozen=True)
class SystemModel:
    """Drift f, actuation G and diffusion matrix of one controlled SDE."""

    name: str
    n_x: int
    n_u: int
    n_w: int
    drift: Callable
    actuation: Callable
    diffusion: Callable
    apply_actuation: Callable  # (x, u) -> G(x) u
    actuation_pullback: Callable  # (x, w) -> G(x)' w
    params: dict = field(default_factory=dict)

    def sigma_matrix(self) -> np.ndarray:
        """Constant (n_x, n_w) diffusion matrix."""
        return self.diffusion(np.zeros(self.n_x))


def _batched(fn):
    """Accept (n_x,) or (M, n_x) ndarray input; Vars are already batched."""

    def wrapped(x, *rest):
        if not isinstance(x, de.Var):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim == 1:
                rest_b = [
                    np.asarray(r, dtype=np.float64)[None] if not isinstance(r, de.Var) else r
                    for r in rest
                ]
                return fn(x[None], *rest_b)[0]
        return fn(x, *rest)

    return wrapped


def _zeros_like_col(x):
    m = x.shape[0] if isinstance(x, de.Var) else np.asarray(x).shape[0]
    return np.zeros(m)


def make_pendulum(params: dict | None = None) -> SystemModel:
    """Torque-actuated pendulum; state [angle, angular velocity]."""
    p = {"b": 0.1, "l": 0.5, "g": 9.81, "m": 2.0, "sigma": 1.0}
    if params:
        p.update(params)
    if p["m"] <= 0 or p["l"] <= 0:
        raise ValueError(f"mass and length must be positive, got m={p['m']}, l={p['l']}")
    b, length, grav, sigma = p["b"], p["l"], p["g"], p["sigma"]
    inertia = p["m"] * length**2
    p["I"] = inertia

    @_batched
    def drift(x):
        th, om = x[:, 0], x[:, 1]
        return de.stack([om, (-b / inertia) * om - (grav / length) * de.sin(th)], axis=1)

    @_batched
    def apply_actuation(x, u):
        return de.stack([_zeros_like_col(x), u[:, 0] / inertia], axis=1)

    @_batched
    def actuation_pullback(x, w):
        return de.stack([w[:, 1] / inertia], axis=1)

    @_batched
    def actuation(x):
        m = x.shape[0]
        g_mat = np.zeros((m, 2, 1))
        g_mat[:, 1, 0] = 1.0 / inertia
        return g_mat

    sigma_mat = np.array([[0.0, 0.0], [0.0, sigma]])

    @_batched
    def diffusion(x):
        return np.broadcast_to(sigma_mat, (x.shape[0], 2, 2)).copy()

    return SystemModel(
        name="pendulum",
        n_x=2,
        n_u=1,
        n_w=2,
        drift=drift,
        actuation=actuation,
        diffusion=diffusion,
        apply_actuation=apply_actuation,
        actuation_pullback=actuation_pullback,
        params=p,
    )


def make_cartpole(params: dict | None = None) -> SystemModel:
    """Cart-pole; state [cart position, pole angle, cart velocity, pole rate]."""
    p = {"m_p": 0.01, "m_c": 1.0, "l": 0.5, "g": 9.81, "sigma": 1.0}
    if params:
        p.update(params)
    if p["m_c"] <= 0 or p["l"] <= 0 or p["m_p"] < 0:
        raise ValueError(f"invalid cart-pole parameters {p}")
    m_p, m_c, length, grav, sigma = p["m_p"], p["m_c"], p["l"], p["g"], p["sigma"]

    def _den(th):
        s = de.sin(th)
        return m_c + m_p * de.square(s)

    @_batched
    def drift(x):
        xd, th, thd = x[:, 2], x[:, 1], x[:, 3]
        s, c = de.sin(th), de.cos(th)
        den = _den(th)
        f3 = m_p * s * (length * de.square(thd) + grav * c) / den
        f4 = (-(m_p * length) * de.square(thd) * c * s - (m_c + m_p) * grav * s) / (length * den)
        return de.stack([xd, thd, f3, f4], axis=1)

    @_batched
    def apply_actuation(x, u):
        th = x[:, 1]
        den = _den(th)
        u0 = u[:, 0]
        z = _zeros_like_col(x)
        return de.stack([z, z, u0 / den, -de.cos(th) * u0 / (length * den)], axis=1)

    @_batched
    def actuation_pullback(x, w):
        th = x[:, 1]
        den = _den(th)
        return de.stack([w[:, 2] / den - de.cos(th) * w[:, 3] / (length * den)], axis=1)

    @_batched
    def actuation(x):
        th = np.asarray(x)[:, 1]
        den = m_c + m_p * np.sin(th) ** 2
        g_mat = np.zeros((x.shape[0], 4, 1))
        g_mat[:, 2, 0] = 1.0 / den
        g_mat[:, 3, 0] = -np.cos(th) / (length * den)
        return g_mat

    sigma_mat = np.zeros((4, 4))
    sigma_mat[2, 2] = sigma
    sigma_mat[3, 3] = sigma

    @_batched
    def diffusion(x):
        return np.broadcast_to(sigma_mat, (x.shape[0], 4, 4)).copy()

    return SystemModel(
        name="cartpole",
        n_x=4,
        n_u=1,
        n_w=4,
        drift=drift,
        actuation=actuation,
        diffusion=diffusion,
        apply_actuation=apply_actuation,
        actuation_pullback=actuation_pullback,
        params=p,
    )


def make_car2d(num_cars: int = 1, params: dict | None = None) -> SystemModel:
    """num_cars planar cars; per-car state [x, y, heading, speed], controls
    [steering rate, acceleration] with heading actuated through speed."""
    if num_cars < 1:
        raise ValueError(f"num_cars must be >= 1, got {num_cars}")
    p = {"sigma": 0.1}
    if params:
        p.update(params)
    sigma = p["sigma"]
    n_x, n_u = 4 * num_cars, 2 * num_cars

    @_batched
    def drift(x):
        cols = []
        for i in range(num_cars):
            th, v = x[:, 4 * i + 2], x[:, 4 * i + 3]
            z = _zeros_like_col(x)
            cols.extend([v * de.cos(th), v * de.sin(th), z, z])
        return de.stack(cols, axis=1)

    @_batched
    def apply_actuation(x, u):
        cols = []
        for i in range(num_cars):
            v = x[:, 4 * i + 3]
            z = _zeros_like_col(x)
            cols.extend([z, z, v * u[:, 2 * i], u[:, 2 * i + 1]])
        return de.stack(cols, axis=1)

    @_batched
    def actuation_pullback(x, w):
        cols = []
        for i in range(num_cars):
            v = x[:, 4 * i + 3]
            cols.extend([v * w[:, 4 * i + 2], w[:, 4 * i + 3]])
        return de.stack(cols, axis=1)

    @_batched
    def actuation(x):
        xv = np.asarray(x)
        g_mat = np.zeros((xv.shape[0], n_x, n_u))
        for i in range(num_cars):
            g_mat[:, 4 * i + 2, 2 * i] = xv[:, 4 * i + 3]
            g_mat[:, 4 * i + 3, 2 * i + 1] = 1.0
        return g_mat

    sigma_mat = np.zeros((n_x, n_x))
    for i in range(num_cars):
        sigma_mat[4 * i + 2, 4 * i + 2] = sigma
        sigma_mat[4 * i + 3, 4 * i + 3] = sigma

    @_batched
    def diffusion(x):
        return np.broadcast_to(sigma_mat, (x.shape[0], n_x, n_x)).copy()

    return SystemModel(
        name=f"car2d_{num_cars}",
        n_x=n_x,
        n_u=n_u,
        n_w=n_x,
        drift=drift,
        actuation=actuation,
        diffusion=diffusion,
        apply_actuation=apply_actuation,
        actuation_pullback=actuation_pullback,
        params=p,
    )


def euler_maruyama_step(system: SystemModel, x, u, dt: float, dw):
    """One explicit step x + f dt + G u dt + S dw; shapes must match."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    single = not isinstance(x, de.Var) and np.asarray(x).ndim == 1
    xv = de.value_of(x)
    uv = de.value_of(u)
    dwv = np.asarray(dw, dtype=np.float64)
    if xv.shape[-1] != system.n_x or uv.shape[-1] != system.n_u or dwv.shape[-1] != system.n_w:
        raise ValueError(
            f"shape mismatch: state {xv.shape}, control {uv.shape}, noise {dwv.shape} "
            f"for system ({system.n_x}, {system.n_u}, {system.n_w})"
        )
    noise = dwv @ system.sigma_matrix().T
    out = x + system.drift(x) * dt + system.apply_actuation(x, u) * dt + noise
    if single and isinstance(out, np.ndarray) and out.ndim == 2:
        return out[0]
    return out


def sample_noise(stream: np.random.Generator, n_w: int, dt: float, size=None):
    """Brownian increments ~ Normal(0, dt) from an explicit seeded stream."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    shape = (n_w,) if size is None else tuple(np.atleast_1d(size)) + (n_w,)
    return stream.normal(0.0, np.sqrt(dt), size=shape)
