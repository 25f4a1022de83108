"""Deterministic control environments that report context sensitivities.

Each environment is a stateless object exposing pure functions:

``transition(s, a, c)``
    next state.
``reward(s, a, s_next, c)``
    scalar reward, a function of the next state so that ``dR/ds'`` exists.
``step(s, a, c)``
    both of the above plus the Jacobians needed for sample enhancement,
    returned as an `EnvStepResult`.

Sensitivities are per step: the state sensitivity is zero at the start of
the step, so ``dTdc`` measures only how this one transition moves with the
context.
"""

from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import ContextOutOfRange, InvalidContext, UnreachableGoal


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    context_dim: int
    horizon: int
    gamma: float
    train_context: tuple
    action_low: tuple
    action_high: tuple


@dataclass(frozen=True)
class EnvStepResult:
    next_state: np.ndarray
    reward: float
    terminated: bool
    dTdc: np.ndarray  # (state_dim, context_dim)
    dRdc: np.ndarray  # (context_dim,), partial at fixed next state
    dRds_next: np.ndarray  # (state_dim,)


# --- SimpleDirection ----------------------------------------------------------


class SimpleDirection:
    """``s' = s + a + c`` and ``r = s' . c`` on the plane.

    Actions and contexts live in ``[-1, 1]^2``; actions are clipped, contexts
    outside the box raise `ContextOutOfRange`.
    """

    spec = EnvSpec(
        name="simpledir",
        state_dim=2,
        action_dim=2,
        context_dim=2,
        horizon=10,
        gamma=0.9,
        train_context=(0.0, 0.0),
        action_low=(-1.0, -1.0),
        action_high=(1.0, 1.0),
    )

    def check_context(self, c):
        c = np.asarray(c, dtype=float)
        if c.shape != (2,):
            raise ContextOutOfRange(f"context must have shape (2,), got {c.shape}")
        if np.any(np.abs(c) > 1.0) or not np.all(np.isfinite(c)):
            raise ContextOutOfRange(f"context {c.tolist()} outside [-1, 1]^2")
        return c

    def clip_action(self, a):
        return np.clip(np.asarray(a, dtype=float), -1.0, 1.0)

    def reset(self, rng, size=None):
        return rng.uniform(-1.0, 1.0, size=2 if size is None else (size, 2))

    def transition(self, s, a, c):
        c = self.check_context(c)
        return np.asarray(s, dtype=float) + self.clip_action(a) + c

    def reward(self, s, a, s_next, c):
        r = np.asarray(s_next, dtype=float) @ np.asarray(c, dtype=float)
        return float(r) if r.ndim == 0 else r

    def step(self, s, a, c):
        c = self.check_context(c)
        s_next = self.transition(s, a, c)
        return EnvStepResult(
            next_state=s_next,
            reward=self.reward(s, a, s_next, c),
            terminated=False,
            dTdc=np.eye(2),
            dRdc=s_next.copy(),
            dRds_next=c.copy(),
        )


def simpledirection_step(s, a, c):
    return SimpleDirection().step(s, a, c)


def simpledirection_optimal_return(horizon, c):
    """Expected undiscounted return of ``a = sign(c)`` from a symmetric start.

    ``binom(H + 1, 2) * (||c||_1 + ||c||_2^2)``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    c = np.asarray(c, dtype=float)
    return comb(horizon + 1, 2) * (np.abs(c).sum() + np.dot(c, c))


def simpledirection_returns(policy, c, horizon, n_episodes, rng):
    """Undiscounted returns of `n_episodes` rollouts simulated as one batch.

    `policy` maps a ``(n, 2)`` array of states to a ``(n, 2)`` array of actions.
    """
    env = SimpleDirection()
    c = env.check_context(c)
    s = env.reset(rng, size=n_episodes)
    totals = np.zeros(n_episodes)
    for _ in range(horizon):
        s_next = env.transition(s, policy(s), c)
        totals += env.reward(s, None, s_next, c)
        s = s_next
    return totals


# --- PendulumGoal ---------------------------------------------------------------

_CONTEXT_NAMES = ("g", "m", "l", "tau")


def pendulum_goal_angle(tau, m, g, l):
    """Equilibrium angle holding torque `tau`: ``arcsin(-2 tau / (m g l))``."""
    mgl = m * g * l
    if mgl <= 0:
        raise InvalidContext("m * g * l must be positive")
    x = -2.0 * tau / mgl
    if abs(x) > 1.0:
        raise UnreachableGoal(f"|2 tau| = {abs(2 * tau)} exceeds m g l = {mgl}")
    return float(np.arcsin(x))


def _goal_angle_gradient(g, m, l, tau):
    """d theta_goal / d(g, m, l, tau)."""
    mgl = m * g * l
    root = np.sqrt(1.0 - (2.0 * tau / mgl) ** 2)
    return np.array(
        [
            2.0 * tau / (m * g**2 * l * root),
            2.0 * tau / (m**2 * g * l * root),
            2.0 * tau / (m * g * l**2 * root),
            -2.0 / (mgl * root),
        ]
    )


class PendulumGoal:
    """Torque-controlled pendulum whose goal angle is set by a holding torque.

    Context ``c = (g, m, l, tau)``; state ``(theta, theta_dot)`` with
    ``theta = 0`` upright and no angle wrapping or velocity clamping. One
    environment step is one explicit Euler step of length `dt` of the state
    together with its eight context sensitivities.

    The reward as usually written is a penalty (distance to the goal plus
    effort); with ``negate_reward=True`` (the default) it is returned with a
    minus sign so that return maximisers seek the goal.
    """

    def __init__(self, dt=0.02, u_max=2.0, negate_reward=True, horizon=200, gamma=0.99):
        self.dt = dt
        self.u_max = u_max
        self.negate_reward = negate_reward
        self.spec = EnvSpec(
            name="pendulumgoal",
            state_dim=2,
            action_dim=1,
            context_dim=4,
            horizon=horizon,
            gamma=gamma,
            train_context=(2.0, 1.0, 1.0, 0.0),
            action_low=(-u_max,),
            action_high=(u_max,),
        )

    @property
    def _sign(self):
        return -1.0 if self.negate_reward else 1.0

    def check_context(self, c):
        c = np.asarray(c, dtype=float)
        if c.shape != (4,) or not np.all(np.isfinite(c)):
            raise InvalidContext(f"context must be 4 finite numbers (g, m, l, tau), got {c}")
        g, m, l, tau = c
        if m <= 0 or l <= 0 or g <= 0:
            raise InvalidContext(f"g, m and l must be positive, got g={g}, m={m}, l={l}")
        if abs(tau) > 1.0:
            raise InvalidContext(f"goal torque {tau} outside [-1, 1]")
        pendulum_goal_angle(tau, m, g, l)
        return c

    def clip_action(self, a):
        return float(np.clip(np.squeeze(np.asarray(a, dtype=float)), -self.u_max, self.u_max))

    def reset(self, rng):
        return np.array([np.pi, 0.0]) + rng.uniform(-0.05, 0.05, size=2)

    def integrate(self, s, u, c, sens=None):
        """One explicit Euler step of the state and its sensitivities.

        `sens` is the (2, 4) sensitivity ``d(theta, theta_dot)/dc`` at the
        start of the step (zero if omitted). Returns ``(s_next, sens_next)``.
        """
        g, m, l, _ = c
        theta, phi = s
        u = self.clip_action(u)
        S = np.zeros((2, 4)) if sens is None else np.asarray(sens, dtype=float)
        s_theta, s_phi = S[0], S[1]
        sin, cos = np.sin(theta), np.cos(theta)

        accel = 1.5 * g / l * sin + 3.0 * u / (m * l**2)
        d_accel_dtheta = 1.5 * g / l * cos
        d_accel_dc = np.array(
            [
                1.5 / l * sin,
                -3.0 * u / (m**2 * l**2),
                -1.5 * g / l**2 * sin - 6.0 * u / (m * l**3),
                0.0,
            ]
        )
        dt = self.dt
        s_next = np.array([theta + dt * phi, phi + dt * accel])
        sens_next = np.vstack(
            [s_theta + dt * s_phi, s_phi + dt * (d_accel_dtheta * s_theta + d_accel_dc)]
        )
        return s_next, sens_next

    def transition(self, s, a, c):
        c = self.check_context(c)
        return self.integrate(np.asarray(s, dtype=float), a, c)[0]

    def reward(self, s, a, s_next, c):
        g, m, l, tau = c
        goal = pendulum_goal_angle(tau, m, g, l)
        u = self.clip_action(a)
        theta, phi = s_next
        cost = np.pi**2 * np.sin(0.5 * (goal - theta)) ** 2 + 0.1 * phi**2 + 0.001 * u**2
        return float(self._sign * cost)

    def reward_gradients(self, s_next, c):
        """``(dR/dc at fixed s', dR/ds')`` at the post-step state."""
        g, m, l, tau = c
        goal = pendulum_goal_angle(tau, m, g, l)
        theta, phi = s_next
        half = 0.5 * (goal - theta)
        sc = np.pi**2 * np.sin(half) * np.cos(half)
        dRdc = self._sign * sc * _goal_angle_gradient(g, m, l, tau)
        dRds = self._sign * np.array([-sc, 0.2 * phi])
        return dRdc, dRds

    def step(self, s, a, c, sens=None):
        c = self.check_context(c)
        s_next, sens_next = self.integrate(np.asarray(s, dtype=float), a, c, sens)
        dRdc, dRds = self.reward_gradients(s_next, c)
        return EnvStepResult(
            next_state=s_next,
            reward=self.reward(s, a, s_next, c),
            terminated=False,
            dTdc=sens_next,
            dRdc=dRdc,
            dRds_next=dRds,
        )


def pendulum_step(state, u, c, dt=0.02, u_max=2.0, negate_reward=True):
    return PendulumGoal(dt=dt, u_max=u_max, negate_reward=negate_reward).step(state, u, c)


def pendulum_rollout(env, s0, actions, c):
    """Roll out a torque sequence, carrying sensitivities across steps.

    Returns ``(final_state, d final_state / dc)``. Carrying the sensitivity
    through explicit Euler steps equals the chain rule applied to the
    discrete map, so this is the exact derivative of the simulated rollout.
    """
    c = env.check_context(c)
    s = np.asarray(s0, dtype=float)
    sens = np.zeros((2, 4))
    for u in actions:
        s, sens = env.integrate(s, u, c, sens)
    return s, sens


# --- finite differences -------------------------------------------------------


def _central(f, x, h):
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def finite_diff_sensitivity(env, s, a, c, h=1e-5):
    """Central-difference estimates of ``(dTdc, dRdc, dRds_next)`` for one step."""
    if h <= 0:
        raise ValueError("step size h must be positive")
    c = np.asarray(c, dtype=float)
    try:
        for k in range(c.size):
            e = np.zeros_like(c)
            e[k] = h
            env.check_context(c + e)
            env.check_context(c - e)
    except InvalidContext as exc:
        raise ContextOutOfRange(f"c +/- h leaves the context region: {exc}") from exc
    s_next = env.transition(s, a, c)
    dTdc = _central(lambda cc: env.transition(s, a, cc), c, h)
    dRdc = _central(lambda cc: env.reward(s, a, s_next, cc), c, h)
    dRds = _central(lambda ss: env.reward(s, a, ss, c), s_next, h)
    return dTdc, dRdc, dRds


def relative_error(analytic, reference, floor=1e-6):
    """``max|analytic - reference| / max(max|reference|, floor)``."""
    analytic = np.asarray(analytic, dtype=float)
    reference = np.asarray(reference, dtype=float)
    return float(np.max(np.abs(analytic - reference)) / max(np.max(np.abs(reference)), floor))


def random_pendulum_trial(rng, steps=50, u_max=2.0):
    """Random ``(state, context, torque sequence)`` inside the valid region."""
    g = rng.uniform(1.0, 12.0)
    m = rng.uniform(0.5, 2.0)
    l = rng.uniform(0.5, 2.0)
    tau_max = min(1.0, 0.45 * m * g * l)
    tau = rng.uniform(-tau_max, tau_max)
    s0 = np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0)])
    actions = rng.uniform(-u_max, u_max, size=steps)
    return s0, np.array([g, m, l, tau]), actions


def pendulum_gradcheck(n_trials=100, steps=50, h=1e-5, seed=0, dt=0.02):
    """Compare carried sensitivities of random rollouts against finite differences.

    Trial 0 is the upright equilibrium with zero torque. Returns a dict with
    ``max_rel_error``, ``mean_rel_error``, ``trials`` and the worst trial.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    env = PendulumGoal(dt=dt)
    rng = np.random.default_rng(seed)
    errors = []
    worst = None
    for i in range(n_trials):
        if i == 0:
            s0, c, actions = np.zeros(2), np.array([2.0, 1.0, 1.0, 0.0]), np.zeros(steps)
        else:
            s0, c, actions = random_pendulum_trial(rng, steps, env.u_max)
        _, sens = pendulum_rollout(env, s0, actions, c)
        fd = _central(lambda cc: pendulum_rollout(env, s0, actions, cc)[0], c, h)
        err = relative_error(sens, fd)
        if worst is None or err > worst["rel_error"]:
            worst = {
                "trial": i,
                "rel_error": err,
                "state": s0.tolist(),
                "context": c.tolist(),
            }
        errors.append(err)
    return {
        "max_rel_error": float(np.max(errors)) if errors else 0.0,
        "mean_rel_error": float(np.mean(errors)) if errors else 0.0,
        "trials": n_trials,
        "worst": worst,
    }


def make_env(name, **kwargs):
    if name in ("simpledir", "simpledirection", "SimpleDirection"):
        return SimpleDirection()
    if name in ("pendulum", "pendulumgoal", "PendulumGoal"):
        return PendulumGoal(**kwargs)
    raise ValueError(f"unknown environment {name!r}")
