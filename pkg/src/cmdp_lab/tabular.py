"""Finite contextual MDPs, exact Bellman solvers and the tabular CEBE.

Arrays follow one layout throughout:

* transition tables ``T[s, a, s']``, each ``T[s, a]`` a probability vector;
* rewards either per transition ``R[s, a, s']`` or expected ``R[s, a]``;
* policies ``pi[s, a]`` with rows on the simplex;
* Q-functions ``Q[s, a]``;
* context derivatives carry a trailing context axis, ``dT[s, a, s', k]``.

Contexts are 1-D float arrays even when the family has a single parameter.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .errors import (
    BoundViolated,
    DimensionMismatch,
    InvalidContext,
    PerturbationTooLarge,
    SingularSystem,
    ZeroPositivePart,
)
from .measures import project_simplex

RESIDUAL_TOL = 1e-10


@dataclass
class TabularCMDP:
    """A context-parameterised finite MDP around a base context ``c0``.

    ``transition_at`` and ``reward_at`` evaluate the true family at any
    admissible context; ``dT``/``dR`` are the first context derivatives at
    ``c0``. The optional ``dT_at``/``dR_at`` (``[..., k]``) and
    ``d2T_at``/``d2R_at`` (``[..., k, k]``) evaluate derivatives anywhere;
    they are used to take sup-norms along a context segment.
    """

    n_states: int
    n_actions: int
    c0: np.ndarray
    transition_at: Callable[[np.ndarray], np.ndarray]
    reward_at: Callable[[np.ndarray], np.ndarray]
    dT: np.ndarray
    dR: np.ndarray
    gamma: float
    terminal_mask: np.ndarray = None
    d2T_bound: float = 0.0
    d2R_bound: float = 0.0
    dT_at: Optional[Callable[[np.ndarray], np.ndarray]] = None
    dR_at: Optional[Callable[[np.ndarray], np.ndarray]] = None
    d2T_at: Optional[Callable[[np.ndarray], np.ndarray]] = None
    d2R_at: Optional[Callable[[np.ndarray], np.ndarray]] = None
    start_distribution: np.ndarray = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.c0 = np.atleast_1d(np.asarray(self.c0, dtype=float))
        if self.terminal_mask is None:
            self.terminal_mask = np.zeros(self.n_states, dtype=bool)
        if self.start_distribution is None:
            self.start_distribution = np.full(self.n_states, 1.0 / self.n_states)
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")

    @property
    def context_dim(self):
        return self.c0.shape[0]

    def context(self, c):
        c = np.atleast_1d(np.asarray(c, dtype=float))
        if c.shape != self.c0.shape:
            raise DimensionMismatch(f"context has shape {c.shape}, expected {self.c0.shape}")
        return c

    def tables_at(self, c):
        """True ``(T, R)`` at context `c`."""
        c = self.context(c)
        return self.transition_at(c), self.reward_at(c)


# --- Bellman machinery -------------------------------------------------------


def expected_reward(T, R):
    """Collapse a per-transition reward ``R[s, a, s']`` to ``R[s, a]``."""
    R = np.asarray(R, dtype=float)
    if R.ndim == 2:
        return R
    return np.einsum("ijk,ijk->ij", T, R)


def _check_shapes(T, pi, Q=None):
    T = np.asarray(T, dtype=float)
    pi = np.asarray(pi, dtype=float)
    if T.ndim != 3 or T.shape[0] != T.shape[2]:
        raise DimensionMismatch(f"transition table must be (S, A, S), got {T.shape}")
    if pi.shape != T.shape[:2]:
        raise DimensionMismatch(f"policy shape {pi.shape} does not match table {T.shape[:2]}")
    if Q is not None and np.shape(Q) != T.shape[:2]:
        raise DimensionMismatch(f"Q shape {np.shape(Q)} does not match table {T.shape[:2]}")
    return T, pi


def apply_bellman_operator(T, pi, Q):
    """``(AQ)[s, a] = sum_s' T[s, a, s'] sum_a' pi(a'|s') Q[s', a']``."""
    T, pi = _check_shapes(T, pi, Q)
    v = np.einsum("ij,ij->i", pi, Q)
    return T @ v


def policy_eval_exact(T, R, pi, gamma):
    """Solve ``Q = R + gamma A Q`` with one dense LU solve."""
    if not 0.0 < gamma < 1.0:
        raise SingularSystem(f"gamma must lie in (0, 1), got {gamma}")
    T, pi = _check_shapes(T, pi)
    r = expected_reward(T, R)
    n_s, n_a = r.shape
    # M[(s,a), (s',a')] = T[s,a,s'] pi[s',a']
    M = (T[:, :, :, None] * pi[None, None, :, :]).reshape(n_s * n_a, n_s * n_a)
    lhs = np.eye(n_s * n_a) - gamma * M
    try:
        q = np.linalg.solve(lhs, r.reshape(-1))
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    Q = q.reshape(n_s, n_a)
    residual = np.max(np.abs(Q - r - gamma * apply_bellman_operator(T, pi, Q)))
    scale = max(1.0, np.max(np.abs(Q)))
    if not np.isfinite(residual) or residual > RESIDUAL_TOL * scale:
        raise SingularSystem(f"policy evaluation residual {residual:.3e} too large")
    return Q


def greedy_policy(Q):
    """Deterministic greedy policy; ties go to the lowest action index."""
    Q = np.asarray(Q)
    pi = np.zeros_like(Q, dtype=float)
    pi[np.arange(Q.shape[0]), np.argmax(Q, axis=1)] = 1.0
    return pi


def epsilon_greedy(pi, epsilon):
    """Mix a policy with the uniform policy: ``(1 - eps) pi + eps / |A|``."""
    pi = np.asarray(pi, dtype=float)
    return (1.0 - epsilon) * pi + epsilon / pi.shape[1]


def uniform_policy(n_states, n_actions):
    return np.full((n_states, n_actions), 1.0 / n_actions)


def value_iteration(T, R, gamma, tol=1e-10, max_iter=100_000):
    """Optimal Q-function and its greedy policy.

    Plain value iteration until successive iterates differ by less than
    ``tol``; the greedy policy is then polished by exact policy iteration, so
    the returned Q is the exact value of the returned policy and its
    optimal-control residual is at solver precision.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    T = np.asarray(T, dtype=float)
    r = expected_reward(T, R)
    Q = np.zeros_like(r)
    for _ in range(max_iter):
        Q_next = r + gamma * (T @ Q.max(axis=1))
        delta = np.max(np.abs(Q_next - Q))
        Q = Q_next
        if delta <= tol:
            break
    pi = greedy_policy(Q)
    for _ in range(100):
        Q = policy_eval_exact(T, r, pi, gamma)
        improved = greedy_policy(Q)
        # keep the incumbent action unless the switch is a genuine improvement
        cur = np.argmax(pi, axis=1)
        best = np.argmax(improved, axis=1)
        rows = np.arange(Q.shape[0])
        gain = Q[rows, best] - Q[rows, cur]
        switch = gain > 1e-12 * max(1.0, np.max(np.abs(Q)))
        if not np.any(switch):
            break
        new = np.where(switch, best, cur)
        pi = np.zeros_like(pi)
        pi[rows, new] = 1.0
    # canonical tie-break: lowest index among actions tied to rounding
    scale = max(1.0, np.max(np.abs(Q)))
    tied = Q >= Q.max(axis=1, keepdims=True) - 1e-12 * scale
    canon = greedy_policy(tied.astype(float))
    if not np.array_equal(canon, pi):
        pi = canon
        Q = policy_eval_exact(T, r, pi, gamma)
    return Q, pi


def policy_return(T, R, pi, gamma, s0):
    """Expected discounted return ``sum_s s0(s) sum_a pi(a|s) Q[s, a]``."""
    Q = policy_eval_exact(T, R, pi, gamma)
    return float(np.einsum("i,ij,ij->", np.asarray(s0, dtype=float), pi, Q))


def mdp_policy_return(mdp, c, pi, s0=None):
    T, R = mdp.tables_at(c)
    s0 = mdp.start_distribution if s0 is None else s0
    return policy_return(T, R, pi, mdp.gamma, s0)


# --- context-enhanced Bellman equation --------------------------------------


def linearized_transitions(mdp, c):
    """``T^{c0} + dT . (c - c0)`` before projection (rows may go negative)."""
    dc = mdp.context(c) - mdp.c0
    T0 = mdp.transition_at(mdp.c0)
    return T0 + np.einsum("ijkl,l->ijk", mdp.dT, dc)


def build_cebe_tabular(mdp, c):
    """Transition and per-transition reward tables of the CEBE MDP at `c`."""
    c = mdp.context(c)
    dc = c - mdp.c0
    T0, R0 = mdp.tables_at(mdp.c0)
    if not np.any(dc):
        return T0.copy(), R0.copy()
    T_lin = T0 + np.einsum("ijkl,l->ijk", mdp.dT, dc)
    try:
        T_ce = project_simplex(T_lin)
    except ZeroPositivePart as exc:
        bad = np.argwhere(np.clip(T_lin, 0, None).sum(axis=-1) <= 0)
        raise PerturbationTooLarge(
            f"linearised kernel has no positive mass at (s, a) = {bad[0].tolist()} "
            f"for dc = {dc.tolist()}"
        ) from exc
    R_ce = R0 + np.einsum("ijkl,l->ijk", mdp.dR, dc)
    return T_ce, R_ce


# --- Cliffwalker --------------------------------------------------------------

ACTIONS = ("up", "right", "down", "left")
_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))


def _cliff_rewards(variant):
    """Return ``(value, first, second)`` derivative callables for cliff and goal."""
    variant = variant.upper()
    if variant == "A":
        cliff = (lambda c: -100.0 / c, lambda c: 100.0 / c**2, lambda c: -200.0 / c**3)
        goal = (lambda c: c**-2.0, lambda c: -2.0 * c**-3.0, lambda c: 6.0 * c**-4.0)
    elif variant == "B":
        cliff = (
            lambda c: -10.0 / (1.0 + c),
            lambda c: 10.0 / (1.0 + c) ** 2,
            lambda c: -20.0 / (1.0 + c) ** 3,
        )
        goal = (
            lambda c: (1.0 + c) ** -1.5,
            lambda c: -1.5 * (1.0 + c) ** -2.5,
            lambda c: 3.75 * (1.0 + c) ** -3.5,
        )
    else:
        raise ValueError(f"unknown reward variant {variant!r}; expected 'A' or 'B'")
    return cliff, goal


def build_cliffwalker(rows=5, cols=6, reward_variant="A", c=0.1, gamma=0.9):
    """Slippery cliff-walking grid as a `TabularCMDP` with base context `c`.

    The agent starts bottom-left, the goal is bottom-right and the cliff is
    the bottom row strictly between them. With probability ``1 - c`` the
    intended move happens (moves into a wall stay put); with probability
    ``c`` the agent lands on a uniformly chosen in-grid von Neumann
    neighbour. Cliff and goal are absorbing; their rewards are paid on the
    transition into them and everything else earns 0.
    """
    if rows < 2 or cols < 2:
        raise ValueError("the grid needs at least 2 rows and 2 columns")
    c = float(np.squeeze(c))
    if not 0.0 < c < 1.0:
        raise InvalidContext(f"slip probability must lie in (0, 1), got {c}")
    n = rows * cols

    def idx(r, k):
        return r * cols + k

    start = idx(rows - 1, 0)
    goal = idx(rows - 1, cols - 1)
    cliff = [idx(rows - 1, k) for k in range(1, cols - 1)]
    terminal = np.zeros(n, dtype=bool)
    terminal[cliff] = True
    terminal[goal] = True

    intended = np.zeros((n, 4, n))
    slip = np.zeros((n, 4, n))
    for r in range(rows):
        for k in range(cols):
            s = idx(r, k)
            if terminal[s]:
                intended[s, :, s] = 1.0
                slip[s, :, s] = 1.0
                continue
            nbrs = [
                idx(r + dr, k + dk)
                for dr, dk in _MOVES
                if 0 <= r + dr < rows and 0 <= k + dk < cols
            ]
            for a, (dr, dk) in enumerate(_MOVES):
                rr, kk = r + dr, k + dk
                target = idx(rr, kk) if (0 <= rr < rows and 0 <= kk < cols) else s
                intended[s, a, target] = 1.0
                slip[s, a, nbrs] = 1.0 / len(nbrs)

    # rewards live on transitions from live states into cliff / goal
    live = ~terminal
    cliff_mask = np.zeros((n, 4, n), dtype=bool)
    cliff_mask[np.ix_(live, np.ones(4, bool), np.isin(np.arange(n), cliff))] = True
    goal_mask = np.zeros((n, 4, n), dtype=bool)
    goal_mask[live, :, goal] = True
    (cliff_f, cliff_d1, cliff_d2), (goal_f, goal_d1, goal_d2) = _cliff_rewards(reward_variant)

    def check(cv):
        cv = float(np.squeeze(cv))
        if not 0.0 < cv < 1.0:
            raise InvalidContext(f"slip probability must lie in (0, 1), got {cv}")
        return cv

    def transition_at(cv):
        cv = check(cv)
        return (1.0 - cv) * intended + cv * slip

    def reward_table(cv, f_cliff, f_goal):
        R = np.zeros((n, 4, n))
        R[cliff_mask] = f_cliff(cv)
        R[goal_mask] = f_goal(cv)
        return R

    def reward_at(cv):
        return reward_table(check(cv), cliff_f, goal_f)

    def d2R_at(cv):
        return reward_table(check(cv), cliff_d2, goal_d2)[..., None, None]

    def d2T_at(cv):
        check(cv)
        return np.zeros((n, 4, n, 1, 1))

    def dT_at(cv):
        check(cv)
        return (slip - intended)[..., None]

    def dR_at(cv):
        return reward_table(check(cv), cliff_d1, goal_d1)[..., None]

    dT = dT_at(c)
    dR = dR_at(c)
    s0 = np.zeros(n)
    s0[start] = 1.0
    return TabularCMDP(
        n_states=n,
        n_actions=4,
        c0=np.array([c]),
        transition_at=transition_at,
        reward_at=reward_at,
        dT=dT,
        dR=dR,
        gamma=gamma,
        terminal_mask=terminal,
        d2T_bound=0.0,
        d2R_bound=float(max(abs(cliff_d2(c)), abs(goal_d2(c)))),
        dT_at=dT_at,
        dR_at=dR_at,
        d2T_at=d2T_at,
        d2R_at=d2R_at,
        start_distribution=s0,
        info={
            "name": "cliffwalker",
            "rows": rows,
            "cols": cols,
            "reward_variant": reward_variant.upper(),
            "start": start,
            "goal": goal,
            "cliff": cliff,
        },
    )


# --- experiments ------------------------------------------------------------


def default_eval_policy(mdp, epsilon=0.05):
    """Epsilon-greedy softening of the optimal policy at the base context."""
    T, R = mdp.tables_at(mdp.c0)
    _, pi = value_iteration(T, R, mdp.gamma)
    return epsilon_greedy(pi, epsilon)


def q_gap(mdp, c, pi=None, mode="policy_eval"):
    """``||Q_ce - Q_be||_inf`` at context `c` (both solved exactly)."""
    T, R = mdp.tables_at(c)
    T_ce, R_ce = build_cebe_tabular(mdp, c)
    if mode == "policy_eval":
        if pi is None:
            raise ValueError("policy_eval mode needs a policy")
        Q_be = policy_eval_exact(T, R, pi, mdp.gamma)
        Q_ce = policy_eval_exact(T_ce, R_ce, pi, mdp.gamma)
    elif mode == "control":
        Q_be, _ = value_iteration(T, R, mdp.gamma)
        Q_ce, _ = value_iteration(T_ce, R_ce, mdp.gamma)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(np.max(np.abs(Q_ce - Q_be)))


@dataclass
class ScalingResult:
    dc_norms: np.ndarray
    errors: np.ndarray
    slope: float
    intercept: float
    r_squared: float
    fit_points: int
    monotone: bool


def fit_loglog(x, y, fit_points=None):
    """Least-squares line through ``(log x, log y)`` on the smallest positive `x`.

    Returns ``(slope, intercept, r_squared, n_used)``; NaNs when fewer than
    two usable points remain.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0)
    order = np.argsort(x[keep], kind="stable")
    xs, ys = x[keep][order], y[keep][order]
    if fit_points is not None:
        xs, ys = xs[:fit_points], ys[:fit_points]
    if xs.size < 2:
        return float("nan"), float("nan"), float("nan"), int(xs.size)
    res = stats.linregress(np.log(xs), np.log(ys))
    return float(res.slope), float(res.intercept), float(res.rvalue**2), int(xs.size)


def scaling_perturbations(n_points=100, lo=1e-4, hi=1e-1, include_zero=False):
    """Log-spaced perturbation magnitudes, optionally preceded by 0."""
    grid = np.logspace(np.log10(lo), np.log10(hi), n_points) if n_points > 0 else np.empty(0)
    if include_zero:
        grid = np.concatenate([[0.0], grid])
    return grid


def error_scaling_experiment(mdp, perturbations, pi=None, mode="policy_eval", fit_points=10):
    """Measure ``||Q_ce - Q_be||_inf`` over perturbations and fit the log-log slope.

    `perturbations` holds context offsets ``dc`` (scalars for 1-D families).
    The fit uses the `fit_points` smallest nonzero ones.
    """
    if mode == "policy_eval" and pi is None:
        pi = default_eval_policy(mdp)
    dcs = [np.atleast_1d(np.asarray(d, dtype=float)) for d in perturbations]
    norms = np.array([np.linalg.norm(d) for d in dcs])
    errors = np.array([q_gap(mdp, mdp.c0 + d, pi, mode) for d in dcs])
    slope, intercept, r2, used = fit_loglog(norms, errors, fit_points)
    order = np.argsort(norms, kind="stable")
    sel = order[norms[order] > 0][: fit_points or None]
    monotone = bool(np.all(np.diff(errors[sel]) >= 0))
    return ScalingResult(norms, errors, slope, intercept, r2, used, monotone)


@dataclass
class TransferRecord:
    context: np.ndarray
    gap: float
    delta: float
    bound: float


def verify_policy_transfer(mdp, c_grid, tol=1e-9, s0=None):
    """Check ``J(pi_be) - J(pi_ce) <= 2 delta + tol`` at every context.

    ``pi_be`` and ``pi_ce`` are the greedy optimal policies of the true and
    CEBE MDPs; ``delta`` is the larger of the two policies' Q-gaps between
    the two MDPs. Raises `BoundViolated` on the first failure.
    """
    s0 = mdp.start_distribution if s0 is None else s0
    records = []
    for c in c_grid:
        c = mdp.context(c)
        T, R = mdp.tables_at(c)
        T_ce, R_ce = build_cebe_tabular(mdp, c)
        _, pi_be = value_iteration(T, R, mdp.gamma)
        _, pi_ce = value_iteration(T_ce, R_ce, mdp.gamma)
        delta = 0.0
        for pi in (pi_be, pi_ce):
            gap_q = policy_eval_exact(T_ce, R_ce, pi, mdp.gamma) - policy_eval_exact(
                T, R, pi, mdp.gamma
            )
            delta = max(delta, float(np.max(np.abs(gap_q))))
        gap = policy_return(T, R, pi_be, mdp.gamma, s0) - policy_return(T, R, pi_ce, mdp.gamma, s0)
        rec = TransferRecord(c, float(gap), delta, 2.0 * delta)
        records.append(rec)
        if gap > 2.0 * delta + tol:
            raise BoundViolated(
                f"policy transfer bound violated at c = {c.tolist()}: "
                f"gap {gap:.3e} > 2*{delta:.3e}",
                details={"context": c.tolist(), "gap": gap, "delta": delta},
            )
    return records
