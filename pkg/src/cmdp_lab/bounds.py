"""Lipschitz constants and perturbation bounds on finite CMDPs.

Everything is measured under the discrete metric on states and actions, so
the diameter of the state space is 1, ``W1 = TV / 2`` and every table is
Lipschitz with a constant obtained by exhaustive pairwise maxima.

Two transition conventions coexist. The Q-stability bound views a kernel as
a map into probability measures with the Wasserstein-1 distance; the
linearisation bound views it as a map into signed measures with the
total-variation norm. `LipschitzReport` reports both.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import BoundViolated, PremiseViolated
from .measures import w1_discrete
from .tabular import (
    TabularCMDP,
    build_cebe_tabular,
    expected_reward,
    policy_eval_exact,
    verify_policy_transfer,
)

SEGMENT_POINTS = 1000
GRID_SAFETY = 1.01


@dataclass
class LipschitzReport:
    L_T: float  # kernel into signed measures, TV norm
    L_T_w1: float  # kernel into probability measures, W1
    L_pi: float
    R_sup: float
    R_lip: float
    diam_S: float = 1.0
    d2T_sup: float = 0.0
    d2R_sup: float = 0.0


def _pairwise_max(rows, dist):
    """``max_{i != j} dist(rows[i], rows[j])``; 0 for a single row."""
    rows = np.asarray(rows, dtype=float)
    if rows.shape[0] < 2:
        return 0.0
    d = dist(rows[:, None, :], rows[None, :, :])
    return float(np.max(d))


def kernel_lipschitz_tv(T):
    """Largest TV distance between kernel rows of distinct ``(s, a)`` pairs."""
    T = np.asarray(T, dtype=float)
    rows = T.reshape(-1, T.shape[-1])
    return _pairwise_max(rows, lambda x, y: np.abs(x - y).sum(axis=-1))


def policy_lipschitz(pi):
    """Largest W1 distance between action distributions of distinct states."""
    return _pairwise_max(pi, w1_discrete)


def reward_lipschitz(R):
    """``(sup |R|, ||R||_lip)`` for an expected-reward table on ``S x A``."""
    R = np.asarray(R, dtype=float)
    sup = float(np.max(np.abs(R)))
    return sup, max(sup, float(np.max(R) - np.min(R)))


def lipschitz_constants(T, R, pi, d2T_sup=0.0, d2R_sup=0.0):
    T = np.asarray(T, dtype=float)
    r = expected_reward(T, R)
    L_T = kernel_lipschitz_tv(T)
    R_sup, R_lip = reward_lipschitz(r)
    return LipschitzReport(
        L_T=L_T,
        L_T_w1=0.5 * L_T,
        L_pi=policy_lipschitz(pi),
        R_sup=R_sup,
        R_lip=R_lip,
        diam_S=1.0,
        d2T_sup=float(d2T_sup),
        d2R_sup=float(d2R_sup),
    )


# --- bound formulas -------------------------------------------------------------


def theorem1_bound(delta_R, delta_T, gamma, L_pi, L_T2, R2_lip, L_T_max=None):
    """Sup-norm gap between the Q-functions of two MDPs under one policy.

    ``delta_T`` and the kernel constants are in the Wasserstein-1
    convention. `L_T_max` is ``max(L_T1, L_T2)`` for the premise check and
    defaults to `L_T2`.
    """
    L_T_max = L_T2 if L_T_max is None else L_T_max
    if not 0.0 < gamma < 1.0:
        raise PremiseViolated(f"gamma must lie in (0, 1), got {gamma}")
    if gamma * L_T_max * (1.0 + L_pi) >= 1.0:
        raise PremiseViolated(
            f"gamma = {gamma} is not below 1 / (L_T (1 + L_pi)) = "
            f"{1.0 / (L_T_max * (1.0 + L_pi)):.6g}"
        )
    denom = 1.0 - gamma * max(1.0, L_T2 * (1.0 + L_pi))
    return (delta_R + gamma * (1.0 + L_pi) * delta_T * R2_lip / denom) / (1.0 - gamma)


def theorem3_bound(
    dc_norm, gamma, L_pi, L_T, R_lip_full, d2T_sup, d2R_sup, diam_S=1.0, L_dT=0.0
):
    """Q-gap bound for the projected linearisation of a stochastic family.

    `L_T` and `L_dT` are total-variation Lipschitz constants of the kernel
    and of its context derivative. When ``d2T_sup == 0`` the linearised
    kernel is exact, the transition term vanishes and the bound
    ``dc^2 d2R_sup / (1 - gamma)`` holds for every ``gamma < 1``, so the
    discount premise is not checked.
    """
    if not 0.0 < gamma < 1.0:
        raise PremiseViolated(f"gamma must lie in (0, 1), got {gamma}")
    if d2T_sup == 0.0:
        return dc_norm**2 * d2R_sup / (1.0 - gamma)
    if 2.0 * d2T_sup * dc_norm**2 >= 1.0:
        raise PremiseViolated(
            f"|dc| = {dc_norm} is not below (2 ||d2T||)^-1/2 = {(2 * d2T_sup) ** -0.5:.6g}"
        )
    lip = 4.0 * diam_S * (L_T + dc_norm * L_dT) * (1.0 + L_pi)
    if gamma * lip >= 1.0:
        raise PremiseViolated(f"gamma = {gamma} is not below {1.0 / lip:.6g}")
    denom = 1.0 - gamma * max(1.0, diam_S * L_T * (1.0 + L_pi))
    trans = 3.0 * gamma * diam_S * (1.0 + L_pi) * R_lip_full * d2T_sup / denom
    return dc_norm**2 * (d2R_sup + trans) / (1.0 - gamma)


# --- segment sup-norms ----------------------------------------------------------


def segment_contexts(c0, c, n=SEGMENT_POINTS):
    c0 = np.atleast_1d(np.asarray(c0, dtype=float))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    t = np.linspace(0.0, 1.0, n)
    return c0[None, :] + t[:, None] * (c - c0)[None, :]


def _operator_norm(d2, k):
    """Bilinear sup over unit directions, collapsed to a scalar per entry.

    For a scalar context this is just ``|d2|``; for vector contexts the
    Frobenius norm over the trailing ``(k, k)`` block is an upper bound.
    """
    if k == 1:
        return np.abs(d2[..., 0, 0])
    return np.sqrt(np.sum(d2**2, axis=(-2, -1)))


def second_derivative_sups(mdp, c, n=SEGMENT_POINTS):
    """``(sup ||d2T||_TV, sup |d2R|)`` on a dense grid between ``c0`` and `c`."""
    if mdp.d2T_at is None or mdp.d2R_at is None:
        return mdp.d2T_bound, mdp.d2R_bound
    k = mdp.context_dim
    d2T = d2R = 0.0
    for cc in segment_contexts(mdp.c0, c, n):
        d2T = max(d2T, float(np.max(_operator_norm(mdp.d2T_at(cc), k).sum(axis=-1))))
        d2R = max(d2R, float(np.max(_operator_norm(mdp.d2R_at(cc), k))))
    return d2T, d2R


def cliffwalker_reduced_bound(mdp, c, n=SEGMENT_POINTS):
    """Affine-kernel reduction ``|dc|^2 sup|d2R| / (1 - gamma)`` along the segment."""
    dc = np.linalg.norm(mdp.context(c) - mdp.c0)
    d2T, d2R = second_derivative_sups(mdp, c, n)
    return theorem3_bound(dc, mdp.gamma, 0.0, 0.0, 0.0, d2T, d2R)


# --- random instances -------------------------------------------------------------


def _dirichlet_rows(rng, shape, n):
    return rng.dirichlet(np.ones(n), size=shape)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def random_cmdp(rng, n_states, n_actions, gamma, c0=0.0, logit_scale=1.0, context_scale=1.0):
    """Random smooth family ``T^c = softmax(Z + c B)``, ``R^c = A sin(w c + phi)``.

    The context is scalar. Rewards depend on ``(s, a)`` only and lie in
    ``[-1, 1]``. Every derivative is analytic.
    """
    Z = logit_scale * rng.standard_normal((n_states, n_actions, n_states))
    B = context_scale * rng.standard_normal((n_states, n_actions, n_states))
    amp = rng.uniform(0.0, 1.0, (n_states, n_actions))
    freq = rng.uniform(0.5, 3.0, (n_states, n_actions))
    phase = rng.uniform(0.0, 2.0 * np.pi, (n_states, n_actions))

    def scalar(c):
        return float(np.squeeze(c))

    def T_at(c):
        return _softmax(Z + scalar(c) * B)

    def dT_at(c):
        p = T_at(c)
        mean = np.sum(p * B, axis=-1, keepdims=True)
        return (p * (B - mean))[..., None]

    def d2T_at(c):
        p = T_at(c)
        mean = np.sum(p * B, axis=-1, keepdims=True)
        var = np.sum(p * (B - mean) ** 2, axis=-1, keepdims=True)
        return (p * (B - mean) ** 2 - p * var)[..., None, None]

    def per_transition(table):
        return np.broadcast_to(table[..., None], (n_states, n_actions, n_states)).copy()

    def R_at(c):
        return per_transition(amp * np.sin(freq * scalar(c) + phase))

    def dR_at(c):
        return per_transition(amp * freq * np.cos(freq * scalar(c) + phase))[..., None]

    def d2R_at(c):
        return per_transition(-amp * freq**2 * np.sin(freq * scalar(c) + phase))[..., None, None]

    c0 = np.atleast_1d(float(c0))
    return TabularCMDP(
        n_states=n_states,
        n_actions=n_actions,
        c0=c0,
        transition_at=T_at,
        reward_at=R_at,
        dT=dT_at(c0),
        dR=dR_at(c0),
        gamma=gamma,
        d2T_bound=float(np.max(np.abs(d2T_at(c0)[..., 0, 0]).sum(axis=-1))),
        d2R_bound=float(np.max(np.abs(d2R_at(c0)))),
        dT_at=dT_at,
        dR_at=dR_at,
        d2T_at=d2T_at,
        d2R_at=d2R_at,
        info={"name": "random_softmax"},
    )


def random_policy(rng, n_states, n_actions):
    return _dirichlet_rows(rng, n_states, n_actions)


# --- certification harnesses ----------------------------------------------------


def _trial_rng(seed, counter):
    return np.random.default_rng([seed, counter])


def theorem1_trial(rng, n_states, n_actions, gamma_range=(0.05, 0.99), identical=False):
    """One random pair of MDPs sharing a policy; returns the ingredients."""
    T1 = _dirichlet_rows(rng, (n_states, n_actions), n_states)
    R1 = rng.uniform(-1.0, 1.0, (n_states, n_actions))
    if identical:
        T2, R2 = T1.copy(), R1.copy()
    else:
        eta_T = rng.uniform(0.0, 0.5)
        eta_R = rng.uniform(0.0, 0.5)
        T2 = (1.0 - eta_T) * T1 + eta_T * _dirichlet_rows(rng, (n_states, n_actions), n_states)
        R2 = np.clip(R1 + eta_R * rng.uniform(-1.0, 1.0, R1.shape), -1.0, 1.0)
    pi = random_policy(rng, n_states, n_actions)
    gamma = rng.uniform(*gamma_range)
    return T1, R1, T2, R2, pi, gamma


def evaluate_theorem1(T1, R1, T2, R2, pi, gamma):
    """``(error, bound)`` for one pair; raises `PremiseViolated` when it does not apply."""
    L_T1 = 0.5 * kernel_lipschitz_tv(T1)
    L_T2 = 0.5 * kernel_lipschitz_tv(T2)
    L_pi = policy_lipschitz(pi)
    delta_R = float(np.max(np.abs(R1 - R2)))
    delta_T = float(np.max(w1_discrete(T1, T2)))
    _, R2_lip = reward_lipschitz(R2)
    bound = theorem1_bound(delta_R, delta_T, gamma, L_pi, L_T2, R2_lip, max(L_T1, L_T2))
    Q1 = policy_eval_exact(T1, R1, pi, gamma)
    Q2 = policy_eval_exact(T2, R2, pi, gamma)
    return float(np.max(np.abs(Q1 - Q2))), float(bound)


def _within(error, bound, factor=1.0):
    return error <= factor * bound * (1.0 + 1e-12) + 1e-12


def _report(trials, passed, discarded, ratios, seed, worst):
    return {
        "trials": trials,
        "passed": passed,
        "discarded_premise": discarded,
        "min_slack_ratio": float(min(ratios)) if ratios else None,
        "seed": seed,
        "worst": worst,
    }


def certify_theorem1(n_trials=200, n_states=5, n_actions=3, seed=0, gamma_range=(0.05, 0.99),
                     max_attempts=None):
    """Random certification of the Q-stability bound.

    Draws pairs until `n_trials` satisfy the discount premise (attempt `i`
    uses the RNG stream ``(seed, i)``). Raises `BoundViolated` carrying the
    offending trial if any measured gap exceeds the bound.
    """
    max_attempts = max_attempts or 50 * max(n_trials, 1)
    trials = passed = discarded = 0
    ratios, worst = [], None
    attempt = 0
    while trials < n_trials and attempt < max_attempts:
        rng = _trial_rng(seed, attempt)
        T1, R1, T2, R2, pi, gamma = theorem1_trial(rng, n_states, n_actions, gamma_range)
        attempt += 1
        try:
            error, bound = evaluate_theorem1(T1, R1, T2, R2, pi, gamma)
        except PremiseViolated:
            discarded += 1
            continue
        trials += 1
        if not _within(error, bound):
            raise BoundViolated(
                f"theorem-1 bound violated in attempt {attempt - 1}: {error} > {bound}",
                details={
                    "attempt": attempt - 1,
                    "seed": seed,
                    "error": error,
                    "bound": bound,
                    "gamma": gamma,
                    "T1": T1.tolist(),
                    "T2": T2.tolist(),
                    "R1": R1.tolist(),
                    "R2": R2.tolist(),
                    "pi": pi.tolist(),
                },
            )
        passed += 1
        if error > 0:
            ratio = bound / error
            ratios.append(ratio)
            if worst is None or ratio < worst["slack_ratio"]:
                worst = {"attempt": attempt - 1, "error": error, "bound": bound,
                         "slack_ratio": ratio}
    return _report(trials, passed, discarded, ratios, seed, worst)


def _segment_constants(mdp, contexts):
    """Sup-norms and Lipschitz constants of the family over `contexts`.

    The state-action-context Lipschitz constant of a table is the pairwise
    ``(s, a)`` constant plus the sup of its context derivative.
    """
    k = mdp.context_dim
    L_sa_T = L_c_T = L_sa_dT = d2T = 0.0
    R_sup = L_sa_R = dR_sup = d2R = 0.0
    for cc in contexts:
        T = mdp.transition_at(cc)
        dT = mdp.dT_at(cc)
        r = expected_reward(T, mdp.reward_at(cc))
        L_sa_T = max(L_sa_T, kernel_lipschitz_tv(T))
        L_c_T = max(L_c_T, float(np.max(np.linalg.norm(dT, axis=-1).sum(axis=-1))))
        L_sa_dT = max(L_sa_dT, kernel_lipschitz_tv(np.linalg.norm(dT, axis=-1)))
        d2T = max(d2T, float(np.max(_operator_norm(mdp.d2T_at(cc), k).sum(axis=-1))))
        R_sup = max(R_sup, float(np.max(np.abs(r))))
        L_sa_R = max(L_sa_R, float(np.max(r) - np.min(r)))
        dr = expected_reward(T, np.linalg.norm(mdp.dR_at(cc), axis=-1))
        dR_sup = max(dR_sup, float(np.max(np.abs(dr))))
        d2R = max(d2R, float(np.max(_operator_norm(mdp.d2R_at(cc), k))))
    return {
        "L_T": L_sa_T + L_c_T,
        "L_dT": L_sa_dT + d2T,
        "R_lip_full": max(R_sup, L_sa_R + dR_sup),
        "d2T_sup": d2T,
        "d2R_sup": d2R,
    }


def _theorem3_from_constants(dc, gamma, L_pi, k):
    return theorem3_bound(dc, gamma, L_pi, k["L_T"], k["R_lip_full"], k["d2T_sup"],
                          k["d2R_sup"], 1.0, k["L_dT"])


def theorem3_measurement(mdp, c, pi, n=SEGMENT_POINTS, prescreen=37):
    """Measured CEBE gap and the linearisation bound at context `c`.

    Constants come from a dense grid on the segment from ``c0`` to `c`.
    A sub-grid is checked first: its constants can only be smaller, so a
    premise failure there is a failure on the full grid too.
    """
    c = mdp.context(c)
    dc = float(np.linalg.norm(c - mdp.c0))
    L_pi = policy_lipschitz(pi)
    grid = segment_contexts(mdp.c0, c, n)
    if prescreen and prescreen > 1:
        _theorem3_from_constants(dc, mdp.gamma, L_pi, _segment_constants(mdp, grid[::prescreen]))
    bound = _theorem3_from_constants(dc, mdp.gamma, L_pi, _segment_constants(mdp, grid))
    T_true, R_true = mdp.tables_at(c)
    T_ce, R_ce = build_cebe_tabular(mdp, c)
    gap = np.max(np.abs(policy_eval_exact(T_ce, R_ce, pi, mdp.gamma)
                        - policy_eval_exact(T_true, R_true, pi, mdp.gamma)))
    return float(gap), float(bound)


def certify_theorem3(n_trials=200, n_states=5, n_actions=3, seed=0, gamma_range=(0.01, 0.1),
                     max_dc=0.5, max_attempts=None):
    """Random certification of the linearisation bound on smooth random families."""
    max_attempts = max_attempts or 50 * max(n_trials, 1)
    trials = passed = discarded = 0
    ratios, worst = [], None
    attempt = 0
    while trials < n_trials and attempt < max_attempts:
        rng = _trial_rng(seed, attempt)
        attempt += 1
        gamma = rng.uniform(*gamma_range)
        mdp = random_cmdp(
            rng, n_states, n_actions, gamma,
            logit_scale=rng.uniform(0.0, 1.0), context_scale=rng.uniform(0.1, 2.0),
        )
        pi = random_policy(rng, n_states, n_actions)
        dc = rng.uniform(-max_dc, max_dc)
        try:
            error, bound = theorem3_measurement(mdp, mdp.c0 + dc, pi)
        except PremiseViolated:
            discarded += 1
            continue
        trials += 1
        if not _within(error, bound, GRID_SAFETY):
            raise BoundViolated(
                f"theorem-3 bound violated in attempt {attempt - 1}: {error} > {bound}",
                details={"attempt": attempt - 1, "seed": seed, "error": error,
                         "bound": bound, "gamma": gamma, "dc": dc},
            )
        passed += 1
        if error > 0:
            ratio = bound / error
            ratios.append(ratio)
            if worst is None or ratio < worst["slack_ratio"]:
                worst = {"attempt": attempt - 1, "error": error, "bound": bound,
                         "slack_ratio": ratio}
    return _report(trials, passed, discarded, ratios, seed, worst)


def certify_policy_transfer(n_mdps=50, n_states=5, n_actions=3, seed=0, n_contexts=5,
                            max_dc=0.3, tol=1e-9):
    """Run the policy-transfer check on random smooth families."""
    checked = 0
    max_ratio = 0.0
    for i in range(n_mdps):
        rng = _trial_rng(seed, i)
        mdp = random_cmdp(rng, n_states, n_actions, rng.uniform(0.5, 0.95),
                          logit_scale=rng.uniform(0.0, 2.0), context_scale=rng.uniform(0.1, 2.0))
        grid = mdp.c0 + np.linspace(-max_dc, max_dc, n_contexts)[:, None]
        for rec in verify_policy_transfer(mdp, grid, tol):
            checked += 1
            if rec.bound > 0:
                max_ratio = max(max_ratio, rec.gap / rec.bound)
    return {"mdps": n_mdps, "contexts_checked": checked, "passed": checked,
            "max_gap_to_bound": max_ratio, "seed": seed}


def report_dict(report):
    return asdict(report) if hasattr(report, "__dataclass_fields__") else dict(report)
