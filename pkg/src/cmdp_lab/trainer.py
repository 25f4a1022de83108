"""Tabular Q-learning on a discretised SimpleDirection with three data modes.

* ``baseline`` collects and trains at the training context only.
* ``cse`` collects at the training context and, per replayed batch, pushes
  every sample to a fresh context on the sphere of radius
  ``epsilon_perturb`` with `cse_augment` before the update.
* ``ldr`` collects whole trajectories in the true environment at a context
  drawn from that sphere (one draw per episode).

The Q table is indexed by (state cell, state cell, context cell, context
cell, action). Continuous values map to the nearest grid centre, so the
test ring at radius 0.1 falls on cells that perturbed samples also reach.
A single stationary table with discount ``gamma`` stands in for the
finite-horizon problem; the time-limit cut is not treated as terminal.

Each run splits its seed into independent streams (start states,
exploration, replay sampling, perturbations). No perturbation is drawn when
``epsilon_perturb == 0``, which makes ``cse`` at radius 0 bit-identical to
``baseline``.
"""

import itertools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
from scipy import stats

from ._io import read_json, write_json
from .cse import ContextSample, ReplayBuffer, cse_augment, sample_sphere
from .envs import SimpleDirection
from .errors import ConfigInvalid, ContextOutOfRange

MODES = ("baseline", "cse", "ldr")
# The null action comes first so that an untrained cell (all-zero row) acts
# as a no-op under lowest-index tie-breaking.
ACTIONS = np.array(sorted(itertools.product((-1.0, 0.0, 1.0), repeat=2),
                          key=lambda a: (a != (0.0, 0.0), a)))
_GRID_TO_ACTION = np.empty(9, dtype=int)
_GRID_TO_ACTION[((ACTIONS[:, 0] + 1) * 3 + ACTIONS[:, 1] + 1).astype(int)] = np.arange(9)
TEST_RADIUS = 0.1


@dataclass(frozen=True)
class Grid:
    """Uniform grid of centres ``low, low + width, ..., high`` on each axis."""

    low: float
    high: float
    width: float

    @cached_property
    def size(self):
        return int(round((self.high - self.low) / self.width)) + 1

    @property
    def centers(self):
        return self.low + self.width * np.arange(self.size)

    def index(self, x):
        """Nearest-centre index per coordinate; values outside are clipped."""
        i = np.rint((np.asarray(x, dtype=float) - self.low) / self.width).astype(int)
        return np.minimum(np.maximum(i, 0), self.size - 1)

    def contains(self, x, slack=0.5):
        x = np.asarray(x, dtype=float)
        pad = slack * self.width + 1e-12
        return bool(np.all((x >= self.low - pad) & (x <= self.high + pad)))


@dataclass
class TrainConfig:
    mode: str = "baseline"
    epsilon_perturb: float = 0.1
    episodes: int = 20000
    learning_rate: float = 0.2
    epsilon_greedy: float = 0.1
    seed: int = 0
    state_bins: Grid = field(default_factory=lambda: Grid(-4.0, 4.0, 0.5))
    context_bins: Grid = field(default_factory=lambda: Grid(-0.2, 0.2, 0.05))
    train_context: tuple = (0.0, 0.0)
    gamma: float = 0.9
    horizon: int = 10
    updates_per_episode: int = 16
    batch_size: int = 32
    warmup_episodes: int = 2000
    buffer_capacity: int = 200_000

    def validate(self):
        if self.mode not in MODES:
            raise ConfigInvalid(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.learning_rate <= 1.0:
            raise ConfigInvalid("learning_rate must lie in [0, 1]")
        if not 0.0 <= self.epsilon_greedy <= 1.0:
            raise ConfigInvalid("epsilon_greedy must lie in [0, 1]")
        if self.epsilon_perturb < 0:
            raise ConfigInvalid("epsilon_perturb must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigInvalid("gamma must lie in (0, 1]")
        for name in ("episodes", "horizon", "updates_per_episode", "batch_size",
                     "buffer_capacity"):
            if int(getattr(self, name)) < 1:
                raise ConfigInvalid(f"{name} must be >= 1")
        if self.warmup_episodes < 0:
            raise ConfigInvalid("warmup_episodes must be >= 0")
        for grid in (self.state_bins, self.context_bins):
            if not grid.width > 0 or grid.high < grid.low:
                raise ConfigInvalid(f"bad grid {grid}")
        if not self.context_bins.contains(self.train_context):
            raise ConfigInvalid("train_context lies outside the context grid")
        return self

    def to_dict(self):
        d = asdict(self)
        d["train_context"] = list(self.train_context)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("state_bins", "context_bins"):
            if key in d and isinstance(d[key], dict):
                d[key] = Grid(**d[key])
        if "train_context" in d:
            d["train_context"] = tuple(d["train_context"])
        return cls(**d)


@dataclass
class QTable:
    values: np.ndarray  # (state x, state y, context x, context y, action)
    state_bins: Grid
    context_bins: Grid

    @classmethod
    def zeros(cls, state_bins, context_bins):
        n, m = state_bins.size, context_bins.size
        return cls(np.zeros((n, n, m, m, len(ACTIONS))), state_bins, context_bins)

    def cells(self, s, c):
        """Index tuple for states `s` and contexts `c` (both ``(..., 2)``)."""
        si = self.state_bins.index(s)
        ci = self.context_bins.index(c)
        return si[..., 0], si[..., 1], ci[..., 0], ci[..., 1]

    def row(self, s, c):
        return self.values[self.cells(s, c)]

    def greedy(self, s, c):
        """Lowest-index greedy action (deterministic evaluation policy)."""
        return ACTIONS[int(np.argmax(self.row(s, c)))]

    def to_json(self, path, meta=None):
        payload = {
            "meta": meta or {},
            "state_bins": asdict(self.state_bins),
            "context_bins": asdict(self.context_bins),
            "actions": ACTIONS.tolist(),
            "shape": list(self.values.shape),
            "values": self.values.ravel().tolist(),
        }
        write_json(path, payload)

    @classmethod
    def from_json(cls, path, with_meta=False):
        payload = read_json(path)
        if payload["actions"] != ACTIONS.tolist():
            raise ConfigInvalid("stored action ordering does not match this version")
        values = np.asarray(payload["values"], dtype=float).reshape(payload["shape"])
        q = cls(values, Grid(**payload["state_bins"]), Grid(**payload["context_bins"]))
        return (q, payload.get("meta", {})) if with_meta else q


@dataclass
class TrainResult:
    q: QTable
    episode_returns: np.ndarray
    config: TrainConfig


def _streams(seed):
    children = np.random.SeedSequence(seed).spawn(4)
    return [np.random.default_rng(ss) for ss in children]


def _behaviour_action(q, s, c, epsilon, rng, explore):
    """ε-greedy with random tie-breaking; purely random while `explore`."""
    if explore or rng.random() < epsilon:
        return ACTIONS[rng.integers(len(ACTIONS))]
    row = q.row(s, c)
    best = np.flatnonzero(row == row.max())
    return ACTIONS[best[rng.integers(len(best))]]


def _collect_episode(env, q, c, cfg, rng_start, rng_explore, explore, buffer):
    s = env.reset(rng_start)
    total = 0.0
    for _ in range(cfg.horizon):
        a = _behaviour_action(q, s, c, cfg.epsilon_greedy, rng_explore, explore)
        res = env.step(s, a, c)
        buffer.push(ContextSample.from_step(s, a, c, res))
        total += res.reward
        s = res.next_state
    return total


def _action_index(a):
    a = np.rint(np.asarray(a)).astype(int)
    return _GRID_TO_ACTION[(a[..., 0] + 1) * 3 + (a[..., 1] + 1)]


def _update(q, batch, contexts, s_next, rewards, cfg):
    """One vectorised Q-learning step on a batch (duplicates accumulate)."""
    idx = q.cells(batch.s, contexts) + (_action_index(batch.a),)
    target = rewards + cfg.gamma * q.values[q.cells(s_next, contexts)].max(axis=-1)
    np.add.at(q.values, idx, cfg.learning_rate * (target - q.values[idx]))


def train(config, env=None):
    """Run one training job and return a `TrainResult`."""
    cfg = config.validate()
    env = env or SimpleDirection()
    rng_start, rng_explore, rng_replay, rng_perturb = _streams(cfg.seed)
    q = QTable.zeros(cfg.state_bins, cfg.context_bins)
    c0 = np.asarray(cfg.train_context, dtype=float)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    perturb = cfg.epsilon_perturb > 0
    returns = np.zeros(cfg.episodes)
    for ep in range(cfg.episodes):
        c = c0
        if cfg.mode == "ldr" and perturb:
            c = c0 + sample_sphere(2, cfg.epsilon_perturb, rng_perturb)
        explore = ep < cfg.warmup_episodes
        returns[ep] = _collect_episode(env, q, c, cfg, rng_start, rng_explore, explore, buffer)
        if cfg.learning_rate == 0.0:
            continue
        for _ in range(cfg.updates_per_episode):
            batch = buffer.sample_batch(cfg.batch_size, rng_replay)
            contexts, s_next, rewards = batch.c, batch.s_next, batch.r
            if cfg.mode == "cse" and perturb:
                dc = sample_sphere(2, cfg.epsilon_perturb, rng_perturb, size=len(batch))
                rewards, s_next = cse_augment(batch, dc)
                contexts = batch.c + dc
            _update(q, batch, contexts, s_next, rewards, cfg)
    return TrainResult(q=q, episode_returns=returns, config=cfg)


# --- evaluation -----------------------------------------------------------------


@dataclass
class ContextEval:
    context: tuple
    mean_return: float
    stderr: float
    episodes: int


@dataclass
class EvalReport:
    results: list

    @property
    def mean(self):
        return float(np.mean([r.mean_return for r in self.results]))

    def to_rows(self):
        return [
            {"context_x": r.context[0], "context_y": r.context[1],
             "mean_return": r.mean_return, "stderr": r.stderr, "episodes": r.episodes}
            for r in self.results
        ]


def ring_contexts(radius=TEST_RADIUS, n=8, center=(0.0, 0.0)):
    """`n` evenly spaced directions on a circle, starting along +x."""
    ang = 2.0 * np.pi * np.arange(n) / n
    return np.asarray(center) + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def default_test_contexts():
    return np.vstack([ring_contexts(), np.zeros((1, 2))])


def evaluate(q, contexts, episodes_per_context=64, seed=0, horizon=10, env=None):
    """Greedy rollouts in the true environment; undiscounted returns.

    Start states for context `i` come from the stream ``(seed, i)`` so that
    different Q tables are compared on the same starts.
    """
    if episodes_per_context < 1:
        raise ValueError("episodes_per_context must be >= 1")
    env = env or SimpleDirection()
    results = []
    for i, c in enumerate(np.atleast_2d(np.asarray(contexts, dtype=float))):
        if not q.context_bins.contains(c):
            raise ContextOutOfRange(f"context {c.tolist()} outside the trained grid")
        rng = np.random.default_rng([seed, i])
        totals = np.zeros(episodes_per_context)
        for e in range(episodes_per_context):
            s = env.reset(rng)
            for _ in range(horizon):
                res = env.step(s, q.greedy(s, c), c)
                totals[e] += res.reward
                s = res.next_state
        se = float(totals.std(ddof=1) / np.sqrt(len(totals))) if len(totals) > 1 else 0.0
        results.append(ContextEval(tuple(float(x) for x in c), float(totals.mean()), se,
                                   episodes_per_context))
    return EvalReport(results)


# --- comparison -----------------------------------------------------------------


def mean_ci(values, level=0.95):
    """Mean and symmetric t confidence half-width of the mean."""
    values = np.asarray(values, dtype=float)
    m = float(values.mean())
    if len(values) < 2:
        return m, float("nan")
    half = stats.t.ppf(0.5 + level / 2, len(values) - 1) * values.std(ddof=1) / np.sqrt(len(values))
    return m, float(half)


def _run_one(args):
    cfg, contexts, episodes = args
    res = train(cfg)
    return evaluate(res.q, contexts, episodes, seed=cfg.seed, horizon=cfg.horizon)


def max_workers():
    try:
        return max(1, int(os.environ.get("CMDP_LAB_THREADS", "1")))
    except ValueError:
        return 1


def compare_modes(config, seeds, test_contexts=None, modes=MODES, episodes_per_context=64,
                  workers=None):
    """Train every mode on every seed and summarise test returns.

    Returns ``(rows, summary)``: `rows` holds one entry per (mode, seed,
    context); `summary` maps each mode to the mean and 95% half-width over
    per-seed means of the ring contexts (every test context except ``c0``),
    plus the same for ``c0`` alone.
    """
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ConfigInvalid("compare_modes needs at least two seeds")
    contexts = default_test_contexts() if test_contexts is None else np.asarray(test_contexts)
    c0 = np.asarray(config.train_context, dtype=float)
    ring = ~np.all(np.isclose(contexts, c0), axis=1)
    jobs = []
    for mode in modes:
        for seed in seeds:
            cfg = TrainConfig.from_dict({**config.to_dict(), "mode": mode, "seed": int(seed)})
            jobs.append((cfg, contexts, episodes_per_context))
    workers = workers or max_workers()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            reports = list(pool.map(_run_one, jobs))
    else:
        reports = [_run_one(j) for j in jobs]
    rows, per_seed = [], {m: {"ring": [], "center": []} for m in modes}
    for (cfg, _, _), rep in zip(jobs, reports):
        means = np.array([r.mean_return for r in rep.results])
        per_seed[cfg.mode]["ring"].append(means[ring].mean())
        if np.any(~ring):
            per_seed[cfg.mode]["center"].append(means[~ring].mean())
        for r in rep.to_rows():
            rows.append({"mode": cfg.mode, "seed": cfg.seed, **r})
    summary = {}
    for mode in modes:
        m, h = mean_ci(per_seed[mode]["ring"])
        entry = {"ring_mean": m, "ring_ci95": h, "per_seed": per_seed[mode]["ring"]}
        if per_seed[mode]["center"]:
            mc, hc = mean_ci(per_seed[mode]["center"])
            entry.update(center_mean=mc, center_ci95=hc)
        summary[mode] = entry
    return rows, summary


def ordering_check(summary, tolerance=0.15):
    """The qualitative ordering: CSE at least baseline, and within `tolerance` of LDR."""
    cse, base, ldr = (summary[m]["ring_mean"] for m in ("cse", "baseline", "ldr"))
    return {
        "cse_ge_baseline": bool(cse >= base),
        "cse_close_to_ldr": bool(abs(cse - ldr) <= tolerance * abs(ldr)),
    }
