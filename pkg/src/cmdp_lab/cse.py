"""Context sample enhancement and the replay storage it feeds on.

A stored transition carries the context gradients observed when it was
generated. Given a context offset ``dc`` the transition is pushed to the
first-order model of context ``c + dc``::

    s_next_bar = s_next + dTdc @ dc
    r_bar      = r + dRdc . dc + dRds_next . (dTdc @ dc)
"""

import json
from dataclasses import dataclass, fields

import numpy as np

from .errors import DimensionMismatch, EmptyBuffer

SAMPLE_FIELDS = ("s", "a", "r", "s_next", "c", "dTdc", "dRdc", "dRds_next")


@dataclass(frozen=True)
class ContextSample:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    c: np.ndarray
    dTdc: np.ndarray
    dRdc: np.ndarray
    dRds_next: np.ndarray

    @classmethod
    def from_step(cls, s, a, c, step):
        """Build a sample from a state, action, context and an `EnvStepResult`."""
        return cls(
            s=np.asarray(s, dtype=float),
            a=np.atleast_1d(np.asarray(a, dtype=float)),
            r=float(step.reward),
            s_next=np.asarray(step.next_state, dtype=float),
            c=np.asarray(c, dtype=float),
            dTdc=np.asarray(step.dTdc, dtype=float),
            dRdc=np.asarray(step.dRdc, dtype=float),
            dRds_next=np.asarray(step.dRds_next, dtype=float),
        )

    def to_dict(self):
        out = {}
        for name in SAMPLE_FIELDS:
            v = getattr(self, name)
            out[name] = np.asarray(v).tolist() if name != "r" else float(v)
        return out

    @classmethod
    def from_dict(cls, d):
        kw = {name: np.asarray(d[name], dtype=float) for name in SAMPLE_FIELDS}
        kw["r"] = float(d["r"])
        return cls(**kw)


@dataclass(frozen=True)
class ContextBatch(ContextSample):
    """Samples stacked along a leading axis (``r`` is a 1-D array)."""

    def __len__(self):
        return len(self.r)

    def __getitem__(self, i):
        return ContextSample(**{f.name: getattr(self, f.name)[i] for f in fields(self)})

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def cse_augment(x, dc):
    """Enhanced ``(r_bar, s_next_bar)`` for a sample (or batch) and offset `dc`."""
    dc = np.asarray(dc, dtype=float)
    dTdc = np.asarray(x.dTdc, dtype=float)
    if dc.shape[-1] != dTdc.shape[-1]:
        raise DimensionMismatch(
            f"context offset has {dc.shape[-1]} entries, sample has {dTdc.shape[-1]}"
        )
    ds = np.einsum("...ij,...j->...i", dTdc, dc)
    r_bar = (
        x.r
        + np.einsum("...j,...j->...", np.asarray(x.dRdc, dtype=float), dc)
        + np.einsum("...i,...i->...", np.asarray(x.dRds_next, dtype=float), ds)
    )
    s_bar = x.s_next + ds
    if np.ndim(r_bar) == 0:
        r_bar = float(r_bar)
    return r_bar, s_bar


def sample_sphere(dim, epsilon, rng, size=None):
    """Uniform draw(s) from the sphere of radius `epsilon` in ``R^dim``."""
    if dim < 1 or epsilon <= 0:
        raise ValueError("need dim >= 1 and epsilon > 0")
    shape = (dim,) if size is None else (size, dim)
    z = rng.standard_normal(shape)
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    return epsilon * z / norm


class ReplayBuffer:
    """Bounded FIFO of `ContextSample` backed by preallocated arrays."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._store = None
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def _allocate(self, sample):
        self._store = {}
        for name in SAMPLE_FIELDS:
            v = np.asarray(getattr(sample, name), dtype=float)
            self._store[name] = np.zeros((self.capacity,) + v.shape)

    def push(self, sample):
        if self._store is None:
            self._allocate(sample)
        for name in SAMPLE_FIELDS:
            self._store[name][self._next] = getattr(sample, name)
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _slots(self, positions):
        """Storage slots of age-ordered `positions` (0 is the oldest)."""
        if self._size < self.capacity:
            return positions
        return (positions + self._next) % self.capacity

    def _gather(self, slots):
        return ContextBatch(**{name: self._store[name][slots] for name in SAMPLE_FIELDS})

    def sample_batch(self, batch_size, rng):
        """Uniform draw with replacement."""
        if self._size == 0:
            raise EmptyBuffer("cannot sample from an empty buffer")
        picks = rng.integers(0, self._size, size=batch_size)
        return self._gather(self._slots(picks))

    def samples(self):
        """All stored samples, oldest first."""
        if self._size == 0:
            return []
        return list(self._gather(self._slots(np.arange(self._size))))

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for sample in self.samples():
                fh.write(json.dumps(sample.to_dict()) + "\n")

    @classmethod
    def from_jsonl(cls, path, capacity=None):
        with open(path) as fh:
            rows = [ContextSample.from_dict(json.loads(line)) for line in fh if line.strip()]
        buf = cls(capacity or max(1, len(rows)))
        for row in rows:
            buf.push(row)
        return buf


# --- linearised rollouts ----------------------------------------------------------


def true_rollout_value(env, policy, c, horizon, gamma, s0):
    """Discounted return of a deterministic policy in the exact environment."""
    s = np.asarray(s0, dtype=float)
    value = 0.0
    for t in range(horizon):
        res = env.step(s, policy(s), c)
        value += gamma**t * res.reward
        s = res.next_state
    return value


def enhanced_rollout_value(env, policy, c0, dc, horizon, gamma, s0):
    """Discounted return in the first-order model of context ``c0 + dc``.

    Every step queries the environment at `c0` from the current (enhanced)
    state and applies `cse_augment`; the rollout continues from the enhanced
    next state.
    """
    s = np.asarray(s0, dtype=float)
    value = 0.0
    for t in range(horizon):
        a = policy(s)
        res = env.step(s, a, c0)
        r_bar, s = cse_augment(ContextSample.from_step(s, a, c0, res), dc)
        value += gamma**t * r_bar
    return value


# --- regularisation view -------------------------------------------------------


def regularization_equivalence_check(F, f, dF, df, c0, sigma, n_mc, rng, x_sampler=None):
    """Monte-Carlo CSE loss and the Jacobian-mismatch penalty it approximates.

    ``L_cse = E ||f(x, c0 + xi) - F(x, c0) - dF(x, c0) xi||^2`` with
    ``xi ~ N(0, sigma^2 I)``, and ``jacobian_term = sigma^2 E ||df - dF||_F^2``
    over the same inputs. All callables are vectorised over a leading batch
    axis: ``F(x, c)`` takes ``x`` of shape (n,) and ``c`` of shape (n, k).
    """
    c0 = np.atleast_1d(np.asarray(c0, dtype=float))
    if x_sampler is None:
        x_sampler = lambda rng, n: rng.uniform(-1.0, 1.0, size=n)  # noqa: E731
    x = x_sampler(rng, n_mc)
    xi = sigma * rng.standard_normal((n_mc, c0.size))
    base = np.broadcast_to(c0, xi.shape)
    jac_F = np.asarray(dF(x, base))
    jac_f = np.asarray(df(x, base))
    lin = np.einsum("n...k,nk->n...", jac_F, xi)
    resid = np.asarray(f(x, base + xi)) - np.asarray(F(x, base)) - lin
    resid = resid.reshape(n_mc, -1)
    L_cse = float(np.mean(np.sum(resid**2, axis=1)))
    gap = (jac_f - jac_F).reshape(n_mc, -1)
    jacobian_term = float(sigma**2 * np.mean(np.sum(gap**2, axis=1)))
    return L_cse, jacobian_term


def polynomial_toy(slope=2.0, curvature=1.0):
    """Toy target ``F(x, c) = x sum(c) + ||c||^2`` and model
    ``f(x, c) = slope x sum(c) + curvature ||c||^2``.

    Both agree at ``c0 = 0``; their context Jacobians there differ by
    ``(slope - 1) x``. Returns ``(F, f, dF, df)``.
    """

    def F(x, c):
        return x * c.sum(axis=-1) + np.sum(c**2, axis=-1)

    def f(x, c):
        return slope * x * c.sum(axis=-1) + curvature * np.sum(c**2, axis=-1)

    def dF(x, c):
        return x[:, None] + 2.0 * c

    def df(x, c):
        return slope * x[:, None] + 2.0 * curvature * c

    return F, f, dF, df


def polynomial_toy_jacobian_term(sigma, slope, context_dim):
    """Closed form of the Jacobian penalty for `polynomial_toy` at ``c0 = 0``
    with ``x ~ U[-1, 1]``: ``sigma^2 (slope - 1)^2 k / 3``."""
    return sigma**2 * (slope - 1.0) ** 2 * context_dim / 3.0
