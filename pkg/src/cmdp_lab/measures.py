"""Finite-support signed measures.

Measures are plain 1-D float arrays; the last axis is the support. Every
function also accepts stacked measures (``shape (..., n)``) and reduces over
the last axis only, which is how the tabular code projects a whole
transition table in one call.

Conventions: the total-variation norm is ``sum(|w|)`` with no 1/2 factor.
Under the discrete metric ``d(x, y) = 1{x != y}`` the Wasserstein-1 distance
between probability vectors is half of that, and the support has diameter 1.
"""

import numpy as np

from .errors import SupportMismatch, ZeroPositivePart

#: Weights with magnitude below this are treated as exact zeros when splitting.
SIGN_FLOOR = 1e-15
SIMPLEX_ATOL = 1e-12


def as_measure(mu):
    mu = np.asarray(mu, dtype=float)
    if mu.ndim == 0 or mu.shape[-1] < 1:
        raise ValueError("a measure needs a support of size >= 1")
    if not np.all(np.isfinite(mu)):
        raise ValueError("measure weights must be finite")
    return mu


def is_probability(mu, atol=SIMPLEX_ATOL):
    """True if every row of `mu` is a probability vector."""
    mu = np.asarray(mu, dtype=float)
    return bool(np.all(mu >= 0) and np.all(np.abs(mu.sum(axis=-1) - 1.0) <= atol))


def tv_norm(mu):
    """Total variation norm ``sum_i |w_i|`` (reduced over the last axis)."""
    return np.abs(as_measure(mu)).sum(axis=-1)


def positive_part(mu):
    """Hahn-Jordan positive part: elementwise ``max(w, 0)``."""
    mu = as_measure(mu)
    return np.where(mu > SIGN_FLOOR, mu, 0.0)


def negative_part(mu):
    """Hahn-Jordan negative part, returned as a nonnegative measure."""
    mu = as_measure(mu)
    return np.where(mu < -SIGN_FLOOR, -mu, 0.0)


def project_simplex(mu):
    """Normalised positive part ``mu+ / ||mu+||``.

    This is *not* the Euclidean projection onto the simplex; it is the map
    used to repair a linearised transition kernel that went slightly
    negative. Raises `ZeroPositivePart` if some row has no positive mass.
    """
    pos = positive_part(mu)
    mass = pos.sum(axis=-1, keepdims=True)
    if np.any(mass <= 0.0):
        raise ZeroPositivePart("measure has no positive mass; projection undefined")
    return pos / mass


def w1_discrete(mu, nu):
    """Wasserstein-1 distance under the discrete metric, i.e. ``TV(mu - nu) / 2``."""
    mu = as_measure(mu)
    nu = as_measure(nu)
    if mu.shape[-1] != nu.shape[-1]:
        raise SupportMismatch(f"support sizes differ: {mu.shape[-1]} vs {nu.shape[-1]}")
    return 0.5 * np.abs(mu - nu).sum(axis=-1)
