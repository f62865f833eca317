"""Linearly correlated Bernoulli-Gaussian sources and their Renyi information dimension.

A source is ``S = Phi @ Z`` where ``Z`` has ``k`` independent coordinates,
``Z_i = 0`` with probability ``1 - alpha_i`` and ``Z_i ~ N(0, 1/alpha_i)``
otherwise, so every ``Z_i`` has unit variance.  Rows of ``Phi`` are the
terminals (row 0 is X, row 1 is Y).
"""

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from mtamp.rng import stream

MAX_ENUM_K = 24
RANK_RTOL = 1e-9

_TERMINALS = {"x": 0, "y": 1}


@dataclass(frozen=True, eq=False)
class SourceSpec:
    mixing: np.ndarray
    alphas: np.ndarray

    def __post_init__(self):
        mixing = np.atleast_2d(np.asarray(self.mixing, dtype=float))
        alphas = np.atleast_1d(np.asarray(self.alphas, dtype=float))
        if mixing.ndim != 2:
            raise ValueError("mixing must be a t x k matrix")
        if alphas.ndim != 1 or alphas.size != mixing.shape[1]:
            raise ValueError(
                f"alphas must have one entry per column of mixing ({mixing.shape[1]}), got {alphas.size}"
            )
        if not np.all(np.isfinite(mixing)):
            raise ValueError("mixing must be finite")
        if np.any(~(alphas > 0)) or np.any(alphas > 1):
            raise ValueError("every alpha must lie in (0, 1]")
        if np.any(np.all(mixing == 0, axis=1)):
            raise ValueError("mixing has an all-zero row")
        mixing.setflags(write=False)
        alphas.setflags(write=False)
        object.__setattr__(self, "mixing", mixing)
        object.__setattr__(self, "alphas", alphas)

    @property
    def t(self):
        return self.mixing.shape[0]

    @property
    def k(self):
        return self.mixing.shape[1]

    @property
    def component_var(self):
        return 1.0 / self.alphas

    def to_dict(self):
        return {"mixing": self.mixing.tolist(), "alphas": self.alphas.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mixing"], d["alphas"])

    def swapped(self):
        """The same source with the two terminals relabelled."""
        return SourceSpec(self.mixing[::-1], self.alphas)

    def __repr__(self):
        return f"SourceSpec(mixing={self.mixing.tolist()}, alphas={self.alphas.tolist()})"


def reference_spec():
    """X = Z1 + Z2, Y = Z2 + Z3 with alpha = (0.2, 0.3, 0.2)."""
    return SourceSpec([[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]], [0.2, 0.3, 0.2])


def shared_component_spec(cond_rid, marginal_rid=0.44):
    """Symmetric private/common/private source with prescribed RIDs.

    ``X = Z1 + Z2`` and ``Y = Z2 + Z3`` with ``alpha_1 = alpha_3 = a`` and
    ``alpha_2 = b``.  Then ``d(X) = 1 - (1-a)(1-b)`` and
    ``d(X|Y) = 2a + b - a^2 b - d(X)``; ``a`` is solved so that both match.
    """
    keep = 1.0 - marginal_rid

    def common(a):
        return 1.0 - keep / (1.0 - a)

    def gap(a):
        b = common(a)
        return 2 * a + b - a * a * b - marginal_rid - cond_rid

    a_max = 1.0 - keep  # b hits 0 here
    if not 0.0 <= cond_rid <= marginal_rid:
        raise ValueError("need 0 <= cond_rid <= marginal_rid")
    if cond_rid == 0.0:
        return SourceSpec([[1.0], [1.0]], [marginal_rid])
    a = brentq(gap, 1e-12, a_max - 1e-12, xtol=1e-15)
    return SourceSpec([[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]], [a, common(a), a])


def terminal_index(terminal):
    if isinstance(terminal, str):
        try:
            return _TERMINALS[terminal.lower()]
        except KeyError:
            raise ValueError(f"unknown terminal {terminal!r}") from None
    return int(terminal)


def sample_components(spec, n, rng):
    """Draw ``Z`` (k x n) from the Bernoulli-Gaussian law."""
    active = rng.random((spec.k, n)) < spec.alphas[:, None]
    gauss = rng.standard_normal((spec.k, n)) * np.sqrt(spec.component_var)[:, None]
    return np.where(active, gauss, 0.0)


def sample_source(spec, n, seed):
    """Sample ``n`` i.i.d. columns of ``Phi @ Z``; returns a t x n array."""
    if n < 1:
        raise ValueError("n must be at least 1")
    z = sample_components(spec, n, stream(seed, "source"))
    return spec.mixing @ z


def source_covariance(spec):
    return spec.mixing @ spec.mixing.T


def support_patterns(spec):
    """All 2^k activity patterns with their prior probabilities.

    Returns ``(bits, probs)`` with ``bits`` a boolean (2^k, k) array.
    """
    k = spec.k
    if k > MAX_ENUM_K:
        raise ValueError(f"k = {k} exceeds the enumeration cap of {MAX_ENUM_K}")
    bits = np.array(list(itertools.product([False, True], repeat=k)), dtype=bool).reshape(-1, k)
    a = spec.alphas
    probs = np.prod(np.where(bits, a, 1.0 - a), axis=1)
    return bits, probs


def _rows(spec, rows):
    idx = sorted({terminal_index(r) for r in rows})
    if not idx:
        raise ValueError("rows must be a nonempty subset of terminals")
    if idx[0] < 0 or idx[-1] >= spec.t:
        raise ValueError(f"row index out of range for t = {spec.t}")
    return idx


def pattern_rank(sub, bits):
    cols = sub[:, bits]
    if cols.shape[1] == 0:
        return 0
    sv = np.linalg.svd(cols, compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv > RANK_RTOL * sv[0]))


def rid(spec, rows):
    """Exact RID of the selected terminals, E[rank(Phi[rows][:, active])]."""
    sub = spec.mixing[_rows(spec, rows)]
    bits, probs = support_patterns(spec)
    ranks = np.array([pattern_rank(sub, b) for b in bits], dtype=float)
    return float(np.dot(probs, ranks))


def rid_monte_carlo(spec, rows, samples, seed):
    """Sampled estimate of ``rid``; returns ``(mean, standard_error)``."""
    sub = spec.mixing[_rows(spec, rows)]
    rng = stream(seed, "rid-mc")
    bits = rng.random((samples, spec.k)) < spec.alphas
    ranks = np.array([pattern_rank(sub, b) for b in bits], dtype=float)
    return float(ranks.mean()), float(ranks.std(ddof=1) / np.sqrt(samples))


def rid_conditional(spec, target, given):
    """d(target | given) = d(target, given) - d(given)."""
    ti, gi = terminal_index(target), terminal_index(given)
    if ti == gi:
        raise ValueError("target and given must be different terminals")
    return rid(spec, [ti, gi]) - rid(spec, [gi])


def rid_summary(spec):
    return {
        "d_x": rid(spec, [0]),
        "d_y": rid(spec, [1]),
        "d_joint": rid(spec, [0, 1]),
        "d_x_given_y": rid_conditional(spec, 0, 1),
        "d_y_given_x": rid_conditional(spec, 1, 0),
    }
