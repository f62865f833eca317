"""Two-terminal state evolution for MAMP with MMSE denoisers.

The recursion tracks the effective noise variances of the pseudo-data,

    tau_o' = sigma_o^2 + mmse_o(1/tau_x, 1/tau_y) / rho_o,

started from ``tau = inf`` (no observation at all).  ``mmse_o`` is the
Monte-Carlo estimate from :func:`mtamp.estimator.scalar_channel_mmse`; a fixed
``MonteCarlo`` budget/seed gives common random numbers across every call.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from mtamp.estimator import DEFAULT_MC_SAMPLES, denoise
from mtamp.estimator import NoiseModel, scalar_channel_mmse
from mtamp.rng import stream
from mtamp.source import sample_source

SUCCESS_DISTORTION = 1e-4


@dataclass(frozen=True)
class MonteCarlo:
    samples: int = DEFAULT_MC_SAMPLES
    seed: int = 0


@dataclass(frozen=True)
class ScalarState:
    tau_x: float
    tau_y: float

    def __post_init__(self):
        for v in (self.tau_x, self.tau_y):
            if math.isnan(v) or v < 0:
                raise ValueError(f"state entries must be >= 0, got {v}")

    @classmethod
    def initial(cls):
        return cls(math.inf, math.inf)

    def as_array(self):
        return np.array([self.tau_x, self.tau_y])


def _snr(tau):
    if tau == math.inf:
        return 0.0
    if tau <= 0:
        raise ValueError("state reached tau = 0; an exact observation cannot be evaluated")
    return 1.0 / tau


def mmse_pair(spec, s_x, s_y, mc):
    return scalar_channel_mmse(spec, s_x, s_y, samples=mc.samples, seed=mc.seed)


def se_step(spec, rho_x, rho_y, sigma2_x, sigma2_y, state, mc=MonteCarlo()):
    for rho in (rho_x, rho_y):
        if not 0 < rho <= 1:
            raise ValueError(f"rates must lie in (0, 1], got {rho}")
    m = mmse_pair(spec, _snr(state.tau_x), _snr(state.tau_y), mc)
    return ScalarState(sigma2_x + m[0] / rho_x, sigma2_y + m[1] / rho_y)


def se_trajectory(spec, rho_x, rho_y, sigma2_x=0.0, sigma2_y=0.0, iterations=100, mc=MonteCarlo()):
    """``tau^0 .. tau^{iterations-1}`` as an (iterations, 2) array."""
    state = ScalarState.initial()
    out = np.empty((iterations, 2))
    for t in range(iterations):
        state = se_step(spec, rho_x, rho_y, sigma2_x, sigma2_y, state, mc)
        out[t] = state.as_array()
    return out


def se_fixed_point(spec, rho_x, rho_y, sigma2_x=0.0, sigma2_y=0.0, tol=1e-8, max_iter=500, mc=MonteCarlo()):
    """Iterate from ``(inf, inf)`` until both coordinates move by less than ``tol``.

    Returns ``(state, iterations, converged)``; on non-convergence the last
    state is still returned.
    """
    state = ScalarState.initial()
    for it in range(1, max_iter + 1):
        new = se_step(spec, rho_x, rho_y, sigma2_x, sigma2_y, state, mc)
        done = abs(new.tau_x - state.tau_x) < tol and abs(new.tau_y - state.tau_y) < tol
        state = new
        if done:
            return state, it, True
    return state, max_iter, False


def distortion(state, rho_x, rho_y, sigma2_x=0.0, sigma2_y=0.0):
    """Average per-terminal MSE ``rho_o (tau_o - sigma_o^2)`` at a state."""
    return 0.5 * (rho_x * (state.tau_x - sigma2_x) + rho_y * (state.tau_y - sigma2_y))


@dataclass(frozen=True)
class GridPoint:
    rho_x: float
    rho_y: float
    tau_x: float
    tau_y: float
    distortion: float
    converged: bool
    iterations: int


GRID_COLUMNS = ("rho_x", "rho_y", "tau_x", "tau_y", "distortion", "converged", "iterations")


def grid_point(spec, rho_x, rho_y, sigma2_x=0.0, sigma2_y=0.0, mc=MonteCarlo(), tol=1e-8, max_iter=500):
    state, its, ok = se_fixed_point(spec, rho_x, rho_y, sigma2_x, sigma2_y, tol, max_iter, mc)
    return GridPoint(
        rho_x, rho_y, state.tau_x, state.tau_y,
        distortion(state, rho_x, rho_y, sigma2_x, sigma2_y), ok, its,
    )


def rate_distortion_grid(spec, rho_grid_x, rho_grid_y, sigma2_x=0.0, sigma2_y=0.0, mc=MonteCarlo(),
                         tol=1e-8, max_iter=500, executor=None):
    """Fixed-point distortion at every ``(rho_x, rho_y)`` pair, row-major in ``rho_x``.

    Every point uses the same Monte-Carlo draws.  ``executor`` may be any
    ``concurrent.futures`` executor; results do not depend on it.
    """
    pairs = [(float(a), float(b)) for a in rho_grid_x for b in rho_grid_y]
    for a, b in pairs:
        if not (0 < a <= 1 and 0 < b <= 1):
            raise ValueError(f"grid rates must lie in (0, 1], got ({a}, {b})")
    job = lambda p: grid_point(spec, p[0], p[1], sigma2_x, sigma2_y, mc, tol, max_iter)  # noqa: E731
    if executor is None:
        return [job(p) for p in pairs]
    return list(executor.map(job, pairs))


def write_grid_csv(points, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for p in points:
            w.writerow([fmt(p.rho_x), fmt(p.rho_y), fmt(p.tau_x), fmt(p.tau_y),
                        fmt(p.distortion), int(p.converged), p.iterations])


def fmt(v):
    return format(float(v), ".17g")


@dataclass
class FreshCheck:
    iteration: int
    empirical_tau_x: float
    empirical_tau_y: float
    se_tau_x: float
    se_tau_y: float


def fresh_matrix_se_check(spec, rho_x, rho_y, n, iterations, seed, sigma2_x=0.0, sigma2_y=0.0,
                          mc=MonteCarlo()):
    """Onsager-free iteration with a fresh pair of matrices at every step.

    Reports the empirical variance of the pseudo-data error next to the SE
    prediction for each iteration.  The denoiser is driven by the SE
    variances so the two columns share the same nonlinearity.
    """
    if n > 2000:
        raise ValueError("fresh-matrix check is meant for n <= 2000")
    m_x, m_y = max(1, round(rho_x * n)), max(1, round(rho_y * n))
    truth = sample_source(spec, n, seed)
    x0, y0 = truth
    se = se_trajectory(spec, m_x / n, m_y / n, sigma2_x, sigma2_y, iterations, mc)
    x = np.zeros(n)
    y = np.zeros(n)
    out = []
    for t in range(iterations):
        rng = stream(seed, "fresh", t)
        A = rng.standard_normal((m_x, n)) / math.sqrt(m_x)
        B = rng.standard_normal((m_y, n)) / math.sqrt(m_y)
        u = A @ x0 + math.sqrt(sigma2_x) * rng.standard_normal(m_x)
        v = B @ y0 + math.sqrt(sigma2_y) * rng.standard_normal(m_y)
        g = A.T @ (u - A @ x) + x
        h = B.T @ (v - B @ y) + y
        out.append(FreshCheck(t, float(np.mean((g - x0) ** 2)), float(np.mean((h - y0) ** 2)),
                              float(se[t, 0]), float(se[t, 1])))
        x, y = denoise(spec, NoiseModel.diagonal(se[t]), np.vstack([g, h]))
    return out
