"""Two-terminal AMP (MAMP) with i.i.d. Gaussian measurement matrices.

The terminals only interact through the joint MMSE denoiser; each has its
own residual and Onsager correction:

    r^t     = u - A x^t + (<d eta^x / dg> / rho_x) r^{t-1}
    s^t     = v - B y^t + (<d eta^y / dh> / rho_y) s^{t-1}
    (x, y)^{t+1} = eta_t(x^t + A^T r^t, y^t + B^T s^t)

``eta_t`` is the posterior mean for effective noise variances
``(tau_x^t, tau_y^t)``, taken from a state-evolution schedule or estimated
from the residual norms.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from mtamp.estimator import NoiseModel, denoise_with_jacobian
from mtamp.rng import stream
from mtamp.se import MonteCarlo, se_trajectory
from mtamp.source import sample_source


class DivergenceError(FloatingPointError):
    def __init__(self, iteration, what):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True, eq=False)
class GaussianEnsemble:
    matrix: np.ndarray
    seed: int = None

    @property
    def m(self):
        return self.matrix.shape[0]

    @property
    def n(self):
        return self.matrix.shape[1]

    @property
    def rate(self):
        return self.m / self.n


def make_ensemble(m, n, seed):
    """m x n matrix with i.i.d. N(0, 1/m) entries."""
    if m < 1 or n < 1:
        raise ValueError("m and n must be positive")
    rng = stream(seed, "matrix", 0, 0)
    return GaussianEnsemble(rng.standard_normal((m, n)) * math.sqrt(1.0 / m), seed)


def measure(ensemble, signal, noise_var, seed):
    signal = np.asarray(signal, dtype=float)
    if signal.shape != (ensemble.n,):
        raise ValueError(f"signal must have length {ensemble.n}, got {signal.shape}")
    if noise_var < 0:
        raise ValueError("noise_var must be non-negative")
    out = ensemble.matrix @ signal
    if noise_var > 0:
        out = out + math.sqrt(noise_var) * stream(seed, "measurement-noise").standard_normal(ensemble.m)
    return out


@dataclass
class RunTrace:
    """Per-iteration record; entry ``t`` describes the step that produced x^{t+1}."""

    mse_x: list = field(default_factory=list)
    mse_y: list = field(default_factory=list)
    residual_var_x: list = field(default_factory=list)
    residual_var_y: list = field(default_factory=list)
    tau_x: list = field(default_factory=list)
    tau_y: list = field(default_factory=list)
    se_tau_x: list = field(default_factory=list)
    se_tau_y: list = field(default_factory=list)
    effective_var_x: list = field(default_factory=list)
    effective_var_y: list = field(default_factory=list)
    change: list = field(default_factory=list)
    block_mse_x: list = field(default_factory=list)
    block_mse_y: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self):
        return len(self.change)


def _mse(a, b):
    return float(np.mean((a - b) ** 2))


def _schedule(tau_schedule, spec, rho_x, rho_y, noise_var, max_iter, mc):
    if isinstance(tau_schedule, str):
        if tau_schedule == "empirical":
            return None
        if tau_schedule == "se":
            return se_trajectory(spec, rho_x, rho_y, noise_var[0], noise_var[1], max_iter, mc)
        raise ValueError(f"unknown tau schedule {tau_schedule!r}")
    sched = np.asarray(tau_schedule, dtype=float)
    if sched.ndim != 2 or sched.shape[1] != 2 or len(sched) == 0:
        raise ValueError("an explicit tau schedule must be a (T, 2) array")
    return sched


def mamp_run(A, B, u, v, spec, tau_schedule="se", max_iter=100, stop_tol=1e-8,
             noise_var=(0.0, 0.0), mc=MonteCarlo(), truth=None):
    """Run MAMP from x^0 = y^0 = 0 and return ``(x_hat, y_hat, trace)``.

    ``tau_schedule`` is ``"se"`` (state evolution for these rates and
    ``noise_var``), ``"empirical"`` (``tau = |r|^2 / m``) or an explicit
    (T, 2) array; an array shorter than the run is held at its last row.
    ``truth = (x, y)`` is only used to fill in the MSE columns of the trace.
    The run stops once the mean squared change of both estimates drops
    below ``stop_tol``.
    """
    if A.n != B.n:
        raise ValueError("A and B must have the same number of columns")
    n = A.n
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != (A.m,) or v.shape != (B.m,):
        raise ValueError("measurement lengths do not match the matrices")
    if spec.t != 2:
        raise ValueError("MAMP runs need a two-terminal source")
    rho_x, rho_y = A.rate, B.rate
    sched = _schedule(tau_schedule, spec, rho_x, rho_y, noise_var, max_iter, mc)

    x = np.zeros(n)
    y = np.zeros(n)
    r_prev = np.zeros(A.m)
    s_prev = np.zeros(B.m)
    ons_x = ons_y = 0.0
    trace = RunTrace()
    for t in range(max_iter):
        r = u - A.matrix @ x + (ons_x / rho_x) * r_prev
        s = v - B.matrix @ y + (ons_y / rho_y) * s_prev
        g = x + A.matrix.T @ r
        h = y + B.matrix.T @ s
        res_x = float(r @ r) / A.m
        res_y = float(s @ s) / B.m
        if sched is None:
            tau = np.array([res_x, res_y])
        else:
            tau = sched[min(t, len(sched) - 1)]
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(h)) and np.all(np.isfinite(tau))):
            raise DivergenceError(t, "pseudo-data")
        est, jac = denoise_with_jacobian(spec, NoiseModel.diagonal(tau), np.vstack([g, h]))
        x_new, y_new = est
        if not np.all(np.isfinite(est)):
            raise DivergenceError(t, "estimate")
        ons_x = float(np.mean(jac[0]))
        ons_y = float(np.mean(jac[1]))
        change = max(_mse(x_new, x), _mse(y_new, y))

        trace.residual_var_x.append(res_x)
        trace.residual_var_y.append(res_y)
        trace.tau_x.append(float(tau[0]))
        trace.tau_y.append(float(tau[1]))
        if sched is not None:
            trace.se_tau_x.append(float(tau[0]))
            trace.se_tau_y.append(float(tau[1]))
        if truth is not None:
            trace.mse_x.append(_mse(x_new, truth[0]))
            trace.mse_y.append(_mse(y_new, truth[1]))
            trace.effective_var_x.append(_mse(g, truth[0]))
            trace.effective_var_y.append(_mse(h, truth[1]))
        trace.change.append(change)

        x, y, r_prev, s_prev = x_new, y_new, r, s
        if change < stop_tol:
            trace.converged = True
            break
    return x, y, trace


@dataclass
class Problem:
    """A sampled two-terminal instance: signals, matrices and measurements."""

    x: np.ndarray
    y: np.ndarray
    A: GaussianEnsemble
    B: GaussianEnsemble
    u: np.ndarray
    v: np.ndarray


def make_problem(spec, n, rho_x, rho_y, seed, noise_var=(0.0, 0.0)):
    x, y = sample_source(spec, n, stream_seed(seed, "signal"))
    A = make_ensemble(max(1, round(rho_x * n)), n, stream_seed(seed, "A"))
    B = make_ensemble(max(1, round(rho_y * n)), n, stream_seed(seed, "B"))
    u = measure(A, x, noise_var[0], stream_seed(seed, "noise-x"))
    v = measure(B, y, noise_var[1], stream_seed(seed, "noise-y"))
    return Problem(x, y, A, B, u, v)


def stream_seed(seed, *labels):
    """Derive an integer sub-seed from ``seed`` and ``labels``."""
    return int(stream(seed, "subseed", *labels).integers(0, 2**63 - 1))
