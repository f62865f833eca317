"""MMSE estimation of a linearly correlated Bernoulli-Gaussian signal in Gaussian noise.

Conditioned on the activity pattern ``theta`` the signal ``S = Phi Z`` is
Gaussian with covariance ``C(theta) = Phi(theta) Sigma Phi(theta)^T``, so the
posterior given ``O = S + N`` is a finite Gaussian mixture over patterns.
Channels whose noise variance is infinite are treated as absent: their
observation coordinate is dropped before anything is inverted.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from mtamp._kernels import mean_posterior_variance
from mtamp.rng import stream
from mtamp.source import source_covariance, support_patterns

RIDGE = 1e-12
DEFAULT_MC_SAMPLES = 100_000


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Observation noise covariance; ``inf`` on the diagonal marks an absent channel."""

    covariance: np.ndarray

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise EstimatorError("noise covariance must be square")
        diag = np.diag(cov)
        if np.any(np.isnan(cov)) or np.any(diag < 0):
            raise EstimatorError("noise covariance must have a non-negative diagonal")
        absent = np.isinf(diag)
        off = cov[np.ix_(absent, np.arange(len(diag)))]
        if absent.any() and np.any(off[:, ~absent] != 0):
            raise EstimatorError("an absent channel cannot be correlated with other channels")
        obs = ~absent
        sub = cov[np.ix_(obs, obs)]
        if sub.size:
            if not np.allclose(sub, sub.T, rtol=0, atol=1e-12 * max(1.0, np.abs(sub).max())):
                raise EstimatorError("noise covariance must be symmetric")
            if np.linalg.eigvalsh(sub).min() < -1e-12 * max(1.0, np.trace(sub)):
                raise EstimatorError("noise covariance must be positive semidefinite")
        cov.setflags(write=False)
        object.__setattr__(self, "covariance", cov)

    @classmethod
    def diagonal(cls, variances):
        return cls(np.diag(np.asarray(variances, dtype=float)))

    @classmethod
    def from_snr(cls, snrs):
        """Independent channels with inverse variances ``snrs`` (0 means absent)."""
        s = np.asarray(snrs, dtype=float)
        if np.any(s < 0) or np.any(np.isnan(s)):
            raise EstimatorError("inverse variances must be non-negative")
        with np.errstate(divide="ignore"):
            return cls.diagonal(np.where(s > 0, 1.0 / s, np.inf))

    @property
    def observed(self):
        return np.flatnonzero(np.isfinite(np.diag(self.covariance)))


@dataclass(frozen=True)
class PosteriorSummary:
    mean: np.ndarray
    covariance: np.ndarray
    pattern_posteriors: np.ndarray


def _floor_noise(noise_oo, prior_oo):
    """Lift the noise covariance so its smallest eigenvalue is >= RIDGE * trace(total)."""
    floor = RIDGE * (np.trace(prior_oo) + np.trace(noise_oo))
    if not np.isfinite(floor) or floor <= 0:
        raise EstimatorError("total covariance is singular and cannot be regularized")
    lo = np.linalg.eigvalsh(noise_oo).min()
    if lo < floor:
        noise_oo = noise_oo + (floor - min(lo, 0.0)) * np.eye(noise_oo.shape[0])
    return noise_oo


class MixturePosterior:
    """Per-pattern Gaussian pieces of the posterior for one (source, noise) pair.

    Conditional covariances and gains are formed in the space of the active
    components, ``Cov(S | O, theta) = Phi_K inv(diag(alpha_K) + Phi_K^T inv(N) Phi_K) Phi_K^T``,
    which stays positive semidefinite when the noise is tiny.
    """

    def __init__(self, spec, noise):
        if noise.covariance.shape != (spec.t, spec.t):
            raise EstimatorError(
                f"noise covariance must be {spec.t}x{spec.t}, got {noise.covariance.shape}"
            )
        bits, probs = support_patterns(spec)
        self.spec = spec
        self.n_patterns = len(probs)
        self.live = np.flatnonzero(probs > 0)
        self.obs = obs = noise.observed

        var = spec.component_var
        t, d, P = spec.t, len(obs), len(self.live)
        if d:
            prior_oo = (spec.mixing[obs] * var) @ spec.mixing[obs].T
            noise_oo = _floor_noise(noise.covariance[np.ix_(obs, obs)], prior_oo)
            self.noise_inv = np.linalg.inv(noise_oo)
            self.noise_inv = 0.5 * (self.noise_inv + self.noise_inv.T)
        else:
            noise_oo = np.zeros((0, 0))
            self.noise_inv = np.zeros((0, 0))
        self.log_prior = np.log(probs[self.live])
        self.gain = np.zeros((P, t, d))
        self.cond_cov = np.zeros((P, t, t))
        self.total_inv = np.zeros((P, d, d))
        self.total_sqrt = np.zeros((P, d, d))
        self.logdet = np.zeros(P)
        for j, p in enumerate(self.live):
            act = bits[p]
            phi_k = spec.mixing[:, act]
            if d:
                evals, evecs = np.linalg.eigh((phi_k[obs] * var[act]) @ phi_k[obs].T + noise_oo)
                self.total_inv[j] = (evecs / evals) @ evecs.T
                self.total_sqrt[j] = evecs * np.sqrt(evals)
                self.logdet[j] = np.sum(np.log(evals))
            if not act.any():
                continue
            if d:
                back = phi_k[obs].T @ self.noise_inv
                prec = np.diag(1.0 / var[act]) + back @ phi_k[obs]
            else:
                back = np.zeros((act.sum(), 0))
                prec = np.diag(1.0 / var[act])
            pe, pv = np.linalg.eigh(0.5 * (prec + prec.T))
            post_k = (pv / pe) @ pv.T
            cc = phi_k @ post_k @ phi_k.T
            self.cond_cov[j] = 0.5 * (cc + cc.T)
            self.gain[j] = phi_k @ post_k @ back

    def weights(self, x_obs):
        """Posterior pattern weights, shape (P, n), from observed rows (d, n)."""
        P, n = len(self.live), x_obs.shape[1]
        lw = np.empty((P, n))
        lw[:] = (self.log_prior - 0.5 * self.logdet)[:, None]
        d = len(self.obs)
        if d:
            sq = [x_obs[i] * x_obs[i] for i in range(d)]
            cross = {(i, j): x_obs[i] * x_obs[j] for i in range(d) for j in range(i + 1, d)}
            for p in range(P):
                inv = self.total_inv[p]
                q = inv[0, 0] * sq[0]
                for i in range(1, d):
                    q += inv[i, i] * sq[i]
                for (i, j), xx in cross.items():
                    q += (2.0 * inv[i, j]) * xx
                lw[p] -= 0.5 * q
        lw -= lw.max(axis=0)
        np.exp(lw, out=lw)
        lw /= lw.sum(axis=0)
        return lw

    def _cond_means(self, x_obs):
        P, t, d = self.gain.shape
        cm = np.zeros((P, t, x_obs.shape[1]))
        for p in range(P):
            g = self.gain[p]
            for i in range(t):
                for j in range(d):
                    if g[i, j] != 0.0:
                        cm[p, i] += g[i, j] * x_obs[j]
        return cm

    def moments(self, x, full_cov=False):
        """Posterior mean (t, n) and covariance diagonal (t, n) or full (t, t, n)."""
        x_obs = x[self.obs]
        w = self.weights(x_obs)
        cond_mean = self._cond_means(x_obs)
        t = self.spec.t
        mean = np.zeros((t, x.shape[1]))
        for p in range(len(self.live)):
            mean += w[p] * cond_mean[p]
        dev = cond_mean - mean[None]
        if full_cov:
            cov = np.einsum("pn,pij->ijn", w, self.cond_cov)
            for i in range(t):
                for j in range(i, t):
                    c = np.einsum("pn,pn->n", w, dev[:, i] * dev[:, j])
                    cov[i, j] += c
                    if j != i:
                        cov[j, i] += c
            return mean, cov, w
        diag = np.diagonal(self.cond_cov, axis1=1, axis2=2)
        var = diag.T @ w + np.einsum("pn,pin->in", w, dev * dev)
        return mean, var, w

    def jacobian_from_cov(self, cov):
        """Diagonal of d(mean)/dx from the full posterior covariance (t, t, n)."""
        t = self.spec.t
        jac = np.zeros((t, cov.shape[-1]))
        if len(self.obs):
            # Gaussian-channel identity: d E[S|x] / dx_O = Cov(S, S_O | x) @ inv(noise_OO)
            j_full = np.einsum("ijn,jk->ikn", cov[:, self.obs, :], self.noise_inv)
            for pos, o in enumerate(self.obs):
                jac[o] = j_full[o, pos]
        return jac


def _as_columns(spec, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != spec.t:
        raise EstimatorError(f"observations must have {spec.t} rows, got {x.shape[0]}")
    return x


def posterior(spec, noise, x):
    model = MixturePosterior(spec, noise)
    xc = _as_columns(spec, x)
    mean, cov, w = model.moments(xc, full_cov=True)
    pp = np.zeros(model.n_patterns)
    pp[model.live] = w[:, 0]
    return PosteriorSummary(mean=mean[:, 0], covariance=cov[:, :, 0], pattern_posteriors=pp)


def denoise(spec, noise, observations):
    """Column-wise posterior mean of a t x n observation matrix."""
    model = MixturePosterior(spec, noise)
    mean, _, _ = model.moments(_as_columns(spec, observations))
    return mean


def denoise_with_jacobian(spec, noise, observations):
    """Posterior mean and the diagonal observation-Jacobian, both t x n."""
    model = MixturePosterior(spec, noise)
    mean, cov, _ = model.moments(_as_columns(spec, observations), full_cov=True)
    return mean, model.jacobian_from_cov(cov)


def jacobian_diag(spec, noise, x):
    """``d eta_o / d x_o`` for each terminal at the single observation ``x``."""
    _, jac = denoise_with_jacobian(spec, noise, x)
    return jac[:, 0]


@lru_cache(maxsize=32)
def _crn_normals(seed, n_patterns, n_per, t):
    rng = stream(seed, "mmse-crn")
    z = rng.standard_normal((n_patterns, t, n_per))
    z.setflags(write=False)
    return z


def scalar_channel_mmse(spec, s_x, s_y=None, samples=DEFAULT_MC_SAMPLES, seed=0, return_stderr=False):
    """Monte-Carlo ``mmse_o(s)`` for every terminal ``o``.

    ``s_x, s_y`` are the channel inverse variances (``s = 0`` means the
    channel is absent).  A sequence may be passed as ``s_x`` for t != 2.
    Sampling is stratified over activity patterns and reuses the same
    normal draws for a given ``(seed, samples)``, so repeated calls at
    different SNRs share common random numbers.
    """
    snr = np.atleast_1d(np.asarray(s_x if s_y is None else [s_x, s_y], dtype=float))
    if snr.size != spec.t:
        raise EstimatorError(f"need {spec.t} inverse variances, got {snr.size}")
    if np.any(~np.isfinite(snr)) or np.any(snr < 0):
        raise EstimatorError("inverse variances must be finite and non-negative")
    if samples < 1:
        raise EstimatorError("samples must be at least 1")
    model = MixturePosterior(spec, NoiseModel.from_snr(snr))
    P = len(model.live)
    obs = model.obs
    if len(obs) == 0:
        prior = np.diag(source_covariance(spec))
        out = prior.copy()
        return (out, np.zeros_like(out)) if return_stderr else out

    n_per = -(-samples // P)
    xi = _crn_normals(int(seed), P, n_per, spec.t)
    means = np.empty((P, spec.t))
    sems = np.empty((P, spec.t))
    log_const = model.log_prior - 0.5 * model.logdet
    cond_diag = np.ascontiguousarray(np.diagonal(model.cond_cov, axis1=1, axis2=2))
    for j in range(P):
        x = np.ascontiguousarray(model.total_sqrt[j] @ xi[j][obs])
        m1, m2 = mean_posterior_variance(x, log_const, model.total_inv, model.gain, cond_diag)
        means[j] = m1
        sems[j] = np.sqrt(np.maximum(m2 - m1 * m1, 0.0) / max(n_per - 1, 1))
    pw = np.exp(model.log_prior)
    out = pw @ means
    if return_stderr:
        return out, np.sqrt((pw**2) @ (sems**2))
    return out

