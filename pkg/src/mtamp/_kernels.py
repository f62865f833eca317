"""Compiled inner loop for the Monte-Carlo mmse (posterior variance averaged over samples)."""

import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def mean_posterior_variance(x, log_const, total_inv, gain, cond_diag):
    """Average over the columns of ``x`` (d, n) of the posterior variance per terminal.

    Returns ``(mean_var, mean_var_sq)``, both length t, so the caller can form
    standard errors.
    """
    d, n = x.shape
    P, t, _ = gain.shape
    lw = np.empty(P)
    cm = np.empty((P, t))
    acc = np.zeros(t)
    acc2 = np.zeros(t)
    for s in range(n):
        top = -np.inf
        for p in range(P):
            q = 0.0
            for i in range(d):
                xi = x[i, s]
                q += total_inv[p, i, i] * xi * xi
                for j in range(i + 1, d):
                    q += 2.0 * total_inv[p, i, j] * xi * x[j, s]
            lw[p] = log_const[p] - 0.5 * q
            if lw[p] > top:
                top = lw[p]
            for i in range(t):
                v = 0.0
                for j in range(d):
                    v += gain[p, i, j] * x[j, s]
                cm[p, i] = v
        z = 0.0
        for p in range(P):
            lw[p] = math.exp(lw[p] - top)
            z += lw[p]
        for i in range(t):
            m = 0.0
            for p in range(P):
                m += lw[p] * cm[p, i]
            m /= z
            v = 0.0
            for p in range(P):
                dv = cm[p, i] - m
                v += lw[p] * (cond_diag[p, i] + dv * dv)
            v /= z
            acc[i] += v
            acc2[i] += v * v
    return acc / n, acc2 / n
