"""Spatially coupled ensembles, block state evolution and block MAMP.

Block indexing: ``W`` is ``L_r x L_c``; column block ``c`` holds ``N``
variables and row block ``r`` holds ``M_o = round(delta_o * N)`` measurements
of terminal ``o``.  Both terminals share ``W``.

State evolution indexing follows ``psi(0) = inf``:

    phi_a(t)   = sigma^2 + (1/delta) sum_i W[a, i] psi_i(t)
    psi_i(t+1) = mmse(sum_b W[b, i] / phi_b^x(t), sum_b W[b, i] / phi_b^y(t))

so ``states[t]`` holds ``psi(t)`` and ``phi(t)``.  The all-zero starting
estimate of block MAMP has MSE ``psi(1)``; iteration ``t`` of the algorithm
denoises with ``phi(t+1)`` and its output has predicted MSE ``psi(t+2)``.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from mtamp.estimator import NoiseModel, denoise_with_jacobian, scalar_channel_mmse
from mtamp.mamp import DivergenceError, RunTrace, stream_seed
from mtamp.rng import stream
from mtamp.se import MonteCarlo, fmt
from mtamp.source import rid_summary, sample_source

RECOVERY_THRESHOLD = 1e-4


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Band-diagonal variance profile.

    Row ``r < L_c`` is centred on column ``r``; every later row is a seeding
    row that touches a single boundary column, listed in ``seeded``.
    """

    entries: np.ndarray
    bandwidth: int = 0
    seeded: tuple = ()

    def __post_init__(self):
        e = np.atleast_2d(np.asarray(self.entries, dtype=float))
        if np.any(e < 0) or not np.all(np.isfinite(e)):
            raise ValueError("weights must be finite and non-negative")
        rs = e.sum(axis=1)
        if np.any(rs < 0.5 - 1e-12) or np.any(rs > 2 + 1e-12):
            raise ValueError(f"row sums must lie in [1/2, 2], got range [{rs.min()}, {rs.max()}]")
        if np.any(e.sum(axis=0) == 0):
            raise ValueError("every column block needs at least one nonzero weight")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)
        object.__setattr__(self, "seeded", tuple(int(c) for c in self.seeded))

    @property
    def L_r(self):
        return self.entries.shape[0]

    @property
    def L_c(self):
        return self.entries.shape[1]

    def row_sums(self):
        return self.entries.sum(axis=1)

    def effective_rate_factor(self):
        """Per column block, sum_r W[r, c] / rowsum_r.

        With all blocks at the same MSE this is the block's effective rate
        divided by ``delta``; interior blocks of the band give exactly 1.
        """
        return (self.entries / self.row_sums()[:, None]).sum(axis=0)

    def is_banded(self):
        """Band rows vanish beyond ``bandwidth``; seeding rows touch one column."""
        e = self.entries
        for r in range(min(self.L_r, self.L_c)):
            cols = np.flatnonzero(e[r])
            if cols.size and np.abs(cols - r).max() > self.bandwidth:
                return False
        return all(np.count_nonzero(e[r]) == 1 for r in range(self.L_c, self.L_r))


def build_weight_matrix(L_c, w=2, seed_blocks=2, seed_boost=1.0, seed_rows=2, both_ends=True):
    """Uniform band ``1/(2w+1)`` on ``|r - c| <= w`` plus boundary seeding rows.

    Each of the first ``seed_blocks`` column blocks (and, with ``both_ends``,
    the last ``seed_blocks``) gets ``seed_rows`` extra rows of weight
    ``seed_boost`` that touch only that block.  Without noise, ``seed_boost``
    cancels out of the state evolution; ``seed_rows`` sets the extra rate.
    """
    if L_c < 2 * w + 1:
        raise ValueError(f"need L_c >= 2w + 1, got L_c = {L_c}, w = {w}")
    if w < 0 or seed_rows < 0:
        raise ValueError("w and seed_rows must be non-negative")
    if not 0 <= seed_blocks <= L_c:
        raise ValueError("seed_blocks must lie in [0, L_c]")
    if seed_blocks and seed_rows and not 0.5 <= seed_boost <= 2:
        raise ValueError("seed_boost must lie in [1/2, 2] to keep rows roughly stochastic")
    band = np.zeros((L_c, L_c))
    for r in range(L_c):
        band[r, max(0, r - w):min(L_c, r + w + 1)] = 1.0 / (2 * w + 1)
    cols = list(range(seed_blocks))
    if both_ends:
        cols += [c for c in range(L_c - seed_blocks, L_c) if c not in cols]
    extra = np.zeros((len(cols) * seed_rows, L_c))
    for i, c in enumerate(cols):
        extra[i * seed_rows:(i + 1) * seed_rows, c] = seed_boost
    return WeightMatrix(np.vstack([band, extra]), w, tuple(cols) if seed_rows else ())


def single_block():
    return WeightMatrix([[1.0]])


@dataclass
class BlockState:
    phi_x: np.ndarray
    phi_y: np.ndarray
    psi_x: np.ndarray
    psi_y: np.ndarray
    t: int


def _row_phi(W, psi, delta, sigma2):
    with np.errstate(invalid="ignore"):
        prod = np.where(W.entries > 0, W.entries * psi[None, :], 0.0)
    return sigma2 + prod.sum(axis=1) / delta


def column_snr(W, phi):
    """s_c = sum_r W[r, c] / phi_r with 1/inf = 0."""
    inv = np.where(np.isinf(phi), 0.0, 1.0 / phi)
    return W.entries.T @ inv


def coupled_se_run(spec, W, delta_x, delta_y, sigma2_x=0.0, sigma2_y=0.0, T=400, mc=MonteCarlo(),
                   stop_when_recovered=None, stop_when_stalled=False, ignore_cross=False):
    """Block state evolution ``states[0..]`` (see module docstring for indexing).

    ``stop_when_recovered`` (a threshold) ends the run once every ``psi`` is
    below it.  ``stop_when_stalled`` ends it once every block that is not yet
    below the recovery threshold moves by at most ``STALL_RTOL`` relative in
    one step.  ``ignore_cross`` drops the other terminal's channel inside
    each ``mmse`` (single-terminal comparison).
    """
    if delta_x <= 0 or delta_y <= 0:
        raise ValueError("deltas must be positive")
    if T < 0:
        raise ValueError("T must be non-negative")
    thr = RECOVERY_THRESHOLD if stop_when_recovered is None else stop_when_recovered
    Lc = W.L_c
    psi_x = np.full(Lc, np.inf)
    psi_y = np.full(Lc, np.inf)
    states = []
    cache = {}
    for t in range(T + 1):
        phi_x = _row_phi(W, psi_x, delta_x, sigma2_x)
        phi_y = _row_phi(W, psi_y, delta_y, sigma2_y)
        states.append(BlockState(phi_x, phi_y, psi_x, psi_y, t))
        if t == T:
            break
        if stop_when_recovered is not None and np.all(psi_x < thr) and np.all(psi_y < thr):
            break
        if stop_when_stalled and t > 1 and _stalled(states[-2], states[-1], thr):
            break
        sx = column_snr(W, phi_x)
        sy = column_snr(W, phi_y)
        new_x = np.empty(Lc)
        new_y = np.empty(Lc)
        for c in range(Lc):
            if ignore_cross:
                mx = _cached_mmse(cache, spec, sx[c], 0.0, mc)[0]
                my = _cached_mmse(cache, spec, 0.0, sy[c], mc)[1]
            else:
                mx, my = _cached_mmse(cache, spec, sx[c], sy[c], mc)
            new_x[c], new_y[c] = mx, my
        psi_x, psi_y = new_x, new_y
    return states


STALL_RTOL = 1e-10


def _stalled(prev, cur, thr):
    moved = False
    for a, b in ((prev.psi_x, cur.psi_x), (prev.psi_y, cur.psi_y)):
        open_ = b >= thr
        if np.any(open_ & ~(a >= thr)):
            return False
        if np.any(np.abs(b[open_] - a[open_]) > STALL_RTOL * np.abs(a[open_])):
            moved = True
    stuck = np.any(cur.psi_x >= thr) or np.any(cur.psi_y >= thr)
    return stuck and not moved


def _cached_mmse(cache, spec, sx, sy, mc):
    key = (float(sx), float(sy))
    if key not in cache:
        cache[key] = scalar_channel_mmse(spec, sx, sy, samples=mc.samples, seed=mc.seed)
    return cache[key]


def recovered_blocks(state, threshold=RECOVERY_THRESHOLD):
    return state.psi_x < threshold, state.psi_y < threshold


def wave_front(states, terminal, threshold=RECOVERY_THRESHOLD):
    """Per state, the number of leading column blocks that are all recovered."""
    out = []
    for st in states:
        psi = st.psi_x if terminal == "x" else st.psi_y
        ok = psi < threshold
        out.append(int(np.argmin(ok)) if not ok.all() else len(ok))
    return np.array(out)


def recovery_times(states, terminal, threshold=RECOVERY_THRESHOLD):
    """First state index at which each column block is below threshold (-1 if never)."""
    psi = np.array([st.psi_x if terminal == "x" else st.psi_y for st in states])
    below = psi < threshold
    first = np.where(below.any(axis=0), below.argmax(axis=0), -1)
    return first


def q_matrix(phi, W):
    """Block-level Q: Q[r, c] = (1/phi_r) / sum_k W[k, c] / phi_k.

    A column whose every inflow row has infinite phi falls back to the
    uniform weighting ``1 / sum_k W[k, c]``.
    """
    inv = np.where(np.isinf(phi), 0.0, 1.0 / np.asarray(phi, dtype=float))
    denom = W.entries.T @ inv
    Q = np.empty((W.L_r, W.L_c))
    for c in range(W.L_c):
        if denom[c] > 0:
            Q[:, c] = inv / denom[c]
        else:
            Q[:, c] = 1.0 / W.entries[:, c].sum()
    return Q


def expand_blocks(block_values, M, N):
    """Expand an L_r x L_c block-constant description to the full m x n matrix."""
    return np.repeat(np.repeat(np.asarray(block_values), M, axis=0), N, axis=1)


@dataclass(frozen=True, eq=False)
class CoupledEnsemble:
    """Block Gaussian matrix; only the blocks with W[r, c] > 0 are stored."""

    weight: WeightMatrix
    M: int
    N: int
    seed: int
    support: tuple
    blocks: dict = field(repr=False)

    @property
    def m(self):
        return self.M * self.weight.L_r

    @property
    def n(self):
        return self.N * self.weight.L_c

    @property
    def delta(self):
        return self.M / self.N

    @property
    def rate(self):
        return self.m / self.n

    def dense(self):
        out = np.zeros((self.m, self.n))
        M, N = self.M, self.N
        for (r, c) in self.support:
            out[r * M:(r + 1) * M, c * N:(c + 1) * N] = self.blocks[r, c]
        return out

    def matvec(self, x):
        M, N = self.M, self.N
        out = np.zeros(self.m)
        for (r, c) in self.support:
            out[r * M:(r + 1) * M] += self.blocks[r, c] @ x[c * N:(c + 1) * N]
        return out

    def weighted_rmatvec(self, r_vec, Q):
        """(Q expanded ⊙ A)^T r for a block-level Q."""
        M, N = self.M, self.N
        out = np.zeros(self.n)
        for (r, c) in self.support:
            out[c * N:(c + 1) * N] += Q[r, c] * (self.blocks[r, c].T @ r_vec[r * M:(r + 1) * M])
        return out


def build_coupled_ensemble(W, M, N, seed):
    """Block (r, c) holds i.i.d. N(0, W[r, c]/M) entries, drawn from its own stream."""
    if M < 1 or N < 1:
        raise ValueError("M and N must be positive")
    support = tuple((r, c) for r in range(W.L_r) for c in range(W.L_c) if W.entries[r, c] > 0)
    blocks = {}
    for (r, c) in support:
        rng = stream(seed, "matrix", r, c)
        blocks[r, c] = rng.standard_normal((M, N)) * math.sqrt(W.entries[r, c] / M)
    return CoupledEnsemble(W, M, N, seed, support, blocks)


def coupled_measure(ens, signal, noise_var, seed):
    out = ens.matvec(np.asarray(signal, dtype=float))
    if noise_var > 0:
        out = out + math.sqrt(noise_var) * stream(seed, "measurement-noise").standard_normal(ens.m)
    return out


def _block_means(vec, Lc, N):
    return vec.reshape(Lc, N).mean(axis=1)


def coupled_mamp_run(A, B, u, v, spec, se_states, max_iter=100, stop_tol=1e-8, truth=None):
    """Block MAMP driven by a precomputed block state evolution.

    ``se_states`` is the output of :func:`coupled_se_run`; iteration ``t``
    uses ``se_states[t + 1]`` (held at the last state if the list is short).
    ``"empirical"`` instead estimates each row block's ``phi`` from its
    residual, ``|r_r|^2 / M``, which stays stable at small block sizes where
    the SE schedule runs ahead of the actual error.
    Returns ``(x_hat, y_hat, trace)`` with per-column-block MSE in
    ``trace.block_mse_x`` / ``trace.block_mse_y`` when ``truth`` is given.
    """
    W = A.weight
    if B.weight is not W and not np.array_equal(B.weight.entries, W.entries):
        raise ValueError("both terminals must share the weight matrix")
    if A.N != B.N:
        raise ValueError("column block sizes differ between terminals")
    if spec.t != 2:
        raise ValueError("block MAMP needs a two-terminal source")
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != (A.m,) or v.shape != (B.m,):
        raise ValueError("measurement lengths do not match the ensembles")
    empirical = isinstance(se_states, str)
    if empirical and se_states != "empirical":
        raise ValueError(f"unknown phi schedule {se_states!r}")
    if not empirical and len(se_states) < 2:
        raise ValueError("need at least two SE states")
    Lc, Lr, N = W.L_c, W.L_r, A.N
    n = A.n
    dx, dy = A.delta, B.delta

    x = np.zeros(n)
    y = np.zeros(n)
    r_prev = np.zeros(A.m)
    s_prev = np.zeros(B.m)
    Q_prev_x = Q_prev_y = None
    jac_x = jac_y = None
    trace = RunTrace()
    for t in range(max_iter):
        if t == 0:
            bx = np.zeros(Lr)
            by = np.zeros(Lr)
        else:
            bx = (W.entries * Q_prev_x) @ jac_x / dx
            by = (W.entries * Q_prev_y) @ jac_y / dy
        r = u - A.matvec(x) + np.repeat(bx, A.M) * r_prev
        s = v - B.matvec(y) + np.repeat(by, B.M) * s_prev
        if empirical:
            phi_x = (r.reshape(Lr, A.M) ** 2).mean(axis=1)
            phi_y = (s.reshape(Lr, B.M) ** 2).mean(axis=1)
            phi_x = np.maximum(phi_x, np.finfo(float).tiny)
            phi_y = np.maximum(phi_y, np.finfo(float).tiny)
        else:
            st = se_states[min(t + 1, len(se_states) - 1)]
            phi_x, phi_y = st.phi_x, st.phi_y
        Qx = q_matrix(phi_x, W)
        Qy = q_matrix(phi_y, W)
        g = x + A.weighted_rmatvec(r, Qx)
        h = y + B.weighted_rmatvec(s, Qy)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
            raise DivergenceError(t, "pseudo-data")
        snr_x = column_snr(W, phi_x)
        snr_y = column_snr(W, phi_y)
        x_new = np.empty(n)
        y_new = np.empty(n)
        jac_x = np.empty(Lc)
        jac_y = np.empty(Lc)
        for c in range(Lc):
            sl = slice(c * N, (c + 1) * N)
            noise = NoiseModel.from_snr([snr_x[c], snr_y[c]])
            est, jac = denoise_with_jacobian(spec, noise, np.vstack([g[sl], h[sl]]))
            x_new[sl], y_new[sl] = est
            jac_x[c] = np.mean(jac[0])
            jac_y[c] = np.mean(jac[1])
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(y_new))):
            raise DivergenceError(t, "estimate")
        change = max(float(np.mean((x_new - x) ** 2)), float(np.mean((y_new - y) ** 2)))

        trace.residual_var_x.append(float(r @ r) / A.m)
        trace.residual_var_y.append(float(s @ s) / B.m)
        trace.change.append(change)
        if truth is not None:
            ex = (x_new - truth[0]) ** 2
            ey = (y_new - truth[1]) ** 2
            trace.mse_x.append(float(ex.mean()))
            trace.mse_y.append(float(ey.mean()))
            trace.block_mse_x.append(_block_means(ex, Lc, N))
            trace.block_mse_y.append(_block_means(ey, Lc, N))
        x, y, r_prev, s_prev = x_new, y_new, r, s
        Q_prev_x, Q_prev_y = Qx, Qy
        if change < stop_tol:
            trace.converged = True
            break
    return x, y, trace


@dataclass
class CoupledProblem:
    x: np.ndarray
    y: np.ndarray
    A: CoupledEnsemble
    B: CoupledEnsemble
    u: np.ndarray
    v: np.ndarray


def make_coupled_problem(spec, W, N, delta_x, delta_y, seed, noise_var=(0.0, 0.0)):
    x, y = sample_source(spec, N * W.L_c, stream_seed(seed, "signal"))
    A = build_coupled_ensemble(W, max(1, round(delta_x * N)), N, stream_seed(seed, "A"))
    B = build_coupled_ensemble(W, max(1, round(delta_y * N)), N, stream_seed(seed, "B"))
    u = coupled_measure(A, x, noise_var[0], stream_seed(seed, "noise-x"))
    v = coupled_measure(B, y, noise_var[1], stream_seed(seed, "noise-y"))
    return CoupledProblem(x, y, A, B, u, v)


@dataclass
class BoundaryPoint:
    delta_x: float
    delta_y: float
    converged_T: int
    anomaly: str = ""


def _succeeds(spec, W, dx, dy, T, mc, threshold, sigma2):
    states = coupled_se_run(spec, W, dx, dy, sigma2[0], sigma2[1], T, mc,
                            stop_when_recovered=threshold, stop_when_stalled=True)
    last = states[-1]
    ok = bool(np.all(last.psi_x < threshold) and np.all(last.psi_y < threshold))
    return ok, last.t


def phase_boundary_search(spec, W, delta_x_grid, lo=0.05, hi=1.0, tol=0.005, T=400, mc=MonteCarlo(),
                          threshold=RECOVERY_THRESHOLD, sigma2=(0.0, 0.0)):
    """For each delta_x, bisect the smallest delta_y with full block recovery within T.

    Success is assumed monotone in delta_y; if ``hi`` fails or ``lo``
    succeeds the point is reported with an ``anomaly`` note instead of a
    bisected value.
    """
    out = []
    for dx in delta_x_grid:
        ok_hi, t_hi = _succeeds(spec, W, dx, hi, T, mc, threshold, sigma2)
        if not ok_hi:
            out.append(BoundaryPoint(float(dx), math.nan, -1, "no recovery at upper bracket"))
            continue
        ok_lo, t_lo = _succeeds(spec, W, dx, lo, T, mc, threshold, sigma2)
        if ok_lo:
            out.append(BoundaryPoint(float(dx), float(lo), t_lo, "recovery at lower bracket"))
            continue
        a, b, tb = lo, hi, t_hi
        while b - a > tol:
            mid = 0.5 * (a + b)
            ok, tm = _succeeds(spec, W, dx, mid, T, mc, threshold, sigma2)
            if ok:
                b, tb = mid, tm
            else:
                a = mid
        out.append(BoundaryPoint(float(dx), float(b), tb))
    return out


def pentagon(spec):
    """Corner points of the achievable rate region, (d(X|Y), d(Y)) ... (d(X), d(Y|X))."""
    d = rid_summary(spec)
    return {
        "d_x": d["d_x"], "d_y": d["d_y"], "d_joint": d["d_joint"],
        "d_x_given_y": d["d_x_given_y"], "d_y_given_x": d["d_y_given_x"],
        "corners": [(d["d_x_given_y"], d["d_y"]), (d["d_x"], d["d_y_given_x"])],
    }


WAVE_COLUMNS = ("t", "terminal", "block", "psi", "empirical_mse")
BOUNDARY_COLUMNS = ("delta_x", "delta_y_boundary", "converged_T")


def write_wave_csv(states, path, trace=None):
    """Long-format wave trace; ``empirical_mse`` pairs psi(t) with the MAMP output of iteration t-2."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WAVE_COLUMNS)
        for st in states:
            for term in ("x", "y"):
                psi = st.psi_x if term == "x" else st.psi_y
                emp = None
                if trace is not None:
                    blocks = trace.block_mse_x if term == "x" else trace.block_mse_y
                    k = st.t - 2
                    if 0 <= k < len(blocks):
                        emp = blocks[k]
                for i, p in enumerate(psi):
                    w.writerow([st.t, term, i, fmt(p), "" if emp is None else fmt(emp[i])])


def write_boundary_csv(points, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BOUNDARY_COLUMNS)
        for p in points:
            w.writerow([fmt(p.delta_x), fmt(p.delta_y), p.converged_T])
