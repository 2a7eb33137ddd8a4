"""Monte Carlo for absorbed chains with counter-based random numbers.

Every uniform is a pure function of (seed, path, step, slot), so results do
not depend on batching, chunk size or thread count.
"""
from __future__ import annotations

import math
import os
from bisect import bisect_right
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .kernel import Dist, QsdError, SubKernel
from .models import KernelSampler, Model, Sampler
from .spectral import q_process

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
CHUNK = 1 << 16


def philox4x32(counter, key, rounds: int = 10):
    """Philox4x32 block function; counter (..., 4) and key (2,) as uint32."""
    c = [np.array(counter[..., i], dtype=np.uint32) for i in range(4)]
    k0 = np.uint32(key[0])
    k1 = np.uint32(key[1])
    with np.errstate(over="ignore"):
        for r in range(rounds):
            p0 = c[0].astype(np.uint64) * _M0
            p1 = c[2].astype(np.uint64) * _M1
            hi0 = (p0 >> np.uint64(32)).astype(np.uint32)
            lo0 = (p0 & _MASK).astype(np.uint32)
            hi1 = (p1 >> np.uint64(32)).astype(np.uint32)
            lo1 = (p1 & _MASK).astype(np.uint32)
            c = [hi1 ^ c[1] ^ k0, lo1, hi0 ^ c[3] ^ k1, lo0]
            if r < rounds - 1:
                k0 = np.uint32(k0 + _W0)
                k1 = np.uint32(k1 + _W1)
    return np.stack(c, axis=-1)


def _key(seed: int):
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return (seed & 0xFFFFFFFF, seed >> 32)


def uniforms(seed: int, paths, step: int, k: int) -> np.ndarray:
    """(len(paths), k) uniforms in (0, 1) with 53-bit resolution."""
    paths = np.asarray(paths, dtype=np.uint64)
    m = paths.shape[0]
    nblk = (k + 1) // 2
    ctr = np.empty((m, nblk, 4), dtype=np.uint32)
    ctr[..., 0] = (paths & _MASK).astype(np.uint32)[:, None]
    ctr[..., 1] = (paths >> np.uint64(32)).astype(np.uint32)[:, None]
    ctr[..., 2] = np.uint32(step & 0xFFFFFFFF)
    ctr[..., 3] = np.arange(nblk, dtype=np.uint32)[None, :]
    out = philox4x32(ctr, _key(seed)).astype(np.uint64)
    a, b = out[..., 0::2] >> np.uint64(5), out[..., 1::2] >> np.uint64(6)
    u = ((a * np.uint64(67108864) + b).astype(np.float64) + 0.5) / 9007199254740992.0
    return u.reshape(m, 2 * nblk)[:, :k]


def step_uniforms(seed: int, path: int, steps, slot_block: int = 0) -> np.ndarray:
    """First uniform of each step for a single path, vectorized over steps."""
    steps = np.asarray(steps, dtype=np.uint64)
    ctr = np.empty((steps.shape[0], 4), dtype=np.uint32)
    ctr[:, 0] = path & 0xFFFFFFFF
    ctr[:, 1] = path >> 32
    ctr[:, 2] = (steps & _MASK).astype(np.uint32)
    ctr[:, 3] = slot_block
    out = philox4x32(ctr, _key(seed)).astype(np.uint64)
    a, b = out[:, 0] >> np.uint64(5), out[:, 1] >> np.uint64(6)
    return ((a * np.uint64(67108864) + b).astype(np.float64) + 0.5) / 9007199254740992.0


def _as_sampler(obj) -> Sampler:
    if isinstance(obj, Sampler):
        return obj
    if isinstance(obj, Model):
        return obj.sampler
    if isinstance(obj, SubKernel):
        return KernelSampler(obj)
    raise TypeError("expected a Sampler, Model or SubKernel")


def _threads():
    env = os.environ.get("QSDLAB_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, cap)


# ---------------------------------------------------------------- paths


@dataclass(frozen=True)
class Path:
    states: list
    absorbed_at: int | None
    horizon: int


def _advance(sampler, states, paths, seed, step):
    alive = states >= 0
    if not alive.any():
        return states
    idx = paths[alive]
    new = states.copy()
    new[alive] = sampler.step(states[alive], lambda k: uniforms(seed, idx, step, k))
    return new


def simulate(sampler, x0: int, horizon: int, stream) -> Path:
    """One path from x0; stream = (seed, path index)."""
    sampler = _as_sampler(sampler)
    seed, pid = stream
    states = np.array([int(x0)], dtype=np.int64)
    paths = np.array([pid], dtype=np.uint64)
    out = [int(x0)]
    for t in range(1, horizon + 1):
        states = _advance(sampler, states, paths, seed, t)
        if states[0] < 0:
            return Path(out, t, horizon)
        out.append(int(states[0]))
    return Path(out, None, horizon)


def _initial_states(mu0, seed, paths):
    w = np.asarray(mu0.weights if isinstance(mu0, Dist) else mu0, dtype=float)
    cdf = np.cumsum(w / w.sum())
    u = uniforms(seed, paths, 0, 1)[:, 0]
    return np.minimum(np.searchsorted(cdf, u, side="right"), w.size - 1).astype(np.int64)


def _run_chunk(sampler, mu0, seed, lo, hi, n, record):
    paths = np.arange(lo, hi, dtype=np.uint64)
    states = _initial_states(mu0, seed, paths)
    alive_counts = np.zeros(len(record), dtype=np.int64)
    grid = {t: i for i, t in enumerate(record)}
    if 0 in grid:
        alive_counts[grid[0]] = states.size
    for t in range(1, n + 1):
        states = _advance(sampler, states, paths, seed, t)
        if t in grid:
            alive_counts[grid[t]] = int(np.count_nonzero(states >= 0))
    return states, alive_counts


def _run(sampler, mu0, n, n_paths, seed, record=()):
    """Final states of all paths (in path order) and survivor counts at record steps."""
    sampler = _as_sampler(sampler)
    bounds = [(lo, min(lo + CHUNK, n_paths)) for lo in range(0, n_paths, CHUNK)]
    work = lambda b: _run_chunk(sampler, mu0, seed, b[0], b[1], n, record)
    nthreads = min(_threads(), len(bounds))
    if nthreads > 1:
        with ThreadPoolExecutor(nthreads) as ex:
            parts = list(ex.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    finals = np.concatenate([p[0] for p in parts]) if parts else np.empty(0, dtype=np.int64)
    counts = np.sum([p[1] for p in parts], axis=0) if parts else np.zeros(len(record), dtype=np.int64)
    return finals, counts


# ---------------------------------------------------------------- estimates


@dataclass(frozen=True, eq=False)
class McEstimate:
    empirical: Dist
    counts: np.ndarray
    surviving: int
    total: int
    seed: int

    @property
    def low_confidence(self) -> bool:
        return self.surviving < 100

    @property
    def survival(self) -> float:
        return self.surviving / self.total if self.total else 0.0


def estimate_conditional(sampler, mu0: Dist, n: int, n_paths: int, stream) -> McEstimate:
    """Empirical law of X_n among the paths still alive at step n."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    seed = stream[0] if isinstance(stream, tuple) else int(stream)
    sampler = _as_sampler(sampler)
    finals, _ = _run(sampler, mu0, n, n_paths, seed)
    alive = finals[finals >= 0]
    size = sampler.space.size
    counts = np.bincount(alive, minlength=size)
    w = counts / alive.size if alive.size else np.zeros(size)
    return McEstimate(Dist(sampler.space, w), counts, int(alive.size), int(n_paths), int(seed))


def estimate_theta0_mc(sampler, x0: int, n_grid, n_paths: int, stream) -> float:
    """exp of the least-squares slope of log empirical survival over n_grid."""
    seed = stream[0] if isinstance(stream, tuple) else int(stream)
    sampler = _as_sampler(sampler)
    grid = sorted(int(t) for t in n_grid)
    mu0 = np.zeros(sampler.space.size)
    mu0[int(x0)] = 1.0
    _, counts = _run(sampler, mu0, grid[-1], n_paths, seed, record=grid)
    if counts[0] == 0:
        raise QsdError(f"all paths absorbed before step {grid[0]}", step=grid[0])
    keep = counts > 0
    if keep.sum() < 2:
        raise QsdError("fewer than two grid points with survivors")
    t = np.array(grid, dtype=float)[keep]
    y = np.log(counts[keep] / n_paths)
    slope = np.polyfit(t, y, 1)[0]
    return float(math.exp(slope))


def survival_counts(sampler, x0: int, n_grid, n_paths: int, seed: int) -> np.ndarray:
    sampler = _as_sampler(sampler)
    mu0 = np.zeros(sampler.space.size)
    mu0[int(x0)] = 1.0
    grid = sorted(int(t) for t in n_grid)
    return _run(sampler, mu0, grid[-1], n_paths, seed, record=grid)[1]


# ---------------------------------------------------------------- Q-process


def simulate_q(k: SubKernel, sol, x0: int, horizon: int, stream, qp=None) -> Path:
    """Never-absorbed path of the h-transformed chain."""
    x0 = int(x0)
    if not sol.eta[x0] > 0:
        raise QsdError(f"start state {x0} is outside the survivor set", state=x0)
    qp = q_process(k, sol) if qp is None else qp
    seed, pid = stream
    csr = qp.tilde_kernel.csr()
    m = qp.tilde_kernel.size
    glob = [int(g) for g in qp.states]
    local = {g: i for i, g in enumerate(glob)}
    cols = [csr.indices[csr.indptr[i]:csr.indptr[i + 1]].tolist() for i in range(m)]
    cums = [np.cumsum(csr.data[csr.indptr[i]:csr.indptr[i + 1]]).tolist() for i in range(m)]
    u = step_uniforms(seed, pid, np.arange(1, horizon + 1)).tolist()
    x = local[x0]
    out = [x0]
    for t in range(horizon):
        c = cums[x]
        j = bisect_right(c, u[t] * c[-1])
        x = cols[x][min(j, len(c) - 1)]
        out.append(glob[x])
    return Path(out, None, horizon)


def occupation(path: Path, size: int, burn_in: int = 0) -> np.ndarray:
    s = np.asarray(path.states[burn_in:], dtype=np.int64)
    return np.bincount(s[s >= 0], minlength=size) / max(1, s.size)


# ---------------------------------------------------------------- law agreement


@dataclass(frozen=True)
class Chi2Result:
    state: int
    statistic: float
    dof: int
    p_value: float


def row_chi2(sampler, kernel: SubKernel, state: int, n_draws: int, seed: int,
             min_expected: float = 5.0) -> Chi2Result:
    """Chi-square test of one-step sampler draws against a kernel row (cemetery included)."""
    sampler = _as_sampler(sampler)
    states = np.full(n_draws, int(state), dtype=np.int64)
    paths = np.arange(n_draws, dtype=np.uint64)
    nxt = sampler.step(states, lambda k: uniforms(seed, paths, 1, k))
    size = kernel.size
    obs = np.bincount(np.where(nxt < 0, size, nxt), minlength=size + 1).astype(float)
    row = np.append(kernel.dense()[int(state)] if size <= 4096 else
                    kernel.csr()[int(state)].toarray().ravel(), 0.0)
    row[-1] = max(0.0, 1.0 - row[:-1].sum())
    exp = row * n_draws
    stray = obs[exp == 0].sum()
    if stray > 0:
        return Chi2Result(int(state), math.inf, 0, 0.0)
    big = exp >= min_expected
    o = list(obs[big])
    e = list(exp[big])
    if (~big & (exp > 0)).any():
        o.append(obs[~big & (exp > 0)].sum())
        e.append(exp[~big & (exp > 0)].sum())
    o, e = np.array(o), np.array(e)
    if o.size < 2:
        return Chi2Result(int(state), 0.0, 0, 1.0)
    e *= o.sum() / e.sum()
    res = stats.chisquare(o, e)
    return Chi2Result(int(state), float(res.statistic), int(o.size - 1), float(res.pvalue))
