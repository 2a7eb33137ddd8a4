"""Model builders: truncated chains compiled to SubKernels or rate matrices.

Every builder kills mass that leaves the truncation window and records the
per-state probability (or rate) of that overflow. Each model also carries a
sampler that simulates the mechanism directly, so the matrix rows can be
cross-checked against simulation.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.integrate import quad
from scipy.sparse.csgraph import connected_components
from scipy.special import ndtr, ndtri

from .criteria import max_exit_rate, uniformize
from .kernel import QsdError, StateSpace, SubKernel, hitting_moment, subset_indices
from .spectral import solve_qsd


class ModelError(QsdError, ValueError):
    pass


# ---------------------------------------------------------------- samplers


class Sampler:
    """Mechanistic one-step sampler; -1 stands for the cemetery."""

    def __init__(self, space: StateSpace):
        self.space = space

    def slots(self, s: int) -> int:
        return 1

    def move(self, s: int, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self, states, draw):
        states = np.asarray(states)
        out = np.full(states.shape[0], -1, dtype=np.int64)
        alive = states >= 0
        if not alive.any():
            return out
        uniq = np.unique(states[alive])
        U = draw(max(self.slots(int(s)) for s in uniq))
        for s in uniq:
            rows = np.flatnonzero(states == s)
            out[rows] = self.move(int(s), U[rows, :self.slots(int(s))])
        return out


class KernelSampler(Sampler):
    """Inverse-CDF sampling straight from the kernel rows."""

    def __init__(self, kernel: SubKernel):
        super().__init__(kernel.space)
        m = kernel.csr()
        self._cols = [m.indices[m.indptr[i]:m.indptr[i + 1]] for i in range(kernel.size)]
        self._cum = [np.cumsum(m.data[m.indptr[i]:m.indptr[i + 1]]) for i in range(kernel.size)]

    def move(self, s, u):
        cum = self._cum[s]
        j = np.searchsorted(cum, u[:, 0], side="right")
        out = np.full(u.shape[0], -1, dtype=np.int64)
        ok = j < cum.size
        out[ok] = self._cols[s][j[ok]]
        return out


@dataclass(frozen=True, eq=False)
class Model:
    """A discrete-time model: kernel, overflow per state, sampler, metadata."""
    kernel: SubKernel
    overflow: np.ndarray
    sampler: Sampler
    meta: dict = field(default_factory=dict)

    @property
    def space(self):
        return self.kernel.space


@dataclass(frozen=True, eq=False)
class RateModel:
    """A continuous-time model on a truncation: generator Q and overflow rates."""
    space: StateSpace
    Q: sp.csr_matrix
    overflow_rate: np.ndarray
    meta: dict
    sampler_factory: Callable = None

    @property
    def max_rate(self):
        return max_exit_rate(self.Q)

    def uniformized(self, Lambda=None) -> Model:
        Lambda = self.max_rate if Lambda is None else Lambda
        k = uniformize(self.Q, Lambda, self.space)
        sampler = self.sampler_factory(Lambda) if self.sampler_factory else KernelSampler(k)
        return Model(k, self.overflow_rate / Lambda, sampler, dict(self.meta, Lambda=Lambda))


def overflow_mass(model, sol) -> float:
    """QSD-weighted one-step probability of leaving the truncation window."""
    over = model.overflow if isinstance(model, Model) else model.overflow_rate
    return float(np.dot(sol.nu.weights, over))


# ---------------------------------------------------------------- lattices


def lattice_states(d: int, radius: int, min_total: int = 1, domain=None):
    """Points of Z_+^d with min_total <= |x| <= radius, by total then lexicographic."""
    out = []
    for tot in range(min_total, radius + 1):
        pts = [c for c in itertools.product(range(tot + 1), repeat=d) if sum(c) == tot]
        pts.sort()
        out.extend(p for p in pts if domain is None or domain(p))
    return out


def _lattice_components(states):
    index = {x: i for i, x in enumerate(states)}
    rows, cols = [], []
    for i, x in enumerate(states):
        for k in range(len(x)):
            y = x[:k] + (x[k] + 1,) + x[k + 1:]
            j = index.get(y)
            if j is not None:
                rows.append(i)
                cols.append(j)
    g = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(states),) * 2)
    return connected_components(g, directed=False)


# ---------------------------------------------------------------- birth and death


@dataclass(frozen=True)
class MultiBDSpec:
    dim: int
    birth: Callable  # x (tuple) -> sequence of d rates
    death: Callable
    radius: int
    domain: Callable | None = None
    time: str = "continuous"  # or "discrete": rates are one-step probabilities
    drift_delta: float = 2.0


class _BDSampler(Sampler):
    def __init__(self, space, states, index, birth, death, Lambda):
        super().__init__(space)
        self.states, self.index = states, index
        self.birth, self.death, self.Lambda = birth, death, Lambda

    def move(self, s, u):
        x = self.states[s]
        d = len(x)
        rates = np.concatenate([np.asarray(self.birth(x), float), np.asarray(self.death(x), float)])
        cum = np.cumsum(rates) / self.Lambda
        ev = np.searchsorted(cum, u[:, 0], side="right")
        out = np.full(u.shape[0], s, dtype=np.int64)
        for e in range(2 * d):
            hit = ev == e
            if not hit.any():
                continue
            i = e % d
            y = list(x)
            y[i] += 1 if e < d else -1
            j = self.index.get(tuple(y), -1) if y[i] >= 0 else -1
            out[hit] = j
        return out


def build_multitype_bd(spec: MultiBDSpec):
    """Generator (or kernel in discrete mode) of a multitype birth-death chain."""
    d = spec.dim
    states = lattice_states(d, spec.radius, 1, spec.domain)
    if not states:
        raise ModelError("empty truncation")
    ncomp, lab = _lattice_components(states)
    if ncomp > 1:
        comps = [[states[i] for i in np.flatnonzero(lab == c)] for c in range(ncomp)]
        raise ModelError(f"truncated domain has {ncomp} components", components=comps)
    index = {x: i for i, x in enumerate(states)}
    n = len(states)
    rows, cols, vals = [], [], []
    total = np.zeros(n)
    overflow = np.zeros(n)
    for i, x in enumerate(states):
        b = np.asarray(spec.birth(x), float)
        dd = np.asarray(spec.death(x), float)
        if np.any(b < 0) or np.any(dd < 0):
            raise ModelError(f"negative rate at {x}")
        total[i] = b.sum() + dd.sum()
        for k in range(d):
            for rate, step in ((b[k], 1), (dd[k], -1)):
                if rate == 0:
                    continue
                y = x[:k] + (x[k] + step,) + x[k + 1:]
                j = index.get(y) if y[k] >= 0 else None
                if j is not None:
                    rows.append(i)
                    cols.append(j)
                    vals.append(rate)
                elif sum(y) > spec.radius and (spec.domain is None or spec.domain(y)):
                    overflow[i] += rate
    space = StateSpace(tuple(states), np.array(states, dtype=float))
    off = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    meta = {"drift_shells": _bd_shell_report(spec, states)}
    if spec.time == "discrete":
        if np.any(total > 1 + 1e-12):
            raise ModelError("discrete-time probabilities exceed 1")
        P = off + sp.diags(1.0 - total)
        k = SubKernel.from_matrix(P, space)
        return Model(k, overflow, _BDSampler(space, states, index, spec.birth, spec.death, 1.0), meta)
    Q = sp.csr_matrix(off - sp.diags(total))
    factory = lambda Lam: _BDSampler(space, states, index, spec.birth, spec.death, Lam)
    return RateModel(space, Q, overflow, meta, factory)


def _bd_shell_report(spec, states):
    """Both growth statistics on the outer shell and the half-radius shell."""
    out = {}
    for name, r in (("half", max(1, spec.radius // 2)), ("outer", spec.radius)):
        shell = [x for x in states if sum(x) == r]
        if not shell:
            continue
        c1 = min(sum(np.asarray(spec.death(x)) - np.asarray(spec.birth(x))) / sum(x) for x in shell)
        c2 = min(sum(np.asarray(spec.death(x)) - spec.drift_delta * np.asarray(spec.birth(x)))
                 for x in shell)
        out[name] = {"radius": r, "ratio_growth": float(c1), "delta_growth": float(c2)}
    if "half" in out and "outer" in out:
        out["ratio_growth_increasing"] = out["outer"]["ratio_growth"] > out["half"]["ratio_growth"]
        out["delta_growth_increasing"] = out["outer"]["delta_growth"] > out["half"]["delta_growth"]
    return out


# ---------------------------------------------------------------- Galton-Watson


@dataclass(frozen=True)
class GWSpec:
    offspring: Sequence  # per parent type: [(vector, prob), ...] or a 1-type prob list
    truncation: int


def _offspring_table(spec):
    laws = []
    raw = spec.offspring
    if len(raw) and np.isscalar(raw[0]):
        raw = [[((k,), p) for k, p in enumerate(raw)]]
    for law in raw:
        vecs = [tuple(int(v) for v in np.atleast_1d(vec)) for vec, _ in law]
        probs = np.array([p for _, p in law], dtype=float)
        laws.append((vecs, probs))
    d = len(laws)
    for vecs, probs in laws:
        if any(len(v) != d for v in vecs):
            raise ModelError("offspring vectors must have one entry per type")
        if np.any(probs < 0) or abs(probs.sum() - 1) > 1e-12:
            raise ModelError("offspring laws must be probability vectors")
    return laws


def _spectral_radius_nonneg(M, tol=1e-14, max_iter=100000):
    """Power iteration on M + I (aperiodic shift); returns (rho, right vector)."""
    d = M.shape[0]
    A = M + np.eye(d)
    v = np.full(d, 1.0 / d)
    lam = 0.0
    for _ in range(max_iter):
        w = A @ v
        lam_new = w.sum() / v.sum()
        w /= w.sum()
        if np.max(np.abs(w - v)) <= tol and abs(lam_new - lam) <= tol:
            v = w
            lam = lam_new
            break
        v, lam = w, lam_new
    return float(lam - 1.0), v


def _shift_add(arr, vec, prob, N):
    """Add prob * arr shifted by vec, cropped to the box [0, N]^d."""
    out = np.zeros_like(arr)
    src = tuple(slice(0, N + 1 - s) for s in vec)
    dst = tuple(slice(s, N + 1) for s in vec)
    if all(s <= N for s in vec):
        out[dst] += prob * arr[src]
    return out


class _GWSampler(Sampler):
    def __init__(self, space, states, index, laws, N):
        super().__init__(space)
        self.states, self.index, self.N = states, index, N
        self.tables = [(np.array(v, dtype=np.int64), np.cumsum(p)) for v, p in laws]

    def slots(self, s):
        return sum(self.states[s])

    def move(self, s, u):
        z = self.states[s]
        kids = np.zeros((u.shape[0], len(z)), dtype=np.int64)
        col = 0
        for t, zt in enumerate(z):
            vecs, cum = self.tables[t]
            if zt == 0:
                continue
            pick = np.minimum(np.searchsorted(cum, u[:, col:col + zt], side="right"), len(cum) - 1)
            kids += vecs[pick].sum(axis=1)
            col += zt
        out = np.full(u.shape[0], -1, dtype=np.int64)
        tot = kids.sum(axis=1)
        for r in np.flatnonzero((tot >= 1) & (tot <= self.N)):
            out[r] = self.index[tuple(int(v) for v in kids[r])]
        return out


def build_galton_watson(spec: GWSpec) -> Model:
    """Truncated multitype GW kernel; extinction and overflow go to the cemetery."""
    laws = _offspring_table(spec)
    d = len(laws)
    N = int(spec.truncation)
    M = np.array([[sum(p * v[j] for v, p in zip(vecs, probs)) for j in range(d)]
                  for vecs, probs in laws])
    rho, v = _spectral_radius_nonneg(M)
    states = lattice_states(d, N, 1)
    index = {x: i for i, x in enumerate(states)}
    n = len(states)
    totals = np.indices((N + 1,) * d).sum(axis=0)
    keep = totals <= N
    flat_keep = np.flatnonzero(keep.ravel())
    target = np.array([index.get(tuple(int(c) for c in np.unravel_index(f, keep.shape)), -1)
                       for f in flat_keep])
    zero = np.zeros((N + 1,) * d)
    zero[(0,) * d] = 1.0
    cache = {(0,) * d: zero}
    rows, cols, vals = [], [], []
    overflow = np.zeros(n)
    for i, z in enumerate(states):
        t = next(t for t in range(d) if z[t] > 0)
        prev = z[:t] + (z[t] - 1,) + z[t + 1:]
        base = cache[prev]
        vecs, probs = laws[t]
        dist = sum(_shift_add(base, vec, p, N) for vec, p in zip(vecs, probs))
        dist[~keep] = 0.0
        cache[z] = dist
        flat = dist.ravel()[flat_keep]
        ok = (target >= 0) & (flat > 0)
        rows.extend([i] * int(ok.sum()))
        cols.extend(target[ok].tolist())
        vals.extend(flat[ok].tolist())
        overflow[i] = max(0.0, 1.0 - flat.sum())
    P = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    P.data = np.minimum(P.data, 1.0)
    space = StateSpace(tuple(states), np.array(states, dtype=float))
    k = SubKernel.from_matrix(_row_clip(P), space)
    meta = {"M": M, "rho": rho, "v": v, "supercritical": bool(rho >= 1), "truncation": N}
    return Model(k, overflow, _GWSampler(space, states, index, laws, N), meta)


def _row_clip(P):
    """Guard against row sums of 1 + O(eps) from floating-point accumulation."""
    rs = np.asarray(P.sum(axis=1)).ravel()
    scale = np.where(rs > 1.0, 1.0 / np.maximum(rs, 1e-300), 1.0)
    return sp.diags(scale) @ P if sp.issparse(P) else P * scale[:, None]


# ---------------------------------------------------------------- gridded continuous spaces


@dataclass(frozen=True)
class Grid:
    lo: np.ndarray
    hi: np.ndarray
    cells: tuple

    @property
    def dim(self):
        return len(self.cells)

    @property
    def width(self):
        return (self.hi - self.lo) / np.array(self.cells)

    def edges(self, k):
        return np.linspace(self.lo[k], self.hi[k], self.cells[k] + 1)

    def centers(self):
        axes = [0.5 * (e[1:] + e[:-1]) for e in (self.edges(k) for k in range(self.dim))]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def locate(self, y):
        """Flat cell index for points y (m, d); -1 outside the box."""
        y = np.atleast_2d(y)
        idx = np.floor((y - self.lo) / self.width).astype(np.int64)
        inside = np.all((y >= self.lo) & (y < self.hi), axis=1)
        idx = np.clip(idx, 0, np.array(self.cells) - 1)
        flat = np.ravel_multi_index(idx.T, self.cells)
        return np.where(inside, flat, -1)


def _gauss_interval(lo, hi):
    """P(lo < G < hi) for standard normal G, accurate in both tails."""
    return np.where(lo > 0, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))


def _box_sides_open(domain, grid):
    """For each axis, whether leaving below / above the box stays inside D."""
    c = 0.5 * (grid.lo + grid.hi)
    res = []
    for k in range(grid.dim):
        eps = 1e-9 * max(1.0, grid.hi[k] - grid.lo[k])
        below, above = c.copy(), c.copy()
        below[k] = grid.lo[k] - eps
        above[k] = grid.hi[k] + eps
        res.append((bool(domain(below[None, :])[0]), bool(domain(above[None, :])[0])))
    return res


def _disk_rect_area(cx, cy, r, x0, x1, y0, y1):
    """Area of the disk (cx, cy, r) intersected with [x0,x1] x [y0,y1]."""
    a, b = max(x0, cx - r), min(x1, cx + r)
    if a >= b:
        return 0.0

    def chord(x):
        h = math.sqrt(max(r * r - (x - cx) ** 2, 0.0))
        return max(0.0, min(y1, cy + h) - max(y0, cy - h))

    pts = [p for p in (cx, cx - math.sqrt(max(r * r - (y1 - cy) ** 2, 0)) if abs(y1 - cy) < r else None,
                       cx + math.sqrt(max(r * r - (y1 - cy) ** 2, 0)) if abs(y1 - cy) < r else None,
                       cx - math.sqrt(max(r * r - (y0 - cy) ** 2, 0)) if abs(y0 - cy) < r else None,
                       cx + math.sqrt(max(r * r - (y0 - cy) ** 2, 0)) if abs(y0 - cy) < r else None)
           if p is not None and a < p < b]
    val, _ = quad(chord, a, b, points=sorted(pts) or None, epsabs=1e-14, epsrel=1e-12, limit=200)
    return val


def _segment_fraction(a, r):
    """Fraction of a disk of radius r beyond a line at signed distance a."""
    if a >= r:
        return 0.0
    if a <= -r:
        return 1.0
    return (r * r * math.acos(a / r) - a * math.sqrt(r * r - a * a)) / (math.pi * r * r)


@dataclass(frozen=True)
class PerturbedDSSpec:
    f: Callable           # (m, d) array -> (m, d) array
    domain: Callable      # (m, d) array -> bool array
    box: Sequence         # [(lo, hi)] per axis
    cells: Sequence       # cells per axis
    noise: str = "gaussian"   # or "ball"
    scale: object = 1.0       # per-axis std (gaussian) or radius (ball)


class _PerturbedSampler(Sampler):
    def __init__(self, space, spec, grid, centers, flat_to_state):
        super().__init__(space)
        self.spec, self.grid, self.centers, self.flat_to_state = spec, grid, centers, flat_to_state

    def slots(self, s):
        return self.grid.dim if self.spec.noise == "gaussian" else max(1, self.grid.dim)

    def move(self, s, u):
        d = self.grid.dim
        m = np.asarray(self.spec.f(self.centers[s][None, :]), float).reshape(1, d)
        if self.spec.noise == "gaussian":
            xi = np.asarray(self.spec.scale, float) * ndtri(u[:, :d])
        elif d == 1:
            xi = self.spec.scale * (2 * u[:, :1] - 1)
        else:
            rad = self.spec.scale * np.sqrt(u[:, 0])
            ang = 2 * np.pi * u[:, 1]
            xi = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
        flat = self.grid.locate(m + xi)
        out = np.full(u.shape[0], -1, dtype=np.int64)
        ok = flat >= 0
        out[ok] = self.flat_to_state[flat[ok]]
        return out


def build_perturbed_ds(spec: PerturbedDSSpec) -> Model:
    """X' = f(X) + xi on a grid of cells; mass leaving the included cells is killed."""
    box = np.asarray(spec.box, float).reshape(-1, 2)
    grid = Grid(box[:, 0], box[:, 1], tuple(int(c) for c in spec.cells))
    d = grid.dim
    centers_all = grid.centers()
    inc = np.asarray(spec.domain(centers_all), bool)
    if not inc.any():
        raise ModelError("no grid cell lies in the domain")
    flat_to_state = np.full(centers_all.shape[0], -1, dtype=np.int64)
    flat_to_state[inc] = np.arange(inc.sum())
    centers = centers_all[inc]
    n = centers.shape[0]
    images = np.asarray(spec.f(centers), float).reshape(n, d)
    sides = _box_sides_open(spec.domain, grid)
    edges = [grid.edges(k) for k in range(d)]
    P = np.zeros((n, n))
    overflow = np.zeros(n)
    if spec.noise == "gaussian":
        sd = np.broadcast_to(np.asarray(spec.scale, float), (d,))
        for i in range(n):
            axis_mass = []
            for k in range(d):
                e = (edges[k] - images[i, k]) / sd[k]
                axis_mass.append(_gauss_interval(e[:-1], e[1:]))
                lo_open, hi_open = sides[k]
                overflow[i] += lo_open * ndtr(e[0]) + hi_open * ndtr(-e[-1])
            full = axis_mass[0]
            for am in axis_mass[1:]:
                full = np.multiply.outer(full, am)
            P[i] = full.ravel()[inc]
    elif spec.noise == "ball":
        r = float(spec.scale)
        if d == 1:
            e = edges[0]
            for i in range(n):
                a = np.clip(e[:-1], images[i, 0] - r, images[i, 0] + r)
                b = np.clip(e[1:], images[i, 0] - r, images[i, 0] + r)
                P[i] = ((b - a) / (2 * r))[inc]
                lo_open, hi_open = sides[0]
                overflow[i] = (lo_open * max(0.0, min(e[0], images[i, 0] + r) - (images[i, 0] - r))
                               + hi_open * max(0.0, images[i, 0] + r - max(e[-1], images[i, 0] - r))) / (2 * r)
        elif d == 2:
            w = grid.width
            flat_centers = centers_all
            area = math.pi * r * r
            for i in range(n):
                cx, cy = images[i]
                near = np.flatnonzero((np.abs(flat_centers[:, 0] - cx) <= r + w[0]) &
                                      (np.abs(flat_centers[:, 1] - cy) <= r + w[1]) & inc)
                for f in near:
                    x0, y0 = flat_centers[f] - w / 2
                    P[i, flat_to_state[f]] = _disk_rect_area(cx, cy, r, x0, x0 + w[0], y0, y0 + w[1]) / area
                for k, c in enumerate((cx, cy)):
                    lo_open, hi_open = sides[k]
                    overflow[i] += lo_open * _segment_fraction(c - grid.lo[k], r) \
                        + hi_open * _segment_fraction(grid.hi[k] - c, r)
        else:
            raise ModelError("ball noise supports dimension 1 or 2")
    else:
        raise ModelError(f"unknown noise family {spec.noise!r}")
    if P.min() < -1e-12:
        raise ModelError("negative cell mass from quadrature", value=float(P.min()))
    P = _row_clip(np.maximum(P, 0.0))
    space = StateSpace(tuple(range(n)), centers)
    k = SubKernel.from_matrix(P, space)
    meta = {"grid": grid, "included": inc, "centers": centers, "cell_volume": float(np.prod(grid.width))}
    return Model(k, np.minimum(overflow, 1.0), _PerturbedSampler(space, spec, grid, centers_all, flat_to_state), meta)


@dataclass(frozen=True)
class ShellReport:
    radii: list
    shell_max: list
    decreasing: bool
    last_below: bool
    passed: bool


def verify_perturbed_lyapunov(spec, phi, shells, threshold: float = 1.0, model=None) -> ShellReport:
    """Per-shell maximum of P phi / phi at the cell centres."""
    model = build_perturbed_ds(spec) if model is None else model
    c = model.kernel.space.coords
    vals = np.asarray(phi(c), float).ravel()
    if np.any(vals < 1):
        raise ValueError("phi must be >= 1 on the grid")
    ratio = np.asarray(model.kernel.rmul(vals)) / vals
    norm = np.linalg.norm(c, axis=1)
    radii = list(shells)
    out = []
    for a, b in zip(radii[:-1], radii[1:]):
        sel = (norm >= a) & (norm < b)
        out.append(float(ratio[sel].max()) if sel.any() else float("nan"))
    finite = [v for v in out if np.isfinite(v)]
    dec = all(b < a for a, b in zip(finite[:-1], finite[1:]))
    last = bool(finite and finite[-1] < threshold)
    return ShellReport(radii, out, dec, last, dec and last)


# ---------------------------------------------------------------- Euler scheme


@dataclass(frozen=True)
class EulerDiffusionSpec:
    alpha: float
    beta: float
    drift: Callable
    sigma: Callable
    kappa: Callable | None = None
    delta: float = 1e-3
    cells: int = 400
    bridge: bool = True
    box: tuple | None = None  # required when an endpoint is infinite
    quad_nodes: int = 6


def bridge_survival(x, y, alpha, beta, sigma, delta):
    """Probability that a Brownian bridge x -> y over time delta stays in (alpha, beta)."""
    s2d = np.maximum(np.asarray(sigma, float) ** 2 * delta, 1e-300)
    out = np.ones(np.broadcast(x, y, s2d).shape)
    if np.isfinite(alpha):
        out = out * -np.expm1(-2 * (x - alpha) * (y - alpha) / s2d)
    if np.isfinite(beta):
        out = out * -np.expm1(-2 * (beta - x) * (beta - y) / s2d)
    return np.clip(out, 0.0, 1.0)


class _EulerSampler(Sampler):
    def __init__(self, space, spec, grid, centers):
        super().__init__(space)
        self.spec, self.grid, self.centers = spec, grid, centers

    def slots(self, s):
        return 3

    def move(self, s, u):
        sp_ = self.spec
        x = self.centers[s]
        sig = float(sp_.sigma(x))
        y = x + sp_.drift(x) * sp_.delta + math.sqrt(sp_.delta) * sig * ndtri(u[:, 0])
        out = self.grid.locate(y[:, None])
        inside = (y > sp_.alpha) & (y < sp_.beta)
        out[~inside] = -1
        if sp_.kappa is not None:
            out[u[:, 1] >= math.exp(-float(sp_.kappa(x)) * sp_.delta)] = -1
        if sp_.bridge:
            keep = bridge_survival(x, y, sp_.alpha, sp_.beta, sig, sp_.delta)
            out[u[:, 2] >= keep] = -1
        return out


def build_euler_absorbed(spec: EulerDiffusionSpec) -> Model:
    """Euler step discretized to cells, with optional Brownian-bridge exit correction."""
    lo, hi = spec.box if spec.box is not None else (spec.alpha, spec.beta)
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ModelError("an infinite endpoint needs a finite box")
    if lo < spec.alpha or hi > spec.beta:
        raise ModelError("grid box must lie inside the domain")
    if spec.delta <= 0:
        raise ModelError("delta must be positive")
    grid = Grid(np.array([lo]), np.array([hi]), (int(spec.cells),))
    e = grid.edges(0)
    x = 0.5 * (e[1:] + e[:-1])
    n = x.size
    b = np.array([spec.drift(v) for v in x], float)
    sig = np.array([spec.sigma(v) for v in x], float)
    if np.any(sig <= 0):
        raise ModelError("sigma must be positive on the grid")
    kap = np.zeros(n) if spec.kappa is None else np.array([spec.kappa(v) for v in x], float)
    m = x + b * spec.delta
    s = sig * math.sqrt(spec.delta)
    clamped = bool(np.any(sig ** 2 * spec.delta < 1e-300))
    Z = (e[None, :] - m[:, None]) / s[:, None]
    P = _gauss_interval(Z[:, :-1], Z[:, 1:])
    if spec.bridge and (np.isfinite(spec.alpha) or np.isfinite(spec.beta)):
        gx, gw = np.polynomial.legendre.leggauss(spec.quad_nodes)
        h = grid.width[0]
        yq = x[:, None] + 0.5 * h * gx[None, :]  # nodes inside each target cell
        for i in range(n):
            dens = np.exp(-0.5 * ((yq - m[i]) / s[i]) ** 2) * gw[None, :]
            fac = bridge_survival(x[i], yq, spec.alpha, spec.beta, sig[i], spec.delta)
            tot = dens.sum(axis=1)
            avg = np.where(tot > 0, (dens * fac).sum(axis=1) / np.where(tot > 0, tot, 1.0),
                           bridge_survival(x[i], x, spec.alpha, spec.beta, sig[i], spec.delta))
            P[i] *= avg
    P *= np.exp(-kap * spec.delta)[:, None]
    overflow = np.zeros(n)
    if lo > spec.alpha:
        overflow += ndtr(Z[:, 0])
    if hi < spec.beta:
        overflow += ndtr(-Z[:, -1])
    space = StateSpace(tuple(range(n)), x)
    k = SubKernel.from_matrix(_row_clip(np.maximum(P, 0.0)), space)
    meta = {"centers": x, "width": grid.width[0], "delta": spec.delta,
            "bridge_clamped": clamped}
    return Model(k, overflow, _EulerSampler(space, spec, grid, x), meta)


# ---------------------------------------------------------------- penalized kernels


@dataclass(frozen=True)
class PenalizedSpec:
    Q: np.ndarray
    g: np.ndarray
    zeta: np.ndarray
    C: float
    p: np.ndarray
    exhaustion: Sequence = ()


def build_penalized(spec: PenalizedSpec) -> Model:
    """P(x, y) = p(x, y) Q(x, y); the remaining mass is killed."""
    Q = np.asarray(spec.Q, float)
    g = np.asarray(spec.g, float)
    zeta = np.asarray(spec.zeta, float)
    p = np.asarray(spec.p, float)
    n = Q.shape[0]
    lower = g[:, None] * zeta[None, :]
    upper = spec.C * lower
    tol = 1e-12
    bad = np.argwhere((Q < lower - tol) | (Q > upper + tol))
    if bad.size:
        y, z = (int(v) for v in bad[0])
        raise ModelError(f"two-sided estimate fails at y={y}, A={{{z}}}", witness=(y, (z,)))
    if np.any(p < 0):
        raise ModelError("penalization must be nonnegative")
    pmax = float(p.max())
    scale = 1.0
    if pmax > 1:
        scale = 1.0 / (pmax + 1.0)
    p_used = p * scale
    inf_p = []
    for Lk in spec.exhaustion:
        idx = subset_indices(n, Lk)
        v = float(p_used[np.ix_(idx, idx)].min())
        if v <= 0:
            raise ModelError(f"penalization vanishes on L_k x L_k for L_k={idx.tolist()}")
        inf_p.append(v)
    P = p_used * Q
    k = SubKernel.from_matrix(_row_clip(P))
    meta = {"C": float(spec.C), "inf_p": inf_p, "p_scale": scale}
    return Model(k, np.zeros(n), KernelSampler(k), meta)


# ---------------------------------------------------------------- three-set model


@dataclass(frozen=True)
class ThreeSetSpec:
    blocks: dict  # keys (i, j) with i <= j in {1, 2, 3}
    gamma: float


def build_three_set(spec: ThreeSetSpec) -> Model:
    """Block upper-triangular kernel D1 -> D2 -> D3 -> cemetery."""
    sizes = {}
    for i in (1, 2, 3):
        if (i, i) not in spec.blocks:
            raise ModelError(f"missing diagonal block ({i},{i})")
        sizes[i] = np.asarray(spec.blocks[(i, i)]).shape[0]
    for (i, j), blk in spec.blocks.items():
        if i > j and np.any(np.asarray(blk) > 0):
            raise ModelError(f"forbidden block D{i} -> D{j} has positive mass")
    off = {1: 0, 2: sizes[1], 3: sizes[1] + sizes[2]}
    n = sum(sizes.values())
    P = np.zeros((n, n))
    for (i, j), blk in spec.blocks.items():
        if i <= j:
            blk = np.asarray(blk, float)
            P[off[i]:off[i] + sizes[i], off[j]:off[j] + sizes[j]] = blk
    labels = tuple((f"D{i}", a) for i in (1, 2, 3) for a in range(sizes[i]))
    k = SubKernel.from_matrix(P, StateSpace(labels))
    idx = {f"D{i}": np.arange(off[i], off[i] + sizes[i]) for i in (1, 2, 3)}
    Y = SubKernel.from_matrix(P[np.ix_(idx["D2"], idx["D2"])])
    theta0_Y = solve_qsd(Y).theta0
    gamma = float(spec.gamma)
    moments_finite = False
    if 0 < gamma < 1:
        hm = hitting_moment(k, idx["D2"], gamma)
        moments_finite = hm.all_converged
    h2 = bool(gamma < theta0_Y and moments_finite)
    meta = {"blocks": idx, "Y": Y, "theta0_Y": theta0_Y, "gamma": gamma,
            "h2_moments_finite": moments_finite, "h2_passed": h2}
    return Model(k, np.zeros(n), KernelSampler(k), meta)


# ---------------------------------------------------------------- vitality model


@dataclass(frozen=True)
class VitalitySpec:
    f: Callable
    b: Callable
    d: Callable
    n_max: int
    y_max: int


class _VitalitySampler(Sampler):
    def __init__(self, space, spec, index, Lambda):
        super().__init__(space)
        self.spec, self.index, self.Lambda = spec, index, Lambda

    def move(self, s, u):
        n, y = self.space.labels[s]
        fn = self.spec.f(n)
        rates = np.array([1.0, fn * self.spec.b(y), fn * self.spec.d(y)])
        cum = np.cumsum(rates) / self.Lambda
        ev = np.searchsorted(cum, u[:, 0], side="right")
        out = np.full(u.shape[0], s, dtype=np.int64)
        for e, tgt in enumerate(((n + 1, y), (n, y + 1), (n, y - 1))):
            out[ev == e] = self.index.get(tgt, -1)
        return out


def _z_chain_lambda0(b, d, y_max):
    rates_up = np.array([b(y) for y in range(1, y_max + 1)], float)
    rates_dn = np.array([d(y) for y in range(1, y_max + 1)], float)
    Q = np.diag(-(rates_up + rates_dn)) + np.diag(rates_up[:-1], 1) + np.diag(rates_dn[1:], -1)
    Lam = float((rates_up + rates_dn).max())
    sol = solve_qsd(uniformize(Q, Lam))
    return Lam * (1.0 - sol.theta0)


def build_vitality(spec: VitalitySpec) -> RateModel:
    """(N, Y): N Poisson(1), Y birth-death sped up by f(N); Y = 0 is absorbing."""
    ns = range(0, spec.n_max + 1)
    fv = np.array([spec.f(n) for n in ns], float)
    if np.any(fv <= 0):
        raise ModelError("f must be positive")
    n0 = int(np.argmin(fv))
    unique = bool(np.sum(fv <= fv[n0] + 1e-12) == 1)
    states = [(n, y) for n in ns for y in range(1, spec.y_max + 1)]
    index = {s: i for i, s in enumerate(states)}
    N = len(states)
    rows, cols, vals = [], [], []
    total = np.zeros(N)
    overflow = np.zeros(N)
    for i, (n, y) in enumerate(states):
        moves = ((1.0, (n + 1, y)), (fv[n] * spec.b(y), (n, y + 1)), (fv[n] * spec.d(y), (n, y - 1)))
        for rate, tgt in moves:
            total[i] += rate
            j = index.get(tgt)
            if j is not None:
                rows.append(i)
                cols.append(j)
                vals.append(rate)
            elif tgt[1] > 0:
                overflow[i] += rate
    Q = sp.csr_matrix((vals, (rows, cols)), shape=(N, N)) - sp.diags(total)
    lam_z = _z_chain_lambda0(spec.b, spec.d, spec.y_max)
    tail = fv[(3 * spec.n_max) // 4:]
    liminf = float(tail.min())
    meta = {"n0": n0, "unique_minimizer": unique, "lambda0_Z": lam_z,
            "lambda0_Z_below_d1": bool(lam_z <= spec.d(1) + 1e-12),
            "liminf_f": liminf,
            "hypothesis": bool(unique and liminf > fv[n0] + 1.0 / lam_z)}
    space = StateSpace(tuple(states), np.array(states, float))
    factory = lambda Lam: _VitalitySampler(space, spec, index, Lam)
    return RateModel(space, sp.csr_matrix(Q), overflow, meta, factory)
