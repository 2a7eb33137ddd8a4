"""QSD triple, Q-process, convergence fits and eigenfunction classification."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import reduce

import numpy as np
import scipy.sparse as sp

from .kernel import (Dist, QsdError, StateSpace, SubKernel, backward_reachable,
                     class_roots, evolve_conditional, forward_reachable,
                     solve_linear, strong_classes, subset_indices, tv_distance)

TIE_TOL = 1e-12


class PeriodicityError(QsdError):
    def __init__(self, period, states):
        super().__init__(f"dominant class is periodic with period {period}",
                         period=period, states=states)
        self.period = period


class SolverError(QsdError):
    pass


class NotEigenpairError(QsdError):
    pass


@dataclass(frozen=True, eq=False)
class QsdSolution:
    theta0: float
    nu: Dist
    eta: np.ndarray
    e_prime: np.ndarray
    iterations: int
    left_residual: float
    right_residual: float
    dominant_class: np.ndarray = field(default=None, repr=False)

    def to_dict(self):
        return {
            "theta0": float(self.theta0),
            "nu": [float(v) for v in self.nu.weights],
            "eta": [float(v) for v in self.eta],
            "e_prime": [int(i) for i in self.e_prime],
            "residuals": {"left": float(self.left_residual),
                          "right": float(self.right_residual)},
            "iterations": int(self.iterations),
        }

    def to_json(self):
        # repr of a float is the shortest string that round-trips (<= 17 digits)
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text, space=None):
        d = json.loads(text)
        space = StateSpace.range(len(d["nu"])) if space is None else space
        return cls(d["theta0"], Dist(space, d["nu"]), np.array(d["eta"]),
                   np.array(d["e_prime"], dtype=int), d["iterations"],
                   d["residuals"]["left"], d["residuals"]["right"])


def class_period(block) -> int:
    """Period of an irreducible nonnegative matrix from BFS levels."""
    g = sp.csr_matrix(block)
    n = g.shape[0]
    level = np.full(n, -1)
    level[0] = 0
    frontier = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in g.indices[g.indptr[u]:g.indptr[u + 1]]:
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(v)
        frontier = nxt
    rows = np.repeat(np.arange(n), np.diff(g.indptr))
    diffs = level[rows] + 1 - level[g.indices]
    return int(reduce(math.gcd, np.abs(diffs).tolist(), 0))


def _dominant_class(k):
    g = k.graph()
    ncomp, lab = strong_classes(g)
    if ncomp == 1:
        return np.arange(k.size), g, lab
    roots = class_roots(k.rows, lab, ncomp)
    order = np.argsort(-roots)
    top = order[0]
    if roots[top] <= 0:
        raise SolverError("kernel is nilpotent: theta0 undefined")
    if roots[order[1]] >= roots[top] - TIE_TOL:
        tied = [int(c) for c in order if roots[c] >= roots[top] - TIE_TOL]
        raise SolverError(f"communicating classes tie for the Perron root {roots[top]!r}",
                          classes=[np.flatnonzero(lab == c) for c in tied])
    return np.flatnonzero(lab == top), g, lab


def _power_iterate(B, tol, max_iter):
    """Simultaneous left/right power iteration on a primitive block."""
    n = B.shape[0]
    dense = not sp.issparse(B)
    lmul = (lambda v: v @ B) if dense else (lambda v: B.T @ v)
    u = np.full(n, 1.0 / n)
    h = np.full(n, 1.0 / n)
    M = B
    mpow = 1
    ratios = []
    theta = 0.0
    best = None
    polish = 0
    it = 0
    while it < max_iter:
        it += 1
        if mpow == 1:
            un, hn = lmul(u), B @ h
        else:
            un, hn = u @ M, M @ h
        u = un / un.sum()
        h = hn / hn.sum()
        uB = lmul(u)
        Bh = B @ h
        ratios.append(uB.sum())
        theta = float(np.mean(ratios[-10:]))
        rq = float(uB @ h / (u @ h))
        lres = float(np.abs(uB - rq * u).sum())
        rres = float(np.max(np.abs(Bh - rq * h)) / np.max(np.abs(h)))
        res = max(lres, rres)
        if res <= tol:
            # keep going while the residual still improves noticeably
            if best is not None and res > 0.5 * best:
                polish += 1
            if polish >= 3 or res == 0.0:
                break
        best = res if best is None else min(best, res)
        if dense and n <= 1500 and it % 500 == 0 and res > tol and mpow < 2 ** 12:
            M = M @ M
            M = M / np.max(M)
            mpow *= 2
    else:
        raise SolverError(f"power iteration did not converge in {max_iter} steps",
                          residual=res, theta=theta)
    theta = float(uB @ h / (u @ h))
    return theta, u, h, it


def solve_qsd(k: SubKernel, tol: float = 1e-12, max_iter: int = 200000) -> QsdSolution:
    """theta0, nu_QSD and eta by power iteration on the dominant class."""
    C, g, _ = _dominant_class(k)
    n = k.size
    B = k.block(C, C)
    if sp.issparse(B) and B.shape[0] <= 400:
        B = B.toarray()
    if C.size == 1:
        theta = float(B[0, 0])
        u, h, it = np.ones(1), np.ones(1), 0
        if theta <= 0:
            raise SolverError("kernel is nilpotent: theta0 undefined")
    else:
        period = class_period(B)
        if period > 1:
            raise PeriodicityError(period, C)
        scale = float(B.max())
        if scale <= 0:
            raise SolverError("kernel is nilpotent: theta0 undefined")
        if scale < 1e-200:
            B = B / scale
        else:
            scale = 1.0
        theta, u, h, it = _power_iterate(B, tol, max_iter)
        theta *= scale
        if theta < 1e-300:
            raise SolverError("theta0 underflow", theta=theta)

    inC = np.zeros(n, dtype=bool)
    inC[C] = True
    nu = np.zeros(n)
    eta = np.zeros(n)
    nu[C] = u
    eta[C] = h

    # downstream of C: nu_W (theta I - P_WW) = nu_C P_CW
    W = np.flatnonzero(forward_reachable(g, inC) & ~inC)
    if W.size:
        P_WW = k.block(W, W)
        A = theta * (sp.identity(W.size) if sp.issparse(P_WW) else np.eye(W.size)) - P_WW
        rhs = np.asarray(k.lmul(nu))[W]
        nu[W] = np.maximum(solve_linear(A.T, rhs), 0.0)
    # upstream of C: (theta I - P_UU) eta_U = P_UC eta_C
    U = np.flatnonzero(backward_reachable(g, inC) & ~inC)
    if U.size:
        P_UU = k.block(U, U)
        A = theta * (sp.identity(U.size) if sp.issparse(P_UU) else np.eye(U.size)) - P_UU
        rhs = np.asarray(k.rmul(eta))[U]
        eta[U] = np.maximum(solve_linear(A, rhs), 0.0)

    nu /= nu.sum()
    eta /= float(nu @ eta)
    e_prime = np.flatnonzero(eta > 0)
    lres = float(np.abs(np.asarray(k.lmul(nu)) - theta * nu).sum())
    rres = float(np.max(np.abs(k.rmul(eta) - theta * eta)) / np.max(eta))
    return QsdSolution(theta, Dist(k.space, nu), eta, e_prime, it, lres, rres, C)


@dataclass(frozen=True, eq=False)
class QProcess:
    tilde_kernel: SubKernel
    beta: Dist
    states: np.ndarray  # indices into the original space
    row_error: float


def q_process(k: SubKernel, sol: QsdSolution) -> QProcess:
    """h-transform by eta restricted to E'."""
    E = sol.e_prime
    if E.size == 0:
        raise QsdError("survivor set is empty")
    eta = sol.eta[E]
    P = k.block(E, E)
    P = P.toarray() if sp.issparse(P) else np.array(P)
    tilde = P * eta[None, :] / (sol.theta0 * eta[:, None])
    rs = tilde.sum(axis=1)
    row_error = float(np.max(np.abs(rs - 1.0)))
    tilde = tilde / rs[:, None]
    space = StateSpace(tuple(k.space.labels[i] for i in E),
                       None if k.space.coords is None else k.space.coords[E])
    beta = eta * sol.nu.weights[E]
    return QProcess(SubKernel.from_matrix(tilde, space), Dist(space, beta / beta.sum()),
                    E, row_error)


@dataclass(frozen=True, eq=False)
class ConvergenceFit:
    horizon: int
    tv_series: np.ndarray
    alpha_hat: float
    c_hat: float
    r_squared: float
    burn_in: int | None
    exact: bool = False


def fit_convergence(k: SubKernel, mu: Dist, sol: QsdSolution, horizon: int,
                    floor: float = 1e-8) -> ConvergenceFit:
    """TV distance to nu_QSD along the conditioned flow and a geometric fit."""
    if mu.weights[sol.e_prime].sum() <= 0:
        raise QsdError("initial law puts no mass on the survivor set E'")
    tv = np.empty(horizon + 1)
    cur = evolve_conditional(k, mu, 0)
    for n in range(horizon + 1):
        if n:
            cur = evolve_conditional(k, cur, 1)
        tv[n] = tv_distance(cur, sol.nu)
    below = np.flatnonzero(tv < 1)
    burn = int(below[0]) if below.size else None
    if burn is None:
        return ConvergenceFit(horizon, tv, float("nan"), float("nan"), float("nan"), None)
    idx = np.arange(burn, horizon + 1)
    idx = idx[tv[idx] > floor]
    if idx.size < 2:
        return ConvergenceFit(horizon, tv, 0.0, 0.0, 1.0, burn, exact=True)
    y = np.log(tv[idx])
    slope, intercept = np.polyfit(idx.astype(float), y, 1)
    pred = slope * idx + intercept
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ConvergenceFit(horizon, tv, float(np.exp(slope)), float(np.exp(intercept)), r2, burn)


def estimate_R(k: SubKernel, x: int, y: int, horizon: int = 200) -> float:
    """1 / lim P^n(x,y)^(1/n), extrapolated from the ratio of the last two terms."""
    v = np.zeros(k.size)
    v[x] = 1.0
    logscale = 0.0
    logs = np.full(horizon + 1, -np.inf)
    logs[0] = 0.0 if x == y else -np.inf
    for n in range(1, horizon + 1):
        v = np.asarray(k.lmul(v))
        s = v.max()
        if s <= 0:
            break
        v = v / s
        logscale += math.log(s)
        if v[y] > 0:
            logs[n] = logscale + math.log(v[y])
    if not np.isfinite(logs[1:]).any():
        raise QsdError(f"P^n({x},{y}) = 0 for all n <= {horizon}")
    n = horizon
    if np.isfinite(logs[n]) and np.isfinite(logs[n - 1]):
        # Richardson on log P^n / n with a 1/n error term
        return float(math.exp(-(logs[n] - logs[n - 1])))
    last = np.flatnonzero(np.isfinite(logs))[-1]
    return float(math.exp(-logs[last] / last))


@dataclass(frozen=True)
class EigenClassification:
    case: str
    scalar: complex | None
    residual: float
    flags: dict


def classify_eigenpair(k: SubKernel, h, theta, sol: QsdSolution, h_cemetery=0.0,
                       tol: float = 1e-8, phi1=None, theta1=None,
                       alpha_hat=None) -> EigenClassification:
    """Four-way classification of a right eigenpair of the kernel with cemetery."""
    h = np.asarray(h, dtype=complex)
    hc = complex(h_cemetery)
    scale = max(1.0, float(np.max(np.abs(h))), abs(hc))
    res_E = k.rmul(h) + k.absorption() * hc - theta * h
    res = max(float(np.max(np.abs(res_E))), abs(hc - theta * hc)) / scale
    if res > tol:
        raise NotEigenpairError(f"not an eigenpair: residual {res:.3e}", residual=res)
    E = sol.e_prime
    flags = {}
    if abs(hc) > tol * scale:
        if sol.theta0 >= 1:
            raise QsdError("h(cemetery) != 0 needs almost sure absorption")
        flags["is_constant"] = bool(np.max(np.abs(h - hc)) <= tol * scale * 10)
        return EigenClassification("constant", hc, res, flags)
    if E.size == 0 or np.max(np.abs(h[E])) <= tol * scale:
        if theta1 is not None:
            flags["below_theta1"] = bool(abs(theta) <= theta1 + tol)
        return EigenClassification("off-survivor", None, res, flags)
    nh = complex(np.dot(sol.nu.weights, h))
    flags["vanishes_off_E_prime"] = bool(
        np.max(np.abs(np.delete(h, E)), initial=0.0) <= tol * scale * 10)
    if theta1 is not None and phi1 is not None and abs(theta) > theta1:
        p = math.log(abs(theta)) / math.log(theta1)
        flags["growth_constant"] = float(np.max(np.abs(h[E]) / np.asarray(phi1)[E] ** p))
    if abs(nh) > tol * scale:
        flags["matches_eta"] = bool(np.max(np.abs(h - nh * sol.eta)) <= 1e3 * tol * scale)
        flags["theta_is_theta0"] = bool(abs(theta - sol.theta0) <= 1e3 * tol)
        return EigenClassification("eta-multiple", nh, res, flags)
    ratio = abs(theta) / sol.theta0
    flags["ratio"] = ratio
    if alpha_hat is not None:
        flags["alpha_hat"] = alpha_hat
        flags["within_fit"] = bool(ratio <= alpha_hat * (1 + 1e-3))
    return EigenClassification("subdominant", None, res, flags)
