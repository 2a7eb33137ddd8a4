"""One-dimensional diffusions dX = sigma(X) dB + b(X) dt killed at rate kappa on (alpha, beta).

Scale function, boundary reachability, two upper bounds on the decay rate
lambda0, Lyapunov candidates, condition selection and a finite-difference
eigen-oracle.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import IntegrationWarning, quad, solve_ivp
from scipy.interpolate import BPoly
from scipy.linalg import eigh_tridiagonal

from .kernel import QsdError


class QuadratureError(QsdError, ArithmeticError):
    pass


class DerivativeError(QsdError, ArithmeticError):
    pass


@dataclass(frozen=True)
class Diffusion1dSpec:
    alpha: float
    beta: float
    b: Callable
    sigma: Callable
    kappa: Callable | None = None
    alpha0: float | None = None

    def __post_init__(self):
        if not self.alpha < self.beta:
            raise ValueError("need alpha < beta")

    @property
    def ref(self) -> float:
        if self.alpha0 is not None:
            return float(self.alpha0)
        lo, hi = self.alpha, self.beta
        if np.isfinite(lo) and np.isfinite(hi):
            return 0.5 * (lo + hi)
        if np.isfinite(lo):
            return lo + 1.0
        if np.isfinite(hi):
            return hi - 1.0
        return 0.0

    def kap(self, x) -> float:
        return 0.0 if self.kappa is None else float(self.kappa(x))

    def ratio(self, x) -> float:
        """b / sigma^2."""
        return float(self.b(x)) / float(self.sigma(x)) ** 2


def _quad(f, a, b, what):
    with warnings.catch_warnings():
        warnings.simplefilter("error", IntegrationWarning)
        try:
            val, err = quad(f, a, b, epsabs=1e-12, epsrel=1e-12, limit=500)
        except (IntegrationWarning, ZeroDivisionError, OverflowError) as exc:
            raise QuadratureError(f"quadrature of {what} failed on [{a!r}, {b!r}]: {exc}",
                                  interval=(a, b)) from None
    if not np.isfinite(val):
        raise QuadratureError(f"quadrature of {what} diverges on [{a!r}, {b!r}]", interval=(a, b))
    return val, err


def _log_delta(spec, x, base=None):
    base = spec.ref if base is None else base
    v, e = _quad(spec.ratio, base, x, "b/sigma^2")
    return -2.0 * v, 2.0 * e


def scale(spec: Diffusion1dSpec, x: float, with_error: bool = False):
    """(s(x), delta(x)) relative to the reference point; optionally the error bound."""
    if not spec.alpha < x < spec.beta:
        raise ValueError("x must lie inside (alpha, beta)")
    ld, eld = _log_delta(spec, x)
    s, es = _quad(lambda u: math.exp(_log_delta(spec, u)[0]), spec.ref, x, "delta")
    delta = math.exp(ld)
    if with_error:
        return s, delta, es + delta * eld
    return s, delta


# ---------------------------------------------------------------- reachability


@dataclass(frozen=True)
class ReachReport:
    side: str
    reachable: bool | None
    scale_finite: bool | None
    speed_finite: bool | None
    scale_shells: list = field(default_factory=list)
    speed_shells: list = field(default_factory=list)


def _cascade_verdict(shells, min_shells=6, run=3):
    """True = convergent tail, False = divergent, None = undecided."""
    for k in range(min_shells, len(shells) + 1):
        tail = shells[k - run - 1:k]
        if len(tail) < run + 1:
            continue
        if any(not np.isfinite(v) for v in tail[1:]):
            return False
        prev = np.array(tail[:-1])
        nxt = np.array(tail[1:])
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(prev > 0, nxt / prev, np.where(nxt > 0, np.inf, 0.0))
        if np.all(r >= 1 - 1e-9) and nxt[-1] > 0:
            return False
        if np.all(r <= 0.9):
            return True
    return None


def reachable(spec: Diffusion1dSpec, side: str = "alpha", detail: bool = False, max_shells: int = 60):
    """Reachability of one boundary by dyadic-shell integration toward it.

    Along the path toward the boundary we integrate log delta, the scale mass
    S, the rescaled speed mass M~ = delta * int 1/(sigma^2 delta) and
    J = int delta(u) M(u) du, which equals the second reachability integral by
    Fubini. Shell increments of S and J are classified by a geometric test.
    """
    if side not in ("alpha", "beta"):
        raise ValueError("side must be 'alpha' or 'beta'")
    x0 = spec.ref
    end = spec.alpha if side == "alpha" else spec.beta
    sgn = -1.0 if side == "alpha" else 1.0
    finite = np.isfinite(end)
    if finite:
        h = abs(end - x0)
        floor = 1e-13 * max(1.0, abs(end), h)
        nshell = min(max_shells, int(math.floor(math.log2(h / floor))))

        def xt(t):
            return end - sgn * h * math.exp(-t)

        def dxdt(t):
            return h * math.exp(-t)
    else:
        nshell = max_shells

        def xt(t):
            return x0 + sgn * math.expm1(t)

        def dxdt(t):
            return math.exp(t)

    def rhs(t, y):
        L, S, Mt, J = y
        x = xt(t)
        v = dxdt(t)
        sig2 = float(spec.sigma(x)) ** 2
        dL = -2.0 * spec.ratio(x) * sgn * v
        dS = math.exp(min(L, 700.0)) * v
        dMt = v / sig2 + Mt * dL
        dJ = Mt * v
        return [dL, dS, dMt, dJ]

    y = np.zeros(4)
    s_sh, j_sh = [], []
    ln2 = math.log(2.0)
    for k in range(nshell):
        t0, t1 = k * ln2, (k + 1) * ln2
        # S and J restart at 0 each shell so tolerances scale with the increments
        start = np.array([y[0], 0.0, y[2], 0.0])
        d0 = np.abs(rhs(t0, start))
        atol = 1e-11 * np.maximum(np.maximum(np.abs(start), d0 * ln2), 1e-15)
        with np.errstate(over="ignore", invalid="ignore"):
            sol = solve_ivp(rhs, (t0, t1), start, method="LSODA", rtol=1e-9, atol=atol)
        if not sol.success:
            s_sh.append(math.inf)
            j_sh.append(math.inf)
            break
        y = sol.y[:, -1]
        s_sh.append(float(y[1]))
        j_sh.append(float(y[3]))
        if y[0] > 700 or not np.all(np.isfinite(y)):
            s_sh.append(math.inf)
            break
        if _cascade_verdict(s_sh) is not None and _cascade_verdict(j_sh) is not None:
            break
    s_fin = _cascade_verdict(s_sh)
    j_fin = _cascade_verdict(j_sh) if s_fin else None
    if s_fin is False or j_fin is False:
        verdict = False
    elif s_fin and j_fin:
        verdict = True
    else:
        verdict = None
    if detail:
        return ReachReport(side, verdict, s_fin, j_fin, s_sh, j_sh)
    return verdict


# ---------------------------------------------------------------- lambda0 bounds


def _grid_sup(values_fn, a, b, grid):
    fine = np.linspace(a, b, 2 * grid - 1)
    coarse = fine[::2]
    vf = values_fn(fine)
    vc = vf[::2]
    top = float(np.max(vf))
    return top + abs(top - float(np.max(vc))), top


def _log_delta_path(spec, a, b):
    """Dense solution of (log delta, s) from a to b, relative to a."""
    def rhs(x, y):
        return [-2.0 * spec.ratio(x), math.exp(y[0])]

    sol = solve_ivp(rhs, (a, b), [0.0, 0.0], method="DOP853", rtol=1e-12, atol=1e-14,
                    dense_output=True)
    if not sol.success:
        raise QuadratureError(f"scale integration failed on [{a!r}, {b!r}]: {sol.message}",
                              interval=(a, b))
    return sol


def lambda0_bound_1(spec: Diffusion1dSpec, a: float, b_: float, grid: int = 512) -> float:
    """sup over [a, b_] of (pi sigma / int_a^b exp(-2 int_x^y b/sigma^2) dy)^2 / 2 + kappa."""
    if not (spec.alpha <= a < b_ <= spec.beta):
        raise ValueError("need alpha <= a < b_ <= beta")
    path = _log_delta_path(spec, a, b_)
    total = path.sol(b_)[1]

    def values(xs):
        L = path.sol(xs)[0]
        sig = np.array([float(spec.sigma(x)) for x in xs])
        kap = np.array([spec.kap(x) for x in xs])
        return 0.5 * (math.pi * sig * np.exp(L) / total) ** 2 + kap

    return _grid_sup(values, a, b_, grid)[0]


def _derivative(f, x, h, lo, hi):
    """Second-order difference, one-sided near the ends of [lo, hi]."""
    if x - 2 * h >= lo and x + 2 * h <= hi:
        return (f(x + h) - f(x - h)) / (2 * h)
    if x - 2 * h < lo:
        return (-3 * f(x) + 4 * f(x + h) - f(x + 2 * h)) / (2 * h)
    return (3 * f(x) - 4 * f(x - h) + f(x - 2 * h)) / (2 * h)


def ratio_derivative(spec, x, lo=None, hi=None, h=1e-5, rel=1e-4):
    """(b/sigma^2)'(x) by differences at h and 2h, with an agreement check."""
    lo = spec.alpha if lo is None else lo
    hi = spec.beta if hi is None else hi
    d1 = _derivative(spec.ratio, x, h, lo, hi)
    d2 = _derivative(spec.ratio, x, 2 * h, lo, hi)
    if abs(d1 - d2) > rel * max(1.0, abs(d1)):
        raise DerivativeError(f"unstable derivative of b/sigma^2 at x={x!r}: {d1!r} vs {d2!r}", x=x)
    return d1


def lambda0_bound_2(spec: Diffusion1dSpec, a: float, b_: float, grid: int = 512) -> float:
    """sup over [a, b_] of pi^2 sigma^2/(2(b_-a)^2) + sigma^2 (b/2sigma^2)' + b^2/(2sigma^2) + kappa."""
    if not (spec.alpha <= a < b_ <= spec.beta):
        raise ValueError("need alpha <= a < b_ <= beta")
    width2 = (b_ - a) ** 2

    def values(xs):
        out = np.empty(len(xs))
        for i, x in enumerate(xs):
            s2 = float(spec.sigma(x)) ** 2
            bx = float(spec.b(x))
            out[i] = (math.pi ** 2 * s2 / (2 * width2) + 0.5 * s2 * ratio_derivative(spec, x, a, b_)
                      + bx * bx / (2 * s2) + spec.kap(x))
        return out

    return _grid_sup(values, a, b_, grid)[0]


# ---------------------------------------------------------------- Lyapunov candidates


@dataclass(frozen=True, eq=False)
class PhiCandidate:
    kind: str
    phi: Callable
    xs: np.ndarray
    coef: np.ndarray  # drift is <= -coef * phi at xs

    @property
    def lambda1(self) -> float:
        return float(np.min(self.coef)) if self.coef.size else math.inf


def _outer_grid(spec, lo_edge, hi_edge, n=200, span=50.0):
    parts = []
    if lo_edge is not None:
        lo = spec.alpha + 1e-3 * (lo_edge - spec.alpha) if np.isfinite(spec.alpha) else lo_edge - span
        parts.append(np.linspace(lo, lo_edge, n))
    if hi_edge is not None:
        hi = spec.beta - 1e-3 * (spec.beta - hi_edge) if np.isfinite(spec.beta) else hi_edge + span
        parts.append(np.linspace(hi_edge, hi, n))
    return np.concatenate(parts) if parts else np.empty(0)


def phi_candidates(spec: Diffusion1dSpec, kind: str, alpha_minus: float, alpha0p: float,
                   alpha_plus: float, xs=None) -> PhiCandidate:
    """Lyapunov candidates: 'sqrt-scale' (root of |s|) or 'exp-potential' (exp(-int b/sigma^2))."""
    if not alpha_minus < alpha0p < alpha_plus:
        raise ValueError("need alpha_minus < alpha0' < alpha_plus")
    base = Diffusion1dSpec(spec.alpha, spec.beta, spec.b, spec.sigma, spec.kappa, alpha0p)
    if xs is None:
        lo_edge = alpha_minus if kind == "sqrt-scale" else None
        xs = _outer_grid(spec, lo_edge, alpha_plus)
        if kind == "exp-potential":
            xs = np.concatenate([_outer_grid(spec, alpha_minus, None), xs])
    xs = np.asarray(xs, dtype=float)
    if kind == "sqrt-scale":
        def branch(x):
            s, d = scale(base, x)
            if (x >= alpha_plus and s <= 0) or (x <= alpha_minus and s >= 0):
                raise ValueError(f"scale has the wrong sign at x={x!r}")
            return s, d

        def jet(x):
            s, d = branch(x)
            sg = 1.0 if s > 0 else -1.0
            r = math.sqrt(abs(s))
            d1 = -2.0 * spec.ratio(x) * d
            return [r, sg * d / (2 * r), sg * d1 / (2 * r) - d * d / (4 * r ** 3)]

        bridge = BPoly.from_derivatives([alpha_minus, alpha_plus], [jet(alpha_minus), jet(alpha_plus)])

        def phi(x):
            if alpha_minus < x < alpha_plus:
                return float(bridge(x))
            return math.sqrt(abs(branch(x)[0]))

        coef = []
        for x in xs:
            s, d = branch(x)
            coef.append(float(spec.sigma(x)) ** 2 * d * d / (8 * s * s) + spec.kap(x))
    elif kind == "exp-potential":
        def phi(x):
            return math.exp(0.5 * _log_delta(base, x)[0])

        coef = []
        for x in xs:
            r = spec.ratio(x)
            s2 = float(spec.sigma(x)) ** 2
            coef.append(0.5 * r * r * s2 + 0.5 * s2 * ratio_derivative(spec, x) + spec.kap(x))
    else:
        raise ValueError(f"unknown candidate kind {kind!r}")
    return PhiCandidate(kind, phi, xs, np.array(coef))


def drift_ratio(spec, phi, x, h=3e-4):
    """(sigma^2/2 phi'' + b phi' - kappa phi) / phi by central differences."""
    f0, fp, fm = phi(x), phi(x + h), phi(x - h)
    d2 = (fp - 2 * f0 + fm) / (h * h)
    d1 = (fp - fm) / (2 * h)
    return (0.5 * float(spec.sigma(x)) ** 2 * d2 + float(spec.b(x)) * d1 - spec.kap(x) * f0) / f0


# ---------------------------------------------------------------- selection


@dataclass(frozen=True)
class ConditionChoice:
    label: str | None
    lambda1: float | None
    lambda0: float | None
    margin: float | None
    reach_alpha: bool | None
    reach_beta: bool | None


def select_condition(spec: Diffusion1dSpec, phi, x0: float, x1: float, lambda0=None,
                     box=None, span: float = 50.0, n: int = 400, mesh: int = 512) -> ConditionChoice:
    """First of (i), (ii), (iii) that holds numerically; margin = lambda1 - lambda0 estimate."""
    ra = reachable(spec, "alpha")
    rb = reachable(spec, "beta")
    if ra and rb:
        return ConditionChoice("(i)", None, lambda0, None, ra, rb)
    lo = spec.alpha if np.isfinite(spec.alpha) else x0 - span
    hi = spec.beta if np.isfinite(spec.beta) else x1 + span
    if lambda0 is None:
        a, b_ = box if box is not None else (lo, hi)
        lambda0 = fd_eigen(spec, a, b_, mesh).lambda0
    eps_hi = 1e-3 * (hi - x1) if np.isfinite(spec.beta) else 0.0
    right = np.linspace(x1, hi - eps_hi, n)
    lam_right = min(-drift_ratio(spec, phi, x) for x in right)
    if ra and lam_right > lambda0:
        return ConditionChoice("(ii)", lam_right, lambda0, lam_right - lambda0, ra, rb)
    eps_lo = 1e-3 * (x0 - lo) if np.isfinite(spec.alpha) else 0.0
    left = np.linspace(lo + eps_lo, x0, n)
    lam = min(lam_right, min(-drift_ratio(spec, phi, x) for x in left))
    if lam > lambda0:
        return ConditionChoice("(iii)", lam, lambda0, lam - lambda0, ra, rb)
    return ConditionChoice(None, lam, lambda0, lam - lambda0, ra, rb)


# ---------------------------------------------------------------- finite-difference oracle


@dataclass(frozen=True, eq=False)
class FdEigen:
    lambda0: float
    x: np.ndarray
    density: np.ndarray  # QSD density at the interior nodes, integrates to 1
    eigenfunction: np.ndarray  # right eigenfunction, max 1
    lambda_fine: float
    lambda_coarse: float


def _fd_solve(spec, a, b_, mesh):
    h = (b_ - a) / mesh
    x = a + h * np.arange(1, mesh)
    s2 = np.array([float(spec.sigma(v)) ** 2 for v in x])
    bb = np.array([float(spec.b(v)) for v in x])
    kap = np.array([spec.kap(v) for v in x])
    lower = 0.5 * s2 / h ** 2 - 0.5 * bb / h  # coefficient of f(x - h)
    upper = 0.5 * s2 / h ** 2 + 0.5 * bb / h
    if np.any(lower[1:] <= 0) or np.any(upper[:-1] <= 0):
        raise QsdError("mesh too coarse for the drift: refine so that |b| h < sigma^2", mesh=mesh)
    diag = s2 / h ** 2 + kap  # A = -L_h
    off_prod = upper[:-1] * lower[1:]
    off = -np.sqrt(off_prod)
    w, v = eigh_tridiagonal(diag, off, select="i", select_range=(0, 0))
    lam = float(w[0])
    wv = v[:, 0]
    # A = D^-1 S D with d_{i+1}/d_i = sqrt(upper_i/lower_{i+1})
    logd = np.concatenate([[0.0], np.cumsum(0.5 * (np.log(upper[:-1]) - np.log(lower[1:])))])
    right = wv * np.exp(-(logd - logd.min()))
    left = wv * np.exp(logd - logd.max())
    for vec in (right, left):
        if vec.sum() < 0:
            vec *= -1
    if np.any(right < -1e-12 * np.abs(right).max()) or np.any(left < -1e-12 * np.abs(left).max()):
        raise QsdError("computed ground state changes sign", mesh=mesh)
    right = np.maximum(right, 0.0)
    left = np.maximum(left, 0.0)
    return lam, x, right / right.max(), left / (left.sum() * h)


def fd_eigen(spec: Diffusion1dSpec, a: float, b_: float, mesh: int = 512) -> FdEigen:
    """Smallest Dirichlet eigenvalue of -(sigma^2/2 f'' + b f' - kappa f) on (a, b_).

    Second-order differences on `mesh` intervals; the eigenpair comes from a
    symmetrized tridiagonal solve and lambda0 is Richardson-extrapolated from
    mesh and mesh/2.
    """
    if mesh < 16 or mesh % 2:
        raise ValueError("mesh must be an even integer >= 16")
    if not (np.isfinite(a) and np.isfinite(b_) and spec.alpha <= a < b_ <= spec.beta):
        raise ValueError("need a finite interval inside the domain")
    lf, x, right, dens = _fd_solve(spec, a, b_, mesh)
    lc = _fd_solve(spec, a, b_, mesh // 2)[0]
    return FdEigen((4 * lf - lc) / 3, x, dens, right, lf, lc)
