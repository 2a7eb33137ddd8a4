"""Checkers and constructors for the Lyapunov/minorization certificates.

Every checker extracts the tightest constants it can (with witness states)
instead of taking them as inputs, so a certificate is falsifiable.
Failures raise CertificateError carrying the partial report.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .kernel import (Dist, QsdError, StateSpace, SubKernel, hitting_moment,
                     subset_indices)

DEFAULT_HORIZON = 10_000
SLACK_TOL = 1e-10


class CertificateError(QsdError):
    def __init__(self, message, line=None, witness=None, certificate=None):
        super().__init__(message, line=line, witness=witness)
        self.line = line
        self.witness = witness
        self.certificate = certificate


def _plain(v):
    if isinstance(v, np.ndarray):
        return [_plain(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {str(a): _plain(b) for a, b in v.items()}
    if isinstance(v, Dist):
        return _plain(v.weights)
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if dataclasses.is_dataclass(v):
        return report_dict(v)
    return v


def report_dict(cert):
    """Dataclass -> dict in declaration order (stable for diffs)."""
    return {f.name: _plain(getattr(cert, f.name)) for f in dataclasses.fields(cert)}


def report_json(cert):
    return json.dumps(report_dict(cert), indent=2)


def _nonempty(k, K):
    K = subset_indices(k.size, K)
    if K.size == 0:
        raise ValueError("K must be nonempty")
    return K


def _rows_power(k, K, n):
    """Rows of P^n indexed by K, as a dense |K| x N array."""
    R = np.zeros((K.size, k.size))
    R[np.arange(K.size), K] = 1.0
    for _ in range(n):
        R = np.asarray(R @ k.rows)
    return R


def _cols_power(k, K, n):
    """Columns of P^n indexed by K, as a dense N x |K| array."""
    C = np.zeros((k.size, K.size))
    C[K, np.arange(K.size)] = 1.0
    for _ in range(n):
        C = np.asarray(k.rows @ C)
    return C


# ---------------------------------------------------------------- (E1)


@dataclass(frozen=True, eq=False)
class MinorizationCertificate:
    K: np.ndarray
    n1: int
    c1: float
    nu: Dist


def check_E1(k: SubKernel, K, n1: int) -> MinorizationCertificate:
    """Columnwise minimum of P^n1 over K x K."""
    K = _nonempty(k, K)
    R = _rows_power(k, K, n1)[:, K]
    m = R.min(axis=0)
    c1 = float(m.sum())
    if c1 <= 0:
        S = (R > 0).astype(int)
        overlap = S @ S.T
        bad = np.argwhere(overlap == 0)
        witness = tuple(int(K[i]) for i in bad[0]) if bad.size else tuple(int(x) for x in K)
        raise CertificateError(f"no common minorization at n1={n1}", line="E1", witness=witness)
    w = np.zeros(k.size)
    w[K] = m / c1
    return MinorizationCertificate(K, n1, c1, Dist(k.space, w))


# ---------------------------------------------------------------- (E2)


@dataclass(frozen=True, eq=False)
class LyapunovCertificate:
    K: np.ndarray
    phi1: np.ndarray
    theta1: float
    c2: float
    phi2: np.ndarray
    theta2: float
    report: dict
    ell: int | None = None
    passed: bool = True


def check_E2(k: SubKernel, K, phi1, phi2, ell=None) -> LyapunovCertificate:
    """Best constants theta1, c2, theta2 for a given pair (phi1, phi2)."""
    K = _nonempty(k, K)
    phi1 = np.asarray(phi1, dtype=float)
    phi2 = np.asarray(phi2, dtype=float)
    if phi1.shape != (k.size,) or phi2.shape != (k.size,):
        raise ValueError("phi1 and phi2 must be vectors over the state space")
    if np.any(phi1 < 1) or not np.all(np.isfinite(phi1)):
        raise ValueError("phi1 must be finite and >= 1")
    if np.any(phi2 < 0) or np.any(phi2 > 1):
        raise ValueError("phi2 must take values in [0, 1]")
    if phi2[K].min() <= 0:
        raise ValueError("phi2 must be positive on K")
    inK = np.zeros(k.size, dtype=bool)
    inK[K] = True
    Pphi1 = np.asarray(k.rmul(phi1))
    Pphi2 = np.asarray(k.rmul(phi2))
    off = np.flatnonzero(~inK)
    if off.size:
        r1 = Pphi1[off] / phi1[off]
        theta1 = float(r1.max())
        arg1 = int(off[np.argmax(r1)])
    else:
        theta1, arg1 = 0.0, None
    c2 = float(np.max(np.maximum(Pphi1[K] - theta1 * phi1[K], 0.0)))
    pos = np.flatnonzero(phi2 > 0)
    r2 = Pphi2[pos] / phi2[pos]
    theta2 = float(r2.min())
    arg2 = int(pos[np.argmin(r2)])
    slack1 = theta1 * phi1 + c2 * inK - Pphi1
    slack2 = Pphi2 - theta2 * phi2
    report = {"slack1": slack1, "slack2": slack2,
              "theta1_witness": arg1, "theta2_witness": arg2}
    passed = theta1 < theta2
    cert = LyapunovCertificate(K, phi1, theta1, c2, phi2, theta2, report, ell, passed)
    if not passed:
        raise CertificateError(f"theta1={theta1!r} >= theta2={theta2!r}", line="E2",
                               witness=(arg1, arg2), certificate=cert)
    return cert


def _log_expm1(x):
    """log(e^x - 1) for x > 0 without overflow."""
    return x + math.log(-math.expm1(-x))


def construct_phi2(k: SubKernel, K, theta2: float, horizon: int = DEFAULT_HORIZON):
    """phi2 from the first ell with theta2^-ell inf_K P_x(X_ell in K) >= 1."""
    K = _nonempty(k, K)
    if not 0 < theta2 <= 1:
        raise ValueError("theta2 must lie in (0, 1]")
    v = np.zeros(k.size)
    v[K] = 1.0
    S = v.copy()  # running sum of theta2^-j P_x(X_j in K), j < ell
    best = 0.0
    ell = None
    for n in range(1, horizon + 1):
        v = np.asarray(k.rmul(v)) / theta2
        r = float(v[K].min())
        best = max(best, r)
        if r >= 1.0:
            ell = n
            break
        S += v
    if ell is None:
        raise CertificateError(
            f"no ell <= {horizon} with theta2^-ell inf_K P(X_ell in K) >= 1 (best ratio {best:.3e})",
            line="construct_phi2", witness=best)
    lt = -math.log(theta2)
    coef = 1.0 / ell if lt == 0.0 else math.exp(_log_expm1(lt) - _log_expm1(ell * lt))
    phi2 = np.clip(coef * S, 0.0, 1.0)
    if phi2[K].min() < 1e-250:
        # the prescribed scale underflows; the inequality is homogeneous, so rescale to max 1
        phi2 = S / S.max()
    return phi2, ell


def construct_phi1(k: SubKernel, K, theta1: float):
    """phi1 = E_x[theta1^-(T_K ^ tau)] and the matching c2."""
    K = _nonempty(k, K)
    hm = hitting_moment(k, K, theta1)
    if not hm.all_converged:
        bad = np.flatnonzero(~hm.converged)
        raise CertificateError(f"hitting moment diverges at states {bad.tolist()}",
                               line="construct_phi1", witness=bad)
    phi1 = np.array(hm.values)
    Pphi1 = np.asarray(k.rmul(phi1))
    c2 = float(np.max(np.maximum(Pphi1[K] - theta1 * phi1[K], 0.0)))
    return phi1, c2


# ---------------------------------------------------------------- (E3), (E4)


@dataclass(frozen=True, eq=False)
class HarnackReport:
    horizon: int
    worst_ratio: float
    worst_n: int
    final_ratio: float
    asymptotic_ratio: float | None
    stabilized: bool | None


def _harnack(k, K, horizon, line):
    s = np.ones(k.size)
    worst, worst_n, ratio = 1.0, 0, 1.0
    for n in range(1, horizon + 1):
        s_new = np.asarray(k.rmul(s))
        top = s_new.max()
        if top <= 0:
            raise CertificateError(f"all survival vanishes at n={n}", line=line,
                                   witness=(n, int(K[0])))
        s_new = s_new / top
        lo = s_new[K].min()
        if lo <= 0:
            dead = int(K[np.argmin(s_new[K])])
            raise CertificateError(f"survival from state {dead} is 0 at n={n}",
                                   line=line, witness=(n, dead))
        ratio = float(s_new[K].max() / lo)
        if ratio > worst:
            worst, worst_n = ratio, n
        if np.max(np.abs(s_new - s)) <= 1e-15:
            break  # fixed direction reached; later ratios are identical
        s = s_new
    return worst, worst_n, ratio


def check_E3(k: SubKernel, K, horizon: int = DEFAULT_HORIZON, sol=None) -> HarnackReport:
    """sup_n max_K P_y(n < tau) / min_K P_y(n < tau) up to the horizon."""
    K = _nonempty(k, K)
    worst, worst_n, final = _harnack(k, K, horizon, "E3")
    asym = stab = None
    if sol is not None:
        eK = sol.eta[K]
        asym = float(eK.max() / eK.min()) if eK.min() > 0 else math.inf
        stab = bool(abs(final - asym) <= 0.01 * asym)
    return HarnackReport(horizon, worst, worst_n, final, asym, stab)


@dataclass(frozen=True, eq=False)
class AperiodicityReport:
    K: np.ndarray
    n4: np.ndarray  # -1 marks failure within the horizon
    horizon: int

    @property
    def passed(self):
        return bool(np.all(self.n4 >= 0))


def _positivity_pattern(k, K, horizon):
    """Boolean history of P_x(X_n in K) > 0, n = 0.., with cycle detection."""
    g = k.graph()
    v = np.zeros(k.size, dtype=bool)
    v[K] = True
    hist = [v]
    seen = {v.tobytes(): 0}
    start = period = None
    for n in range(1, horizon + 1):
        v = np.asarray(g @ v.astype(float)) > 0
        key = v.tobytes()
        if key in seen:
            start, period = seen[key], n - seen[key]
            break
        seen[key] = n
        hist.append(v)
    return np.array(hist), start, period


def check_E4(k: SubKernel, K, horizon: int = DEFAULT_HORIZON) -> AperiodicityReport:
    """Smallest n4(x) with P_x(X_n in K) > 0 for all n4(x) <= n <= horizon."""
    K = _nonempty(k, K)
    hist, start, period = _positivity_pattern(k, K, horizon)
    n4 = np.empty(K.size, dtype=int)
    for i, x in enumerate(K):
        col = hist[:, x]
        if start is not None and not col[start:start + period].all():
            # a zero recurs forever, hence at the horizon or just before it
            n4[i] = -1
            continue
        zeros = np.flatnonzero(~col[1:]) + 1
        n4[i] = int(zeros[-1] + 1) if zeros.size else 1
        if n4[i] > horizon:
            n4[i] = -1
    return AperiodicityReport(K, n4, horizon)


# ---------------------------------------------------------------- domination


def check_domination(k: SubKernel, K, n0: int, m0: int) -> float:
    """Smallest C with P_x(X_n0 in . & K) <= C P_y(X_m0 in .), x in E, y in K."""
    K = _nonempty(k, K)
    if n0 > m0:
        raise ValueError("need n0 <= m0")
    A = _cols_power(k, K, n0)          # A[x, j] = P^n0(x, K[j])
    B = _rows_power(k, K, m0)[:, K]    # B[i, j] = P^m0(K[i], K[j])
    num = A.max(axis=0)
    den = B.min(axis=0)
    bad = np.flatnonzero((num > 0) & (den <= 0))
    if bad.size:
        j = bad[0]
        witness = (int(np.argmax(A[:, j])), int(K[np.argmin(B[:, j])]), int(K[j]))
        raise CertificateError("domination fails: zero denominator with positive numerator",
                               line="domination", witness=witness)
    ok = num > 0
    return float(np.max(num[ok] / den[ok])) if ok.any() else 0.0


def improve_theta2(k: SubKernel, cert: LyapunovCertificate, sol, theta2_new: float,
                   horizon: int = DEFAULT_HORIZON) -> LyapunovCertificate:
    """Rebuild phi2 at a larger theta2 in (theta1, theta0)."""
    if not cert.theta1 < theta2_new < sol.theta0:
        raise CertificateError(
            f"theta2_new={theta2_new!r} must lie strictly between theta1={cert.theta1!r} "
            f"and theta0={sol.theta0!r}", line="improve_theta2")
    if theta2_new <= cert.theta2:
        return cert
    phi2, ell = construct_phi2(k, cert.K, theta2_new, horizon)
    return check_E2(k, cert.K, cert.phi1, phi2, ell=ell)


def domain_exponent(cert: LyapunovCertificate) -> float:
    """log theta1 / log theta2."""
    if cert.theta1 <= 0:
        return math.inf
    if cert.theta2 >= 1:
        return math.inf
    return math.log(cert.theta1) / math.log(cert.theta2)


# ---------------------------------------------------------------- uniform


@dataclass(frozen=True)
class UniformReport:
    passed: bool
    n4prime: int | None
    c_underbar: float
    phi1_sup: float


def check_uniform(k: SubKernel, cert: LyapunovCertificate,
                  horizon: int = DEFAULT_HORIZON) -> UniformReport:
    """First n with inf_x P_x(X_n in K | n < tau) > 0."""
    K = cert.K
    a = np.zeros(k.size)
    a[K] = 1.0
    s = np.ones(k.size)
    best = 0.0
    for n in range(1, horizon + 1):
        a = np.asarray(k.rmul(a))
        s = np.asarray(k.rmul(s))
        top = s.max()
        if top <= 0:
            break
        a, s = a / top, s / top
        alive = s > 0
        c = float(np.min(a[alive] / s[alive]))
        if c > 0:
            return UniformReport(True, n, c, float(np.max(cert.phi1)))
        best = max(best, c)
    return UniformReport(False, None, best, float(np.max(cert.phi1)))


# ---------------------------------------------------------------- generators


@dataclass(frozen=True, eq=False)
class GeneratorLyapunovReport:
    lambda1: float
    C: float
    passed: bool
    lambda0: float | None
    witness: int | None


def generator_drift(Q, phi):
    """L phi = Q phi with the cemetery value phi(cemetery) = 0."""
    return np.asarray(Q @ np.asarray(phi, dtype=float)).ravel()


def drift_sublevel(Q, phi, level):
    """States where -L phi / phi < level (the natural finite set D0)."""
    phi = np.asarray(phi, dtype=float)
    return np.flatnonzero(-generator_drift(Q, phi) / phi < level)


def check_generator_lyapunov(Q, phi, D0, lambda0=None) -> GeneratorLyapunovReport:
    """Best lambda1, C in L phi <= -lambda1 phi + C 1_D0."""
    phi = np.asarray(phi, dtype=float)
    n = phi.shape[0]
    if np.any(phi < 1):
        raise ValueError("phi must be >= 1")
    Lphi = generator_drift(Q, phi)
    inD = np.zeros(n, dtype=bool)
    inD[subset_indices(n, D0)] = True
    off = np.flatnonzero(~inD)
    if off.size and np.max(Lphi[off]) > 0:
        w = int(off[np.argmax(Lphi[off])])
        raise CertificateError(f"L phi > 0 at state {w} outside D0", line="generator",
                               witness=w)
    if off.size:
        r = -Lphi[off] / phi[off]
        lambda1 = float(r.min())
        arg = int(off[np.argmin(r)])
    else:
        lambda1, arg = math.inf, None
    C = float(np.max(np.maximum(Lphi[inD] + lambda1 * phi[inD], 0.0), initial=0.0)) \
        if np.isfinite(lambda1) else float(np.max(np.maximum(Lphi[inD], 0.0), initial=0.0))
    passed = lambda0 is None or lambda1 > lambda0
    return GeneratorLyapunovReport(lambda1, C, bool(passed), lambda0, arg)


def max_exit_rate(Q):
    diag = Q.diagonal() if sp.issparse(Q) else np.diag(Q)
    return float(np.max(-np.asarray(diag)))


def uniformize(Q, Lambda: float, space=None) -> SubKernel:
    """P = I + Q / Lambda."""
    n = Q.shape[0]
    diag = np.asarray(Q.diagonal() if sp.issparse(Q) else np.diag(Q))
    rate = -diag
    if Lambda <= 0 or np.any(rate > Lambda * (1 + 1e-14)):
        x = int(np.argmax(rate))
        raise ValueError(f"Lambda={Lambda!r} below exit rate {rate[x]!r} of state {x}")
    if sp.issparse(Q):
        P = sp.identity(n, format="csr") + sp.csr_matrix(Q) / Lambda
        P.data = np.maximum(P.data, 0.0)
    else:
        P = np.maximum(np.eye(n) + np.asarray(Q, dtype=float) / Lambda, 0.0)
    space = StateSpace.range(n) if space is None else space
    return SubKernel.from_matrix(P, space)


# ---------------------------------------------------------------- (F)


@dataclass(frozen=True, eq=False)
class FCertificate:
    L: np.ndarray
    t1: int
    t2: int
    c1: float
    gamma1: float
    gamma2: float
    psi1: np.ndarray
    psi2: np.ndarray
    c2: float
    c3: float
    growth_start: float
    growth_end: float
    horizon: int
    lines: dict


def check_F(k: SubKernel, L, psi1, t2: int, horizon: int = DEFAULT_HORIZON,
            gamma2=None, t1=None) -> FCertificate:
    """Discrete-step check of (F1)-(F3) on a uniformized kernel."""
    L = _nonempty(k, L)
    psi1 = np.asarray(psi1, dtype=float)
    if np.any(psi1 < 1) or not np.all(np.isfinite(psi1)):
        raise ValueError("psi1 must be finite and >= 1")
    n = k.size
    inL = np.zeros(n, dtype=bool)
    inL[L] = True
    lines = {}

    # (F1)
    c1 = 0.0
    for t in ([t1] if t1 is not None else range(1, min(horizon, 1000) + 1)):
        R = _rows_power(k, L, t)[:, L]
        c1 = float(R.min(axis=0).sum())
        if c1 > 0:
            t1 = t
            break
    lines["F1"] = c1 > 0
    if not lines["F1"]:
        raise CertificateError("no minorization on L", line="F1", witness=t1)

    # (F2) line 1: paths avoiding L up to time t2
    v = np.where(inL, 0.0, psi1)
    for _ in range(t2):
        v = np.where(inL, 0.0, np.asarray(k.rmul(v)))
    ratio = v / psi1
    gamma1 = float(ratio.max() ** (1.0 / t2)) if ratio.max() > 0 else 0.0
    lines["F2_decay"] = True

    # (F2) line 2
    w = psi1.copy()
    c2 = float(w[L].max())
    for _ in range(t2):
        w = np.asarray(k.rmul(w))
        c2 = max(c2, float(w[L].max()))
    lines["F2_bounded"] = bool(np.isfinite(c2))

    # (F2) line 3: gamma2^-t inf_L P_x(X_t in L) grows
    a = np.zeros(n)
    a[L] = 1.0
    logm = np.empty(horizon + 1)
    logm[0] = 0.0
    logscale = 0.0
    for t in range(1, horizon + 1):
        a = np.asarray(k.rmul(a))
        top = a.max()
        if top <= 0:
            logm[t:] = -np.inf
            break
        a = a / top
        logscale += math.log(top)
        lo = a[L].min()
        logm[t] = logscale + math.log(lo) if lo > 0 else -np.inf
    rate = math.exp(logm[horizon] - logm[horizon - 1]) if np.isfinite(logm[horizon - 1]) \
        and np.isfinite(logm[horizon]) else 0.0
    if gamma2 is None:
        gamma2 = 0.5 * (gamma1 + rate)
    half = horizon // 2
    g_start = logm[half] - half * math.log(gamma2) if gamma2 > 0 else math.inf
    g_end = logm[horizon] - horizon * math.log(gamma2) if gamma2 > 0 else math.inf
    lines["F2_order"] = gamma1 < gamma2
    lines["F2_growth"] = bool(np.isfinite(g_end) and g_end > g_start and g_end > 0)

    # psi2 = sum_k gamma2^-(k t2) P_x(X_{k t2} in L), k <= n0
    b = inL.astype(float)
    psi2 = b.copy()
    for kk in range(1, horizon // max(t2, 1) + 1):
        for _ in range(t2):
            b = np.asarray(k.rmul(b))
        b = b / gamma2 ** t2
        psi2 += b
        if b[L].min() >= 1:
            break

    # (F3)
    try:
        c3 = _harnack(k, L, horizon, "F3")[0]
        lines["F3"] = True
    except CertificateError:
        c3 = math.inf
        lines["F3"] = False

    cert = FCertificate(L, int(t1), int(t2), c1, gamma1, float(gamma2), psi1, psi2, c2, c3,
                        float(g_start), float(g_end), horizon, lines)
    for name in ("F2_order", "F2_growth", "F3"):
        if not lines[name]:
            raise CertificateError(f"condition line {name} fails", line=name,
                                   witness={"gamma1": gamma1, "gamma2": gamma2,
                                            "growth_rate": rate}, certificate=cert)
    return cert
