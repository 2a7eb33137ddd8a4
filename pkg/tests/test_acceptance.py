"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is printed in the summary.

Run alone with `pytest tests/test_acceptance.py -v` (or `python tests/test_acceptance.py`).
"""
import json
import math
import os
import time

import numpy as np
import pytest

import families
from oracles import dense_qsd, random_primitive, second_modulus
from qsdlab import (Dist, SubKernel, estimate_R, evolve_conditional, fit_convergence, q_process,
                    solve_qsd, survival, tv_distance)
from qsdlab.cli import main as cli_main
from qsdlab.criteria import (CertificateError, check_E2, check_generator_lyapunov, check_uniform,
                             construct_phi1, construct_phi2, drift_sublevel)
from qsdlab.diffusion1d import Diffusion1dSpec, fd_eigen, lambda0_bound_1, lambda0_bound_2
from qsdlab.models import (EulerDiffusionSpec, GWSpec, MultiBDSpec, PerturbedDSSpec,
                           build_euler_absorbed, build_galton_watson, build_multitype_bd,
                           build_perturbed_ds, verify_perturbed_lyapunov)
from qsdlab.montecarlo import estimate_conditional, occupation, row_chi2, simulate_q

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def test_1_reference_2x2(p2):
    t0 = time.perf_counter()
    k = SubKernel.from_matrix(p2)
    sol = solve_qsd(k)
    qp = q_process(k, sol)
    fit = fit_convergence(k, Dist.dirac(k.space, 0), sol, 30)
    dt = time.perf_counter() - t0
    th, nu, eta = dense_qsd(p2)
    rate = second_modulus(p2)
    errs = {
        "theta0": abs(sol.theta0 - th),
        "nu": np.abs(sol.nu.weights - nu).max(),
        "eta": np.abs(sol.eta - eta).max(),
        "q_kernel": np.abs(qp.tilde_kernel.dense() - p2 * eta[None, :] / (th * eta[:, None])).max(),
        "beta": np.abs(qp.beta.weights - nu * eta / (nu @ eta)).max(),
        "alpha": abs(fit.alpha_hat - rate),
    }
    print(f"theta0={sol.theta0!r} alpha_hat={fit.alpha_hat:.10f} max err={max(errs.values()):.2e} "
          f"runtime={dt:.3f}s")
    assert th == pytest.approx(0.7, abs=1e-12) and rate == pytest.approx(2 / 7, abs=1e-12)
    for name, e in errs.items():
        assert e <= 1e-8, name
    assert dt < 1.0


def test_2_oracle_fuzz():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        P = random_primitive(rng, int(rng.integers(1, 7)))
        sol = solve_qsd(SubKernel.from_matrix(P))
        th, nu, eta = dense_qsd(P)
        worst = max(worst, abs(sol.theta0 - th), np.abs(sol.nu.weights - nu).max(),
                    np.abs(sol.eta - eta).max())
    dt = time.perf_counter() - t0
    print(f"1000 kernels, worst deviation {worst:.2e}, runtime {dt:.1f}s")
    assert worst <= 1e-8
    assert dt < 30


def test_3_certificate_ordering():
    rng = np.random.default_rng(3)
    built = violations = 0
    for _ in range(500):
        n = int(rng.integers(2, 9))
        k = SubKernel.from_matrix(random_primitive(rng, n))
        theta0 = solve_qsd(k).theta0
        K = np.flatnonzero(rng.random(n) < 0.5)
        if K.size == 0:
            K = np.array([int(rng.integers(n))])
        t1 = rng.uniform(0.05, 0.95) * theta0
        t2 = rng.uniform(t1, theta0)
        try:
            phi1, _ = construct_phi1(k, K, t1)
            phi2, ell = construct_phi2(k, K, t2)
        except CertificateError:
            continue
        built += 1
        try:
            cert = check_E2(k, K, phi1, phi2, ell)
        except CertificateError:
            violations += 1
            continue
        if not (theta0 >= cert.theta2 > cert.theta1):
            violations += 1
    print(f"{built} certificates constructed over 500 kernels, {violations} ordering violations")
    assert built >= 100
    assert violations == 0


def test_4_brownian_euler_bridge():
    t0 = time.perf_counter()
    delta = 1e-3
    m = build_euler_absorbed(EulerDiffusionSpec(0.0, 1.0, lambda x: 0 * x, lambda x: 1 + 0 * x,
                                                delta=delta, cells=400))
    sol = solve_qsd(m.kernel)
    lam = -math.log(sol.theta0) / delta
    x = m.kernel.space.coords.ravel()
    tv = tv_distance(sol.nu, Dist(m.kernel.space, families.sine_density(x)))
    b2 = lambda0_bound_2(Diffusion1dSpec(0.0, 1.0, lambda x: 0.0, lambda x: 1.0), 0.0, 1.0)
    dt = time.perf_counter() - t0
    ref = math.pi ** 2 / 2
    print(f"lambda0={lam:.6f} rel err={abs(lam / ref - 1):.2e} TV(sine)={tv:.2e} "
          f"bound_2-pi^2/2={b2 - ref:.1e} runtime={dt:.1f}s")
    assert abs(lam / ref - 1) <= 0.02
    assert tv <= 0.03
    assert abs(b2 - ref) <= 1e-6
    assert dt < 60


def _bound_suite():
    S = Diffusion1dSpec
    one = lambda x: 1.0
    return [
        (S(0, 1, lambda x: 0.0, one), 0, 1),
        (S(0, 1, lambda x: 1.0, one), 0, 1),
        (S(0, 1, lambda x: -2.0, lambda x: 0.5), 0, 1),
        (S(0, math.inf, lambda x: x * math.sin(x), one, lambda x: 5 * (1 - 1 / (1 + x))), 0, 1),
        (S(0, math.inf, lambda x: x * math.sin(x), one, lambda x: 5 * (1 - 1 / (1 + x))), 0, 3),
        (S(0, math.inf, lambda x: x * math.sin(x), one), 1, 4),
        (S(-1, 1, lambda x: -x, one), -1, 1),
        (S(-1, 1, lambda x: x, one), -1, 1),
        (S(-2, 2, lambda x: -x ** 3, one), -2, 2),
        (S(0, 2, lambda x: 0.0, lambda x: 1 + x), 0, 2),
        (S(0, 2, lambda x: 0.3, lambda x: math.sqrt(1 + x * x)), 0.5, 2),
        (S(0, 1, lambda x: 0.0, one, lambda x: 3.0), 0, 1),
        (S(0, 1, lambda x: 0.0, one, lambda x: 10 * x * x), 0, 1),
        (S(0, math.pi, lambda x: math.cos(x), one), 0, math.pi),
        (S(1, 3, lambda x: 1 / x, one), 1, 3),
        (S(0, 1, lambda x: 0.5 - x, lambda x: 0.7, lambda x: 1 + math.sin(6 * x)), 0, 1),
        (S(-3, 3, lambda x: math.tanh(x), lambda x: 2.0), -3, 3),
        (S(0, 4, lambda x: -1.0, one, lambda x: 0.5 * x), 0, 4),
        (S(0, 1, lambda x: 2 * math.sin(3 * x), lambda x: 1 + 0.5 * math.cos(x)), 0, 1),
        (S(0, 5, lambda x: -x / (1 + x), one), 0.5, 4.5),
    ]


def test_5_lambda0_bounds_dominate_fd():
    suite = _bound_suite()
    violations = []
    slack = []
    for i, (spec, a, b) in enumerate(suite):
        lam = fd_eigen(spec, a, b).lambda0
        u1, u2 = lambda0_bound_1(spec, a, b), lambda0_bound_2(spec, a, b)
        slack.append(min(u1, u2) - lam)
        if u1 < lam - 1e-6 or u2 < lam - 1e-6:
            violations.append((i, lam, u1, u2))
    # the potential example on [0, 1] with kappa0 = 5 also sits under pi^2/2 + 3/2 + kappa0/2
    spec, a, b = suite[3]
    assert lambda0_bound_2(spec, a, b) <= math.pi ** 2 / 2 + 1.5 + 2.5
    print(f"{len(suite)} specs, {len(violations)} violations, smallest slack {min(slack):.2e}")
    assert len(suite) == 20
    assert not violations


def test_6_galton_watson():
    t0 = time.perf_counter()
    thetas = []
    for N in (100, 200, 400):
        thetas.append(solve_qsd(build_galton_watson(GWSpec([0.5, 0.3, 0.2], N)).kernel).theta0)
    d1, d2 = thetas[1] - thetas[0], thetas[2] - thetas[1]
    # Aitken extrapolation; falls back to the last value when the differences vanish
    extrap = thetas[2] - d2 * d2 / (d2 - d1) if abs(d2 - d1) > 1e-15 else thetas[2]
    m = build_galton_watson(GWSpec([0.5, 0.3, 0.2], 200))
    R = estimate_R(m.kernel, 1, 1, horizon=400)
    rho = m.meta["rho"]
    dt = time.perf_counter() - t0
    print(f"theta0 sweep={[round(t, 12) for t in thetas]} extrapolated={extrap:.10f} "
          f"R={R:.6f} 1/rho={1 / rho:.6f} runtime={dt:.1f}s")
    assert abs(extrap - 0.7) <= 1e-3
    assert abs(R - 1 / rho) <= 1e-3
    assert dt < 120


def test_7_three_set():
    m = families.three_set()
    k = m.kernel
    sol = solve_qsd(k)
    b = m.meta["blocks"]
    nu_d1 = float(sol.nu.weights[b["D1"]].sum())
    eta_d3 = float(sol.eta[b["D3"]].max()) / float(sol.eta.max())
    gap = abs(sol.theta0 - m.meta["theta0_Y"])
    from qsdlab.criteria import LyapunovCertificate
    ones = np.ones(k.size)
    cert = LyapunovCertificate(b["D2"], ones, 0.0, 1.0, ones, 1.0, {})
    uni = check_uniform(k, cert, horizon=200)
    print(f"nu(D1)={nu_d1:.1e} max_D3 eta/|eta|={eta_d3:.1e} |theta0-theta0_Y|={gap:.1e} "
          f"uniform passed={uni.passed} c={uni.c_underbar}")
    assert nu_d1 <= 1e-10
    assert eta_d3 <= 1e-10
    assert gap <= 1e-10
    assert not uni.passed and uni.c_underbar == 0.0


def test_8_perturbed_gaussian(tmp_path):
    spec = PerturbedDSSpec(lambda x: x / 2, lambda x: x[:, 0] > 0, [(0.0, 20.0)], [200])
    m = build_perturbed_ds(spec)
    k = m.kernel
    rep = verify_perturbed_lyapunov(spec, lambda c: np.exp(np.abs(c[:, 0])),
                                    [0, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20], model=m)
    code = cli_main(["certify", os.path.join(CONFIGS, "perturbed_ds.ini"),
                     "--out", str(tmp_path), "--quiet"])
    with open(tmp_path / "certificate.json") as fh:
        cert = json.load(fh)
    sol = solve_qsd(k)
    starts = [int(i) for i in np.linspace(0, k.size - 1, 5)]
    tvs = [tv_distance(evolve_conditional(k, Dist.dirac(k.space, x), 200), sol.nu) for x in starts]
    laws = [evolve_conditional(k, Dist.dirac(k.space, x), 200) for x in starts]
    spread = max(tv_distance(a, b) for a in laws for b in laws)
    print(f"shell maxima decreasing={rep.decreasing} certify exit={code} passed={cert['passed']} "
          f"max TV to nu={max(tvs):.1e} pairwise={spread:.1e}")
    assert rep.decreasing and all(b < a for a, b in zip(rep.shell_max[:-1], rep.shell_max[1:]))
    assert code == 0 and cert["passed"]
    assert max(tvs) <= 1e-6 and spread <= 1e-6


# Compact instances: the empirical TV of a law with effective support m scales like sqrt(m / N)
# and Q-occupation error like sqrt(relaxation time / T), so large lazy chains would sit on the bound.
MC_FAMILIES = {
    "kernel": families.kernel_2x2,
    "multitype_bd": lambda: families.multitype_bd(5),
    "galton_watson": families.galton_watson,
    "perturbed_ds": lambda: families.perturbed_ds(20),
    "euler": lambda: families.euler(10),
    "penalized": families.penalized,
    "three_set": families.three_set,
    "vitality": families.vitality,
}


def _mc_family(name, make, seed):
    m = make()
    k = m.kernel
    sol = solve_qsd(k)
    x0 = int(np.argmax(sol.nu.weights * sol.eta))
    rows = sorted({x0, int(sol.e_prime[0]), int(sol.e_prime[-1]), k.size - 1})
    p_min = min(row_chi2(m.sampler, k, r, 100_000, seed).p_value for r in rows)
    mu = Dist.dirac(k.space, x0)
    n_paths = int(min(2e6, max(1e5, 2000 / survival(k, x0, 20))))
    est = estimate_conditional(m.sampler, mu, 20, n_paths, (seed,))
    again = estimate_conditional(m.sampler, mu, 20, n_paths, (seed,))
    tv = tv_distance(est.empirical, evolve_conditional(k, mu, 20))
    bound = 3 / math.sqrt(max(est.surviving, 1))
    qp = q_process(k, sol)
    path = simulate_q(k, sol, x0, 1_000_000, (seed, 0), qp=qp)
    again_q = simulate_q(k, sol, x0, 1000, (seed, 0), qp=qp)
    beta = np.zeros(k.size)
    beta[qp.states] = qp.beta.weights
    qtv = float(np.abs(occupation(path, k.size) - beta).sum())
    same = np.array_equal(est.counts, again.counts) and again_q.states == path.states[:1001]
    return {"name": name, "p_min": p_min, "tv": tv, "bound": bound, "survivors": est.surviving,
            "q_tv": qtv, "identical": same}


def test_9_monte_carlo_cross_validation():
    results = [_mc_family(name, make, 900 + i) for i, (name, make) in enumerate(MC_FAMILIES.items())]
    bad = []
    for r in results:
        ok = (r["p_min"] > 1e-6 and r["tv"] <= r["bound"] and r["q_tv"] <= 0.02 and r["identical"])
        if not ok:
            bad.append(r)
    worst = max(r["tv"] / r["bound"] for r in results)
    print(f"{len(results)} families, min chi2 p={min(r['p_min'] for r in results):.3g}, "
          f"max TV/bound={worst:.2f}, max Q-occupation TV={max(r['q_tv'] for r in results):.4f}, "
          f"failures={[r['name'] for r in bad]}")
    assert not bad, bad


def test_10_multitype_birth_death():
    lines = []
    regimes = [
        ("ratio", lambda x: (1.0, 1.0), lambda x: (x[0] * sum(x), x[1] * sum(x)),
         lambda X: X.sum(axis=1)),
        ("delta", lambda x: (x[0] + 0.5, x[1] + 0.5), lambda x: (3 * x[0] + 1, 3 * x[1] + 1),
         lambda X: np.exp(0.3 * X.sum(axis=1))),
    ]
    for name, birth, death, phi in regimes:
        rm = build_multitype_bd(MultiBDSpec(2, birth, death, 30))
        shells = rm.meta["drift_shells"]
        grows = shells["ratio_growth_increasing"] if name == "ratio" else shells["delta_growth_increasing"]
        lams = []
        for f in (2, 4, 8):
            L = f * rm.max_rate
            lams.append(L * (1 - solve_qsd(rm.uniformized(L).kernel).theta0))
        X = np.array(rm.space.labels, dtype=float)
        ph = phi(X)
        ph = ph / ph.min()
        D0 = drift_sublevel(rm.Q, ph, lams[0] + 1.0)
        rep = check_generator_lyapunov(rm.Q, ph, D0, lams[0])
        spread = (max(lams) - min(lams)) / min(lams)
        lines.append(f"{name}: lambda1={rep.lambda1:.3f} > lambda0={lams[0]:.6f} spread={spread:.1e}")
        assert grows
        assert rep.passed and rep.lambda1 > lams[0]
        assert spread <= 0.01
    print("; ".join(lines))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
