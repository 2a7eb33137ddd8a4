import math

import numpy as np
import pytest

import families
from oracles import dense_qsd
from qsdlab import SubKernel, solve_qsd
from qsdlab.criteria import (CertificateError, LyapunovCertificate, check_domination, check_E1,
                             check_E2, check_E3, check_E4, check_F, check_generator_lyapunov,
                             check_uniform, construct_phi1, generator_drift, construct_phi2, domain_exponent,
                             improve_theta2, report_json, uniformize)


@pytest.fixture
def k2(p2):
    return SubKernel.from_matrix(p2)


def test_E1(k2):
    c = check_E1(k2, [0, 1], 1)
    assert c.c1 == pytest.approx(0.5)
    assert np.allclose(c.nu.weights, [0.6, 0.4])
    c = check_E1(SubKernel.from_matrix([[0.3, 0.2], [0.1, 0.1]]), [0], 1)
    assert c.c1 == pytest.approx(0.3) and c.nu.weights.tolist() == [1.0, 0.0]
    with pytest.raises(CertificateError):
        check_E1(SubKernel.from_matrix([[0.5, 0.0], [0.0, 0.5]]), [0, 1], 1)


def test_E2_best_constants(k2):
    c = check_E2(k2, [0], [1.0, 6.0], [1.0, 1.0])
    # the tight constant is 2.7 / 6 = 0.45, below the admissible 0.5
    assert c.theta1 == pytest.approx(0.45)
    assert c.theta1 <= 0.5
    assert c.theta2 == pytest.approx(0.7)
    assert c.c2 == pytest.approx(1.25)
    assert c.passed


def test_E2_absorption_free():
    k = SubKernel.from_matrix([[0.5, 0.5], [0.5, 0.5]])
    c = check_E2(k, [0], [1.0, 1.2], [1.0, 1.0])
    assert c.theta2 == pytest.approx(1.0) and c.passed


def test_E2_failure_witness():
    k = SubKernel.from_matrix([[0.5, 0.2], [0.0, 1.0]])
    with pytest.raises(CertificateError) as info:
        check_E2(k, [0], [1.0, 1.0], [1.0, 1.0])
    assert info.value.line == "E2"


def test_construct_phi2(k2):
    phi2, ell = construct_phi2(k2, [0], 0.65)
    assert ell == 7
    assert np.all(phi2 <= 1) and phi2[0] > 0
    assert np.all(k2.rmul(phi2) >= 0.65 * phi2 - 1e-15)
    k = SubKernel.from_matrix([[0.5, 0.5], [0.5, 0.5]])
    phi2, ell = construct_phi2(k, [0, 1], 0.99)
    assert ell == 1 and np.allclose(phi2, phi2[0])
    with pytest.raises(CertificateError):
        construct_phi2(k2, [0], 0.71, horizon=2000)


def test_construct_phi2_underflow_keeps_positivity():
    # small theta2 with a long ell would underflow the prescribed scale
    P = np.array([[0.05, 0.0, 0.0], [0.0, 0.9, 0.1], [1e-300, 0.0, 0.9]])
    k = SubKernel.from_matrix(P)
    phi2, ell = construct_phi2(k, [0, 1], 0.04)
    assert phi2[[0, 1]].min() > 0


def test_construct_phi1(k2):
    phi1, c2 = construct_phi1(k2, [0], 0.5)
    assert np.allclose(phi1, [1.0, 6.0])
    assert c2 == pytest.approx(1.2)
    phi1, c2 = construct_phi1(k2, [0, 1], 0.5)
    assert np.all(phi1 == 1) and c2 <= 1
    with pytest.raises(CertificateError):
        construct_phi1(SubKernel.from_matrix([[0.5, 0.0], [0.0, 0.9]]), [0], 0.5)


def test_E3(k2):
    r = check_E3(k2, [0, 1], horizon=50)
    assert r.worst_ratio == pytest.approx(1.0)
    with pytest.raises(CertificateError):
        check_E3(SubKernel.from_matrix([[0.5, 0.0], [0.0, 0.0]]), [0, 1], horizon=5)


def test_E3_tends_to_eta_ratio():
    rng = np.random.default_rng(4)
    P = rng.random((4, 4)) * 0.24
    k = SubKernel.from_matrix(P)
    _, _, eta = dense_qsd(P)
    r = check_E3(k, [0, 2], horizon=400, sol=solve_qsd(k))
    assert r.final_ratio == pytest.approx(max(eta[0], eta[2]) / min(eta[0], eta[2]), rel=1e-9)


def test_E4(k2):
    assert check_E4(k2, [0]).n4.tolist() == [1]
    r = check_E4(SubKernel.from_matrix([[0.0, 1.0], [1.0, 0.0]]), [0], horizon=20)
    assert not r.passed
    assert check_E4(SubKernel.from_matrix(np.diag([0.3, 0.4])), [0, 1]).n4.tolist() == [1, 1]


def test_domination(k2):
    assert check_domination(k2, [0, 1], 1, 1) == pytest.approx(2.0)
    assert np.isfinite(check_domination(SubKernel.from_matrix(np.full((3, 3), 0.3)), [0, 1], 1, 1))
    with pytest.raises(CertificateError):
        check_domination(SubKernel.from_matrix([[0.5, 0.0], [0.2, 0.3]]), [0, 1], 1, 1)


def test_improve_theta2(k2):
    sol = solve_qsd(k2)
    phi1, _ = construct_phi1(k2, [0], 0.5)
    phi2, ell = construct_phi2(k2, [0], 0.65)
    cert = check_E2(k2, [0], phi1, phi2, ell)
    assert improve_theta2(k2, cert, sol, cert.theta2) is cert
    better = improve_theta2(k2, cert, sol, 0.69)
    assert better.ell > cert.ell and better.theta2 >= 0.69
    assert domain_exponent(better) > domain_exponent(cert)
    with pytest.raises(CertificateError):
        improve_theta2(k2, cert, sol, sol.theta0)


def test_domain_exponent():
    mk = lambda t1, t2: LyapunovCertificate(np.array([0]), np.ones(1), t1, 0.0, np.ones(1), t2, {})
    assert domain_exponent(mk(0.5, 0.7)) == pytest.approx(math.log(0.5) / math.log(0.7))
    assert domain_exponent(mk(0.49, 0.7)) == pytest.approx(2.0)
    assert domain_exponent(mk(0.6999999, 0.7)) == pytest.approx(1.0, abs=1e-5)


def test_uniform(k2):
    cert = check_E2(k2, [0], [1.0, 6.0], [1.0, 1.0])
    r = check_uniform(k2, cert)
    assert r.passed and r.n4prime == 1 and r.c_underbar == pytest.approx(3 / 7)
    full = check_E2(k2, [0, 1], [1.0, 1.0], [1.0, 1.0])
    assert check_uniform(k2, full).c_underbar == pytest.approx(1.0)
    m = families.three_set()
    K = m.meta["blocks"]["D2"]
    ones = np.ones(3)
    r = check_uniform(m.kernel, LyapunovCertificate(K, ones, 0.0, 1.0, ones, 1.0, {}), horizon=50)
    assert not r.passed and r.c_underbar == 0


def test_generator_lyapunov_birth_death():
    n = 60
    Q = np.zeros((n, n))
    for i in range(n):
        x = i + 1
        if i + 1 < n:
            Q[i, i + 1] = 1.0
        if i > 0:
            Q[i, i - 1] = x
        Q[i, i] = -(1.0 + x)
    xs = np.arange(1, n + 1, dtype=float)
    lin = check_generator_lyapunov(Q, xs, [0])
    # L phi(n) = 1 - n away from the truncation edge, so -L phi / phi = (n - 1) / n < 1
    assert lin.lambda1 < 1
    phi = np.exp(0.5 * xs)
    ex = check_generator_lyapunov(Q, phi, list(range(5)))
    ratio = -generator_drift(Q, phi)[:-1] / phi[:-1]
    closed = xs[:-1] * (1 - math.exp(-0.5)) + 1 - math.exp(0.5)
    assert np.allclose(ratio[1:], closed[1:])
    assert ex.lambda1 == pytest.approx(closed[5])
    assert np.all(np.diff(ratio[1:]) > 0)
    with pytest.raises(CertificateError):
        check_generator_lyapunov(np.eye(n), xs, [0])


def test_generator_lambda1_grows_with_truncation():
    vals = []
    for n in (20, 40, 80):
        Q = np.zeros((n, n))
        for i in range(n):
            x = i + 1
            if i > 0:
                Q[i, i - 1] = x * x
            Q[i, i] = -x * x
        vals.append(check_generator_lyapunov(Q, np.arange(1, n + 1, dtype=float), [0, 1]).lambda1)
    assert vals[0] <= vals[1] <= vals[2] or np.allclose(vals, vals[0])


def test_uniformize():
    Q = np.array([[-2.0, 1.0], [1.0, -2.0]])
    assert np.allclose(uniformize(Q, 2.0).dense(), [[0.0, 0.5], [0.5, 0.0]])
    with pytest.raises(ValueError):
        uniformize(Q, 1.0)
    sol = solve_qsd(uniformize(Q, 4.0))
    assert 4.0 * (1 - sol.theta0) == pytest.approx(1.0)


def test_check_F(k2):
    rep = check_F(k2, [0, 1], np.ones(2), 1)
    assert rep.c1 > 0


def test_report_json(k2):
    text = report_json(check_E1(k2, [0, 1], 1))
    assert '"c1": 0.5' in text
