import math

import numpy as np
import pytest
from scipy import special

from qsdlab.diffusion1d import (DerivativeError, Diffusion1dSpec, drift_ratio, fd_eigen, ratio_derivative,
                                lambda0_bound_1, lambda0_bound_2, phi_candidates, reachable,
                                scale, select_condition)

BM = Diffusion1dSpec(0.0, 1.0, lambda x: 0.0, lambda x: 1.0)
FELLER = Diffusion1dSpec(0.0, math.inf, lambda x: -x, lambda x: math.sqrt(x))


def test_scale_driftless():
    spec = Diffusion1dSpec(-2.0, 3.0, lambda x: 0.0, lambda x: 1.7, alpha0=0.5)
    s, d = scale(spec, 2.0)
    assert d == pytest.approx(1.0) and s == pytest.approx(1.5)


def test_scale_against_series():
    spec = Diffusion1dSpec(-math.inf, math.inf, lambda x: -x, lambda x: 1.0, alpha0=0.0)
    s, d = scale(spec, 1.2)
    assert d == pytest.approx(math.exp(1.44), rel=1e-12)
    # int_0^x e^{u^2} du = sqrt(pi)/2 erfi(x)
    assert s == pytest.approx(math.sqrt(math.pi) / 2 * special.erfi(1.2), rel=1e-10)


def test_scale_increasing():
    spec = Diffusion1dSpec(0.0, math.inf, lambda x: x * math.sin(x), lambda x: 1.0)
    vals = [scale(spec, x)[0] for x in np.linspace(0.1, 6, 25)]
    assert np.all(np.diff(vals) > 0)


def test_reachable_examples():
    assert reachable(BM, "alpha") is True and reachable(BM, "beta") is True
    lin = Diffusion1dSpec(0.0, math.inf, lambda x: 0.0, lambda x: x)
    assert reachable(lin, "alpha") is False
    assert reachable(FELLER, "alpha") is True
    assert reachable(FELLER, "beta") is False


def test_reachable_affine_invariance():
    # moving the reference point shifts s by a constant, which must not change the answer
    for a0 in (0.5, 2.0, 7.0):
        spec = Diffusion1dSpec(0.0, math.inf, lambda x: -x, lambda x: math.sqrt(x), alpha0=a0)
        assert reachable(spec, "alpha") is True and reachable(spec, "beta") is False


def test_reachable_detail():
    rep = reachable(FELLER, "alpha", detail=True)
    assert rep.reachable is True and rep.scale_finite and rep.speed_finite


def test_bound_1_examples():
    assert lambda0_bound_1(BM, 0, 1) == pytest.approx(math.pi ** 2 / 2, rel=1e-10)
    shifted = Diffusion1dSpec(0.0, 1.0, lambda x: 0.0, lambda x: 1.0, lambda x: 2.5)
    assert lambda0_bound_1(shifted, 0, 1) == pytest.approx(math.pi ** 2 / 2 + 2.5, rel=1e-10)
    wide = Diffusion1dSpec(-1.0, 2.0, lambda x: 0.0, lambda x: 1.0)
    assert lambda0_bound_1(wide, -1, 2) < lambda0_bound_1(wide, 0, 1)


def test_bound_2_examples():
    assert lambda0_bound_2(BM, 0, 1) == pytest.approx(math.pi ** 2 / 2, abs=1e-6)
    k0 = 5.0
    pot = Diffusion1dSpec(0.0, math.inf, lambda x: x * math.sin(x), lambda x: 1.0,
                          lambda x: k0 * (1 - 1 / (1 + x)))
    assert lambda0_bound_2(pot, 0, 1) <= math.pi ** 2 / 2 + 1.5 + k0 / 2
    assert lambda0_bound_2(pot, 0, 1) >= fd_eigen(pot, 0, 1).lambda0 - 1e-6


def test_bound_2_derivative_instability():
    rough = Diffusion1dSpec(0.0, 1.0, lambda x: max(x - 0.5, 0.0) ** 0.5, lambda x: 1.0)
    with pytest.raises(DerivativeError):
        lambda0_bound_2(rough, 0, 1, grid=64)


def test_fd_eigen_brownian():
    fd = fd_eigen(BM, 0, 1)
    assert fd.lambda0 == pytest.approx(math.pi ** 2 / 2, abs=1e-8)
    ref = np.sin(math.pi * fd.x) * math.pi / 2
    h = fd.x[1] - fd.x[0]
    assert np.abs(fd.density - ref).sum() * h < 1e-4


def test_fd_eigen_potential_shift():
    spec = Diffusion1dSpec(0.0, 2.0, lambda x: 0.3 - x, lambda x: 1.0)
    shifted = Diffusion1dSpec(0.0, 2.0, lambda x: 0.3 - x, lambda x: 1.0, lambda x: 1.75)
    assert fd_eigen(shifted, 0, 2).lambda0 - fd_eigen(spec, 0, 2).lambda0 == pytest.approx(1.75, abs=1e-9)
    with pytest.raises(ValueError):
        fd_eigen(spec, 0, 2, mesh=15)


def test_phi_kind1_drift_identity():
    cand = phi_candidates(FELLER, "sqrt-scale", 0.5, 1.0, 2.0, xs=[2.5, 4.0, 6.0, 0.2, 0.4])
    for x, c in zip(cand.xs, cand.coef):
        assert -drift_ratio(FELLER, cand.phi, x) == pytest.approx(c, rel=1e-6)


def test_phi_kind1_feller_growth():
    xs = np.linspace(2.0, 40.0, 20)
    cand = phi_candidates(FELLER, "sqrt-scale", 0.5, 1.0, 2.0, xs=xs)
    assert np.all(np.diff(cand.coef) > 0)
    assert cand.coef[-1] > 10 * cand.coef[0]


def test_phi_kind2_driftless():
    spec = Diffusion1dSpec(-math.inf, math.inf, lambda x: 0.0, lambda x: 1.0, lambda x: 0.7)
    cand = phi_candidates(spec, "exp-potential", -1.0, 0.0, 1.0, xs=[-3.0, 2.0])
    assert cand.phi(5.0) == pytest.approx(1.0)
    assert np.allclose(cand.coef, 0.7)
    with pytest.raises(ValueError):
        phi_candidates(spec, "other", -1.0, 0.0, 1.0)


def test_select_condition_labels():
    assert select_condition(BM, lambda x: 1.0, 0.1, 0.9).label == "(i)"
    cand = phi_candidates(FELLER, "sqrt-scale", 0.5, 1.0, 2.0)
    ch = select_condition(FELLER, cand.phi, 0.5, 4.0, box=(0.0, 30.0))
    assert ch.label == "(ii)" and ch.lambda1 > ch.lambda0
    k0 = 1.0
    line = Diffusion1dSpec(-math.inf, math.inf, lambda x: 0.0, lambda x: 1.0,
                           lambda x: k0 * (1 - 1 / (1 + abs(x))))
    ch = select_condition(line, lambda x: 1.0, -30.0, 30.0, mesh=2048)
    assert ch.label == "(iii)" and ch.margin > 0


def test_ratio_derivative_smooth():
    spec = Diffusion1dSpec(0.0, 2.0, lambda x: x ** 2, lambda x: 1.0)
    assert ratio_derivative(spec, 1.0) == pytest.approx(2.0, rel=1e-8)
