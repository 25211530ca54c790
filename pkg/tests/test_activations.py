import math

import numpy as np
import pytest
from scipy import integrate

from widebayes.activations import (
    ActivationError,
    activation_from_coeffs,
    gaussian_pair_expectation,
    get_activation,
    hermite_coefficients,
    kernel_entries,
    list_activations,
)
from widebayes.readouts import make_readout

SQRT2PI = math.sqrt(2 * math.pi)


def test_relu_table_values():
    spec = get_activation("relu")
    exact = [1 / SQRT2PI, 0.5, 1 / SQRT2PI, 0.0, -1 / SQRT2PI]
    assert np.allclose(spec.coeffs[:5], exact, atol=1e-12)
    assert spec.second_moment == 0.5
    # the generic quadrature route approaches the same values (the kink at
    # zero limits Gauss-Hermite to ~1e-3 here; shipped specs use closed forms)
    mus = hermite_coefficients(lambda z: np.maximum(z, 0.0), 6)
    assert np.allclose(mus[:5], exact, atol=6e-3)


def test_tanh2x_table_values():
    spec = get_activation("tanh2x")
    assert abs(spec.coeffs[1] - 0.72948) < 1e-5
    assert abs(spec.coeffs[3] - (-0.61398)) < 1e-5
    assert abs(spec.second_moment - 0.63526) < 1e-5
    assert np.all(spec.coeffs[::2] == 0.0)  # odd function


def test_elu_table_values():
    spec = get_activation("elu")
    assert np.allclose(spec.coeffs[:5], [0.16052, 0.76158, 0.26158, -0.13736, -0.13736], atol=1e-5)
    assert abs(spec.second_moment - 0.64494) < 1e-5


def test_hermite_orthogonality_he2():
    mus = hermite_coefficients(lambda z: (z**2 - 1) / math.sqrt(2.0), 8)
    assert abs(mus[2] - math.sqrt(2.0)) < 1e-10
    others = np.delete(mus, 2)
    assert np.max(np.abs(others)) < 1e-10


def test_hermite_coefficient_preconditions():
    with pytest.raises(ActivationError):
        hermite_coefficients(np.exp, 21)
    with pytest.raises(ActivationError):
        hermite_coefficients(lambda z: np.exp(z * z), 4)  # overflows to inf


def test_g_at_zero_and_he3():
    for name in list_activations():
        assert abs(float(get_activation(name).g(0.0))) < 1e-12
    he3 = get_activation("he3")
    assert abs(float(he3.g(1.0)) - 1.0) < 1e-12


def test_g_relu_at_one():
    spec = get_activation("relu")
    # oracle: E[sigma^2] - mu0^2 - mu1^2 - mu2^2/2 with Table-1 closed forms
    oracle = 0.5 - 1 / (2 * math.pi) - 0.25 - 1 / (4 * math.pi)
    assert abs(oracle - (0.25 - 3 / (4 * math.pi))) < 1e-15
    assert abs(float(spec.g(1.0)) - oracle) < 1e-10
    # cross-check by quadrature of E[sigma^2]
    quad_second = sum(
        integrate.quad(
            lambda z: max(z, 0.0) ** 2 * math.exp(-z * z / 2) / SQRT2PI, a, b
        )[0]
        for a, b in ((-12, 0), (0, 12))
    )
    assert abs(quad_second - spec.mu0**2 - spec.mu1**2 - spec.mu2**2 / 2 - oracle) < 1e-9


def test_g_domain_error():
    spec = get_activation("relu")
    with pytest.raises(ActivationError):
        spec.g(1.5)
    with pytest.raises(ActivationError):
        spec.g_prime(-1.2)


def test_g_monotone_convex_on_unit_interval():
    xs = np.linspace(0.0, 1.0, 201)
    for name in list_activations():
        spec = get_activation(name)
        g = spec.g(xs)
        assert np.all(np.diff(g) >= -1e-9), name
        assert np.all(np.diff(g, 2) >= -1e-8), name


def test_g_prime_exact_zero_at_origin():
    for name in list_activations():
        assert float(get_activation(name).g_prime(0.0)) == 0.0


def test_parseval_polynomials_exact():
    for name in ("he2", "he3", "he2_he3", "square"):
        spec = get_activation(name)
        assert spec.parseval_residual < 1e-12
        assert not spec.truncation_warned


def test_parseval_relu_residual_is_true_tail():
    spec = get_activation("relu")
    assert spec.truncation_warned and spec.L == 20
    # analytic tail: sum_{l > 20, even} (l-3)!!^2 / (2 pi l!), built iteratively
    # from the term ratio t_{l+2}/t_l = (l-1)^2 / ((l+1)(l+2))
    term = 19.0**2 * math.prod(range(1, 19, 2)) ** 2 / (2 * math.pi * math.factorial(22))
    tail = 0.0
    ell = 22
    while term > 1e-18:
        tail += term
        term *= (ell - 1) ** 2 / ((ell + 1) * (ell + 2))
        ell += 2
    assert abs(spec.parseval_residual - tail) < 1e-7
    assert spec.parseval_residual < 1e-3  # small, but provably above 1e-6


def test_mehler_identity():
    rng = np.random.default_rng(7)
    rhos = rng.uniform(-1, 1, size=20)
    for name in ("relu", "elu", "tanh2x", "he2_he3", "square"):
        spec = get_activation(name)
        fact = np.array([math.factorial(i) for i in range(spec.L + 1)])
        for rho in rhos:
            series = (
                spec.mu0**2
                + spec.mu1**2 * rho
                + spec.mu2**2 * rho**2 / 2.0
                + float(spec.g(rho))
            )
            quad2d = gaussian_pair_expectation(spec, float(rho))
            assert abs(series - quad2d) < 1e-5, (name, rho)


def test_kernel_entries_nishimori_point():
    gamma = 0.5
    readout = make_readout("four_point")
    spec = get_activation("relu")
    r2 = 1 + gamma * readout.mean**2
    q_k, r_k = kernel_entries(r2, lambda v: np.ones_like(v), readout, spec, gamma)
    assert abs(q_k - r_k) < 1e-12


def test_kernel_entries_linear_only():
    spec = activation_from_coeffs([0.0, 0.5])
    readout = make_readout("rademacher")
    q_k, _ = kernel_entries(0.0, lambda v: np.zeros_like(v), readout, spec, 0.5)
    assert abs(q_k - 0.25) < 1e-14


def test_kernel_entries_against_planted_monte_carlo():
    # plant Q_W = 0.5 at d = 400; the post-activation covariance must match
    # mu1^2 Q_1 + mu2^2 Q_2/2 + E_v[v^2 g(Q_W)] with empirical overlaps
    rng = np.random.default_rng(123)
    gamma, qw = 0.5, 0.5
    d = 400
    k = round(gamma * d)
    spec = get_activation("relu")
    readout = make_readout("homogeneous")
    W0 = rng.standard_normal((k, d))
    W1 = qw * W0 + math.sqrt(1 - qw**2) * rng.standard_normal((k, d))
    v = np.ones(k)
    omega = (W1 @ W0.T) / d
    q1_emp = float(v @ omega @ v) / k
    q2_emp = float(v @ (omega * omega) @ v) / k
    qw_emp = float(np.mean(np.diag(omega)))
    n = 400_000
    X = rng.standard_normal((d, n))
    lam0 = (v @ spec((W0 @ X) / math.sqrt(d))) / math.sqrt(k)
    lam1 = (v @ spec((W1 @ X) / math.sqrt(d))) / math.sqrt(k)
    cross_mc = float(np.mean(lam0 * lam1)) - float(np.mean(lam0)) * float(np.mean(lam1))
    kernel_pred = (
        spec.mu1**2 * q1_emp
        + spec.mu2**2 * q2_emp / 2.0
        + float(spec.g(qw_emp))  # homogeneous readouts: E_v[v^2 g] = g
    )
    assert abs(cross_mc - kernel_pred) < 0.01
    # the operation itself assembles the same terms with Q_1 pinned to 1
    q_k, r_k = kernel_entries(q2_emp, lambda vv: np.full_like(vv, qw_emp), readout, spec, gamma)
    assert abs(q_k - (spec.mu1**2 + spec.mu2**2 * q2_emp / 2 + float(spec.g(qw_emp)))) < 1e-12
    assert abs(r_k - (spec.mu1**2 + spec.mu2**2 * 1.5 / 2 + spec.g_one)) < 1e-12


def test_custom_coeff_activation_roundtrip():
    spec = activation_from_coeffs([0.0, 0.3, 1.1, 0.4, -0.2], name="probe")
    mus = hermite_coefficients(spec, spec.L)
    assert np.allclose(mus, spec.coeffs, atol=1e-8)
    assert abs(spec.parseval_residual) < 1e-12
