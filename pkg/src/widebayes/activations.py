"""Hermite-basis activation functions and their kernel coefficients.

An activation sigma(z) = sum_l mu_l He_l(z) / l! acting on standard-Gaussian
pre-activations enters the theory only through mu_1, mu_2 and the tail kernel

    g(x) = sum_{l>=3} mu_l^2 x^l / l!
         = E[sigma(y) sigma(z)] - mu_0^2 - mu_1^2 x - mu_2^2 x^2 / 2,

with (y, z) standard bivariate Gaussian of correlation x.  For activations
with a scalar closed form, g is evaluated from the bivariate expectation
(exact to quadrature precision, no truncation error); pure coefficient lists
fall back to the truncated series with the residual Parseval mass lumped
into the top power so that g(1) matches the stored second moment.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import hermite_e
from scipy import integrate
from scipy.interpolate import CubicSpline
from scipy.stats import norm

__all__ = [
    "ActivationError",
    "ActivationSpec",
    "activation_from_coeffs",
    "get_activation",
    "gaussian_pair_expectation",
    "hermite_coefficients",
    "kernel_entries",
    "list_activations",
]

_SQRT2PI = math.sqrt(2.0 * math.pi)
_GH_NODES = 201  # >= 200 per contract; odd so z=0 is a node


class ActivationError(ValueError):
    """Activation is not square integrable against the Gaussian, or misuse."""


def _he(ell: int, z: np.ndarray) -> np.ndarray:
    """Probabilists' Hermite polynomial He_ell."""
    c = np.zeros(ell + 1)
    c[ell] = 1.0
    return hermite_e.hermeval(z, c)


def hermite_coefficients(activation: Callable[[np.ndarray], np.ndarray], L: int) -> np.ndarray:
    """mu_l = E[He_l(z) sigma(z)] for l = 0..L by Gauss-Hermite quadrature.

    Deterministic; raises ActivationError if the quadrature is non-finite.
    Activations with kinks (ReLU, eLU) converge slowly under Gauss-Hermite
    (~1e-3 at 200 nodes); the shipped specs carry closed-form or adaptive
    coefficients instead.
    """
    if L > 20:
        raise ActivationError("truncation order capped at L = 20")
    nodes, weights = hermite_e.hermegauss(_GH_NODES)
    weights = weights / _SQRT2PI  # normalise to the standard Gaussian measure
    vals = np.asarray(activation(nodes), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ActivationError("activation is non-finite on the quadrature nodes")
    mus = np.array([np.sum(weights * _he(ell, nodes) * vals) for ell in range(L + 1)])
    if not np.all(np.isfinite(mus)):
        raise ActivationError("non-finite Hermite coefficients")
    return mus


def gaussian_pair_expectation(
    sigma: Callable[[np.ndarray], np.ndarray],
    rho: float,
    n_nodes: int = _GH_NODES,
) -> float:
    """E[sigma(y) sigma(z)] with (y, z) ~ N(0, [[1, rho], [rho, 1]]).

    If sigma carries a smoothed_mean(a, b) = E_u[sigma(a + b u)] closed form
    (ActivationSpec), the inner integral uses it and the outer one is adaptive
    with a split at zero; this keeps kinked activations at quadrature accuracy.
    """
    smoothed = getattr(sigma, "smoothed_mean", None)
    b = math.sqrt(max(1.0 - rho * rho, 0.0))
    if smoothed is not None and b > 1e-8:
        def integrand(y):
            ya = np.asarray([y])
            return float(sigma(ya)[0] * smoothed(rho * ya, b)[0]) * math.exp(-y * y / 2) / _SQRT2PI

        return sum(
            integrate.quad(integrand, a_, b_, limit=300)[0]
            for a_, b_ in ((-12.0, 0.0), (0.0, 12.0))
        )
    nodes, weights = hermite_e.hermegauss(n_nodes)
    weights = weights / _SQRT2PI
    y = nodes[:, None]
    z = rho * nodes[:, None] + b * nodes[None, :]
    inner = np.asarray(sigma(z), dtype=float) @ weights
    return float(np.sum(weights * np.asarray(sigma(y[:, 0]), dtype=float) * inner))


@dataclass
class ActivationSpec:
    """Truncated Hermite representation of an activation.

    coeffs holds mu_0..mu_L.  second_moment is E[sigma^2] (exact where a
    closed form is known).  pair_kernel, if set, returns the exact
    E[sigma(y)sigma(z)] at correlation rho and supersedes the series for g.
    deriv is sigma' (a.e.), used by the HMC sampler.
    """

    name: str
    coeffs: np.ndarray
    second_moment: float
    closed_form: Optional[Callable[[np.ndarray], np.ndarray]] = None
    deriv: Optional[Callable[[np.ndarray], np.ndarray]] = None
    pair_kernel: Optional[Callable[[float], float]] = None
    deriv_pair_kernel: Optional[Callable[[float], float]] = None
    smoothed_mean: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    truncation_warned: bool = False
    _g_spline: Optional[CubicSpline] = field(default=None, repr=False)
    _gp_spline: Optional[CubicSpline] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.coeffs = np.asarray(self.coeffs, dtype=float)

    # -- basic quantities -------------------------------------------------
    @property
    def L(self) -> int:
        return self.coeffs.size - 1

    @property
    def mu0(self) -> float:
        return float(self.coeffs[0])

    @property
    def mu1(self) -> float:
        return float(self.coeffs[1]) if self.L >= 1 else 0.0

    @property
    def mu2(self) -> float:
        return float(self.coeffs[2]) if self.L >= 2 else 0.0

    @property
    def g_one(self) -> float:
        return self.second_moment - self.mu0**2 - self.mu1**2 - self.mu2**2 / 2.0

    @property
    def parseval_residual(self) -> float:
        fact = np.array([math.factorial(ell) for ell in range(self.L + 1)], dtype=float)
        return float(abs(np.sum(self.coeffs**2 / fact) - self.second_moment))

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self.closed_form is not None:
            return self.closed_form(np.asarray(z, dtype=float))
        fact = np.array([math.factorial(ell) for ell in range(self.L + 1)], dtype=float)
        return hermite_e.hermeval(np.asarray(z, dtype=float), self.coeffs / fact)

    def prime(self, z: np.ndarray) -> np.ndarray:
        if self.deriv is not None:
            return self.deriv(np.asarray(z, dtype=float))
        # d/dz He_l = l He_{l-1}; shift the coefficient array
        fact = np.array([math.factorial(ell) for ell in range(self.L + 1)], dtype=float)
        c = self.coeffs / fact
        return hermite_e.hermeval(np.asarray(z, dtype=float), hermite_e.hermeder(c))

    # -- tail kernel g ----------------------------------------------------
    def _series_tail_coeffs(self) -> np.ndarray:
        """x^l coefficients of g for the series route, tail lumped at l = L."""
        fact = np.array([math.factorial(ell) for ell in range(self.L + 1)], dtype=float)
        c = self.coeffs**2 / fact
        c[: min(3, c.size)] = 0.0
        if self.L >= 3:
            c[-1] = max(self.g_one - float(np.sum(c[3:-1])), 0.0)
        return c

    def _ensure_g(self) -> None:
        if self._g_spline is not None:
            return
        xs = np.cos(np.linspace(math.pi, 0.0, 81))  # Chebyshev points of [-1, 1]
        xs[0], xs[-1] = -1.0, 1.0
        if self.pair_kernel is not None or self.closed_form is not None:
            kern = self.pair_kernel or (lambda r: gaussian_pair_expectation(self, r))
            gv = np.array(
                [
                    kern(float(x)) - self.mu0**2 - self.mu1**2 * x - self.mu2**2 * x * x / 2.0
                    for x in xs
                ]
            )
            # pin the endpoint exactly; quadrature noise must not break g(1) = g_one
            gv[-1] = self.g_one
            self._g_spline = CubicSpline(xs, gv)
            if self.deriv_pair_kernel is not None:
                gpv = np.array(
                    [
                        self.deriv_pair_kernel(float(x)) - self.mu1**2 - self.mu2**2 * x
                        for x in xs
                    ]
                )
                self._gp_spline = CubicSpline(xs, gpv)
            else:
                self._gp_spline = self._g_spline.derivative()
        else:
            c = self._series_tail_coeffs()
            poly = np.polynomial.Polynomial(c)
            self._g_spline = poly
            self._gp_spline = poly.deriv()

    def g(self, x) -> np.ndarray:
        """g(x) = sum_{l>=3} mu_l^2 x^l / l!  for |x| <= 1."""
        x = np.asarray(x, dtype=float)
        if np.any(np.abs(x) > 1.0 + 1e-12):
            raise ActivationError("g is defined on [-1, 1]")
        self._ensure_g()
        return np.asarray(self._g_spline(np.clip(x, -1.0, 1.0)), dtype=float)

    def g_prime(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if np.any(np.abs(x) > 1.0 + 1e-12):
            raise ActivationError("g is defined on [-1, 1]")
        self._ensure_g()
        val = np.asarray(self._gp_spline(np.clip(x, -1.0, 1.0)), dtype=float)
        # g'(x) = sum_{l>=3} mu_l^2 x^{l-1}/(l-1)! vanishes at least quadratically;
        # pin it so Q_W == 0 stays an exact invariant of the saddle iteration.
        return np.where(x == 0.0, 0.0, val)


def g_eval(spec: ActivationSpec, x: float) -> float:
    """Scalar front end for ActivationSpec.g."""
    return float(spec.g(x))


def kernel_entries(q2, qw_of_v, readout, spec: ActivationSpec, gamma: float):
    """Post-activation covariance entries (q_K, r_K).

    q_K = mu_1^2 + mu_2^2 q_2 / 2 + E_v[v^2 g(Q_W(v))],
    r_K = mu_1^2 + mu_2^2 (1 + gamma vbar^2) / 2 + g(1).
    qw_of_v maps atom values to overlaps in [-1, 1] (scalar or array-aligned).
    """
    atoms, probs = readout.values, readout.probs
    r2 = 1.0 + gamma * readout.mean**2
    if q2 > r2 + 1e-9:
        raise ActivationError(f"q2 = {q2} exceeds r2 = {r2}")
    qw = np.asarray(qw_of_v(atoms) if callable(qw_of_v) else qw_of_v, dtype=float)
    qw = np.broadcast_to(qw, atoms.shape)
    if np.any(np.abs(qw) > 1 + 1e-12):
        raise ActivationError("overlaps must lie in [-1, 1]")
    q_k = spec.mu1**2 + spec.mu2**2 * q2 / 2.0 + float(np.sum(probs * atoms**2 * spec.g(qw)))
    r_k = spec.mu1**2 + spec.mu2**2 * r2 / 2.0 + spec.g_one
    return q_k, r_k


# ---------------------------------------------------------------------------
# shipped activations
# ---------------------------------------------------------------------------

def _relu_coeffs(L: int) -> np.ndarray:
    mus = np.zeros(L + 1)
    mus[0] = 1.0 / _SQRT2PI
    if L >= 1:
        mus[1] = 0.5
    for ell in range(2, L + 1, 2):
        mus[ell] = (-1.0) ** (ell // 2 - 1) * math.prod(range(1, ell - 2, 2)) / _SQRT2PI
    return mus


def _relu_pair(rho: float) -> float:
    # E[y+ z+] for correlated standard Gaussians (arc-cosine kernel)
    rho = min(max(rho, -1.0), 1.0)
    return rho / 4.0 + (rho * math.asin(rho) + math.sqrt(1.0 - rho * rho)) / (2.0 * math.pi)


def _relu_deriv_pair(rho: float) -> float:
    # E[theta(y) theta(z)] = P(y > 0, z > 0)
    rho = min(max(rho, -1.0), 1.0)
    return 0.25 + math.asin(rho) / (2.0 * math.pi)


def _quad_coeff(sigma: Callable, ell: int, split_zero: bool = True) -> float:
    def integrand(z):
        return _he(ell, np.asarray([z]))[0] * sigma(np.asarray([z]))[0] * math.exp(-z * z / 2) / _SQRT2PI

    pieces = ((-12.0, 0.0), (0.0, 12.0)) if split_zero else ((-12.0, 12.0),)
    return sum(integrate.quad(integrand, a, b, limit=300)[0] for a, b in pieces)


def _quad_second_moment(sigma: Callable, split_zero: bool = True) -> float:
    def integrand(z):
        return sigma(np.asarray([z]))[0] ** 2 * math.exp(-z * z / 2) / _SQRT2PI

    pieces = ((-12.0, 0.0), (0.0, 12.0)) if split_zero else ((-12.0, 12.0),)
    return sum(integrate.quad(integrand, a, b, limit=300)[0] for a, b in pieces)


def _elu(z):
    z = np.asarray(z, dtype=float)
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _elu_smoothed(a: np.ndarray, b: float) -> np.ndarray:
    """E_u[elu(a + b u)], u ~ N(0,1), closed form."""
    c = a / b
    return (
        a * norm.cdf(c)
        + b * norm.pdf(c)
        + np.exp(a + b * b / 2.0) * norm.cdf(-c - b)
        - norm.cdf(-c)
    )


def _elu_pair(rho: float) -> float:
    rho = min(max(rho, -1.0), 1.0)
    bb = math.sqrt(max(1.0 - rho * rho, 0.0))
    if bb < 1e-8:
        def integrand(z):
            za = np.asarray([z])
            return _elu(za)[0] * _elu(rho * za)[0] * math.exp(-z * z / 2) / _SQRT2PI
    else:
        def integrand(z):
            za = np.asarray([z])
            return _elu(za)[0] * _elu_smoothed(rho * za, bb)[0] * math.exp(-z * z / 2) / _SQRT2PI

    return sum(integrate.quad(integrand, a, b, limit=300)[0] for a, b in ((-12, 0), (0, 12)))


def _tanh2(z):
    return np.tanh(2.0 * np.asarray(z, dtype=float))


def _tanh2_pair(rho: float) -> float:
    return gaussian_pair_expectation(_tanh2, rho)


_ELU_SECOND_MOMENT = None  # filled lazily below


def _poly_closed(coeffs: np.ndarray) -> Callable:
    fact = np.array([math.factorial(ell) for ell in range(coeffs.size)], dtype=float)
    c = coeffs / fact

    def sigma(z):
        return hermite_e.hermeval(np.asarray(z, dtype=float), c)

    return sigma


def _poly_deriv(coeffs: np.ndarray) -> Callable:
    fact = np.array([math.factorial(ell) for ell in range(coeffs.size)], dtype=float)
    c = hermite_e.hermeder(coeffs / fact)

    def dsigma(z):
        return hermite_e.hermeval(np.asarray(z, dtype=float), c)

    return dsigma


def _poly_spec(name: str, mus: dict[int, float]) -> ActivationSpec:
    L = max(mus)
    coeffs = np.zeros(L + 1)
    for ell, mu in mus.items():
        coeffs[ell] = mu
    second = float(np.sum(coeffs**2 / np.array([math.factorial(ell) for ell in range(L + 1)])))
    return ActivationSpec(
        name=name,
        coeffs=coeffs,
        second_moment=second,
        closed_form=_poly_closed(coeffs),
        deriv=_poly_deriv(coeffs),
    )


DEFAULT_L = 12
MAX_L = 20
PARSEVAL_TOL = 1e-6


def _auto_truncate(
    name: str,
    sigma: Callable,
    deriv: Optional[Callable],
    second_moment: float,
    coeff_fn: Callable[[int], float],
    pair_kernel: Optional[Callable] = None,
    deriv_pair_kernel: Optional[Callable] = None,
    smoothed_mean: Optional[Callable] = None,
) -> ActivationSpec:
    """Raise L from DEFAULT_L until the Parseval residual passes, cap at 20."""
    fact = [math.factorial(ell) for ell in range(MAX_L + 1)]
    coeffs = [coeff_fn(ell) for ell in range(DEFAULT_L + 1)]
    L = DEFAULT_L
    while True:
        residual = abs(sum(c * c / fact[ell] for ell, c in enumerate(coeffs)) - second_moment)
        if residual <= PARSEVAL_TOL or L >= MAX_L:
            break
        L += 1
        coeffs.append(coeff_fn(L))
    warned = residual > PARSEVAL_TOL
    if warned:
        warnings.warn(
            f"activation {name!r}: Parseval residual {residual:.2e} above {PARSEVAL_TOL:g} at L = {MAX_L}",
            stacklevel=2,
        )
    return ActivationSpec(
        name=name,
        coeffs=np.array(coeffs),
        second_moment=second_moment,
        closed_form=sigma,
        deriv=deriv,
        pair_kernel=pair_kernel,
        deriv_pair_kernel=deriv_pair_kernel,
        smoothed_mean=smoothed_mean,
        truncation_warned=warned,
    )


def _build_registry() -> dict[str, Callable[[], ActivationSpec]]:
    global _ELU_SECOND_MOMENT

    def relu() -> ActivationSpec:
        def smoothed(a, b):
            c = np.asarray(a, dtype=float) / b
            return a * norm.cdf(c) + b * norm.pdf(c)

        return _auto_truncate(
            "relu",
            lambda z: np.maximum(np.asarray(z, dtype=float), 0.0),
            lambda z: (np.asarray(z, dtype=float) > 0).astype(float),
            0.5,
            lambda ell: _relu_coeffs(ell)[ell],
            pair_kernel=_relu_pair,
            deriv_pair_kernel=_relu_deriv_pair,
            smoothed_mean=smoothed,
        )

    def elu() -> ActivationSpec:
        global _ELU_SECOND_MOMENT
        if _ELU_SECOND_MOMENT is None:
            _ELU_SECOND_MOMENT = _quad_second_moment(_elu)
        return _auto_truncate(
            "elu",
            _elu,
            lambda z: np.where(np.asarray(z, dtype=float) > 0, 1.0, np.exp(np.minimum(z, 0.0))),
            _ELU_SECOND_MOMENT,
            lambda ell: _quad_coeff(_elu, ell),
            pair_kernel=_elu_pair,
            smoothed_mean=_elu_smoothed,
        )

    def tanh2x() -> ActivationSpec:
        second = _quad_second_moment(_tanh2, split_zero=False)

        def coeff(ell: int) -> float:
            return 0.0 if ell % 2 == 0 else _quad_coeff(_tanh2, ell, split_zero=False)

        return _auto_truncate(
            "tanh2x",
            _tanh2,
            lambda z: 2.0 / np.cosh(2.0 * np.asarray(z, dtype=float)) ** 2,
            second,
            coeff,
        )

    return {
        "relu": relu,
        "elu": elu,
        "tanh2x": tanh2x,
        "he2": lambda: _poly_spec("he2", {2: math.sqrt(2.0)}),
        "he3": lambda: _poly_spec("he3", {3: math.sqrt(6.0)}),
        "he2_he3": lambda: _poly_spec("he2_he3", {2: math.sqrt(2.0), 3: 1.0}),
        "square": lambda: _poly_spec("square", {0: 1.0, 2: 2.0}),
    }


_REGISTRY = _build_registry()
_CACHE: dict[str, ActivationSpec] = {}


def list_activations() -> list[str]:
    return sorted(_REGISTRY)


def get_activation(name: str) -> ActivationSpec:
    """Shipped activation by name (singletons; specs are immutable in use)."""
    if name not in _REGISTRY:
        raise ActivationError(f"unknown activation {name!r}; known: {list_activations()}")
    if name not in _CACHE:
        _CACHE[name] = _REGISTRY[name]()
    return _CACHE[name]


def activation_from_coeffs(coeffs, name: str = "custom") -> ActivationSpec:
    """Spec from a raw mu_0..mu_L list (series route for g)."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.size > MAX_L + 1:
        raise ActivationError("truncation order capped at L = 20")
    fact = np.array([math.factorial(ell) for ell in range(coeffs.size)], dtype=float)
    second = float(np.sum(coeffs**2 / fact))
    return ActivationSpec(
        name=name,
        coeffs=coeffs,
        second_moment=second,
        closed_form=_poly_closed(coeffs),
        deriv=_poly_deriv(coeffs),
    )
