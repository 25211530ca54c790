"""Scalar auxiliary potentials of the replica free entropy.

psi_w(x)  = E_{w0,xi} ln E_w exp(-x w^2/2 + x w0 w + sqrt(x) xi w)
bracket(x) = E_{w0,xi}[ w0 <w>_x ]  (posterior mean against the tilted prior)
psi_out(q; r) = int dy E_{xi,u0} P(y | xi sqrt(q) + u0 sqrt(r-q))
                              ln E_u P(y | xi sqrt(q) + u sqrt(r-q))

Gaussian and Rademacher weight priors ship with closed forms / 1-d
Gauss-Hermite quadrature; the output channel is the linear readout with
Gaussian label noise (closed form) or a custom kernel handled by nested
quadrature on a y-grid covering +-8 standard deviations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import hermite_e

__all__ = [
    "ChannelSpec",
    "PotentialError",
    "PriorKind",
    "posterior_mean_bracket",
    "psi_out",
    "psi_out_qk_derivative",
    "psi_w",
]

_SQRT2PI = math.sqrt(2.0 * math.pi)
_NODES, _WEIGHTS = hermite_e.hermegauss(200)
_WEIGHTS = _WEIGHTS / _SQRT2PI


class PotentialError(ValueError):
    pass


@dataclass(frozen=True)
class PriorKind:
    """Weight prior; both options are centred with unit second moment."""

    tag: str  # gaussian | rademacher

    def __post_init__(self):
        if self.tag not in ("gaussian", "rademacher"):
            raise PotentialError(f"unknown prior {self.tag!r}")

    def sample(self, shape, rng: np.random.Generator) -> np.ndarray:
        if self.tag == "gaussian":
            return rng.standard_normal(shape)
        return rng.choice([-1.0, 1.0], size=shape)

    @property
    def entropy(self) -> float:
        """Shannon entropy per weight (infinite for the Gaussian)."""
        return math.log(2.0) if self.tag == "rademacher" else math.inf


def _logcosh(u: np.ndarray) -> np.ndarray:
    u = np.abs(u)
    return u + np.log1p(np.exp(-2.0 * u)) - math.log(2.0)


def psi_w(prior: PriorKind, x):
    """Prior potential psi_{P_W}(x) for x >= 0 (scalar or array)."""
    x_arr = np.asarray(x, dtype=float)
    if np.any(x_arr < 0):
        raise PotentialError("psi_w needs x >= 0")
    if prior.tag == "gaussian":
        out = 0.5 * x_arr - 0.5 * np.log1p(x_arr)
    else:
        # rademacher: -x/2 + E_xi ln cosh(x + sqrt(x) xi)
        xs = np.atleast_1d(x_arr)
        vals = -0.5 * xs + _logcosh(xs[:, None] + np.sqrt(xs[:, None]) * _NODES[None, :]) @ _WEIGHTS
        out = vals.reshape(x_arr.shape)
    return float(out) if np.ndim(x) == 0 else out


def posterior_mean_bracket(prior: PriorKind, x):
    """E_{w0,xi}[ w0 <w>_x ]; equals 2 d(psi_w)/dx, lies in [0, 1)."""
    x_arr = np.asarray(x, dtype=float)
    if np.any(x_arr < 0):
        raise PotentialError("bracket needs x >= 0")
    if prior.tag == "gaussian":
        out = x_arr / (1.0 + x_arr)
    else:
        xs = np.atleast_1d(x_arr)
        vals = np.tanh(xs[:, None] + np.sqrt(xs[:, None]) * _NODES[None, :]) @ _WEIGHTS
        out = np.where(xs == 0.0, 0.0, vals).reshape(x_arr.shape)
    return float(out) if np.ndim(x) == 0 else out


@dataclass
class ChannelSpec:
    """Output channel P_out(y | lambda).

    gaussian_linear: y = lambda + N(0, delta).  custom: explicit density
    kernel(y, lam); the y-integral runs on an adaptive grid covering +-8
    standard deviations of the kernel around the post-activation range.
    mean_shift is the Lambda parameter multiplying mu_0 for non-centred
    activations under non-deconvolving channels (exposed, defaults to 0;
    it cancels identically for the Gaussian channel).
    """

    tag: str = "gaussian_linear"
    delta: float = 1.0
    kernel: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    y_halfwidth_stds: float = 8.0
    n_y: int = 400
    mean_shift: float = 0.0

    def __post_init__(self):
        if self.tag not in ("gaussian_linear", "custom"):
            raise PotentialError(f"unknown channel {self.tag!r}")
        if self.tag == "gaussian_linear" and self.delta <= 0:
            raise PotentialError("gaussian channel needs delta > 0")
        if self.tag == "custom" and self.kernel is None:
            raise PotentialError("custom channel needs a kernel")

    # conditional moments of y given lambda (used by the generic error formula)
    def mean_y(self, lam: np.ndarray) -> np.ndarray:
        if self.tag == "gaussian_linear":
            return np.asarray(lam, dtype=float)
        ys, w = self._y_grid(np.asarray(lam))
        p = self.kernel(ys[:, None], np.atleast_1d(lam)[None, :])
        return (w[:, None] * ys[:, None] * p).sum(axis=0)

    def second_moment_y(self, lam: np.ndarray) -> np.ndarray:
        if self.tag == "gaussian_linear":
            lam = np.asarray(lam, dtype=float)
            return lam**2 + self.delta
        ys, w = self._y_grid(np.asarray(lam))
        p = self.kernel(ys[:, None], np.atleast_1d(lam)[None, :])
        return (w[:, None] * ys[:, None] ** 2 * p).sum(axis=0)

    def sample(self, lam: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.tag == "gaussian_linear":
            return lam + math.sqrt(self.delta) * rng.standard_normal(lam.shape)
        raise PotentialError("sampling implemented for the Gaussian channel only")

    def _y_grid(self, lam: np.ndarray):
        width = math.sqrt(max(self.delta, 1e-12))
        lo = float(np.min(lam)) - self.y_halfwidth_stds * width
        hi = float(np.max(lam)) + self.y_halfwidth_stds * width
        ys = np.linspace(lo, hi, self.n_y)
        w = np.full(self.n_y, ys[1] - ys[0])
        w[0] = w[-1] = 0.5 * (ys[1] - ys[0])
        return ys, w

    def check_normalised(self, lams=(-2.0, -0.5, 0.0, 0.5, 2.0), tol: float = 1e-4) -> None:
        """Quadrature check that the custom kernel integrates to one in y."""
        if self.tag != "custom":
            return
        ys, w = self._y_grid(np.asarray(lams, dtype=float))
        p = self.kernel(ys[:, None], np.asarray(lams)[None, :])
        mass = (w[:, None] * p).sum(axis=0)
        if np.any(np.abs(mass - 1.0) > tol):
            raise PotentialError(f"custom kernel not normalised: masses {mass}")


def psi_out(channel: ChannelSpec, q_k: float, r_k: float) -> float:
    """Energetic potential psi_{P_out}(q_K; r_K) in the Bayes-optimal setting."""
    if q_k > r_k + 1e-12:
        raise PotentialError(f"q_K = {q_k} exceeds r_K = {r_k} (solver overshoot)")
    q_k = min(q_k, r_k)
    if channel.tag == "gaussian_linear":
        return -0.5 * math.log(2.0 * math.pi * math.e * (channel.delta + r_k - q_k))
    # custom channel: A(y, xi) = E_u P(y | shift + xi sqrt(q) + u sqrt(r-q));
    # by Bayes-optimality the u0-average equals the same A, so
    # psi = int dy E_xi[ A ln A ].
    sq = math.sqrt(max(q_k, 0.0))
    sr = math.sqrt(max(r_k - q_k, 0.0))
    shift = channel.mean_shift
    lam_span = shift + np.array([-5.0, 5.0]) * math.sqrt(max(r_k, 1e-12))
    ys, wy = channel._y_grid(lam_span)
    xi = _NODES
    lam = shift + sq * xi[:, None] + sr * _NODES[None, :]  # (xi, u)
    A = np.empty((ys.size, xi.size))
    for i, y in enumerate(ys):
        A[i] = channel.kernel(np.full_like(lam, y), lam) @ _WEIGHTS
    A = np.clip(A, 1e-300, None)
    inner = (A * np.log(A)) @ _WEIGHTS  # E_xi at each y
    return float(wy @ inner)


def psi_out_qk_derivative(channel: ChannelSpec, q_k: float, r_k: float, step: float = 1e-5) -> float:
    """d psi_out / d q_K at fixed r_K (analytic for the Gaussian channel)."""
    if channel.tag == "gaussian_linear":
        return 0.5 / (channel.delta + r_k - q_k)
    h = step * max(1.0, abs(q_k))
    h = min(h, 0.5 * (r_k - q_k)) if r_k > q_k else step
    return (psi_out(channel, q_k + h, r_k) - psi_out(channel, q_k - h, r_k)) / (2 * h)
