"""GAMP-RIE learner for arbitrary activation, with its RIE matrix denoiser.

The pipeline removes the learnable low-order structure of the labels, then
treats the residual as a matrix-sensing GLM:

  1. yhat0 = mean(y) estimates the mu_0 component.
  2. The linear component S1 = W^T v / sqrt(k) is estimated by ridge-type MMSE.
  3. Residuals are rescaled so ytil_mu = Tr[M_mu Sbar] + noise(Deltatil), with
     M_mu = (x_mu x_mu^T - I)/sqrt(d) acting as a GOE sensing matrix and
     Sbar = W^T diag(v) W / sqrt(kd).
  4. An AMP loop alternates the linear residual step (with Onsager memory)
     and the RIE denoiser on the pseudo-observation R_t = Sbar + noise at
     SNR eta_t = 4 alpha / (Deltatil + 2 Sigma_t); its state evolution
     (q2_t = r2 - Sigma_t, q2hat_t = eta_t) matches the universal branch of
     the saddle-point system.

Per-entry MSE convention: |Shat - Sbar|_F^2 / d, matching mmse_S(eta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .activations import ActivationSpec
from .spectral import SpectralTable

__all__ = [
    "GampError",
    "GampFit",
    "gamp_rie_fit",
    "linear_regime_overlap",
    "predict",
    "rie_denoise",
    "s1_estimate",
]


class GampError(RuntimeError):
    pass


@dataclass
class GampFit:
    y0_hat: float
    s1_hat: np.ndarray
    s2_hat: np.ndarray  # estimate of W^T diag(v) W / sqrt(kd)
    iterations: int
    se_trace: list = field(default_factory=list)  # (q2_t, q2hat_t)
    converged: bool = True
    linear_skipped: bool = False
    matrix_skipped: bool = False


def rie_denoise(
    Y: np.ndarray,
    eta: float,
    spectral: Optional[SpectralTable] = None,
    hilbert_width: float = 0.5,
) -> np.ndarray:
    """Rotational invariant estimator for Y = Sbar + xi/sqrt(eta), xi unit GOE.

    Eigenvalues shrink as lambda_i -> lambda_i - (2/eta) h(lambda_i) with h
    the principal-value Hilbert transform of the empirical eigenvalue
    density, Cauchy-regularised with width c d^{-1/2} (spectral width);
    eigenvectors are kept.  The optional spectral table is accepted for
    interface symmetry with the theory oracle; the shrinkage itself is purely
    empirical.
    """
    if eta <= 0:
        raise GampError("rie_denoise needs eta > 0")
    lam, U = np.linalg.eigh(Y)
    d = lam.size
    eps = hilbert_width * d**-0.5 * float(lam.max() - lam.min())
    diff = lam[:, None] - lam[None, :]
    hil = (diff / (diff**2 + eps**2)).mean(axis=1)
    shrunk = lam - (2.0 / eta) * hil
    return (U * shrunk) @ U.T


def s1_estimate(X: np.ndarray, y_centered: np.ndarray, delta1: float) -> np.ndarray:
    """MMSE estimator of S1 for the effective linear model.

    <S1> = (d Delta1)^{-1/2} (I + X X^T/(d Delta1))^{-1} X y, via an SPD solve.
    y_centered must be in the estimator's unit-noise convention: the raw
    centred labels divided by mu_1 sqrt(Delta1), so that
    y = S1.x / sqrt(d_Delta1-normalisation) + N(0, 1) noise.
    """
    if delta1 <= 0:
        raise GampError("delta1 must be positive")
    d = X.shape[0]
    A = np.eye(d) + (X @ X.T) / (d * delta1)
    rhs = X @ y_centered
    return np.linalg.solve(A, rhs) / math.sqrt(d * delta1)


def linear_regime_overlap(alpha1: float, delta1: float, tol: float = 1e-10) -> float:
    """Fixed point of q1 = q1hat/(q1hat + 1), q1hat = alpha1/(1 + Delta1 - q1)."""
    if alpha1 < 0:
        raise GampError("alpha1 must be nonnegative")
    q1 = 0.0
    for _ in range(100000):
        q1hat = alpha1 / (1.0 + delta1 - q1)
        q1_new = 0.5 * (q1hat / (q1hat + 1.0)) + 0.5 * q1
        if abs(q1_new - q1) < tol:
            return q1_new
        q1 = q1_new
    return q1


@dataclass
class GampConfig:
    max_iter: int = 200
    rel_tol: float = 1e-4
    damping: float = 0.5
    divergence_factor: float = 1e3


def _sensing_apply(X: np.ndarray, S: np.ndarray) -> np.ndarray:
    """(Tr[M_mu S])_mu with M_mu = (x_mu x_mu^T - I)/sqrt(d)."""
    d = X.shape[0]
    return (np.einsum("in,in->n", X, S @ X) - np.trace(S)) / math.sqrt(d)


def _sensing_adjoint(X: np.ndarray, z: np.ndarray) -> np.ndarray:
    """sum_mu z_mu M_mu."""
    d = X.shape[0]
    return ((X * z) @ X.T - z.sum() * np.eye(d)) / math.sqrt(d)


def gamp_rie_fit(
    X: np.ndarray,
    y: np.ndarray,
    activation: ActivationSpec,
    readout_values: np.ndarray,
    delta: float,
    table: Optional[SpectralTable] = None,
    cfg: Optional[GampConfig] = None,
) -> GampFit:
    """Fit the two-layer teacher data (X: d x n, y: n) with GAMP-RIE.

    readout_values is the quenched v (length k); the table, when given,
    supplies mmse_S for the state-evolution noise tracking (otherwise the
    per-iteration MSE is estimated from the pseudo-observation spectrum).
    """
    cfg = cfg or GampConfig()
    d, n = X.shape
    k = readout_values.size
    gamma = k / d
    alpha = n / d / d
    mu0, mu1, mu2 = activation.mu0, activation.mu1, activation.mu2
    nu = activation.second_moment
    vbar = float(np.mean(readout_values))
    r2 = 1.0 + gamma * vbar**2

    y0_hat = float(np.mean(y))
    fit = GampFit(
        y0_hat=y0_hat,
        s1_hat=np.zeros(d),
        s2_hat=vbar * math.sqrt(gamma) * np.eye(d),  # zero-SNR posterior mean
        iterations=0,
    )

    # linear stage (observations rescaled to the estimator's unit-noise form)
    if mu1 != 0.0:
        delta1 = (delta + nu - mu0**2 - mu1**2) / mu1**2
        y_norm = (y - y0_hat) / (mu1 * math.sqrt(delta1))
        fit.s1_hat = s1_estimate(X, y_norm, delta1)
    else:
        fit.linear_skipped = True

    if mu2 == 0.0:
        fit.matrix_skipped = True
        return fit

    # matrix stage on the rescaled residuals
    y1 = mu1 * (fit.s1_hat @ X) / math.sqrt(d)
    ytil = (y - y0_hat - y1) / (mu2 / 2.0)
    delta_til = (delta + activation.g_one) / (mu2**2 / 4.0)

    S = fit.s2_hat.copy()
    sigma_t = 1.0  # per-entry MSE of the zero-SNR initialisation
    V = 2.0 * sigma_t
    V_prev = None
    z = np.zeros(n)
    norm0 = np.linalg.norm(S) + 1e-30
    converged = False
    for it in range(cfg.max_iter):
        onsager = 0.0 if V_prev is None else V / (delta_til + V_prev)
        z = ytil - _sensing_apply(X, S) + onsager * z
        R = S + (d / (2.0 * n)) * _sensing_adjoint(X, z)
        eta_t = 4.0 * alpha / (delta_til + V)
        S_new = rie_denoise(R, eta_t, spectral=table)
        if table is not None:
            sigma_new = float(table.mmse(eta_t))
        else:
            lam = np.linalg.eigvalsh(math.sqrt(eta_t) * R)
            eps = 0.5 * d**-0.5 * float(lam.max() - lam.min())
            grid = np.linspace(lam.min() - 4 * eps, lam.max() + 4 * eps, 2000)
            dens = (eps / math.pi / ((grid[:, None] - lam[None, :]) ** 2 + eps**2)).mean(axis=1)
            t3 = (4 * math.pi**2 / 3) * np.trapezoid(dens**3, grid)
            sigma_new = max((1.0 - t3) / eta_t, 1e-12)
        fit.se_trace.append((r2 - sigma_t, eta_t))
        move = np.linalg.norm(S_new - S) / (np.linalg.norm(S) + 1e-30)
        S = cfg.damping * S_new + (1 - cfg.damping) * S
        V_prev = V
        sigma_t = sigma_new
        V = 2.0 * sigma_t
        if np.linalg.norm(S) > cfg.divergence_factor * max(norm0, 1.0):
            raise GampError(
                f"GAMP iterates diverged at iteration {it}; trace: {fit.se_trace}"
            )
        if move < cfg.rel_tol:
            converged = True
            break
    fit.s2_hat = (S + S.T) / 2.0
    fit.iterations = it + 1
    fit.converged = converged
    return fit


def predict(fit: GampFit, x_test: np.ndarray, activation: ActivationSpec) -> np.ndarray:
    """Predictor yhat = yhat0 + mu1 <S1>.x/sqrt(d) + (mu2/2) Tr[(xx^T - I) Shat2]/sqrt(d).

    x_test may be a single d-vector or a d x T batch.
    """
    x = np.asarray(x_test, dtype=float)
    single = x.ndim == 1
    X = x[:, None] if single else x
    d = fit.s1_hat.size
    if X.shape[0] != d:
        raise GampError(f"dimension mismatch: {X.shape[0]} != {d}")
    lin = activation.mu1 * (fit.s1_hat @ X) / math.sqrt(d)
    quad = (
        activation.mu2
        / 2.0
        * (np.einsum("it,it->t", X, fit.s2_hat @ X) - np.trace(fit.s2_hat))
        / math.sqrt(d)
    )
    out = fit.y0_hat + lin + quad
    return float(out[0]) if single else out
