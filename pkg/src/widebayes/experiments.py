"""Monte-Carlo harness: teacher/data generation, posterior samplers, measurement.

Metropolis (binary weights) proposes single sign flips and keeps the k x n
pre-activation matrix H = W X / sqrt(d) and the post-activations lambda
incrementally updated, so a flip costs O(n).  HMC (Gaussian weights) runs
leapfrog trajectories with dual-averaging step-size adaptation targeting 0.8
acceptance.  Both are seeded and bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .activations import ActivationSpec
from .potentials import ChannelSpec, PriorKind
from .readouts import ReadoutLaw

__all__ = [
    "Chain",
    "Dataset",
    "ExperimentError",
    "TeacherInstance",
    "empirical_gen_error",
    "generate_instance",
    "hmc_gaussian",
    "measure_overlaps",
    "metropolis_binary",
]

MEMORY_CAP_BYTES = 4_000_000_000


class ExperimentError(RuntimeError):
    pass


@dataclass
class TeacherInstance:
    W0: np.ndarray  # k x d
    v: np.ndarray  # k readouts
    activation: ActivationSpec
    channel: ChannelSpec
    seed: int

    @property
    def k(self) -> int:
        return self.W0.shape[0]

    @property
    def d(self) -> int:
        return self.W0.shape[1]

    def post_activation(self, X: np.ndarray, W: Optional[np.ndarray] = None) -> np.ndarray:
        """lambda(W; X) = v^T sigma(W X / sqrt(d)) / sqrt(k)."""
        W = self.W0 if W is None else W
        H = (W @ X) / math.sqrt(self.d)
        return (self.v @ self.activation(H)) / math.sqrt(self.k)


@dataclass
class Dataset:
    X: np.ndarray  # d x n
    y: np.ndarray  # n

    @property
    def n(self) -> int:
        return self.y.size


def generate_instance(
    d: int,
    gamma: float,
    alpha: float,
    prior: PriorKind,
    readout: ReadoutLaw,
    activation: ActivationSpec,
    channel: ChannelSpec,
    seed: int,
) -> tuple[TeacherInstance, Dataset]:
    """Teacher and dataset at k = round(gamma d), n = round(alpha d^2)."""
    k = round(gamma * d)
    n = round(alpha * d * d)
    if 8 * n * d > MEMORY_CAP_BYTES:
        raise ExperimentError(
            f"dataset would need {8 * n * d / 1e9:.1f} GB (> cap); reduce d or alpha"
        )
    rng = np.random.default_rng(seed)
    W0 = prior.sample((k, d), rng)
    if readout.kind == "homogeneous":
        v = np.ones(k)
    else:
        v = readout.sample(k, rng)
    teacher = TeacherInstance(W0=W0, v=v, activation=activation, channel=channel, seed=seed)
    X = rng.standard_normal((d, n))
    y = channel.sample(teacher.post_activation(X), rng)
    return teacher, Dataset(X=X, y=y)


# ---------------------------------------------------------------------------
# Metropolis for binary weights
# ---------------------------------------------------------------------------

@dataclass
class Chain:
    samples: list  # snapshots of W (or trajectory states)
    energies: np.ndarray
    acceptance: np.ndarray  # per recorded block
    final_W: np.ndarray
    extras: dict = field(default_factory=dict)


def _energy(y: np.ndarray, lam: np.ndarray, delta: float) -> float:
    r = y - lam
    return float(r @ r) / (2.0 * delta)


def metropolis_binary(
    dataset: Dataset,
    teacher: TeacherInstance,
    init: str = "informative",
    sweeps: int = 100,
    beta: float = 1.0,
    seed: int = 0,
    snapshot_every: Optional[int] = None,
    measure_every: int = 1,
) -> Chain:
    """Single-flip Metropolis on W in {-1, +1}^{k x d} at temperature 1/beta.

    Energy E = sum_mu (y_mu - lambda_mu(W))^2 / (2 Delta); informative init
    starts at the teacher.  One sweep = k d proposals.  Incremental H rows
    keep a proposal at O(n) cost.
    """
    if teacher.channel.tag != "gaussian_linear":
        raise ExperimentError("Metropolis sampler requires the Gaussian channel")
    X, y = dataset.X, dataset.y
    k, d = teacher.k, teacher.d
    n = dataset.n
    delta = teacher.channel.delta
    act = teacher.activation
    v = teacher.v
    sqk, sqd = math.sqrt(k), math.sqrt(d)
    rng = np.random.default_rng(seed)

    if init == "informative":
        W = teacher.W0.copy().astype(float)
    elif init == "random":
        W = rng.choice([-1.0, 1.0], size=(k, d))
    else:
        raise ExperimentError(f"unknown init {init!r}")
    if not np.all(np.abs(W) == 1.0):
        raise ExperimentError("binary sampler needs Rademacher weights")

    H = (W @ X) / sqd  # k x n
    sigma_H = act(H)
    lam = (v @ sigma_H) / sqk
    E = _energy(y, lam, delta)

    energies = []
    acc_rates = []
    snapshots = []
    accepted = 0
    proposals = 0
    for sweep in range(sweeps):
        rows = rng.integers(0, k, size=k * d)
        cols = rng.integers(0, d, size=k * d)
        us = rng.random(k * d)
        for i, j, u in zip(rows, cols, us):
            h_new = H[i] - (2.0 * W[i, j] / sqd) * X[j]
            sig_new = act(h_new)
            lam_new = lam + (v[i] / sqk) * (sig_new - sigma_H[i])
            E_new = _energy(y, lam_new, delta)
            proposals += 1
            if E_new <= E or u < math.exp(-beta * (E_new - E)):
                W[i, j] = -W[i, j]
                H[i] = h_new
                sigma_H[i] = sig_new
                lam = lam_new
                E = E_new
                accepted += 1
        if (sweep + 1) % measure_every == 0:
            energies.append(E)
            acc_rates.append(accepted / max(proposals, 1))
            accepted = 0
            proposals = 0
        if snapshot_every and (sweep + 1) % snapshot_every == 0:
            snapshots.append(W.copy())
    return Chain(
        samples=snapshots,
        energies=np.asarray(energies),
        acceptance=np.asarray(acc_rates),
        final_W=W,
    )


# ---------------------------------------------------------------------------
# HMC for Gaussian weights
# ---------------------------------------------------------------------------

def _potential_and_grad(W, X, y, v, act, delta, sqk, sqd):
    H = (W @ X) / sqd
    lam = (v @ act(H)) / sqk
    r = y - lam
    U = 0.5 * float(np.sum(W * W)) + float(r @ r) / (2.0 * delta)
    # dU/dW = W - (1/Delta) [ (v diag) sigma'(H) diag(r) ] X^T / sqrt(kd)
    G = W - ((act.prime(H) * (v[:, None] * r[None, :])) @ X.T) / (delta * sqk * sqd)
    return U, G


def hmc_gaussian(
    dataset: Dataset,
    teacher: TeacherInstance,
    init: str = "informative",
    n_iter: int = 100,
    leapfrog: int = 10,
    step0: float = 0.01,
    target_accept: float = 0.8,
    seed: int = 0,
    snapshot_every: Optional[int] = None,
    adapt: bool = True,
) -> Chain:
    """HMC on Gaussian-prior weights with dual-averaging step-size adaptation.

    Potential U(W) = |W|^2/2 + sum_mu (y_mu - lambda_mu(W))^2 / (2 Delta);
    10 leapfrog steps per trajectory by default; trajectories with energy
    error above 1e3 count as divergent and are rejected.
    """
    if teacher.channel.tag != "gaussian_linear":
        raise ExperimentError("HMC sampler requires the Gaussian channel")
    X, y = dataset.X, dataset.y
    k, d = teacher.k, teacher.d
    delta = teacher.channel.delta
    act, v = teacher.activation, teacher.v
    sqk, sqd = math.sqrt(k), math.sqrt(d)
    rng = np.random.default_rng(seed)

    W = teacher.W0.copy().astype(float) if init == "informative" else rng.standard_normal((k, d))

    # dual averaging (Hoffman-Gelman): adapt log step toward target acceptance
    mu_da = math.log(10.0 * step0)
    log_eps = math.log(step0)
    log_eps_bar = math.log(step0)
    h_bar = 0.0
    gamma_da, t0_da, kappa_da = 0.05, 10.0, 0.75

    energies = []
    accepts = []
    snapshots = []
    divergences = 0
    U, G = _potential_and_grad(W, X, y, v, act, delta, sqk, sqd)
    for m in range(1, n_iter + 1):
        eps = math.exp(log_eps)
        P = rng.standard_normal((k, d))
        K0 = 0.5 * float(np.sum(P * P))
        Wp, Gp = W, G
        P = P - 0.5 * eps * Gp
        for step in range(leapfrog):
            Wp = Wp + eps * P
            Up, Gp = _potential_and_grad(Wp, X, y, v, act, delta, sqk, sqd)
            if step < leapfrog - 1:
                P = P - eps * Gp
        P = P - 0.5 * eps * Gp
        K1 = 0.5 * float(np.sum(P * P))
        dH = (Up + K1) - (U + K0)
        if not math.isfinite(dH) or dH > 1e3:
            divergences += 1
            alpha_prob = 0.0
        else:
            alpha_prob = min(1.0, math.exp(-dH))
        if rng.random() < alpha_prob:
            W, U, G = Wp, Up, Gp
            accepts.append(1.0)
        else:
            accepts.append(0.0)
        if adapt:
            frac = 1.0 / (m + t0_da)
            h_bar = (1 - frac) * h_bar + frac * (target_accept - alpha_prob)
            log_eps = mu_da - math.sqrt(m) / gamma_da * h_bar
            w_da = m ** (-kappa_da)
            log_eps_bar = w_da * log_eps + (1 - w_da) * log_eps_bar
        energies.append(U)
        if snapshot_every and m % snapshot_every == 0:
            snapshots.append(W.copy())
    return Chain(
        samples=snapshots,
        energies=np.asarray(energies),
        acceptance=np.asarray(accepts),
        final_W=W,
        extras={"divergences": divergences, "final_step": math.exp(log_eps_bar)},
    )


# ---------------------------------------------------------------------------
# measurement
# ---------------------------------------------------------------------------

def measure_overlaps(
    W: np.ndarray,
    teacher: TeacherInstance,
    readout: ReadoutLaw,
    ell_max: int = 5,
    bins: int = 50,
    W_other: Optional[np.ndarray] = None,
) -> dict:
    """Overlaps between a sample W and the teacher (or a second sample).

    Q_ell = (1/k) sum_ij v_i v_j Omega_ij^ell with Omega = W W'^T / d;
    the Q_W(v) profile averages diagonal Omega_ii per readout bin; q2 equals
    Q_2 by the S2-trace identity.
    """
    Wref = teacher.W0 if W_other is None else W_other
    k, d = W.shape
    v = teacher.v
    omega = (W @ Wref.T) / d
    q_ell = []
    pw = omega.copy()
    for _ in range(ell_max):
        q_ell.append(float(v @ pw @ v) / k)
        pw = pw * omega
    diag = np.diag(omega)
    if readout.kind in ("homogeneous", "rademacher", "four_point", "custom"):
        centers = readout.values
        qw_prof = np.array(
            [
                diag[v == val].mean() if np.any(v == val) else np.nan
                for val in centers
            ]
        )
    else:
        edges = np.linspace(-2.0, 2.0, bins + 1)
        centers = 0.5 * (edges[:-1] + edges[1:])
        idx = np.clip(np.digitize(v, edges) - 1, 0, bins - 1)
        qw_prof = np.array(
            [diag[idx == b].mean() if np.any(idx == b) else np.nan for b in range(bins)]
        )
    return {
        "Q_ell": np.asarray(q_ell),
        "qw_values": centers,
        "qw_profile": qw_prof,
        "q2": q_ell[1] if ell_max >= 2 else math.nan,
    }


def empirical_gen_error(
    teacher: TeacherInstance,
    W: np.ndarray,
    mode: str = "gibbs_halved",
    n_test: int = 100_000,
    seed: int = 1234,
    readout: Optional[ReadoutLaw] = None,
    W_second: Optional[np.ndarray] = None,
    ell_max: int = 8,
) -> float:
    """Bayes generalisation error estimate from posterior samples.

    gibbs_halved: (eps_opt - Delta) = mean((lam(W) - lam(W0))^2) / 2 over
    fresh inputs, plus Delta (Gaussian channel, equilibrium).
    overlap_formula: Nishimori form from measured overlaps (equilibrium).
    no_nishimori: two-sample form, valid out of equilibrium.
    """
    rng = np.random.default_rng(seed)
    act = teacher.activation
    if mode == "gibbs_halved":
        if teacher.channel.tag != "gaussian_linear":
            raise ExperimentError("gibbs_halved requires the Gaussian channel")
        delta = teacher.channel.delta
        err = 0.0
        batch = 20_000
        left = n_test
        while left > 0:
            b = min(batch, left)
            Xt = rng.standard_normal((teacher.d, b))
            diff = teacher.post_activation(Xt, W) - teacher.post_activation(Xt)
            err += float(diff @ diff)
            left -= b
        return delta + 0.5 * err / n_test

    if readout is None:
        raise ExperimentError("overlap modes need the readout law")
    fact = [math.factorial(ell) for ell in range(ell_max + 1)]
    mus = np.zeros(ell_max + 1)
    mus[: act.coeffs.size] = act.coeffs[: ell_max + 1]
    coeff = np.array([mus[ell] ** 2 / fact[ell] for ell in range(ell_max + 1)])

    def q_vec(Wa, Wb):
        omega = (Wa @ Wb.T) / teacher.d
        out = []
        pw = omega.copy()
        for _ in range(ell_max):
            out.append(float(teacher.v @ pw @ teacher.v) / teacher.k)
            pw = pw * omega
        return np.asarray(out)

    delta = teacher.channel.delta
    q00 = q_vec(teacher.W0, teacher.W0)
    q01 = q_vec(W, teacher.W0)
    if mode == "overlap_formula":
        return delta + float(np.sum(coeff[1:] * (q00 - q01)))
    if mode == "no_nishimori":
        if W_second is None:
            raise ExperimentError("no_nishimori needs two decorrelated samples")
        q12 = q_vec(W, W_second)
        return delta + float(np.sum(coeff[1:] * (q00 - 2.0 * q01 + q12)))
    raise ExperimentError(f"unknown mode {mode!r}")
