import math

import numpy as np
import pytest

from conftest import make_ctx, sample_goe, sample_signal_matrix
from widebayes.activations import get_activation
from widebayes.experiments import generate_instance
from widebayes.gamp import (
    GampError,
    gamp_rie_fit,
    linear_regime_overlap,
    predict,
    rie_denoise,
    s1_estimate,
)
from widebayes.potentials import ChannelSpec, PriorKind
from widebayes.readouts import make_readout
from widebayes.saddle import SolverConfig, iterate_saddle, SaddleState


def test_rie_noiseless_limit():
    rng = np.random.default_rng(0)
    Y = sample_signal_matrix(120, 0.5, make_readout("homogeneous"), rng)
    out = rie_denoise(Y, 1e9)
    assert np.max(np.abs(out - Y)) < 1e-6


def test_rie_preserves_eigenvectors():
    rng = np.random.default_rng(1)
    law = make_readout("homogeneous")
    Y = sample_signal_matrix(100, 0.5, law, rng) + sample_goe(100, rng)
    out = rie_denoise(Y, 1.0)
    _, U = np.linalg.eigh(Y)
    off = U.T @ out @ U
    assert np.max(np.abs(off - np.diag(np.diag(off)))) < 1e-9


def test_rie_domain():
    with pytest.raises(GampError):
        rie_denoise(np.eye(4), 0.0)


def test_rie_mse_matches_table(table_homog05):
    rng = np.random.default_rng(7)
    law = make_readout("homogeneous")
    d = 300
    for eta in (1.0, 2.0):
        mses = []
        for _ in range(3):
            S = sample_signal_matrix(d, 0.5, law, rng)
            Y = S + sample_goe(d, rng) / math.sqrt(eta)
            mses.append(float(np.sum((rie_denoise(Y, eta) - S) ** 2)) / d)
        target = float(table_homog05.mmse(eta))
        assert abs(np.mean(mses) - target) / target < 0.05


def test_s1_infinite_noise_limit():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((40, 400))
    y = rng.standard_normal(400)
    out = s1_estimate(X, y, 1e12)
    assert np.max(np.abs(out)) < 1e-3


def test_s1_linear_teacher_overlap():
    rng = np.random.default_rng(3)
    d, n = 250, 10_000  # alpha_1 = 40
    s_true = rng.standard_normal(d)
    X = rng.standard_normal((d, n))
    delta1 = 0.5
    y = s_true @ X / math.sqrt(d) + math.sqrt(delta1) * rng.standard_normal(n)
    shat = s1_estimate(X, y / math.sqrt(delta1), delta1)
    overlap = float(shat @ s_true / np.linalg.norm(shat) / np.linalg.norm(s_true))
    assert overlap > 0.99


def test_s1_overlap_matches_scalar_fixed_point():
    rng = np.random.default_rng(4)
    d = 1500
    alpha1, delta1 = 1.0, 1.0
    n = int(alpha1 * d)
    s_true = rng.standard_normal(d)
    X = rng.standard_normal((d, n))
    y = s_true @ X / math.sqrt(d) + math.sqrt(delta1) * rng.standard_normal(n)
    shat = s1_estimate(X, y / math.sqrt(delta1), delta1)
    q1_th = linear_regime_overlap(alpha1, delta1)
    # the posterior-mean self-overlap is the low-variance estimator of q1
    q1_self = float(shat @ shat) / d
    assert abs(q1_self - q1_th) / q1_th < 0.03
    q1_cross = float(shat @ s_true) / d
    assert abs(q1_cross - q1_th) / q1_th < 0.10  # noisier at this size


def test_linear_regime_overlap_limits():
    assert linear_regime_overlap(0.0, 1.0) == 0.0
    assert linear_regime_overlap(1e6, 1.0) > 0.999
    # algebraic oracle for the closed fixed point at alpha1 = Delta1 = 1:
    # scan the residual of q = q_hat/(q_hat+1), q_hat = a/(1+D-q) for its root
    a, D = 1.0, 1.0
    qs = np.linspace(0, 0.999999, 2_000_001)
    res = qs - (a / (1 + D - qs)) / (a / (1 + D - qs) + 1.0)
    sign_changes = np.where(np.diff(np.sign(res)) != 0)[0]
    root = qs[sign_changes[-1]]
    assert abs(linear_regime_overlap(a, D) - root) < 1e-5


def test_gamp_mu2_zero_skips_matrix_stage():
    act = get_activation("he3")
    law = make_readout("homogeneous")
    ch = ChannelSpec("gaussian_linear", delta=0.1)
    teacher, data = generate_instance(100, 0.5, 0.5, PriorKind("gaussian"), law, act, ch, 5)
    fit = gamp_rie_fit(data.X, data.y, act, teacher.v, 0.1)
    assert fit.matrix_skipped
    rng = np.random.default_rng(11)
    Xt = rng.standard_normal((100, 40_000))
    yt = ch.sample(teacher.post_activation(Xt), rng)
    mse = float(np.mean((yt - predict(fit, Xt, act)) ** 2))
    # universal theory for mu2 = 0: test error = delta + g(1) (here g(1) = 1)
    assert abs(mse - (0.1 + act.g_one)) / (0.1 + act.g_one) < 0.15


def test_gamp_se_trace_matches_universal_saddle(table_homog05):
    ctx = make_ctx(table_homog05, activation="relu", delta=0.1, alpha=2.0)
    n_atoms = ctx.readout.n_atoms
    uni = iterate_saddle(
        ctx,
        SaddleState(0.0, 0.0, np.zeros(n_atoms), np.zeros(n_atoms)),
        SolverConfig(tol=1e-11, max_iter=20000),
    )
    teacher, data = generate_instance(
        120, 0.5, 2.0, PriorKind("gaussian"), ctx.readout, ctx.activation, ctx.channel, 0
    )
    fit = gamp_rie_fit(data.X, data.y, ctx.activation, teacher.v, 0.1, table=table_homog05)
    q2_t = np.array([q for q, _ in fit.se_trace])
    assert abs(q2_t[-1] - uni.state.q2) < 1e-3
    assert abs(fit.se_trace[-1][1] - uni.state.q2_hat) < 1e-3
    # monotone approach after burn-in
    assert np.all(np.diff(q2_t[1:]) > -1e-9)


def test_gamp_equivariances(table_homog05):
    act = get_activation("relu")
    law = make_readout("homogeneous")
    ch = ChannelSpec("gaussian_linear", delta=0.1)
    teacher, data = generate_instance(80, 0.5, 1.0, PriorKind("gaussian"), law, act, ch, 9)
    fit = gamp_rie_fit(data.X, data.y, act, teacher.v, 0.1, table=table_homog05)
    # permuting the samples leaves the fit unchanged
    rng = np.random.default_rng(0)
    perm = rng.permutation(data.n)
    fit_p = gamp_rie_fit(data.X[:, perm], data.y[perm], act, teacher.v, 0.1, table=table_homog05)
    assert np.allclose(fit.s2_hat, fit_p.s2_hat, atol=1e-8)
    assert np.allclose(fit.s1_hat, fit_p.s1_hat, atol=1e-10)
    # rotating the inputs rotates the estimates covariantly
    R = np.linalg.qr(rng.standard_normal((80, 80)))[0]
    fit_r = gamp_rie_fit(R @ data.X, data.y, act, teacher.v, 0.1, table=table_homog05)
    assert np.allclose(fit_r.s2_hat, R @ fit.s2_hat @ R.T, atol=1e-6)


def test_predict_zero_fit_and_dim_mismatch():
    act = get_activation("relu")
    from widebayes.gamp import GampFit

    fit = GampFit(y0_hat=0.7, s1_hat=np.zeros(10), s2_hat=np.zeros((10, 10)), iterations=0)
    assert predict(fit, np.ones(10), act) == 0.7
    with pytest.raises(GampError):
        predict(fit, np.ones(11), act)


def test_gamp_square_error_decreases_with_alpha():
    act = get_activation("square")
    law = make_readout("homogeneous")
    ch = ChannelSpec("gaussian_linear", delta=1e-6)
    errs = []
    for alpha in (0.5, 1.5, 3.0):
        teacher, data = generate_instance(100, 0.5, alpha, PriorKind("gaussian"), law, act, ch, 3)
        fit = gamp_rie_fit(data.X, data.y, act, teacher.v, 1e-6)
        rng = np.random.default_rng(31)
        Xt = rng.standard_normal((100, 30_000))
        yt = ch.sample(teacher.post_activation(Xt), rng)
        errs.append(float(np.mean((yt - predict(fit, Xt, act)) ** 2)))
    assert errs[2] < errs[1] < errs[0]
    assert errs[2] < 0.1 * errs[0]
