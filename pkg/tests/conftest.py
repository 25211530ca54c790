import os
import warnings

import numpy as np
import pytest

from widebayes.activations import get_activation
from widebayes.potentials import ChannelSpec, PriorKind
from widebayes.readouts import make_readout
from widebayes.saddle import SaddleContext
from widebayes.spectral import build_mmse_table, default_eta_grid

CACHE_DIR = os.path.join(os.path.dirname(__file__), ".cache")

warnings.filterwarnings("ignore", message=".*Parseval residual.*")


def cached_table(readout_kind, gamma, coarse=False, n_bins=50):
    readout = make_readout(readout_kind, n_bins=n_bins)
    if coarse:
        # same grid shape the CLI builds for eta_max=60, n_eta=42 overrides,
        # so CLI tests hit the cache
        grid = default_eta_grid(eta_max=60.0, n_low=42, n_high=max(6, 42 // 4))
        return build_mmse_table(readout, gamma, eta_grid=grid, resolution=2500, cache_dir=CACHE_DIR)
    return build_mmse_table(readout, gamma, cache_dir=CACHE_DIR)


@pytest.fixture(scope="session")
def table_homog05():
    return cached_table("homogeneous", 0.5)


@pytest.fixture(scope="session")
def table_radem05():
    return cached_table("rademacher", 0.5)


@pytest.fixture(scope="session")
def table_radem05_coarse():
    return cached_table("rademacher", 0.5, coarse=True)


@pytest.fixture(scope="session")
def table_homog05_coarse():
    return cached_table("homogeneous", 0.5, coarse=True)


def make_ctx(table, activation="he2_he3", prior="gaussian", delta=0.1, alpha=1.0):
    return SaddleContext(
        alpha=alpha,
        gamma=table.gamma,
        activation=get_activation(activation),
        readout=table.readout,
        prior=PriorKind(prior),
        channel=ChannelSpec("gaussian_linear", delta=delta),
        table=table,
    )


def sample_signal_matrix(d, gamma, readout, rng):
    """W^T diag(v) W / sqrt(kd) with Gaussian W and atoms sampled from the law."""
    k = round(gamma * d)
    W = rng.standard_normal((k, d))
    v = rng.choice(readout.values, size=k, p=readout.probs)
    return (W.T * v) @ W / np.sqrt(k * d)


def sample_goe(d, rng):
    A = rng.standard_normal((d, d)) / np.sqrt(d)
    return (A + A.T) / np.sqrt(2.0)
