"""Readout priors P_v as finite atom lists with the unit-second-moment convention.

Continuous laws are discretised by equal-probability quantile binning so every
atom carries the same weight in the functional order parameter Q_W(v); the
atom value is the conditional mean of its bin, rescaled to restore a unit
second moment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

__all__ = ["ReadoutError", "ReadoutLaw", "make_readout"]

PROB_TOL = 1e-12
SECOND_MOMENT_TOL = 1e-3


class ReadoutError(ValueError):
    pass


@dataclass
class ReadoutLaw:
    """Discrete readout prior: atoms (value, prob) with unit second moment."""

    values: np.ndarray
    probs: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.probs = np.asarray(self.probs, dtype=float)
        if self.values.shape != self.probs.shape or self.values.ndim != 1:
            raise ReadoutError("atoms and probabilities must be matching 1-d lists")
        if np.any(self.probs < 0):
            raise ReadoutError("negative atom probability")
        if abs(self.probs.sum() - 1.0) > PROB_TOL:
            raise ReadoutError(f"probabilities sum to {self.probs.sum()!r}, not 1")

    @property
    def mean(self) -> float:
        return float(np.sum(self.probs * self.values))

    @property
    def second_moment(self) -> float:
        return float(np.sum(self.probs * self.values**2))

    @property
    def n_atoms(self) -> int:
        return self.values.size

    def expect(self, f) -> float:
        """E_v[f(v)] over the atoms."""
        return float(np.sum(self.probs * f(self.values)))

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(self.values, size=size, p=self.probs)

    def validate(self) -> None:
        if abs(self.second_moment - 1.0) > SECOND_MOMENT_TOL:
            raise ReadoutError(
                f"second moment {self.second_moment:.6f} outside unit convention"
            )


def _gaussian_binned(n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Equal-probability quantile bins of N(0,1), atom = conditional mean."""
    edges = norm.ppf(np.linspace(0.0, 1.0, n_bins + 1))
    edges[0], edges[-1] = -np.inf, np.inf
    # E[Z | a < Z < b] = (phi(a) - phi(b)) / (Phi(b) - Phi(a)), bin prob = 1/n
    pdf = np.where(np.isinf(edges), 0.0, norm.pdf(edges))
    vals = (pdf[:-1] - pdf[1:]) * n_bins
    vals = vals / np.sqrt(np.sum(vals**2) / n_bins)  # restore unit second moment
    return vals, np.full(n_bins, 1.0 / n_bins)


def make_readout(
    kind: str,
    n_bins: int = 50,
    atoms: np.ndarray | None = None,
    probs: np.ndarray | None = None,
    auto_rescale: bool = False,
) -> ReadoutLaw:
    """Build one of the supported readout laws.

    kinds: homogeneous (delta at 1), rademacher, four_point
    (+-3/sqrt5, +-1/sqrt5 with probability 1/4 each), gaussian_binned
    (n_bins quantile bins of N(0,1)), custom (explicit atoms/probs).
    """
    if n_bins < 1:
        raise ReadoutError("n_bins must be >= 1")
    if kind == "homogeneous":
        law = ReadoutLaw(np.array([1.0]), np.array([1.0]), kind)
    elif kind == "rademacher":
        law = ReadoutLaw(np.array([1.0, -1.0]), np.array([0.5, 0.5]), kind)
    elif kind == "four_point":
        s5 = np.sqrt(5.0)
        law = ReadoutLaw(
            np.array([3.0, 1.0, -1.0, -3.0]) / s5, np.full(4, 0.25), kind
        )
    elif kind == "gaussian_binned":
        vals, p = _gaussian_binned(n_bins)
        law = ReadoutLaw(vals, p, kind)
    elif kind == "custom":
        if atoms is None or probs is None:
            raise ReadoutError("custom readout needs atoms and probs")
        law = ReadoutLaw(np.asarray(atoms, float), np.asarray(probs, float), kind)
        if abs(law.second_moment - 1.0) > SECOND_MOMENT_TOL:
            if not auto_rescale:
                raise ReadoutError(
                    f"custom atoms have second moment {law.second_moment:.6f}; "
                    "pass auto_rescale=True to normalise"
                )
            law = ReadoutLaw(law.values / np.sqrt(law.second_moment), law.probs, kind)
    else:
        raise ReadoutError(f"unknown readout kind {kind!r}")
    law.validate()
    return law
