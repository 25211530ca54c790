import numpy as np
import pytest

from widebayes.readouts import ReadoutError, make_readout


def test_rademacher():
    law = make_readout("rademacher")
    assert set(law.values) == {1.0, -1.0}
    assert law.mean == 0.0
    assert law.second_moment == 1.0


def test_four_point():
    law = make_readout("four_point")
    s5 = np.sqrt(5.0)
    assert np.allclose(sorted(law.values), sorted([3 / s5, 1 / s5, -1 / s5, -3 / s5]))
    assert abs(law.second_moment - 0.25 * (9 / 5 + 9 / 5 + 1 / 5 + 1 / 5)) < 1e-15
    assert abs(law.second_moment - 1.0) < 1e-15


def test_homogeneous():
    law = make_readout("homogeneous")
    assert law.values.tolist() == [1.0]
    assert law.mean == 1.0


def test_gaussian_binned_moments():
    law = make_readout("gaussian_binned", n_bins=50)
    assert abs(law.second_moment - 1.0) < 1e-3
    assert abs(law.mean) < 1e-12
    assert law.n_atoms == 50
    # equal-probability binning
    assert np.allclose(law.probs, 1 / 50)


def test_gaussian_binned_refinement_stability():
    a = make_readout("gaussian_binned", n_bins=50)
    b = make_readout("gaussian_binned", n_bins=200)
    assert abs(a.mean - b.mean) < 1e-3
    assert abs(a.second_moment - b.second_moment) < 1e-3
    # the raw (pre-rescale) conditional-mean second moment also drifts < 1e-3
    fourth = lambda law: float(np.sum(law.probs * law.values**4))
    assert abs(fourth(b) - 3.0) < abs(fourth(a) - 3.0)  # refinement approaches N(0,1)


def test_custom_requires_unit_second_moment():
    with pytest.raises(ReadoutError):
        make_readout("custom", atoms=np.array([2.0, -2.0]), probs=np.array([0.5, 0.5]))
    law = make_readout(
        "custom", atoms=np.array([2.0, -2.0]), probs=np.array([0.5, 0.5]), auto_rescale=True
    )
    assert abs(law.second_moment - 1.0) < 1e-12


def test_invalid_probs():
    with pytest.raises(ReadoutError):
        make_readout("custom", atoms=np.array([1.0]), probs=np.array([0.7]))
    with pytest.raises(ReadoutError):
        make_readout("nonsense")
    with pytest.raises(ReadoutError):
        make_readout("gaussian_binned", n_bins=0)


def test_sampling_matches_probs():
    law = make_readout("four_point")
    rng = np.random.default_rng(5)
    draws = law.sample(200_000, rng)
    for v in law.values:
        assert abs(np.mean(draws == v) - 0.25) < 5e-3
