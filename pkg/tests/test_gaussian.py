import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpsf.conformal import ConformalRadii, radii_from_scores
from cpsf.exceptions import InvalidInputError
from cpsf.gaussian import fit_gaussian, gaussian_from_scores, normal_quantile

# high-precision reference values (mpmath, 30 digits: sqrt(2) * erfinv(2p - 1))
Z_REF = {
    0.99: 2.32634787404084110088560616335,
    0.5: 0.0,
    0.975: 1.95996398454005423552459443052,
    0.999875: 3.66225993088770125640205001737,
    1e-6: -4.75342430882289894819398818985,
}


@pytest.mark.parametrize("p", sorted(Z_REF))
def test_normal_quantile_against_reference(p):
    assert normal_quantile(p) == pytest.approx(Z_REF[p], abs=1e-6)


@settings(max_examples=200)
@given(st.floats(1e-12, 1 - 1e-12))
def test_normal_quantile_inverts_the_cdf(p):
    import math

    z = normal_quantile(p)
    assert 0.5 * math.erfc(-z / math.sqrt(2)) == pytest.approx(p, rel=1e-7, abs=1e-15)


def test_constant_scores_give_zero_std():
    g = gaussian_from_scores(np.full((10, 3), 0.4), 0.01)
    assert np.all(g.std == 0) and np.allclose(g.radii, 0.4, rtol=0, atol=1e-15)


def test_median_level_gives_the_mean():
    g = gaussian_from_scores(np.array([[1.0], [2.0], [3.0]]), 0.5)
    assert g.radii[0] == pytest.approx(2.0, abs=1e-12)


def test_one_percent_level():
    g = gaussian_from_scores(np.array([[1.0], [2.0], [3.0]]), 0.01)
    assert g.std[0] == 1.0
    assert g.radii[0] == pytest.approx(2.0 + Z_REF[0.99], abs=1e-6)


@settings(max_examples=100)
@given(st.lists(st.floats(0, 10), min_size=2, max_size=30), st.floats(1e-4, 0.9), st.floats(1e-4, 0.9))
def test_radius_monotone_in_level(scores, d1, d2):
    s = np.array(scores)[:, None]
    lo, hi = sorted((d1, d2))
    assert gaussian_from_scores(s, lo).radii[0] >= gaussian_from_scores(s, hi).radii[0] - 1e-12


def test_needs_two_scores():
    with pytest.raises(InvalidInputError):
        gaussian_from_scores(np.ones((1, 7)), 0.1)


def heavy_tailed_scores(n, rng):
    # 95% half-normal errors, 5% from a ten times wider mode
    s = np.abs(rng.normal(size=(n, 7)))
    wide = rng.random((n, 7)) < 0.05
    return np.where(wide, 10 * s, s)


def test_gaussian_undercovers_heavy_tails_while_conformal_does_not():
    rng = np.random.default_rng(2024)
    cal, test = heavy_tailed_scores(999, rng), heavy_tailed_scores(2000, rng)
    level = 0.01
    g = gaussian_from_scores(cal, level)
    c = radii_from_scores(cal, level, 1)
    cov_g = (test <= g.radii).mean(axis=0)
    cov_c = (test <= c.C).mean(axis=0)
    assert np.all(cov_g < 1 - level)
    # binomial slack for 2000 test points (about 2.5 standard deviations)
    assert np.all(cov_c >= 1 - level - 0.006)


def test_fit_gaussian_container(small_predictor, small_data):
    g = fit_gaussian(small_predictor, small_data[2], t_obs=8, delta_bar=0.05)
    box = g.as_conformal_container(delta=0.2)
    assert box.method == "gaussian" and np.array_equal(box.C, g.radii)
    back = ConformalRadii.from_dict(box.to_dict())
    assert back.method == "gaussian" and back.extra["z"] == g.z
    with pytest.raises(InvalidInputError):
        fit_gaussian(small_predictor, small_data[2], H=5)
