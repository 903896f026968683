import numpy as np
import pytest

from mplab import gradcheck
from mplab.tensor import precision, record


@pytest.mark.parametrize("name", sorted(gradcheck.CHECKS))
def test_each_check_passes_a_few_trials(name):
    res = gradcheck.run_check(name, trials=3, seed=1)
    assert res.passed, (name, res.max_rel_error)


def _wrong_square(rng):
    x = rng.standard_normal(5)
    # backward claims d(x^2)/dx = 2.1x
    return [x], lambda t: record(t[0].data ** 2, (t[0],), lambda g: (g * 2.1 * t[0].data,))


def test_a_wrong_gradient_is_caught():
    with precision(np.float64):
        err = gradcheck.check_once(_wrong_square, np.random.default_rng(0))
    assert err > 0.04


def test_rel_error_floor():
    assert gradcheck.rel_error(0.0, 0.0) == 0.0
    assert gradcheck.rel_error(1e-12, 0.0) == pytest.approx(1e-6)
    assert gradcheck.rel_error(1e-12, 0.0, f_scale=100.0) == pytest.approx(1e-8)
    assert gradcheck.rel_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)


def test_suite_covers_every_primitive_family():
    names = set(gradcheck.CHECKS)
    for family in ("conv2d", "cdc2d", "batchnorm_train", "relu", "sigmoid", "softmax", "upsample_nearest",
                   "linear", "bce_loss", "mse_loss", "hfm_fuse", "extractor_conv2"):
        assert family in names


def test_unknown_check_name():
    with pytest.raises(KeyError):
        gradcheck.run_suite(trials=1, names=["nope"])
