"""Tests for the gradient tape and the finite-difference harness."""

import numpy as np
import pytest

from splathdr.gradengine import (GradTape, NonFiniteLossError,
                                 finite_diff_check)


def test_tape_accumulates_across_adds():
    tape = GradTape()
    tape.add("p", np.array([1.0, 2.0]))
    tape.add("p", np.array([0.5, 0.5]))
    np.testing.assert_allclose(tape.param_grads["p"], [1.5, 2.5])


def test_tape_zero_clears_in_place():
    tape = GradTape()
    tape.add("p", np.array([1.0, 2.0]))
    tape.ndc_grad_norm = np.array([3.0])
    tape.visible = np.array([True])
    tape.zero()
    assert np.all(tape.param_grads["p"] == 0)
    assert np.all(tape.ndc_grad_norm == 0)
    assert not tape.visible.any()


def test_finite_diff_accepts_correct_gradient():
    params = {"x": np.array([1.0, -2.0, 0.5])}
    a = np.array([2.0, 0.3, -1.0])

    def loss():
        return float(0.5 * np.sum(a * params["x"] ** 2))

    analytic = {"x": a * params["x"]}
    err, _ = finite_diff_check(loss, params, analytic)
    assert err < 1e-8


def test_finite_diff_flags_wrong_gradient():
    params = {"x": np.array([1.0, 2.0])}

    def loss():
        return float(np.sum(params["x"] ** 2))

    analytic = {"x": 2 * params["x"] * np.array([1.0, 1.1])}
    err, worst = finite_diff_check(loss, params, analytic)
    assert err > 1e-2
    assert worst == "x[1]"


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_check(lambda: 0.0, {}, {}, step=0.0)


def test_finite_diff_reports_nonfinite_loss():
    params = {"x": np.array([0.0])}

    def loss():
        return float(np.log(params["x"][0]))

    with pytest.raises(NonFiniteLossError, match="x"):
        finite_diff_check(loss, params, {"x": np.array([1.0])})


def test_finite_diff_subsamples_large_parameters():
    rng = np.random.default_rng(0)
    params = {"x": rng.standard_normal(100)}
    calls = []

    def loss():
        calls.append(1)
        return float(np.sum(params["x"] ** 2))

    analytic = {"x": 2 * params["x"]}
    err, _ = finite_diff_check(loss, params, analytic, max_coords=10, rng=rng)
    assert err < 1e-6
    assert len(calls) == 20  # two evaluations per probed coordinate
