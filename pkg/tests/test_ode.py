import math

import numpy as np
import pytest

from afinet.errors import ContractError
from afinet.ode import (ADAMS_BASHFORTH_2, LmmScheme, OdeProblem, Trajectory, concat_conv_split_identity,
                        convergence_csv, convergence_order, euler_solve, lmm_solve)

from oracles import conv2d_loops

STEPS = [2.0 ** -k for k in range(4, 10)]


def exponential(lam):
    return OdeProblem(lambda x, y: lam * y, 1.0), lambda x: math.exp(lam * x)


def test_euler_trivial_examples():
    flat = euler_solve(OdeProblem(lambda x, y: 0.0 * y, 3.0))
    assert np.all(flat.y == 3.0)
    ramp = euler_solve(OdeProblem(lambda x, y: np.ones_like(y), 0.0, h=0.1))
    assert len(ramp.y) == 11
    assert ramp.y[-1] == pytest.approx(1.0, abs=1e-12)


def test_euler_error_halves_on_refinement():
    problem, exact = exponential(1.0)
    _, rows = convergence_order(euler_solve, problem, exact, [0.1, 0.05, 0.025, 0.0125])
    ratios = [a / b for (_, a), (_, b) in zip(rows, rows[1:])]
    assert all(abs(q - 2.0) <= 0.2 for q in ratios)


def test_euler_step_by_hand():
    traj = euler_solve(OdeProblem(lambda x, y: y, 1.0, h=0.5))
    np.testing.assert_array_equal(traj.y, [1.0, 1.5, 2.25])


@pytest.mark.parametrize("lam", [-1.0, 1.0])
def test_convergence_orders(lam):
    problem, exact = exponential(lam)
    euler, _ = convergence_order(euler_solve, problem, exact, STEPS)
    ab2, _ = convergence_order(lambda p: lmm_solve(p, LmmScheme(ADAMS_BASHFORTH_2)), problem, exact, STEPS)
    assert abs(euler - 1.0) <= 0.2
    assert abs(ab2 - 2.0) <= 0.2


def test_window_one_is_bitwise_euler():
    for lam in (-1.0, 1.0, 0.3):
        p = OdeProblem(lambda x, y: lam * y + np.sin(x), np.array([1.0, -2.0]), h=0.03)
        np.testing.assert_array_equal(lmm_solve(p, LmmScheme((1.0,))).y, euler_solve(p).y)


def test_zero_coefficients_keep_state_constant():
    p = OdeProblem(lambda x, y: y, 1.0, h=0.1)
    assert np.all(lmm_solve(p, LmmScheme((0.0,))).y == 1.0)


def test_two_step_recurrence_by_hand():
    p = OdeProblem(lambda x, y: -y, 1.0, h=0.25)
    traj = lmm_solve(p, LmmScheme(ADAMS_BASHFORTH_2))
    y = list(traj.y[:2])
    for _ in range(2, len(traj.y)):
        y.append(y[-1] + 0.25 * (1.5 * -y[-1] - 0.5 * -y[-2]))
    np.testing.assert_allclose(traj.y, y, rtol=1e-15)
    # bootstrap value comes from a refined Euler run, close to exp(-h)
    assert traj.y[1] == pytest.approx(math.exp(-0.25), abs=1e-3)


def test_scheme_consistency_and_window_errors():
    assert LmmScheme(ADAMS_BASHFORTH_2).consistent
    assert not LmmScheme((1.0, 1.0)).consistent
    p = OdeProblem(lambda x, y: y, 1.0, h=0.5)
    with pytest.raises(ContractError):
        lmm_solve(p, LmmScheme((0.25,) * 4))
    with pytest.raises(ContractError):
        OdeProblem(lambda x, y: y, 1.0, h=0.0)


def test_exact_solver_reports_infinite_slope():
    problem, exact = exponential(1.0)

    def oracle(p):
        x = p.grid()
        return Trajectory(x, np.exp(x))

    slope, rows = convergence_order(oracle, problem, exact, STEPS)
    assert slope == math.inf and all(e == 0 for _, e in rows)
    with pytest.raises(ContractError):
        convergence_order(oracle, problem, exact, STEPS[:3])


def test_convergence_csv_format():
    assert convergence_csv([(0.5, 0.25)]) == "h,error\n0.5,0.25\n"


def test_split_identity_examples():
    rng = np.random.default_rng(0)
    x, r = rng.standard_normal((2, 2, 8, 6, 6))
    k2 = rng.standard_normal((5, 16, 3, 3))
    res = concat_conv_split_identity(x, r, k2)
    assert res.split_deviation < 1e-5 and res.shared_deviation < 1e-5
    zero = concat_conv_split_identity(x, np.zeros_like(x), k2)
    assert zero.split_deviation < 1e-12
    # the joint convolution itself agrees with a loop reference
    joint = conv2d_loops(np.concatenate([x, r], axis=1), k2, 1, 1)
    split = conv2d_loops(x, k2[:, :8], 1, 1) + conv2d_loops(r, k2[:, 8:], 1, 1)
    np.testing.assert_allclose(joint, split, atol=1e-10)
    with pytest.raises(ContractError):
        concat_conv_split_identity(x, r[:, :4], k2)
    with pytest.raises(ContractError):
        concat_conv_split_identity(x, r, k2[:, :12])


def test_split_identity_over_random_shapes():
    rng = np.random.default_rng(1)
    for _ in range(100):
        c, hw, k = int(rng.integers(1, 17)), int(rng.integers(1, 9)), int(rng.choice([1, 3]))
        x, r = rng.standard_normal((2, 2, c, hw, hw))
        k2 = rng.standard_normal((int(rng.integers(1, 9)), 2 * c, k, k))
        res = concat_conv_split_identity(x, r, k2)
        assert res.split_deviation < 1e-5 and res.shared_deviation < 1e-5
