import numpy as np
import pytest

from mango_attack.optimizers import OptimizerState, StepSchedule, reset, step, steps_for_loop


def test_first_adam_step_is_lr_times_sign(rng):
    st = OptimizerState((3, 4), learning_rate=0.3)
    theta = np.zeros((3, 4))
    grad = rng.standard_normal((3, 4))
    st.step(theta, grad)
    np.testing.assert_allclose(theta, -0.3 * np.sign(grad), rtol=1e-6)


def test_zero_gradient_leaves_theta():
    st = OptimizerState((2, 3))
    theta = np.ones((2, 3))
    step(st, theta, np.zeros((2, 3)))
    assert np.array_equal(theta, np.ones((2, 3)))
    assert st.step_count == 1


def test_amsgrad_max_is_monotone(rng):
    st = OptimizerState((3, 5), variant="amsgrad")
    theta = np.zeros((3, 5))
    prev = st.second_moment_max.copy()
    for _ in range(100):
        st.step(theta, rng.standard_normal((3, 5)) * rng.uniform(0, 3))
        assert np.all(st.second_moment_max >= prev)
        prev = st.second_moment_max.copy()


def test_reset_matches_fresh_optimizer(rng):
    grads = rng.standard_normal((20, 2, 3))
    used = OptimizerState((2, 3), learning_rate=0.05)
    t_used = np.zeros((2, 3))
    for gr in grads[:10]:
        used.step(t_used, gr)
    reset(used)
    reset(used)  # idempotent
    fresh = OptimizerState((2, 3), learning_rate=0.05)
    a, b = np.zeros((2, 3)), np.zeros((2, 3))
    for gr in grads[10:]:
        used.step(a, gr)
        fresh.step(b, gr)
    assert np.array_equal(a, b)
    assert used.learning_rate == 0.05 and used.step_count == fresh.step_count


def test_frozen_rows_never_move(rng):
    st = OptimizerState((4, 3))
    theta = rng.standard_normal((4, 3))
    frozen = np.array([False, True, False, True])
    snapshot = theta[frozen].copy()
    for _ in range(50):
        st.step(theta, rng.standard_normal((4, 3)), frozen)
    assert np.array_equal(theta[frozen], snapshot)
    assert np.all(st.first_moment[frozen] == 0.0)


def test_adam_converges_on_quadratic(rng):
    target = rng.standard_normal((3, 4)) * 5
    theta = rng.standard_normal((3, 4)) * 5
    st = OptimizerState((3, 4), learning_rate=0.1)
    for _ in range(5000):
        st.step(theta, 2 * (theta - target))
    assert np.linalg.norm(theta - target) < 1e-3


def test_step_errors():
    st = OptimizerState((2, 2))
    with pytest.raises(ValueError):
        st.step(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(FloatingPointError):
        st.step(np.zeros((2, 2)), np.array([[np.nan, 0], [0, 0]]))
    with pytest.raises(ValueError):
        OptimizerState((2, 2), variant="sgd")


def test_schedule():
    s = StepSchedule(100)
    assert [steps_for_loop(s, l) for l in range(9)] == [100, 50, 25, 12, 6, 3, 1, 1, 1]
    assert [StepSchedule(1).steps_at(l) for l in range(4)] == [1, 1, 1, 1]
    assert [StepSchedule(140).steps_at(l) for l in range(4)] == [140, 70, 35, 17]
    seq = [s.steps_at(l) for l in range(100)]
    assert all(a >= b >= 1 for a, b in zip(seq, seq[1:]))
    with pytest.raises(ValueError):
        s.steps_at(-1)
