import numpy as np
import pytest

from invlearn.errors import ConfigError, NumericError, ShapeError
from invlearn.model import apply_step, init_params
from invlearn.optim import AdamState, adam_step, preconditioned, raw_step


def _setup(seed=0):
    params = init_params("gmf", 4, 5, 3, seed=seed)
    rng = np.random.default_rng(seed)
    grad = {k: rng.normal(size=v.shape) for k, v in params.weights.items()}
    return params, grad, AdamState.for_params(params, lr=0.01)


def reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook loop over a flat vector."""
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return theta


class TestAdam:
    def test_zero_gradient_fresh_state(self):
        params, _, state = _setup()
        new, state2 = adam_step(params, params.zeros_like(), state)
        assert np.array_equal(new.flat(), params.flat())
        assert state2.step_count == 1

    def test_first_step_moves_by_lr(self):
        params, grad, state = _setup()
        new, _ = adam_step(params, grad, state)
        delta = params.flat() - new.flat()
        assert np.allclose(np.abs(delta), 0.01, rtol=1e-5)
        assert np.array_equal(np.sign(delta), np.sign(np.concatenate([grad[k].ravel() for k in sorted(grad)])))

    def test_matches_reference_over_steps(self):
        params, _, state = _setup()
        rng = np.random.default_rng(5)
        grads = [{k: rng.normal(size=v.shape) for k, v in params.weights.items()} for _ in range(6)]
        current = params
        for g in grads:
            current, state = adam_step(current, g, state)
        flat_grads = [np.concatenate([g[k].ravel() for k in sorted(g)]) for g in grads]
        expected = reference_adam(params.flat(), flat_grads, 0.01)
        assert np.allclose(current.flat(), expected, rtol=1e-12, atol=1e-15)

    def test_inputs_untouched(self):
        params, grad, state = _setup()
        before, checksum = params.flat().copy(), state.checksum()
        adam_step(params, grad, state)
        assert np.array_equal(params.flat(), before)
        assert state.checksum() == checksum

    def test_deterministic(self):
        params, grad, state = _setup()
        a, sa = adam_step(params, grad, state)
        b, sb = adam_step(params, grad, state)
        assert np.array_equal(a.flat(), b.flat()) and sa.checksum() == sb.checksum()

    def test_zero_lr_is_identity(self):
        params, grad, _ = _setup()
        state = AdamState.for_params(params, lr=0.0)
        new, state2 = adam_step(params, grad, state)
        assert np.array_equal(new.flat(), params.flat())
        assert state2.step_count == 1

    def test_non_finite_gradient_refused(self):
        params, grad, state = _setup()
        grad["h"][0] = np.nan
        checksum = state.checksum()
        with pytest.raises(NumericError):
            adam_step(params, grad, state)
        assert state.checksum() == checksum and state.step_count == 0

    def test_shape_mismatch(self):
        params, grad, state = _setup()
        grad["h"] = np.zeros(7)
        with pytest.raises(ShapeError):
            adam_step(params, grad, state)

    def test_negative_lr(self):
        params, _, _ = _setup()
        with pytest.raises(ConfigError):
            AdamState.for_params(params, lr=-1.0)

    def test_second_moment_non_negative(self):
        params, grad, state = _setup()
        for _ in range(3):
            params, state = adam_step(params, grad, state)
        assert all((v >= 0).all() for v in state.second_moment.values())


class TestRawStep:
    def test_round_trip(self):
        params, grad, _ = _setup()
        back = raw_step(raw_step(params, grad, -0.05), grad, 0.05)
        assert np.max(np.abs(back.flat() - params.flat())) < 1e-12

    def test_zero_is_identity(self):
        params, grad, _ = _setup()
        assert np.array_equal(raw_step(params, grad, 0.0).flat(), params.flat())

    def test_matches_apply_step_bitwise(self):
        params, grad, _ = _setup()
        assert raw_step(params, grad, 0.3).flat().tobytes() == apply_step(params, grad, 0.3).flat().tobytes()


class TestPreconditioned:
    def test_fresh_state_gives_unit_steps(self):
        params, grad, state = _setup()
        out = preconditioned(grad, state)
        for k in grad:
            assert np.allclose(np.abs(out[k]), 1.0, rtol=1e-6)

    def test_read_only(self):
        params, grad, state = _setup()
        params, state = adam_step(params, grad, state)
        checksum = state.checksum()
        preconditioned(grad, state)
        assert state.checksum() == checksum

    def test_matches_adam_without_momentum(self):
        params, grad, state = _setup()
        params, state = adam_step(params, grad, state)
        g2 = {k: 0.5 * v for k, v in grad.items()}
        no_momentum = AdamState(state.lr, 0.0, state.beta2, state.eps, state.step_count,
                                {k: np.zeros_like(v) for k, v in state.first_moment.items()},
                                state.second_moment)
        stepped, _ = adam_step(params, g2, no_momentum)
        expected = raw_step(params, preconditioned(g2, state), state.lr)
        assert np.allclose(stepped.flat(), expected.flat(), rtol=1e-12, atol=1e-15)
