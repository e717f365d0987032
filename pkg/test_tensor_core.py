import numpy as np
import pytest

import tensor_core as tc
from errors import ConfigError, ContractError, DimensionError, NonFiniteError
from tensor_core import Tape, Tensor


def _param(array):
    return Tensor(array, requires_grad=True)


def test_matmul_examples():
    identity = Tensor(np.eye(2))
    b = Tensor([[1, 2], [3, 4]])
    assert np.array_equal(tc.matmul(identity, b).data, [[1, 2], [3, 4]])

    projector = Tensor([[1, 0], [0, 0]])
    assert np.array_equal(tc.matmul(projector, Tensor([[5, 6], [7, 8]])).data, [[5, 6], [0, 0]])


def test_matmul_against_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    out = tc.matmul(Tensor(a), Tensor(b)).data
    for i in range(3):
        for j in range(2):
            expected = np.sum([a[i, k] * b[k, j] for k in range(4)])
            assert abs(out[i, j] - expected) < 1e-5


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_row_examples():
    assert np.allclose(tc.softmax_row(Tensor([0, 0, 0, 0])).data, [0.25] * 4)
    saturated = tc.softmax_row(Tensor([1000.0, 0.0])).data
    assert abs(saturated[0] - 1.0) < 1e-12 and saturated[1] < 1e-12

    x = np.array([1.0, 2.0, 3.0])
    oracle = np.exp(x) / np.exp(x).sum()
    with tc.precision(np.float64):
        assert np.max(np.abs(tc.softmax_row(Tensor(x)).data - oracle)) < 1e-7


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    rows = tc.softmax_row(Tensor(rng.normal(scale=50.0, size=(20, 7)))).data
    assert np.all(rows >= 0)
    assert np.allclose(rows.sum(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_examples():
    gain, bias = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.allclose(tc.layer_norm(Tensor(np.full((1, 4), 3.0)), gain, bias).data, 0.0)

    out = tc.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).data
    assert np.allclose(out, [[1.0, -1.0]], atol=1e-6)

    row = np.random.default_rng(2).normal(3.0, 5.0, size=(1, 64))
    with tc.precision(np.float64):
        normed = tc.layer_norm(Tensor(row), Tensor(np.ones(64)), Tensor(np.zeros(64))).data
    assert abs(normed.mean()) < 1e-6
    assert abs(normed.var() - 1.0) < 1e-4


def test_layer_norm_rejects_non_positive_eps():
    with pytest.raises(ContractError):
        tc.layer_norm(Tensor([[1.0, 2.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


def test_dropout_modes():
    rng = np.random.default_rng(3)
    x = Tensor(np.arange(6.0))
    assert tc.dropout_mask(x, 0.9, "eval", rng) is x
    assert tc.dropout_mask(x, 0.0, "train", rng) is x
    with pytest.raises(ConfigError):
        tc.dropout_mask(x, 1.0, "train", rng)


def test_dropout_statistics():
    rng = np.random.default_rng(4)
    out = tc.dropout_mask(Tensor(np.ones(1_000_000)), 0.5, "train", rng).data
    survivors = np.mean(out > 0)
    assert 0.497 <= survivors <= 0.503
    assert abs(out.mean() - 1.0) < 0.01


def test_dropout_is_seeded():
    x = Tensor(np.ones((4, 5)))
    a = tc.dropout_mask(x, 0.3, "train", np.random.default_rng(7)).data
    b = tc.dropout_mask(x, 0.3, "train", np.random.default_rng(7)).data
    assert np.array_equal(a, b)


def test_cross_entropy_examples():
    uniform = tc.cross_entropy_smoothed(Tensor(np.zeros((3, 5))), [0, 1, 4], eps=0.0)
    assert abs(uniform.item() - np.log(5)) < 1e-6

    confident = tc.cross_entropy_smoothed(Tensor([[100.0, 0.0, 0.0]]), [0], eps=0.0)
    assert confident.item() < 1e-6

    logits = np.array([1.0, 2.0, 3.0])
    log_probs = logits - np.log(np.exp(logits).sum())
    q = np.full(3, 0.1 / 3)
    q[2] += 0.9
    with tc.precision(np.float64):
        loss = tc.cross_entropy_smoothed(Tensor([logits]), [2], eps=0.1)
    assert abs(loss.item() + np.sum(q * log_probs)) < 1e-6


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        tc.cross_entropy_smoothed(Tensor(np.zeros((1, 3))), [3])


def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        tc.scale(Tensor([3e38]), 10.0)


def test_backward_simple_cases():
    x = _param([1.0, -2.0, 3.0])
    with Tape() as tape:
        loss = tc.sum(x)
    grads = tc.backward(tape, loss)
    assert np.array_equal(grads[x], np.ones(3))

    y = _param([1.5, -0.5])
    with Tape() as tape:
        loss = tc.sum(y * y)
    assert np.allclose(tc.backward(tape, loss)[y], 2 * y.data)


def test_backward_contract_errors():
    x = _param([1.0, 2.0])
    with Tape() as tape:
        out = x * x
    with pytest.raises(ContractError):
        tc.backward(tape, out)

    with Tape() as tape:
        loss = tc.sum(x)
    tc.backward(tape, loss)
    with pytest.raises(ContractError):
        tc.backward(tape, loss)

    with pytest.raises(ContractError):
        tc.backward(Tape(), Tensor(1.0))


def test_unreached_parameter_gets_zero_gradient():
    used, unused = _param([2.0]), _param([[1.0, 2.0]])
    with Tape() as tape:
        loss = tc.sum(used * used)
    grads = tc.backward(tape, loss, [used, unused])
    assert np.array_equal(grads[unused], np.zeros((1, 2)))


def test_diamond_graph_accumulates():
    with tc.precision(np.float64):
        x = _param(np.random.default_rng(5).normal(size=4))

        def loss():
            squared = x * x
            tripled = tc.scale(x, 3.0)
            return tc.sum(squared * tripled)

        errors = tc.gradient_check(loss, [x])
    assert errors[0] < 1e-4


def test_primitive_gradients():
    rng = np.random.default_rng(6)
    with tc.precision(np.float64):
        a = _param(rng.normal(size=(3, 4)))
        b = _param(rng.normal(size=(4, 5)))
        gain = _param(rng.normal(size=5))
        bias = _param(rng.normal(size=5))
        table = _param(rng.normal(size=(6, 5)))
        weights = Tensor(rng.normal(size=(3, 5)))
        positive = _param(rng.uniform(0.5, 1.5, size=(3, 5)) * rng.choice([-1, 1], size=(3, 5)))

        cases = {
            "matmul": (lambda: tc.sum(tc.matmul(a, b) * weights), [a, b]),
            "softmax": (lambda: tc.sum(tc.softmax_row(tc.matmul(a, b)) * weights), [a, b]),
            "log_softmax": (lambda: tc.sum(tc.log_softmax(tc.matmul(a, b)) * weights), [a, b]),
            "layer_norm": (lambda: tc.sum(tc.layer_norm(tc.matmul(a, b), gain, bias) * weights), [a, b, gain, bias]),
            "gelu": (lambda: tc.sum(tc.gelu(tc.matmul(a, b)) * weights), [a, b]),
            "relu": (lambda: tc.sum(tc.relu(positive) * weights), [positive]),
            "take": (lambda: tc.sum(tc.take(table, [[0, 2, 2], [5, 1, 0]]) * Tensor(np.ones(5))), [table]),
            "concat": (lambda: tc.sum(tc.concat([table, tc.matmul(a, b)], axis=0) * Tensor(np.arange(45.0).reshape(9, 5))), [table, a, b]),
            "transpose": (lambda: tc.sum(tc.transpose(tc.matmul(a, b)) * Tensor(weights.data.T)), [a, b]),
            "reshape_getitem": (lambda: tc.sum(tc.reshape(tc.matmul(a, b), (5, 3))[1:4] * Tensor(np.ones(3))), [a, b]),
            "broadcast_mean": (lambda: tc.mean(tc.broadcast_to(gain, (4, 5)) * tc.broadcast_to(bias, (4, 5))), [gain, bias]),
            "sub_mul": (lambda: tc.sum((tc.matmul(a, b) - table[:3]) * tc.matmul(a, b)), [a, b, table]),
            "cross_entropy": (lambda: tc.cross_entropy_smoothed(tc.matmul(a, b), [0, 4, 2], 0.1), [a, b]),
        }
        for name, (build, params) in cases.items():
            errors = tc.gradient_check(build, params)
            assert max(errors) < 1e-4, f"{name}: {errors}"


def test_adam_zero_gradient_is_a_no_op():
    w = _param([1.0, -2.0])
    state = tc.AdamState.for_params([w])
    tc.adam_step([w], [np.zeros(2, dtype=np.float32)], state, lr=0.1)
    assert np.array_equal(w.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_is_signed_lr():
    w = _param([0.5, 0.5])
    state = tc.AdamState.for_params([w])
    tc.adam_step([w], [np.array([3.0, -0.01], dtype=np.float32)], state, lr=0.01)
    assert np.allclose(w.data, [0.49, 0.51], atol=1e-5)


def test_adam_matches_hand_stepped_oracle():
    lr, beta1, beta2, eps = 0.1, 0.9, 0.999, 1e-8
    with tc.precision(np.float64):
        w = _param([1.0])
    state = tc.AdamState.for_params([w])

    expected, m, v = 1.0, 0.0, 0.0
    for t in range(1, 4):
        g = 2 * expected
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        expected -= lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)

        tc.adam_step([w], [2 * w.data], state, lr=lr)
        assert abs(w.data[0] - expected) < 1e-6


def test_adam_lr_zero_leaves_parameters_unchanged():
    w = _param([1.0, 2.0])
    optimizer = tc.Adam([w], weight_decay=0.1)
    optimizer.step([np.array([1.0, 1.0], dtype=np.float32)], lr=0.0)
    assert np.array_equal(w.data, [1.0, 2.0])


def test_adam_decoupled_decay_respects_mask():
    decayed, kept = _param([1.0]), _param([1.0])
    optimizer = tc.Adam([decayed, kept], weight_decay=0.5, decay_mask=[True, False])
    zero = np.zeros(1, dtype=np.float32)
    optimizer.step([zero, zero], lr=0.1)
    assert abs(decayed.data[0] - 0.95) < 1e-6
    assert kept.data[0] == 1.0


def test_adam_shape_mismatch():
    w = _param([1.0, 2.0])
    with pytest.raises(ContractError):
        tc.adam_step([w], [np.zeros(3)], tc.AdamState.for_params([w]), lr=0.1)
    with pytest.raises(ContractError):
        tc.adam_step([w], [np.zeros(2)], tc.AdamState.for_params([w]), lr=-1.0)


def test_clip_grad_norm():
    grads = [np.array([3.0, 0.0]), np.array([4.0])]
    norm = tc.clip_grad_norm(grads, 1.0)
    assert abs(norm - 5.0) < 1e-9
    assert abs(np.sqrt(np.sum(grads[0] ** 2) + np.sum(grads[1] ** 2)) - 1.0) < 1e-5


if __name__ == "__main__":
    pytest.main([__file__])
