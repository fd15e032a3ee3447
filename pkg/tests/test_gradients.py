"""Finite-difference verification of the exact backward pass.

All checks run in float64 with epsilon 1e-4: smaller steps push the
central-difference cancellation noise above the comparison threshold on
coordinates whose true gradient is tiny.
"""

import numpy as np
import pytest

from ktrace.model import (ModelConfig, Parameters, backward_batch,
                          backward_step, forward_batch, forward_step,
                          parameter_shapes, zero_gradients)
from ktrace.numerics import finite_diff_check
from ktrace.training import bce_loss

EPSILON = 3e-4
TOLERANCE = 1e-4


def random_params(config, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return Parameters({name: rng.uniform(-scale, scale, shape)
                       for name, shape in parameter_shapes(config).items()})


def random_case(config, length, seed):
    rng = np.random.default_rng(seed)
    history = [(int(rng.integers(0, config.question_vocab + 1)),
                int(rng.integers(0, 2))) for _ in range(length)]
    target = int(rng.integers(0, config.question_vocab + 1))
    label = int(rng.integers(0, 2))
    return history, target, label


def fd_error(config, params, history, target, label):
    trace = forward_step(params, config, history, target, cache=True)
    grads = backward_step(params, config, trace, label)

    def loss(tensors):
        t = forward_step(Parameters(dict(tensors)), config, history, target)
        return float(bce_loss(t.prob, label))

    return finite_diff_check(loss, params.tensors, grads, epsilon=EPSILON)


@pytest.mark.parametrize("encoder", ["bilstm", "lstm", "fc"])
@pytest.mark.parametrize("attention", ["additive", "dot", "none"])
def test_every_variant_matches_finite_differences(encoder, attention):
    config = ModelConfig(question_vocab=5, d_embed=4, d_lstm=3, lstm_layers=2,
                         d_attn=4, head_dims=(5,), attention_kind=attention,
                         encoder_kind=encoder, window=8)
    params = random_params(config, seed=1)
    history, target, label = random_case(config, 4, seed=2)
    assert fd_error(config, params, history, target, label) < TOLERANCE


def test_single_affine_head_bias_gradient_is_residual():
    # with no hidden layers the output-bias gradient is exactly p - label
    config = ModelConfig(question_vocab=4, d_embed=3, d_lstm=2, lstm_layers=1,
                         d_attn=3, head_dims=(), window=6)
    params = random_params(config, seed=3)
    history, target, label = random_case(config, 3, seed=4)
    trace = forward_step(params, config, history, target, cache=True)
    grads = backward_step(params, config, trace, label)
    np.testing.assert_allclose(grads["head.0.b"], [trace.prob - label],
                               rtol=1e-12)


def test_label_equal_to_output_gives_zero_gradients():
    config = ModelConfig(question_vocab=4, d_embed=3, d_lstm=2, lstm_layers=1,
                         d_attn=3, head_dims=(4,), window=6)
    params = random_params(config, seed=5)
    history, target, _ = random_case(config, 3, seed=6)
    trace = forward_step(params, config, history, target, cache=True)
    grads = backward_step(params, config, trace, trace.prob)
    for name, grad in grads.items():
        np.testing.assert_array_equal(grad, np.zeros_like(grad),
                                      err_msg=name)


def test_untouched_embedding_rows_get_zero_gradient():
    config = ModelConfig(question_vocab=6, d_embed=3, d_lstm=2, lstm_layers=1,
                         d_attn=3, head_dims=(4,), window=6)
    params = random_params(config, seed=7)
    history = [(1, 0), (2, 1)]
    trace = forward_step(params, config, history, 3, cache=True)
    grads = backward_step(params, config, trace, 1)
    touched = {1, 2, 3}
    for row in range(config.question_vocab + 1):
        if row not in touched:
            np.testing.assert_array_equal(grads["embed.question"][row],
                                          np.zeros(config.d_embed))
    assert np.any(grads["embed.question"][1] != 0)
    assert np.any(grads["embed.question"][3] != 0)


def test_backward_requires_cached_trace():
    config = ModelConfig(question_vocab=4, d_embed=3, d_lstm=2, lstm_layers=1,
                         d_attn=3, head_dims=(4,), window=6)
    params = random_params(config, seed=8)
    trace = forward_step(params, config, [(0, 1)], 1, cache=False)
    with pytest.raises(ValueError, match="cache"):
        backward_step(params, config, trace, 1)


def test_batched_backward_equals_sum_of_single_examples():
    config = ModelConfig(question_vocab=5, d_embed=4, d_lstm=3, lstm_layers=2,
                         d_attn=4, head_dims=(5,), window=8)
    params = random_params(config, seed=9)
    cases = [random_case(config, n, seed=20 + n) for n in (2, 3, 5)]
    max_len = 5
    questions = np.zeros((3, max_len), dtype=np.int64)
    responses = np.zeros((3, max_len), dtype=np.int64)
    mask = np.zeros((3, max_len))
    targets = np.zeros(3, dtype=np.int64)
    labels = np.zeros(3)
    for i, (history, target, label) in enumerate(cases):
        for k, (q, r) in enumerate(history):
            questions[i, k] = q
            responses[i, k] = r
        mask[i, :len(history)] = 1.0
        targets[i] = target
        labels[i] = label
    batch_trace = forward_batch(params, config, questions, responses, mask,
                                targets, cache=True)
    batch_grads = backward_batch(params, config, batch_trace, labels,
                                 scale=1.0)
    summed = zero_gradients(params)
    for history, target, label in cases:
        trace = forward_step(params, config, history, target, cache=True)
        grads = backward_step(params, config, trace, label)
        for name in summed:
            summed[name] += grads[name]
    for name in summed:
        np.testing.assert_allclose(batch_grads[name], summed[name],
                                   rtol=1e-8, atol=1e-12, err_msg=name)


def test_mean_scale_divides_gradients():
    config = ModelConfig(question_vocab=4, d_embed=3, d_lstm=2, lstm_layers=1,
                         d_attn=3, head_dims=(4,), window=6)
    params = random_params(config, seed=11)
    questions = np.array([[1, 2], [3, 0]], dtype=np.int64)
    responses = np.array([[0, 1], [1, 0]], dtype=np.int64)
    mask = np.ones((2, 2))
    targets = np.array([0, 2], dtype=np.int64)
    labels = np.array([1.0, 0.0])
    trace = forward_batch(params, config, questions, responses, mask, targets,
                          cache=True)
    full = backward_batch(params, config, trace, labels, scale=1.0)
    trace2 = forward_batch(params, config, questions, responses, mask, targets,
                           cache=True)
    halved = backward_batch(params, config, trace2, labels, scale=0.5)
    for name in full:
        np.testing.assert_allclose(halved[name], 0.5 * full[name], rtol=1e-12,
                                   err_msg=name)


def test_longer_windows_and_deeper_stacks_stay_exact():
    config = ModelConfig(question_vocab=7, d_embed=5, d_lstm=4, lstm_layers=3,
                         d_attn=6, head_dims=(6, 4), window=12)
    params = random_params(config, seed=12)
    history, target, label = random_case(config, 9, seed=13)
    assert fd_error(config, params, history, target, label) < TOLERANCE
