import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from hfodistill import tensor as T


def _p(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64, requires_grad=True)


def test_conv_identity_kernel():
    x = _p(2, 3, 5, 5)
    w = torch.zeros(3, 3, 1, 1, dtype=torch.float64)
    for c in range(3):
        w[c, c] = 1.0
    assert torch.equal(T.conv2d(x, w), x)


def test_conv_ones_kernel_on_constant_image():
    x = torch.full((1, 1, 6, 6), 2.5, dtype=torch.float64)
    out = T.conv2d(x, torch.ones(1, 1, 3, 3, dtype=torch.float64))
    assert out.shape == (1, 1, 4, 4) and torch.all(out == 22.5)


def test_sigmoid_derivative_at_zero():
    x = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    T.sigmoid(x).sum().backward()
    assert x.grad.item() == 0.25


@pytest.mark.parametrize("op,args", [
    (T.matmul, (torch.zeros(2, 3), torch.zeros(4, 2))),
    (T.linear, (torch.zeros(2, 3), torch.zeros(4, 2))),
    (T.conv2d, (torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3))),
    (T.conv_transpose2d, (torch.zeros(1, 2, 4, 4), torch.zeros(3, 1, 3, 3))),
    (T.residual_add, (torch.zeros(2, 3), torch.zeros(3, 2))),
])
def test_shape_mismatch(op, args):
    with pytest.raises(ValueError):
        op(*args)


def test_nan_reported_with_op_name():
    with T.check_numerics():
        with pytest.raises(T.NumericalError, match="log"):
            T.log(torch.tensor([-1.0], dtype=torch.float64))


def test_grad_check_quadratic():
    x = _p(10)
    assert T.grad_check(lambda: T.sum(T.mul(x, x)), [x]) < 1e-9


def test_grad_check_constant():
    x = _p(4)
    assert T.grad_check(lambda: torch.tensor(3.0, dtype=torch.float64) + 0 * x.sum(), [x]) == 0.0


def test_grad_check_requires_double():
    x = torch.zeros(3, requires_grad=True)
    with pytest.raises(TypeError):
        T.grad_check(lambda: x.sum(), [x])


PRIMITIVES = {
    "add": lambda a, b: T.add(a, b),
    "mul": lambda a, b: T.mul(a, b),
    "scale": lambda a, b: T.scale(a, 1.7),
    "tanh": lambda a, b: T.tanh(a),
    "sigmoid": lambda a, b: T.sigmoid(a),
    "relu": lambda a, b: T.relu(a + 0.05),
    "exp": lambda a, b: T.exp(a),
    "log": lambda a, b: T.log(T.exp(a) + 1.0),
    "mean": lambda a, b: T.mean(a, dim=0),
    "residual_add": lambda a, b: T.residual_add(a, T.tanh(b)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@given(rows=st.integers(1, 4), cols=st.integers(1, 4), seed=st.integers(0, 1000))
def test_elementwise_primitives_pass_grad_check(name, rows, cols, seed):
    a, b = _p(rows, cols, seed=seed), _p(rows, cols, seed=seed + 1)
    w = _p(*PRIMITIVES[name](a, b).shape, seed=seed + 2).detach()
    f = lambda: T.sum(T.mul(PRIMITIVES[name](a, b), w))  # noqa: E731
    assert T.grad_check(f, [a, b]) < 1e-4


@given(n=st.integers(1, 3), k=st.integers(1, 4), m=st.integers(1, 4), seed=st.integers(0, 1000))
def test_matmul_and_linear_grad(n, k, m, seed):
    x, w, b = _p(n, k, seed=seed), _p(m, k, seed=seed + 1), _p(m, seed=seed + 2)
    assert T.grad_check(lambda: T.sum(T.tanh(T.matmul(x, w.T))), [x, w]) < 1e-4
    assert T.grad_check(lambda: T.sum(T.tanh(T.linear(x, w, b))), [x, w, b]) < 1e-4


@given(stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 1000))
def test_conv_grads(stride, pad, seed):
    x, w, b = _p(2, 2, 5, 5, seed=seed), _p(3, 2, 3, 3, seed=seed + 1), _p(3, seed=seed + 2)
    assert T.grad_check(lambda: T.sum(T.tanh(T.conv2d(x, w, b, stride, pad))), [x, w, b]) < 1e-4
    wt = _p(2, 3, 4, 4, seed=seed + 3)
    assert T.grad_check(lambda: T.sum(T.tanh(T.conv_transpose2d(x, wt, None, stride, pad))), [x, wt]) < 1e-4


def test_backward_linearity():
    x = _p(5)
    f1 = lambda: T.sum(T.tanh(x))  # noqa: E731
    f2 = lambda: T.sum(T.mul(x, x))  # noqa: E731
    g1, = torch.autograd.grad(f1(), [x])
    g2, = torch.autograd.grad(f2(), [x])
    g12, = torch.autograd.grad(f1() + f2(), [x])
    torch.testing.assert_close(g12, g1 + g2, rtol=0, atol=1e-15)


def test_residual_block_grad():
    gen = torch.Generator().manual_seed(0)
    block = T.ResidualBlock(2, gen)
    x = _p(1, 2, 4, 4)
    assert T.grad_check(lambda: T.sum(block(x)), list(block.parameters()) + [x]) < 1e-4


def test_adam_zero_grad_no_decay_leaves_params():
    p = _p(4).detach()
    before = p.clone()
    T.adam_step(T.AdamState(lr=0.1), [p], [torch.zeros(4, dtype=torch.float64)])
    assert torch.equal(p, before)


@given(g=st.floats(1e-2, 1e3) | st.floats(-1e3, -1e-2))
def test_adam_first_step_is_lr_sign(g):
    p = torch.zeros(1, dtype=torch.float64)
    T.adam_step(T.AdamState(lr=0.01), [p], [torch.full((1,), g, dtype=torch.float64)])
    expected = -0.01 * g / (abs(g) + 1e-8)
    assert p.item() == pytest.approx(expected, rel=1e-12)
    # eps shifts the step by at most lr * eps / |g|
    assert abs(p.item() + 0.01 * math.copysign(1, g)) <= 0.01 * 1e-8 / abs(g) + 1e-15


def test_adam_decoupled_decay():
    p = torch.ones(3, dtype=torch.float64)
    T.adam_step(T.AdamState(lr=1e-3, weight_decay=1e-5), [p], [torch.zeros(3, dtype=torch.float64)])
    assert torch.allclose(p, torch.full((3,), 1 - 1e-3 * 1e-5, dtype=torch.float64), rtol=0, atol=1e-16)


def test_adam_matches_reference_implementation():
    # independent route: torch's AdamW uses the same decoupled rule up to where decay is applied
    rng = np.random.default_rng(0)
    p = torch.tensor(rng.standard_normal(6))
    state = T.AdamState(lr=1e-2)
    q = p.clone().requires_grad_(True)
    ref = torch.optim.Adam([q], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    for _ in range(5):
        g = torch.tensor(rng.standard_normal(6))
        T.adam_step(state, [p], [g])
        q.grad = g.clone()
        ref.step()
    torch.testing.assert_close(p, q.detach(), rtol=1e-12, atol=1e-14)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        T.adam_step(T.AdamState(), [torch.zeros(3)], [torch.zeros(4)])


def test_reference_mode_context():
    with T.reference_mode():
        assert T.default_dtype() == torch.float64
        assert torch.get_num_threads() == 1
    assert T.default_dtype() == torch.float32
