"""Differentiable primitives, finite-difference gradient checks and Adam.

Tensors and reverse-mode differentiation come from torch; this module fixes
the primitive set used by the networks, the numeric mode (reference = float64,
one thread, deterministic kernels) and the optimizer update.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class NumericalError(FloatingPointError):
    """A primitive produced non-finite values."""


_state = {"dtype": torch.float32, "check": False}


def set_mode(reference: bool = False, threads: int | None = None) -> None:
    """Select reference numerics (float64, single thread) or fast numerics (float32).

    Both modes use deterministic kernels; fast mode honours ``threads``.
    """
    _state["dtype"] = torch.float64 if reference else torch.float32
    _state["check"] = reference
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1 if reference else max(1, threads or torch.get_num_threads()))


def default_dtype() -> torch.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def reference_mode():
    saved = dict(_state), torch.get_num_threads()
    set_mode(reference=True)
    try:
        yield
    finally:
        _state.update(saved[0])
        torch.set_num_threads(saved[1])


@contextlib.contextmanager
def check_numerics(enabled: bool = True):
    saved = _state["check"]
    _state["check"] = enabled
    try:
        yield
    finally:
        _state["check"] = saved


def as_tensor(x, dtype: torch.dtype | None = None) -> Tensor:
    return torch.as_tensor(np.asarray(x) if not isinstance(x, Tensor) else x, dtype=dtype or default_dtype())


def _checked(name: str, out: Tensor) -> Tensor:
    if _state["check"] and not torch.isfinite(out).all():
        raise NumericalError(f"{name} produced non-finite values")
    return out


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


# --------------------------------------------------------------------------
# primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    return _checked("add", a + b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _checked("mul", a * b)


def scale(a: Tensor, s: float) -> Tensor:
    return _checked("scale", a * s)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape[-1] == b.shape[-2] if b.dim() > 1 else a.shape[-1] == b.shape[0],
             f"matmul: shapes {tuple(a.shape)} and {tuple(b.shape)} are incompatible")
    return _checked("matmul", a @ b)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    _require(x.shape[-1] == weight.shape[1],
             f"linear: input features {x.shape[-1]} != weight in_features {weight.shape[1]}")
    return _checked("linear", F.linear(x, weight, bias))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    _require(x.dim() == 4 and x.shape[1] == weight.shape[1],
             f"conv2d: input {tuple(x.shape)} incompatible with kernel {tuple(weight.shape)}")
    return _checked("conv2d", F.conv2d(x, weight, bias, stride=stride, padding=padding))


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    _require(x.dim() == 4 and x.shape[1] == weight.shape[0],
             f"conv_transpose2d: input {tuple(x.shape)} incompatible with kernel {tuple(weight.shape)}")
    return _checked("conv_transpose2d", F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding))


def relu(x: Tensor) -> Tensor:
    return F.relu(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def tanh(x: Tensor) -> Tensor:
    return torch.tanh(x)


def exp(x: Tensor) -> Tensor:
    return _checked("exp", torch.exp(x))


def log(x: Tensor) -> Tensor:
    return _checked("log", torch.log(x))


def mean(x: Tensor, dim=None) -> Tensor:
    return _checked("mean", x.mean() if dim is None else x.mean(dim=dim))


def sum(x: Tensor, dim=None) -> Tensor:  # noqa: A001
    return _checked("sum", x.sum() if dim is None else x.sum(dim=dim))


def residual_add(x: Tensor, branch: Tensor) -> Tensor:
    _require(x.shape == branch.shape, f"residual_add: {tuple(x.shape)} vs {tuple(branch.shape)}")
    return _checked("residual_add", x + branch)


# --------------------------------------------------------------------------
# layers

def _uniform_(t: Tensor, bound: float, gen: torch.Generator) -> None:
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)


class Linear(torch.nn.Module):
    def __init__(self, n_in: int, n_out: int, gen: torch.Generator, zero: bool = False):
        super().__init__()
        self.weight = torch.nn.Parameter(torch.zeros(n_out, n_in, dtype=torch.float64))
        self.bias = torch.nn.Parameter(torch.zeros(n_out, dtype=torch.float64))
        if not zero:
            _uniform_(self.weight, (6.0 / n_in) ** 0.5 / 2 ** 0.5, gen)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class Conv2d(torch.nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, gen: torch.Generator, stride: int = 1,
                 padding: int = 0, gain: float = 2.0 ** 0.5):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = torch.nn.Parameter(torch.zeros(c_out, c_in, kernel, kernel, dtype=torch.float64))
        self.bias = torch.nn.Parameter(torch.zeros(c_out, dtype=torch.float64))
        _uniform_(self.weight, gain * (3.0 / (c_in * kernel * kernel)) ** 0.5, gen)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(torch.nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, gen: torch.Generator, stride: int = 1,
                 padding: int = 0, gain: float = 2.0 ** 0.5):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = torch.nn.Parameter(torch.zeros(c_in, c_out, kernel, kernel, dtype=torch.float64))
        self.bias = torch.nn.Parameter(torch.zeros(c_out, dtype=torch.float64))
        # each output pixel sees about c_in * (kernel / stride)**2 inputs
        fan_in = c_in * (kernel / stride) ** 2
        _uniform_(self.weight, gain * (3.0 / fan_in) ** 0.5, gen)

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class ResidualBlock(torch.nn.Module):
    """Two 3x3 convolutions with an identity skip: ``relu(x + conv(relu(conv(x))))``."""

    def __init__(self, channels: int, gen: torch.Generator):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, gen, padding=1)
        # small second conv keeps the block near identity at initialisation
        self.conv2 = Conv2d(channels, channels, 3, gen, padding=1, gain=0.5)

    def forward(self, x):
        return relu(residual_add(x, self.conv2(relu(self.conv1(x)))))


# --------------------------------------------------------------------------
# gradient check

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], delta: float = 1e-5,
               max_coords: int | None = 64, seed: int = 0, abs_floor: float = 1e-7) -> float:
    """Largest relative error between autograd and central finite differences.

    ``f`` takes no arguments and reads ``params``; parameters must be float64.
    At most ``max_coords`` randomly chosen coordinates are probed per tensor.
    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise TypeError("grad_check needs float64 parameters")
    out = f()
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar function")
    grads = torch.autograd.grad(out, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        n = p.numel()
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        flat = p.data.view(-1)
        for i in coords:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + delta
                up = f().item()
                flat[i] = orig - delta
                down = f().item()
                flat[i] = orig
            numeric = (up - down) / (2 * delta)
            analytic = g.view(-1)[i].item()
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# Adam with decoupled weight decay

@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[Tensor | None]) -> None:
    """In-place Adam update with bias correction, then ``p -= lr * weight_decay * p``."""
    params = list(params)
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("parameter list changed between Adam steps")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))
            if state.weight_decay:
                p.sub_(state.lr * state.weight_decay * p)


class Adam:
    """Thin holder applying :func:`adam_step` to ``p.grad`` of each parameter."""

    def __init__(self, params, lr: float = 1e-3, weight_decay: float = 0.0):
        self.params = [p for p in params]
        self.state = AdamState(lr=lr, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.state, self.params, [p.grad for p in self.params])
