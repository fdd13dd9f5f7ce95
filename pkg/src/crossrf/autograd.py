"""Reverse-mode automatic differentiation over dense numpy arrays.

The engine is deliberately small: it supports exactly the operation set
needed by 1D-convolutional fingerprint encoders, the softmax/NLL and
distillation losses, and the gradient-reversal trick used for adversarial
feature alignment. Operations executed inside a ``with Tape():`` block are
recorded in execution order; ``backward`` replays the tape in reverse and
accumulates gradients into the participating leaf tensors.

Two precisions are supported: float64 (for finite-difference gradient
verification) and float32 (training default). Ops never change the dtype
of their inputs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum
from itertools import count
from typing import Callable, Optional, Sequence

import numpy as np


class Mode(Enum):
    """Train/eval switch for stochastic and statistics-tracking layers."""

    TRAIN = "train"
    EVAL = "eval"


class ShapeError(ValueError):
    """An operand dimension does not match what the operation requires."""


class NumericalError(RuntimeError):
    """A forward op produced NaN/Inf, or a loss went non-finite."""


class GradientError(RuntimeError):
    """Backward called on something that cannot be differentiated."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested over fewer than two values per channel."""


_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Enable per-op finiteness assertions (slow; test/debug use)."""
    global _debug_checks
    _debug_checks = bool(enabled)


_node_counter = count(1)


class Tensor:
    """Dense real array, optionally tracked by the active tape.

    ``requires_grad`` marks trainable leaves; intermediate results inherit
    it from their inputs. ``grad`` is populated (accumulated) by
    ``backward`` for leaves only.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, cut from the graph (no grad, not recorded)."""
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        out = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return out

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Tensor":
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype}{flag})"


@dataclass
class TapeNode:
    """One recorded op: its inputs, its output, and how to push grads back."""

    op: str
    inputs: tuple
    output: Tensor
    backward_rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_tape_stack = threading.local()


def _stack() -> list:
    if not hasattr(_tape_stack, "stack"):
        _tape_stack.stack = []
    return _tape_stack.stack


def active_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations; append-at-execution keeps it topological.

    Use as a context manager around the forward pass::

        with Tape() as tape:
            loss = ...
        grads = backward(loss, tape)

    Ops executed while no tape is active run plain forward math and are not
    recorded (cheap frozen/eval passes).
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self
        return False

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def _finish(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_rule) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if _debug_checks and not np.all(np.isfinite(out.data)):
        raise NumericalError(f"op '{op}' produced non-finite values")
    tape = active_tape()
    if requires and tape is not None:
        tape.nodes.append(TapeNode(op, tuple(inputs), out, backward_rule))
    return out


def backward(loss: Tensor, tape: Tape) -> dict:
    """Reverse-accumulate gradients of a scalar loss over a recorded tape.

    Returns a map {leaf Tensor: gradient array} for every requires_grad
    leaf reachable from the loss, and accumulates the same gradients into
    each leaf's ``.grad``. The tape is consumed.
    """
    if loss.data.size != 1:
        raise GradientError(
            f"backward needs a scalar loss, got shape {list(loss.shape)}")
    output_ids = {node.output.node_id for node in tape.nodes}
    if loss.node_id not in output_ids:
        raise GradientError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.node_id, None)
        if g is None:
            continue  # branch that does not reach the loss
        in_grads = node.backward_rule(g)
        for t, ig in zip(node.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            if t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + ig
            else:
                grads[t.node_id] = ig
            tensors[t.node_id] = t

    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node_id, g in grads.items():
        if node_id in output_ids:
            continue  # intermediate whose grad was consumed upstream
        t = tensors[node_id]
        t.grad = g if t.grad is None else t.grad + g
        leaf_grads[t] = g
    tape.reset()
    return leaf_grads


# ---------------------------------------------------------------------------
# elementwise / reduction primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _finish("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _finish("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("scale", (a,), a.data * c, lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("add_scalar", (a,), a.data + c, lambda g: (g,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def rule(g):
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=False),)

    return _finish("sum", (a,), np.sum(a.data), rule)


def mean_all(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.data.size

    def rule(g):
        return (np.broadcast_to(g / n, shape).astype(g.dtype, copy=False),)

    return _finish("mean", (a,), np.mean(a.data), rule)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _finish("reshape", (a,), a.data.reshape(shape),
                   lambda g: (g.reshape(old),))


def concat0(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the leading axis (used to pool domain batches)."""
    if not parts:
        raise ShapeError("concat0 of an empty sequence")
    trailing = {p.shape[1:] for p in parts}
    if len(trailing) != 1:
        raise ShapeError(f"concat0: trailing shapes differ: {sorted(trailing)}")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, offsets, axis=0))

    return _finish("concat0", tuple(parts),
                   np.concatenate([p.data for p in parts], axis=0), rule)


# ---------------------------------------------------------------------------
# network layers


def conv1d(input: Tensor, weight: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 1D cross-correlation (no kernel flip) with bias.

    input [B, Cin, L], weight [Cout, Cin, K], bias [Cout] ->
    [B, Cout, Lout] with Lout = floor((L + 2*padding - K) / stride) + 1.

    The accumulation order per output element is fixed: products are summed
    over (cin outer, k inner), then the bias is added — identical, float op
    for float op, to a naive triple loop, so the two can be compared exactly.
    """
    x, w, b = input.data, weight.data, bias.data
    if x.ndim != 3:
        raise ShapeError(f"conv1d input must be [B, Cin, L], got {list(x.shape)}")
    if w.ndim != 3:
        raise ShapeError(f"conv1d weight must be [Cout, Cin, K], got {list(w.shape)}")
    batch, cin, length = x.shape
    cout, w_cin, ksize = w.shape
    if w_cin != cin:
        raise ShapeError(
            f"conv1d: weight in_channels={w_cin} != input channels={cin}")
    if b.shape != (cout,):
        raise ShapeError(
            f"conv1d: bias shape {list(b.shape)} != out_channels [{cout}]")
    if stride < 1:
        raise ValueError(f"conv1d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv1d: padding must be >= 0, got {padding}")
    if length + 2 * padding < ksize:
        raise ShapeError(
            f"conv1d: kernel {ksize} exceeds padded length {length + 2 * padding}"
            " (output length < 1)")
    lout = (length + 2 * padding - ksize) // stride + 1

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    out = np.zeros((batch, cout, lout), dtype=x.dtype)
    tmp = np.empty_like(out)
    for ci in range(cin):
        plane = xp[:, ci]
        for k in range(ksize):
            xs = plane[:, k: k + stride * lout: stride]      # (B, Lout) view
            np.multiply(w[:, ci, k][:, None], xs[:, None, :], out=tmp)
            out += tmp
    out += b[:, None]

    def rule(g):
        gb = g.sum(axis=(0, 2))
        gw = np.empty_like(w)
        gxp = np.zeros_like(xp)
        for ci in range(cin):
            plane = xp[:, ci]
            for k in range(ksize):
                xs = plane[:, k: k + stride * lout: stride]
                gw[:, ci, k] = np.tensordot(g, xs, axes=([0, 2], [0, 1]))
        for k in range(ksize):
            contrib = np.tensordot(g, w[:, :, k], axes=([1], [0]))  # (B, Lout, Cin)
            gxp[:, :, k: k + stride * lout: stride] += contrib.transpose(0, 2, 1)
        gx = gxp[:, :, padding: padding + length] if padding else gxp
        return gx, gw, gb

    return _finish("conv1d", (input, weight, bias), out, rule)


@dataclass
class BatchNormState:
    """Per-channel affine batch normalization with running statistics.

    Train mode normalizes by biased batch statistics and folds them into
    the running estimates: new = (1 - momentum) * old + momentum * batch.
    Eval mode normalizes by the running estimates.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: Mode = Mode.TRAIN

    def __post_init__(self):
        if not (0.0 < self.momentum < 1.0):
            raise ValueError(f"momentum must be in (0,1), got {self.momentum}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be nonnegative")

    @classmethod
    def create(cls, num_channels: int, dtype=np.float32,
               momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(num_channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(num_channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(num_channels, dtype=dtype),
            running_var=np.ones(num_channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def batchnorm1d(input: Tensor, state: BatchNormState) -> Tensor:
    """Normalize [B, C, L] (or [B, C]) per channel, then apply gamma/beta."""
    x = input.data
    squeeze = x.ndim == 2
    x3 = x[:, :, None] if squeeze else x
    if x3.ndim != 3:
        raise ShapeError(f"batchnorm1d input must be [B,C,L] or [B,C], got {list(x.shape)}")
    batch, channels, length = x3.shape
    if state.gamma.data.shape != (channels,):
        raise ShapeError(
            f"batchnorm1d: state has {state.gamma.data.shape[0]} channels, "
            f"input has {channels}")
    gamma, beta = state.gamma.data, state.beta.data
    train = state.mode is Mode.TRAIN
    if train:
        n = batch * length
        if n < 2:
            raise DegenerateBatchError(
                "train-mode batch norm needs at least 2 values per channel "
                f"(got B*L = {n})")
        mean = x3.mean(axis=(0, 2))
        var = x3.var(axis=(0, 2))
        m = state.momentum
        state.running_mean = ((1.0 - m) * state.running_mean + m * mean).astype(
            state.running_mean.dtype, copy=False)
        state.running_var = ((1.0 - m) * state.running_var + m * var).astype(
            state.running_var.dtype, copy=False)
    else:
        n = 0
        mean = state.running_mean
        var = state.running_var
    invstd = 1.0 / np.sqrt(var + state.eps)
    xhat = (x3 - mean[:, None]) * invstd[:, None]
    out3 = gamma[:, None] * xhat + beta[:, None]
    out = out3[:, :, 0] if squeeze else out3

    def rule(g):
        g3 = g[:, :, None] if squeeze else g
        dgamma = (g3 * xhat).sum(axis=(0, 2))
        dbeta = g3.sum(axis=(0, 2))
        if train:
            dxhat = g3 * gamma[:, None]
            s1 = dxhat.sum(axis=(0, 2), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
            dx3 = (invstd[:, None] / n) * (n * dxhat - s1 - xhat * s2)
        else:
            dx3 = g3 * (gamma * invstd)[:, None]
        dx = dx3[:, :, 0] if squeeze else dx3
        return dx, dgamma, dbeta

    return _finish("batchnorm1d", (input, state.gamma, state.beta), out, rule)


def leaky_relu(input: Tensor, slope: float) -> Tensor:
    """y = x for x >= 0 else slope * x. Slope 1 degenerates to identity."""
    if not (0.0 < slope <= 1.0):
        raise ValueError(f"leaky_relu slope must be in (0, 1], got {slope}")
    x = input.data
    factor = np.where(x >= 0, np.array(1.0, dtype=x.dtype),
                      np.array(slope, dtype=x.dtype))
    return _finish("leaky_relu", (input,), x * factor, lambda g: (g * factor,))


def dropout(input: Tensor, p: float, mode: Mode,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p); identity in eval mode."""
    if not (0.0 <= p < 1.0):
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode is Mode.EVAL or p == 0.0:
        return input
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    x = input.data
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _finish("dropout", (input,), x * keep, lambda g: (g * keep,))


def adaptive_avg_pool1d(input: Tensor, out_len: int) -> Tensor:
    """Average-pool [B, C, L] to [B, C, out_len].

    Segment i covers input indices [floor(i*L/out_len), ceil((i+1)*L/out_len)).
    """
    x = input.data
    if x.ndim != 3:
        raise ShapeError(f"adaptive_avg_pool1d input must be [B,C,L], got {list(x.shape)}")
    length = x.shape[2]
    if out_len < 1:
        raise ValueError(f"out_len must be positive, got {out_len}")
    if out_len > length:
        raise ShapeError(f"out_len {out_len} exceeds input length {length}")
    starts = [(i * length) // out_len for i in range(out_len)]
    ends = [-((-(i + 1) * length) // out_len) for i in range(out_len)]
    out = np.empty(x.shape[:2] + (out_len,), dtype=x.dtype)
    for i, (s, e) in enumerate(zip(starts, ends)):
        out[:, :, i] = x[:, :, s:e].mean(axis=2)

    def rule(g):
        gx = np.zeros_like(x)
        for i, (s, e) in enumerate(zip(starts, ends)):
            gx[:, :, s:e] += (g[:, :, i] / (e - s))[:, :, None]
        return (gx,)

    return _finish("adaptive_avg_pool1d", (input,), out, rule)


def linear(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x @ weight.T + bias for x [B, F], weight [G, F], bias [G]."""
    x, w, b = input.data, weight.data, bias.data
    if x.ndim != 2:
        raise ShapeError(f"linear input must be [B, F], got {list(x.shape)}")
    if w.ndim != 2:
        raise ShapeError(f"linear weight must be [G, F], got {list(w.shape)}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"linear: input features {x.shape[1]} != weight in_features {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(
            f"linear: bias shape {list(b.shape)} != out_features [{w.shape[0]}]")
    out = x @ w.T + b

    def rule(g):
        return g @ w, g.T @ x, g.sum(axis=0)

    return _finish("linear", (input, weight, bias), out, rule)


def softmax_t(logits: Tensor, temperature: float) -> Tensor:
    """Row softmax of logits / T, computed with max subtraction."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_t expects [B, K] logits, got {list(z.shape)}")
    zs = z / temperature
    zs = zs - zs.max(axis=1, keepdims=True)
    e = np.exp(zs)
    y = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        inner = g - (g * y).sum(axis=1, keepdims=True)
        return ((y * inner) / temperature,)

    return _finish("softmax_t", (logits,), y, rule)


def log_softmax(logits: Tensor) -> Tensor:
    """Numerically stable log(softmax(logits)) along axis 1."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"log_softmax expects [B, K] logits, got {list(z.shape)}")
    shifted = z - z.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _finish("log_softmax", (logits,), out, rule)


def nll_loss(log_probs: Tensor, labels) -> Tensor:
    """Mean over the batch of -log_probs[b, labels[b]]."""
    lp = log_probs.data
    if lp.ndim != 2:
        raise ShapeError(f"nll_loss expects [B, K] log-probs, got {list(lp.shape)}")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (lp.shape[0],):
        raise ShapeError(
            f"nll_loss: {lp.shape[0]} rows but {list(y.shape)} labels")
    k = lp.shape[1]
    if y.size and (y.min() < 0 or y.max() >= k):
        bad = y[(y < 0) | (y >= k)][0]
        raise ValueError(f"nll_loss: label {bad} out of range [0, {k})")
    rows = np.arange(lp.shape[0])
    out = -lp[rows, y].mean()

    def rule(g):
        glp = np.zeros_like(lp)
        glp[rows, y] = -np.asarray(g, dtype=lp.dtype) / lp.shape[0]
        return (glp,)

    return _finish("nll_loss", (log_probs,), out, rule)


def grad_reverse(input: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by -lam."""
    if lam < 0:
        raise ValueError(f"grad_reverse lambda must be nonnegative, got {lam}")
    neg = -float(lam)
    return _finish("grad_reverse", (input,), input.data.copy(),
                   lambda g: (g * neg,))
