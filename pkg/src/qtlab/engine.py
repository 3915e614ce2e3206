"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every primitive records a node holding its input tensors and a
backward closure, and ``backward(loss)`` replays the nodes reachable from the
loss in exact reverse creation order (creation order is a topological order).
All arithmetic is float64 so numeric property tests never fight float32 noise.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's shape rule."""


_NODE_COUNTER = itertools.count()


class Node:
    """One executed primitive: inputs, output, and its backward closure."""

    __slots__ = ("op", "inputs", "out", "grad_fn", "index")

    def __init__(self, op: str, inputs: Sequence["Tensor"], out: "Tensor",
                 grad_fn: Callable[[np.ndarray], list]):
        self.op = op
        self.inputs = tuple(inputs)
        self.out = out
        self.grad_fn = grad_fn
        self.index = next(_NODE_COUNTER)


class Tensor:
    """A dense float64 array, optionally tracked by the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _attach(op: str, data: np.ndarray, inputs: Sequence[Tensor],
            grad_fn: Callable[[np.ndarray], list]) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, out, grad_fn)
    return out


def trace(loss: Tensor) -> list[Node]:
    """Nodes reachable from ``loss``, in creation (topological) order."""
    if loss.node is None:
        return []
    nodes: list[Node] = []
    seen: set[int] = set()
    stack = [loss.node]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        for t in node.inputs:
            if t.node is not None and id(t.node) not in seen:
                stack.append(t.node)
    nodes.sort(key=lambda n: n.index)
    return nodes


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate additively across fan-out and across repeated calls;
    callers zero grads between optimization steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss.node is None:
        raise ValueError("backward: loss tensor was not produced by the graph")

    nodes = trace(loss)
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: list[Tensor] = [loss]
    for node in reversed(nodes):
        grad_out = upstream.get(id(node.out))
        if grad_out is None:
            continue
        for tensor, grad_in in zip(node.inputs, node.grad_fn(grad_out)):
            if grad_in is None:
                continue
            key = id(tensor)
            if key in upstream:
                upstream[key] = upstream[key] + grad_in
            else:
                upstream[key] = grad_in
                touched.append(tensor)
    for tensor in touched:
        if tensor.requires_grad:
            g = upstream[id(tensor)]
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    a_data, b_data = a.data, b.data

    def grad_fn(g):
        return [g @ b_data.T, a_data.T @ g]

    return _attach("matmul", a_data @ b_data, (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got shape {a.data.shape}")
    return _attach("transpose", a.data.T, (a,), lambda g: [g.T])


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: mismatched shapes {a.data.shape} and {b.data.shape}")
    return _attach("add", a.data + b.data, (a, b), lambda g: [g, g])


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: mismatched shapes {a.data.shape} and {b.data.shape}")
    a_data, b_data = a.data, b.data
    return _attach("mul", a_data * b_data, (a, b), lambda g: [g * b_data, g * a_data])


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _attach("sum_all", np.sum(a.data), (a,), lambda g: [np.broadcast_to(g, shape).copy()])


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # gradient at exactly 0 is 0
    return _attach("relu", np.where(mask, x.data, 0.0), (x,), lambda g: [g * mask])


def flatten(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError(f"flatten: expected batched tensor, got shape {x.data.shape}")
    shape = x.data.shape
    out = x.data.reshape(shape[0], -1)
    return _attach("flatten", out, (x,), lambda g: [g.reshape(shape)])


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Broadcast bias over a [B, F] feature or [B, C, H, W] channel layout."""
    if x.data.ndim == 2 and b.data.shape == (x.data.shape[1],):
        out = x.data + b.data[None, :]

        def grad_fn(g):
            return [g, g.sum(axis=0)]
    elif x.data.ndim == 4 and b.data.shape == (x.data.shape[1],):
        out = x.data + b.data[None, :, None, None]

        def grad_fn(g):
            return [g, g.sum(axis=(0, 2, 3))]
    else:
        raise ShapeError(f"add_bias: incompatible shapes {x.data.shape} and {b.data.shape}")
    return _attach("add_bias", out, (x, b), grad_fn)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.data.shape} and {w.data.shape}")
    if w.data.shape[2:] != (3, 3) or w.data.shape[1] != x.data.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.data.shape} and {w.data.shape}")
    n, c, h, width = x.data.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    w_data = w.data
    out = np.zeros((n, w_data.shape[0], h, width))
    for di in range(3):
        for dj in range(3):
            out += np.einsum("oc,bchw->bohw", w_data[:, :, di, dj],
                             xp[:, :, di:di + h, dj:dj + width], optimize=True)

    def grad_fn(g):
        gx_p = np.zeros_like(xp)
        gw = np.zeros_like(w_data)
        for di in range(3):
            for dj in range(3):
                patch = xp[:, :, di:di + h, dj:dj + width]
                gw[:, :, di, dj] = np.einsum("bohw,bchw->oc", g, patch, optimize=True)
                gx_p[:, :, di:di + h, dj:dj + width] += np.einsum(
                    "oc,bohw->bchw", w_data[:, :, di, dj], g, optimize=True)
        return [gx_p[:, :, 1:1 + h, 1:1 + width], gw]

    return _attach("conv2d", out, (x, w), grad_fn)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer labels against row softmax of logits."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected [batch, classes] logits, got {logits.data.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, n_classes = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("softmax_cross_entropy: label outside class range")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def grad_fn(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return [grad * (g / n)]

    return _attach("softmax_cross_entropy", np.asarray(loss), (logits,), grad_fn)


def ste_blend(x: Tensor, quantized, lam: float) -> Tensor:
    """Straight-through blend: forward x + lam*(q - x), backward identity to x.

    ``quantized`` is treated as a constant; no gradient flows into it.
    """
    q = quantized.data if isinstance(quantized, Tensor) else np.asarray(quantized, dtype=np.float64)
    if q.shape != x.data.shape:
        raise ShapeError(f"ste_blend: mismatched shapes {x.data.shape} and {q.shape}")
    if lam == 0.0:
        out = x.data.copy()  # bitwise FP path during warmup
    else:
        out = x.data + lam * (q - x.data)
    return _attach("ste_blend", out, (x,), lambda g: [g])


def add_constant(x: Tensor, offset: np.ndarray) -> Tensor:
    """Add a constant offset (no gradient path through the offset)."""
    offset = np.asarray(offset, dtype=np.float64)
    if offset.shape != x.data.shape:
        raise ShapeError(f"add_constant: mismatched shapes {x.data.shape} and {offset.shape}")
    return _attach("add_constant", x.data + offset, (x,), lambda g: [g])


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic grad of f at x and central differences.

    Relative error per coordinate is |analytic - numeric| / (|analytic| + 1e-8).
    ``x.data`` is perturbed in place and restored.
    """
    if h <= 0:
        raise ValueError("finite_difference_check: h must be positive")
    if not x.requires_grad:
        raise ValueError("finite_difference_check: x must have requires_grad set")
    out = f(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ShapeError("finite_difference_check: f must return a scalar tensor")
    x.grad = None
    backward(out)
    analytic = x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_hi = float(f(x).data.reshape(-1)[0])
        flat[i] = orig - h
        f_lo = float(f(x).data.reshape(-1)[0])
        flat[i] = orig
        numeric = (f_hi - f_lo) / (2.0 * h)
        worst = max(worst, abs(analytic[i] - numeric) / (abs(analytic[i]) + 1e-8))
    return worst
