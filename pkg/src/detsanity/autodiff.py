"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive builds a ``Var`` node that remembers its op kind, parent
nodes, and whatever forward values its backward rule needs. A
``ComputationRecord`` freezes the topological order of one output's graph;
``backward`` replays it in reverse, accumulating gradients for every leaf
created with ``requires_grad=True``.

Backward rules are looked up per op kind, first in the caller-supplied hook
mapping and then in the default table, so a hook can replace one rule (the
guided-backprop ReLU gate) without touching anything else. With an empty
hook mapping the lookup resolves to the default rules and the result is
bit-identical to running without hooks.

Conventions, fixed once for the whole package:

* all values are float64 ("double"), row-major;
* activations are NCHW;
* broadcasting is limited to bias addition (``bias_add``); every other
  binary op requires exactly matching shapes;
* vector-valued targets are reduced to a scalar (``take``/``sum_all``)
  before backward, whose seed is then the scalar 1.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's shape rule."""


class Var:
    """One node of the computation graph.

    Leaf nodes have ``op is None``; only leaves may require gradients.
    Values are never mutated after construction.
    """

    __slots__ = ("value", "op", "inputs", "ctx", "requires_grad", "name")

    def __init__(self, value, op=None, inputs=(), ctx=None, requires_grad=False, name=None):
        self.value = value
        self.op = op
        self.inputs = inputs
        self.ctx = ctx or {}
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        kind = self.op or (self.name or "leaf")
        return f"Var({kind}, shape={self.value.shape})"


# rule(node, upstream_grad, needs) -> one gradient per input; ``needs`` says
# which inputs actually reach a gradient leaf, so expensive branches (conv
# weight gradients during saliency, input gradients during training) can be
# skipped by returning None.
BackwardRule = Callable[[Var, np.ndarray, tuple], Sequence["np.ndarray | None"]]
# Per-op-kind overrides of the default backward rules.
BackwardHookSet = Mapping[str, BackwardRule]


def _f8(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def leaf(value, requires_grad=False, name=None) -> Var:
    return Var(_f8(value), requires_grad=requires_grad, name=name)


def constant(value, name=None) -> Var:
    return Var(_f8(value), name=name)


def _node(op, inputs, value, **ctx) -> Var:
    return Var(np.asarray(value, dtype=np.float64), op=op, inputs=tuple(inputs), ctx=ctx)


def _expect(cond: bool, msg: str):
    if not cond:
        raise ShapeError(msg)


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    _expect(a.shape == b.shape, f"add: shape mismatch {a.shape} vs {b.shape}")
    return _node("add", (a, b), a.value + b.value)


def sub(a: Var, b: Var) -> Var:
    _expect(a.shape == b.shape, f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _node("sub", (a, b), a.value - b.value)


def mul(a: Var, b: Var) -> Var:
    _expect(a.shape == b.shape, f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _node("mul", (a, b), a.value * b.value)


def scale(a: Var, c: float) -> Var:
    return _node("scale", (a,), a.value * float(c), c=float(c))


def bias_add(x: Var, b: Var, axis: int = 1) -> Var:
    """The one sanctioned broadcast: add a 1-D bias along ``axis`` of x."""
    _expect(b.value.ndim == 1, f"bias_add: bias must be 1-D, got {b.shape}")
    _expect(
        x.value.ndim > axis and x.shape[axis] == b.shape[0],
        f"bias_add: axis {axis} of {x.shape} does not match bias {b.shape}",
    )
    bshape = [1] * x.value.ndim
    bshape[axis] = b.shape[0]
    return _node("bias_add", (x, b), x.value + b.value.reshape(bshape), axis=axis)


def sum_all(x: Var) -> Var:
    return _node("sum_all", (x,), x.value.sum())


def sum_axis(x: Var, axis: int) -> Var:
    return _node("sum_axis", (x,), x.value.sum(axis=axis), axis=axis)


def reshape(x: Var, shape) -> Var:
    return _node("reshape", (x,), x.value.reshape(shape))


def transpose(x: Var, axes) -> Var:
    return _node("transpose", (x,), np.ascontiguousarray(x.value.transpose(axes)), axes=tuple(axes))


def take(x: Var, indices) -> Var:
    """Gather flat indices from x; the building block of scalar selection."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    _expect(
        idx.size == 0 or (idx.min() >= 0 and idx.max() < x.value.size),
        f"take: index out of range for {x.shape}",
    )
    return _node("take", (x,), x.value.reshape(-1)[idx], indices=idx)


def relu(x: Var) -> Var:
    return _node("relu", (x,), np.maximum(x.value, 0.0))


def silu(x: Var) -> Var:
    s = 1.0 / (1.0 + np.exp(-x.value))
    return _node("silu", (x,), x.value * s, sig=s)


def sigmoid(x: Var) -> Var:
    return _node("sigmoid", (x,), 1.0 / (1.0 + np.exp(-x.value)))


def exp(x: Var) -> Var:
    return _node("exp", (x,), np.exp(x.value))


def log(x: Var) -> Var:
    return _node("log", (x,), np.log(x.value))


def absolute(x: Var) -> Var:
    return _node("abs", (x,), np.abs(x.value))


def softmax(x: Var, axis: int = -1) -> Var:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return _node("softmax", (x,), e / e.sum(axis=axis, keepdims=True), axis=axis)


def log_softmax(x: Var, axis: int = -1) -> Var:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _node("log_softmax", (x,), z - lse, axis=axis)


def dense(x: Var, w: Var, b: Var) -> Var:
    """x: (N, F), w: (O, F), b: (O,) -> (N, O)."""
    _expect(x.value.ndim == 2 and w.value.ndim == 2, "dense: x and w must be 2-D")
    _expect(
        x.shape[1] == w.shape[1] and b.shape == (w.shape[0],),
        f"dense: got x {x.shape}, w {w.shape}, b {b.shape}",
    )
    return _node("dense", (x, w, b), x.value @ w.value.T + b.value)


def conv2d(x: Var, w: Var, b: Var, stride: int = 1, padding: int = 0) -> Var:
    """x: (N, C, H, W), w: (O, C, KH, KW), b: (O,) -> (N, O, OH, OW)."""
    _expect(x.value.ndim == 4 and w.value.ndim == 4, "conv2d: x and w must be 4-D")
    _expect(
        x.shape[1] == w.shape[1] and b.shape == (w.shape[0],),
        f"conv2d: got x {x.shape}, w {w.shape}, b {b.shape}",
    )
    try:
        out = kernels.conv2d_forward(x.value, w.value, b.value, stride, padding)
    except ValueError as err:
        raise ShapeError(f"conv2d: {err}") from err
    return _node("conv2d", (x, w, b), out, stride=stride, padding=padding)


def max_pool(x: Var, k: int = 2, stride: int | None = None) -> Var:
    _expect(x.value.ndim == 4, "max_pool: x must be 4-D")
    stride = k if stride is None else stride
    try:
        out, flat = kernels.maxpool_forward(x.value, k, stride)
    except ValueError as err:
        raise ShapeError(f"max_pool: {err}") from err
    return _node("max_pool", (x,), out, flat=flat, k=k, stride=stride)


# --------------------------------------------------------------------------
# backward rules
# --------------------------------------------------------------------------


def _bw_add(node, g, needs):
    return g, g


def _bw_sub(node, g, needs):
    return g, -g


def _bw_mul(node, g, needs):
    a, b = node.inputs
    return g * b.value, g * a.value


def _bw_scale(node, g, needs):
    return (g * node.ctx["c"],)


def _bw_bias_add(node, g, needs):
    axis = node.ctx["axis"]
    axes = tuple(i for i in range(g.ndim) if i != axis)
    return g, g.sum(axis=axes)


def _bw_sum_all(node, g, needs):
    (x,) = node.inputs
    return (np.broadcast_to(g, x.shape),)


def _bw_sum_axis(node, g, needs):
    (x,) = node.inputs
    axis = node.ctx["axis"]
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)


def _bw_reshape(node, g, needs):
    (x,) = node.inputs
    return (g.reshape(x.shape),)


def _bw_transpose(node, g, needs):
    axes = node.ctx["axes"]
    inv = np.argsort(axes)
    return (g.transpose(inv),)


def _bw_take(node, g, needs):
    (x,) = node.inputs
    gx = np.zeros(x.value.size)
    np.add.at(gx, node.ctx["indices"], g.reshape(-1))
    return (gx.reshape(x.shape),)


def _bw_relu(node, g, needs):
    (x,) = node.inputs
    return (g * (x.value > 0.0),)


def guided_relu_rule(node, g, needs):
    """Guided-backprop gate: pass gradient only where the forward input was
    positive AND the upstream gradient is positive."""
    (x,) = node.inputs
    return (g * (x.value > 0.0) * (g > 0.0),)


def _bw_silu(node, g, needs):
    (x,) = node.inputs
    s = node.ctx["sig"]
    return (g * s * (1.0 + x.value * (1.0 - s)),)


def _bw_sigmoid(node, g, needs):
    y = node.value
    return (g * y * (1.0 - y),)


def _bw_exp(node, g, needs):
    return (g * node.value,)


def _bw_log(node, g, needs):
    (x,) = node.inputs
    return (g / x.value,)


def _bw_abs(node, g, needs):
    (x,) = node.inputs
    return (g * np.sign(x.value),)


def _bw_softmax(node, g, needs):
    axis = node.ctx["axis"]
    y = node.value
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _bw_log_softmax(node, g, needs):
    axis = node.ctx["axis"]
    return (g - np.exp(node.value) * g.sum(axis=axis, keepdims=True),)


def _bw_dense(node, g, needs):
    x, w, _ = node.inputs
    gx = g @ w.value if needs[0] else None
    gw = g.T @ x.value if needs[1] else None
    gb = g.sum(axis=0) if needs[2] else None
    return gx, gw, gb


def _bw_conv2d(node, g, needs):
    x, w, _ = node.inputs
    stride, padding = node.ctx["stride"], node.ctx["padding"]
    gx = gw = gb = None
    if needs[0]:
        gx = kernels.conv2d_backward_input(w.value, g, x.shape, stride, padding)
    if needs[1] or needs[2]:
        gw, gb = kernels.conv2d_backward_weights(
            x.value, g, w.value.shape[2:], stride, padding
        )
    return gx, gw, gb


def _bw_max_pool(node, g, needs):
    (x,) = node.inputs
    return (kernels.maxpool_backward(node.ctx["flat"], g, x.shape[2], x.shape[3]),)


DEFAULT_RULES: dict[str, BackwardRule] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "scale": _bw_scale,
    "bias_add": _bw_bias_add,
    "sum_all": _bw_sum_all,
    "sum_axis": _bw_sum_axis,
    "reshape": _bw_reshape,
    "transpose": _bw_transpose,
    "take": _bw_take,
    "relu": _bw_relu,
    "silu": _bw_silu,
    "sigmoid": _bw_sigmoid,
    "exp": _bw_exp,
    "log": _bw_log,
    "abs": _bw_abs,
    "softmax": _bw_softmax,
    "log_softmax": _bw_log_softmax,
    "dense": _bw_dense,
    "conv2d": _bw_conv2d,
    "max_pool": _bw_max_pool,
}


# --------------------------------------------------------------------------
# records and backward replay
# --------------------------------------------------------------------------


class ComputationRecord:
    """Topologically ordered trace of all ops reachable from one output."""

    def __init__(self, output: Var):
        self.output = output
        self.nodes = self._topo(output)

    @staticmethod
    def _topo(output: Var) -> list[Var]:
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in node.inputs:
                if id(inp) not in seen:
                    stack.append((inp, False))
        return order

    def leaves(self) -> list[Var]:
        return [n for n in self.nodes if n.op is None and n.requires_grad]


def backward(
    record: ComputationRecord,
    seed: "np.ndarray | float | None" = None,
    hooks: "BackwardHookSet | None" = None,
) -> dict[Var, np.ndarray]:
    """Replay the record in reverse, returning one gradient per grad leaf.

    The seed defaults to the scalar 1 for scalar outputs and must match the
    recorded output shape otherwise.
    """
    out = record.output
    if seed is None:
        if out.value.shape != ():
            raise ShapeError(
                f"backward: non-scalar output {out.shape} needs an explicit seed"
            )
        seed_arr = np.asarray(1.0)
    else:
        seed_arr = _f8(seed)
        if seed_arr.shape != out.value.shape:
            raise ShapeError(
                f"backward: seed shape {seed_arr.shape} != output shape {out.shape}"
            )
    hooks = hooks or {}
    # does this node's subgraph contain any gradient leaf?
    need: dict[int, bool] = {}
    for node in record.nodes:
        if node.op is None:
            need[id(node)] = node.requires_grad
        else:
            need[id(node)] = any(need[id(inp)] for inp in node.inputs)
    grads: dict[int, np.ndarray] = {id(out): seed_arr}
    for node in reversed(record.nodes):
        if node.op is None or not need[id(node)]:
            continue
        g = grads.get(id(node))
        if g is None:
            continue
        rule = hooks.get(node.op)
        if rule is None:
            rule = DEFAULT_RULES[node.op]
        needs = tuple(need[id(inp)] for inp in node.inputs)
        input_grads = rule(node, g, needs)
        for inp, want, ig in zip(node.inputs, needs, input_grads):
            if ig is None or not want:
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = ig if acc is None else acc + ig
    return {
        n: grads[id(n)]
        for n in record.nodes
        if n.op is None and n.requires_grad and id(n) in grads
    }


def input_gradient(
    target: Var,
    wrt: Var,
    hooks: "BackwardHookSet | None" = None,
) -> np.ndarray:
    """Gradient of a scalar target with respect to one leaf (zeros if unused)."""
    grads = backward(ComputationRecord(target), hooks=hooks)
    g = grads.get(wrt)
    if g is None:
        return np.zeros(wrt.shape)
    return g
