"""Reverse-mode automatic differentiation over numpy arrays.

A deliberately small, closed op set: exactly the operations the sequence
model and its losses need.  Forward evaluation builds a tape of ``Tensor``
nodes; ``Graph`` wraps a builder function with named inputs and parameters
and drives evaluate/backward.  Every op carries an analytic vector-Jacobian
product, verified against central finite differences in the test suite.

Float32 is the working precision; gradient checking re-evaluates in
float64 via :func:`finite_difference_gradient`.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Sequence

import numpy as np

OP_KINDS = (
    "matmul", "add", "mul", "concat", "slice", "reshape",
    "tanh", "sigmoid", "relu", "softmax-rows", "log", "exp", "power",
    "mean", "sum", "conv1d-same", "l2-normalize-rows", "masked-fill",
)

NORM_EPS = 1e-12  # rows with smaller L2 norm pass through l2-normalize unscaled


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    pass


class NonFiniteValue(AutodiffError):
    pass


class CalledBeforeForward(AutodiffError):
    pass


class NonScalarOutput(AutodiffError):
    pass


class Tensor:
    """One node of the computation tape: value, parents, and a VJP closure."""

    __slots__ = ("data", "grad", "parents", "vjp", "op", "name", "accumulate")

    def __init__(self, data, parents=(), vjp=None, op="input", name=None,
                 accumulate=None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.name = name
        # optional in-place alternative to vjp: accumulate(g) adds this node's
        # contribution directly into parents' .grad buffers
        self.accumulate = accumulate

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, name={self.name!r})"


def constant(x, name=None) -> Tensor:
    return Tensor(np.asarray(x), op="input", name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _fail_shape(op: str, msg: str, name=None):
    where = f" (node {name!r})" if name else ""
    raise ShapeMismatch(f"{op}{where}: {msg}")


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False, name=None) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        _fail_shape("matmul", f"operands must be at least rank 2, got {ad.shape} @ {bd.shape}", name)
    bk = bd.shape[-1] if transpose_b else bd.shape[-2]
    if ad.shape[-1] != bk:
        _fail_shape("matmul", f"inner dims differ: {ad.shape} @ {bd.shape} (transpose_b={transpose_b})", name)
    flat = ad.ndim == 3 and bd.ndim == 2  # single GEMM instead of a batched loop
    if flat:
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ (bd.T if transpose_b else bd)).reshape(ad.shape[:-1] + (-1,))
    else:
        bt = bd.swapaxes(-1, -2) if transpose_b else bd
        out = ad @ bt

    def vjp(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            a2 = ad.reshape(-1, ad.shape[-1])
            ga = (g2 @ (bd if transpose_b else bd.T)).reshape(ad.shape)
            gb = (g2.T @ a2) if transpose_b else (a2.T @ g2)
            return ga, gb
        if transpose_b:
            ga = g @ bd
            gb = g.swapaxes(-1, -2) @ ad
        else:
            ga = g @ bd.swapaxes(-1, -2)
            gb = ad.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor(out, (a, b), vjp, "matmul", name)


def add(a: Tensor, b, name=None) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        _fail_shape("add", f"cannot broadcast {a.data.shape} + {b.data.shape}", name)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out, (a, b), vjp, "add", name)


def mul(a: Tensor, b, name=None) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        _fail_shape("mul", f"cannot broadcast {a.data.shape} * {b.data.shape}", name)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor(out, (a, b), vjp, "mul", name)


def neg(a: Tensor, name=None) -> Tensor:
    return mul(a, np.asarray(-1.0, dtype=_as_tensor(a).data.dtype), name=name)


def sub(a: Tensor, b, name=None) -> Tensor:
    return add(a, neg(_as_tensor(b)), name=name)


def concat(tensors: Sequence[Tensor], axis: int = -1, name=None) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        _fail_shape("concat", f"incompatible shapes {[t.data.shape for t in ts]} along axis {axis}", name)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, ts, vjp, "concat", name)


def index(a: Tensor, key, name=None) -> Tensor:
    """Basic (non-fancy) slicing."""
    a = _as_tensor(a)
    out = a.data[key]
    shape = a.data.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        z[key] = g
        return (z,)

    def accumulate(g):
        # writes only the sliced region instead of materializing a full
        # zeros-shaped gradient per slice (the hot path in unrolled loops)
        if a.grad is None:
            a.grad = np.zeros(shape, dtype=g.dtype)
        elif a.grad.base is not None or not a.grad.flags.writeable:
            a.grad = a.grad.copy()  # never mutate a view handed out by another vjp
        a.grad[key] += g

    return Tensor(out, (a,), vjp, "slice", name, accumulate=accumulate)


def reshape(a: Tensor, newshape, name=None) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(newshape)
    except ValueError:
        _fail_shape("reshape", f"cannot reshape {a.data.shape} to {newshape}", name)
    shape = a.data.shape

    def vjp(g):
        return (g.reshape(shape),)

    return Tensor(out, (a,), vjp, "reshape", name)


def tanh(a: Tensor, name=None) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Tensor(out, (a,), vjp, "tanh", name)


def sigmoid(a: Tensor, name=None) -> Tensor:
    a = _as_tensor(a)
    # stable form: sigmoid(x) = (tanh(x/2) + 1) / 2
    x = a.data
    half = np.asarray(0.5, dtype=x.dtype)
    out = (np.tanh(half * x) + 1.0) * half
    out = out.astype(x.dtype, copy=False)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, (a,), vjp, "sigmoid", name)


def relu(a: Tensor, name=None) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)
    pos = a.data > 0

    def vjp(g):
        return (g * pos,)

    return Tensor(out, (a,), vjp, "relu", name)


def log(a: Tensor, name=None) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return Tensor(out, (a,), vjp, "log", name)


def exp(a: Tensor, name=None) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return Tensor(out, (a,), vjp, "exp", name)


def power(a: Tensor, p: float, name=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data ** p
    ad = a.data

    def vjp(g):
        return (g * p * ad ** (p - 1.0),)

    return Tensor(out, (a,), vjp, "power", name)


def tsum(a: Tensor, axis=None, keepdims=False, name=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(out, (a,), vjp, "sum", name)


def tmean(a: Tensor, axis=None, keepdims=False, name=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / count,)

    return Tensor(out, (a,), vjp, "mean", name)


def softmax_rows(a: Tensor, name=None) -> Tensor:
    """Softmax over the last axis, computed with row-max subtraction."""
    a = _as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor(out, (a,), vjp, "softmax-rows", name)


def l2_normalize_rows(a: Tensor, name=None) -> Tensor:
    """Scale each row (last axis) to unit L2 norm; near-zero rows pass through."""
    a = _as_tensor(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    safe = n >= NORM_EPS
    denom = np.where(safe, n, 1.0)
    out = x / denom

    def vjp(g):
        gdot = (g * x).sum(axis=-1, keepdims=True)
        gn = g / denom - x * (gdot / denom ** 3)
        return (np.where(safe, gn, g),)

    return Tensor(out, (a,), vjp, "l2-normalize-rows", name)


def masked_fill(a: Tensor, mask, value: float, name=None) -> Tensor:
    """Replace entries where ``mask`` is true with ``value`` (mask is constant)."""
    a = _as_tensor(a)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    out = np.where(m, np.asarray(value, dtype=a.data.dtype), a.data)

    def vjp(g):
        return (np.where(m, 0.0, g),)

    return Tensor(out, (a,), vjp, "masked-fill", name)


def conv1d_same(x: Tensor, w: Tensor, b=None, name=None) -> Tensor:
    """1-D convolution over the length axis with zero same-padding.

    ``x`` is ``(..., L, C_in)``; ``w`` is ``(K, C_in, C_out)``; optional bias
    ``(C_out,)``.  Padding is symmetric about the kernel center.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    xd, wd = x.data, w.data
    if wd.ndim != 3:
        _fail_shape("conv1d-same", f"kernel must be (K, C_in, C_out), got {wd.shape}", name)
    if xd.ndim < 2 or xd.shape[-1] != wd.shape[1]:
        _fail_shape("conv1d-same", f"input {xd.shape} incompatible with kernel {wd.shape}", name)
    K = wd.shape[0]
    L = xd.shape[-2]
    Cin, Cout = wd.shape[1], wd.shape[2]
    pl, pr = (K - 1) // 2, K // 2
    pad = [(0, 0)] * (xd.ndim - 2) + [(pl, pr), (0, 0)]
    xp = np.pad(xd, pad)
    # im2col: all kernel taps in one GEMM
    windows = np.lib.stride_tricks.sliding_window_view(xp, K, axis=-2)
    cols = np.ascontiguousarray(windows.swapaxes(-1, -2)).reshape(-1, K * Cin)
    wmat = wd.reshape(K * Cin, Cout)
    out = (cols @ wmat).reshape(xd.shape[:-1] + (Cout,))
    parents = [x, w]
    bt = None
    if b is not None:
        bt = _as_tensor(b)
        if bt.data.shape != (wd.shape[2],):
            _fail_shape("conv1d-same", f"bias {bt.data.shape} != ({wd.shape[2]},)", name)
        out = out + bt.data
        parents.append(bt)

    def vjp(g):
        gf = g.reshape(-1, Cout)
        gw = (cols.T @ gf).reshape(wd.shape)
        gcols = (gf @ wmat.T).reshape(g.shape[:-1] + (K, Cin))
        gxp = np.zeros_like(xp, dtype=g.dtype)
        for k in range(K):
            gxp[..., k:k + L, :] += gcols[..., k, :]
        gx = gxp[..., pl:pl + L, :]
        if bt is None:
            return gx, gw
        return gx, gw, gf.sum(axis=0)

    return Tensor(out, parents, vjp, "conv1d-same", name)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(roots: Sequence[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(r, False) for r in roots]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward_from(output: Tensor, seed=None) -> None:
    """Accumulate gradients into ``.grad`` of every node reachable from output."""
    order = _topo_order([output])
    for node in order:
        node.grad = None
    seed = np.ones_like(output.data) if seed is None else np.asarray(seed)
    if seed.shape != output.data.shape:
        _fail_shape("backward", f"seed shape {seed.shape} != output shape {output.data.shape}")
    output.grad = seed.astype(output.data.dtype, copy=False)
    for node in reversed(order):
        if node.grad is None or node.vjp is None:
            continue
        if node.accumulate is not None:
            node.accumulate(node.grad)
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


# ---------------------------------------------------------------------------
# parameter store and graph


class ParameterStore:
    """Named, ordered parameter arrays shared by model and optimizer."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self._tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        if tensors:
            for k, v in tensors.items():
                self[k] = v

    def __setitem__(self, name: str, value):
        self._tensors[name] = np.asarray(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self._tensors.items()})

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore({k: v.astype(dtype) for k, v in self._tensors.items()})


class Graph:
    """A builder function plus parameters, evaluated as named inputs -> named outputs.

    ``build(inputs, params)`` receives dicts of Tensors and returns a dict of
    Tensors.  Construction is cheap; ``evaluate`` runs the forward pass and
    caches the tape for ``backward``.
    """

    def __init__(self, build: Callable, params: ParameterStore | dict | None = None):
        self.build = build
        if params is None:
            params = ParameterStore()
        elif isinstance(params, dict):
            params = ParameterStore(params)
        self.params = params
        self._outputs: dict[str, Tensor] | None = None
        self._param_nodes: dict[str, Tensor] | None = None

    def evaluate(self, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        pnodes = {k: Tensor(v, op="param", name=k) for k, v in self.params.items()}
        inodes = {k: constant(v, name=k) for k, v in inputs.items()}
        outs = self.build(inodes, pnodes)
        for out_name, t in outs.items():
            if not np.all(np.isfinite(t.data)):
                bad = self._first_non_finite(list(outs.values()))
                raise NonFiniteValue(
                    f"output {out_name!r} is non-finite; first offending node: "
                    f"op {bad.op!r} (name={bad.name!r})")
        self._outputs = outs
        self._param_nodes = pnodes
        return {k: t.data for k, t in outs.items()}

    @staticmethod
    def _first_non_finite(roots: list[Tensor]) -> Tensor:
        for node in _topo_order(roots):
            if not np.all(np.isfinite(node.data)):
                return node
        return roots[0]

    def _pick_output(self, output: str | None) -> Tensor:
        if self._outputs is None:
            raise CalledBeforeForward("backward called before evaluate")
        if output is None:
            if len(self._outputs) != 1:
                raise AutodiffError(
                    f"graph has outputs {sorted(self._outputs)}; pass output=...")
            return next(iter(self._outputs.values()))
        return self._outputs[output]

    def backward(self, seed=None, output: str | None = None) -> dict[str, np.ndarray]:
        """Gradient of the (seeded) output w.r.t. every parameter tensor."""
        out = self._pick_output(output)
        backward_from(out, seed)
        assert self._param_nodes is not None
        return {
            k: (n.grad if n.grad is not None else np.zeros_like(n.data))
            for k, n in self._param_nodes.items()
        }

    def input_gradients(self, inputs: dict[str, np.ndarray], seed=None,
                        output: str | None = None) -> dict[str, np.ndarray]:
        """Evaluate then backprop to the named inputs (for input-side checks)."""
        pnodes = {k: Tensor(v, op="param", name=k) for k, v in self.params.items()}
        inodes = {k: constant(v, name=k) for k, v in inputs.items()}
        outs = self.build(inodes, pnodes)
        self._outputs = outs
        self._param_nodes = pnodes
        out = self._pick_output(output)
        backward_from(out, seed)
        return {
            k: (n.grad if n.grad is not None else np.zeros_like(n.data))
            for k, n in inodes.items()
        }


def finite_difference_gradient(graph: Graph, inputs: dict[str, np.ndarray],
                               parameter_name: str, step: float = 1e-5,
                               output: str | None = None,
                               elements: Sequence[tuple] | None = None) -> np.ndarray:
    """Central-difference gradient of a scalar-output graph, in 64-bit.

    Per element the step is ``step * max(1, |theta|)``.  ``elements`` limits
    the check to a subset of flat indices (full gradient when omitted).
    """
    params64 = {k: v.astype(np.float64) for k, v in graph.params.items()}
    if parameter_name not in params64:
        raise KeyError(parameter_name)
    inputs64 = {k: np.asarray(v).astype(np.float64) for k, v in inputs.items()}

    def evaluate_scalar() -> float:
        pnodes = {k: Tensor(v, op="param", name=k) for k, v in params64.items()}
        inodes = {k: constant(v, name=k) for k, v in inputs64.items()}
        outs = graph.build(inodes, pnodes)
        if output is None:
            if len(outs) != 1:
                raise NonScalarOutput(f"graph has outputs {sorted(outs)}; pass output=...")
            t = next(iter(outs.values()))
        else:
            t = outs[output]
        if t.data.size != 1:
            raise NonScalarOutput(f"output has shape {t.data.shape}, expected scalar")
        return float(t.data.reshape(()))

    theta = params64[parameter_name]
    grad = np.zeros_like(theta)
    if elements is None:
        idxs = list(np.ndindex(theta.shape)) if theta.shape else [()]
    else:
        idxs = [tuple(e) for e in elements]
    for idx in idxs:
        orig = theta[idx]
        h = step * max(1.0, abs(orig))
        theta[idx] = orig + h
        fp = evaluate_scalar()
        theta[idx] = orig - h
        fm = evaluate_scalar()
        theta[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad
