"""Static computation graphs with reverse-mode differentiation.

A CompGraph is a frozen DAG over a fixed operator set: affine maps, 2-D
convolution, rectifier, channel softmax, log, cross-entropy with integer
labels, elementwise add/mul/scale, axis sums, and static slicing. Every
named leaf (model parameters included) is an input bound at call time, so
graphs stay immutable and forward/backward are reentrant.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import Tensor

LOG_FLOOR = 1e-12


class GraphError(ValueError):
    """Malformed graph construction or execution request."""


class ShapeError(GraphError):
    """Operand shapes violate an operator's shape rule."""


class DetachedInputWarning(UserWarning):
    """Requested gradient for an input the output does not depend on."""


@dataclass(frozen=True)
class Node:
    op: str
    args: tuple[int, ...]
    attrs: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CompGraph:
    """Immutable operator DAG. Node args always point at earlier nodes,
    so node order is a topological order."""

    nodes: tuple[Node, ...]
    shapes: tuple[tuple[int, ...], ...]
    inputs: dict  # name -> node id
    outputs: dict  # name -> node id

    @property
    def input_shapes(self) -> dict:
        return {name: self.shapes[i] for name, i in self.inputs.items()}


def _slice_len(dim: int, spec) -> int:
    start, stop, step = spec
    return len(range(*slice(start, stop, step).indices(dim)))


class GraphBuilder:
    """Accumulates nodes with shape checking, then freezes into a CompGraph.

    Methods return integer node handles. Shape rules are enforced here so
    forward/backward never see inconsistent graphs; violations raise
    ShapeError naming the offending node.
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self._shapes: list[tuple[int, ...]] = []
        self._inputs: dict[str, int] = {}
        self._outputs: dict[str, int] = {}

    def _add(self, op: str, args: tuple[int, ...], shape, **attrs) -> int:
        for a in args:
            if not (0 <= a < len(self._nodes)):
                raise GraphError(f"node {len(self._nodes)} ({op}): unknown operand {a}")
        self._nodes.append(Node(op, args, attrs))
        self._shapes.append(tuple(shape))
        return len(self._nodes) - 1

    def _fail(self, op: str, msg: str):
        raise ShapeError(f"node {len(self._nodes)} ({op}): {msg}")

    def shape_of(self, node: int) -> tuple[int, ...]:
        return self._shapes[node]

    def input(self, name: str, shape) -> int:
        if name in self._inputs:
            raise GraphError(f"duplicate input name {name!r}")
        shape = tuple(int(d) for d in shape)
        if any(d <= 0 for d in shape):
            self._fail("input", f"dimensions must be positive, got {shape}")
        i = self._add("input", (), shape, name=name)
        self._inputs[name] = i
        return i

    def affine(self, x: int, w: int, b: int) -> int:
        xs, ws, bs = self._shapes[x], self._shapes[w], self._shapes[b]
        if len(ws) != 2 or len(bs) != 1 or bs[0] != ws[1]:
            self._fail("affine", f"weight/bias shapes {ws}/{bs} inconsistent")
        if len(xs) not in (1, 2) or xs[-1] != ws[0]:
            self._fail("affine", f"input shape {xs} does not match weight {ws}")
        out = (ws[1],) if len(xs) == 1 else (xs[0], ws[1])
        return self._add("affine", (x, w, b), out)

    def conv2d(self, x: int, w: int, b: int, stride: int = 1, pad: int = 0) -> int:
        xs, ws, bs = self._shapes[x], self._shapes[w], self._shapes[b]
        if len(xs) != 3 or len(ws) != 4 or len(bs) != 1:
            self._fail("conv2d", f"ranks {xs}/{ws}/{bs}, expected HWC/khkwCF/F")
        kh, kw, cin, cout = ws
        if xs[2] != cin or bs[0] != cout:
            self._fail("conv2d", f"channels mismatch: x {xs}, w {ws}, b {bs}")
        oh = (xs[0] + 2 * pad - kh) // stride + 1
        ow = (xs[1] + 2 * pad - kw) // stride + 1
        if oh <= 0 or ow <= 0:
            self._fail("conv2d", f"kernel {ws[:2]} too large for input {xs[:2]} pad {pad}")
        return self._add("conv2d", (x, w, b), (oh, ow, cout), stride=stride, pad=pad)

    def relu(self, x: int) -> int:
        return self._add("relu", (x,), self._shapes[x])

    def softmax(self, x: int) -> int:
        if len(self._shapes[x]) < 1:
            self._fail("softmax", "needs at least one axis")
        return self._add("softmax", (x,), self._shapes[x])

    def log(self, x: int) -> int:
        return self._add("log", (x,), self._shapes[x])

    def cross_entropy(self, logits: int, labels: int, reduction: str = "mean") -> int:
        ls, ts = self._shapes[logits], self._shapes[labels]
        if reduction not in ("mean", "sum"):
            self._fail("cross_entropy", f"reduction {reduction!r} not in (mean, sum)")
        if len(ls) < 1 or ls[:-1] != ts:
            self._fail("cross_entropy", f"labels {ts} must match logits {ls} minus channels")
        if ls[-1] < 2:
            self._fail("cross_entropy", f"needs >= 2 classes, got {ls[-1]}")
        return self._add("cross_entropy", (logits, labels), (), reduction=reduction)

    def add(self, a: int, b: int) -> int:
        if self._shapes[a] != self._shapes[b]:
            self._fail("add", f"shapes {self._shapes[a]} vs {self._shapes[b]}")
        return self._add("add", (a, b), self._shapes[a])

    def mul(self, a: int, b: int) -> int:
        if self._shapes[a] != self._shapes[b]:
            self._fail("mul", f"shapes {self._shapes[a]} vs {self._shapes[b]}")
        return self._add("mul", (a, b), self._shapes[a])

    def scale(self, x: int, c: float) -> int:
        return self._add("scale", (x,), self._shapes[x], c=float(c))

    def reduce_sum(self, x: int, axis: int | None = None) -> int:
        xs = self._shapes[x]
        if axis is None:
            out = ()
        else:
            if not (-len(xs) <= axis < len(xs)):
                self._fail("reduce_sum", f"axis {axis} out of range for {xs}")
            axis = axis % len(xs)
            out = xs[:axis] + xs[axis + 1 :]
        return self._add("reduce_sum", (x,), out, axis=axis)

    def slice(self, x: int, spec) -> int:
        """Static slice; spec is one (start, stop, step) triple per axis,
        with None entries meaning the full axis."""
        xs = self._shapes[x]
        if len(spec) != len(xs):
            self._fail("slice", f"spec covers {len(spec)} axes, input has {len(xs)}")
        norm = tuple((0, d, 1) if s is None else tuple(s) for s, d in zip(spec, xs))
        out = tuple(_slice_len(d, s) for d, s in zip(xs, norm))
        if any(d == 0 for d in out):
            self._fail("slice", f"empty result {out} from spec {spec}")
        return self._add("slice", (x,), out, spec=norm)

    def output(self, name: str, node: int) -> None:
        if name in self._outputs:
            raise GraphError(f"duplicate output name {name!r}")
        if not (0 <= node < len(self._nodes)):
            raise GraphError(f"output {name!r}: unknown node {node}")
        self._outputs[name] = node

    def build(self) -> CompGraph:
        if not self._outputs:
            raise GraphError("graph has no outputs")
        return CompGraph(
            nodes=tuple(self._nodes),
            shapes=tuple(self._shapes),
            inputs=dict(self._inputs),
            outputs=dict(self._outputs),
        )


def _check_bindings(graph: CompGraph, bindings: Mapping[str, Tensor]) -> dict:
    arrays = {}
    for name, i in graph.inputs.items():
        if name not in bindings:
            raise GraphError(f"input {name!r} is not bound")
        t = bindings[name]
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        if arr.shape != graph.shapes[i]:
            raise ShapeError(
                f"node {i} (input {name!r}): bound shape {arr.shape}, "
                f"declared {graph.shapes[i]}"
            )
        arrays[name] = arr
    extra = set(bindings) - set(graph.inputs)
    if extra:
        raise GraphError(f"unknown inputs bound: {sorted(extra)}")
    return arrays


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _int_labels(arr: np.ndarray, k: int, node_id: int) -> np.ndarray:
    lab = np.rint(arr)
    if not np.array_equal(lab, arr):
        raise GraphError(f"node {node_id} (cross_entropy): labels must be integers")
    if lab.min() < 0 or lab.max() >= k:
        raise GraphError(
            f"node {node_id} (cross_entropy): labels outside [0, {k})"
        )
    return lab.astype(np.int64)


def _eval_node(node: Node, i: int, vals: list, arrays: dict) -> np.ndarray:
    a = node.attrs
    if node.op == "input":
        return arrays[a["name"]]
    x = vals[node.args[0]]
    if node.op == "affine":
        w, b = vals[node.args[1]], vals[node.args[2]]
        return x @ w + b
    if node.op == "conv2d":
        w, b = vals[node.args[1]], vals[node.args[2]]
        return _conv2d_forward(x, w, b, a["stride"], a["pad"])[0]
    if node.op == "relu":
        return np.maximum(x, 0.0)
    if node.op == "softmax":
        return _softmax(x)
    if node.op == "log":
        return np.log(np.maximum(x, LOG_FLOOR))
    if node.op == "cross_entropy":
        logits = x
        labels = _int_labels(vals[node.args[1]], logits.shape[-1], i)
        p = _softmax(logits)
        py = np.take_along_axis(p, labels[..., None], axis=-1)[..., 0]
        nll = -np.log(np.maximum(py, LOG_FLOOR))
        total = nll.sum()
        if a["reduction"] == "mean":
            total /= max(nll.size, 1)
        return np.asarray(total)
    if node.op == "add":
        return x + vals[node.args[1]]
    if node.op == "mul":
        return x * vals[node.args[1]]
    if node.op == "scale":
        return a["c"] * x
    if node.op == "reduce_sum":
        return np.asarray(x.sum(axis=a["axis"]))
    if node.op == "slice":
        return x[tuple(slice(*s) for s in a["spec"])]
    raise GraphError(f"node {i}: unknown op {node.op!r}")


def _conv2d_forward(x, w, b, stride, pad):
    kh, kw, cin, cout = w.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    H, W, _ = xp.shape
    oh = (H - kh) // stride + 1
    ow = (W - kw) // stride + 1
    rs, cs, chs = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(oh, ow, kh, kw, cin),
        strides=(stride * rs, stride * cs, rs, cs, chs),
        writeable=False,
    )
    cols = windows.reshape(oh * ow, kh * kw * cin)
    y = cols @ w.reshape(kh * kw * cin, cout) + b
    return y.reshape(oh, ow, cout), cols


def _run_forward(graph: CompGraph, arrays: dict) -> list:
    vals: list = [None] * len(graph.nodes)
    for i, node in enumerate(graph.nodes):
        vals[i] = _eval_node(node, i, vals, arrays)
    return vals


def forward(graph: CompGraph, bindings: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Evaluate all outputs for the given input bindings.

    Deterministic: identical bindings yield bit-identical outputs. Raises
    GraphError/ShapeError on unbound inputs or inconsistent shapes.
    """
    arrays = _check_bindings(graph, bindings)
    vals = _run_forward(graph, arrays)
    return {name: Tensor(vals[i]) for name, i in graph.outputs.items()}


def _reachable(graph: CompGraph, root: int) -> set[int]:
    seen = set()
    stack = [root]
    while stack:
        i = stack.pop()
        if i in seen:
            continue
        seen.add(i)
        stack.extend(graph.nodes[i].args)
    return seen


def _accumulate(adj: list, i: int, g: np.ndarray) -> None:
    if adj[i] is None:
        adj[i] = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=float)
    else:
        adj[i] = adj[i] + g


def _backprop_node(node: Node, i: int, g, vals: list, adj: list) -> None:
    a = node.attrs
    if node.op == "input":
        return
    if node.op == "affine":
        x, w = vals[node.args[0]], vals[node.args[1]]
        _accumulate(adj, node.args[0], g @ w.T)
        if x.ndim == 1:
            _accumulate(adj, node.args[1], np.outer(x, g))
            _accumulate(adj, node.args[2], g)
        else:
            _accumulate(adj, node.args[1], x.T @ g)
            _accumulate(adj, node.args[2], g.sum(axis=0))
        return
    if node.op == "conv2d":
        x, w = vals[node.args[0]], vals[node.args[1]]
        dx, dw, db = _conv2d_backward(x, w, g, a["stride"], a["pad"])
        _accumulate(adj, node.args[0], dx)
        _accumulate(adj, node.args[1], dw)
        _accumulate(adj, node.args[2], db)
        return
    if node.op == "relu":
        x = vals[node.args[0]]
        _accumulate(adj, node.args[0], g * (x > 0.0))
        return
    if node.op == "softmax":
        y = vals[i]
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(adj, node.args[0], y * (g - inner))
        return
    if node.op == "log":
        x = vals[node.args[0]]
        _accumulate(adj, node.args[0], np.where(x > LOG_FLOOR, g / np.maximum(x, LOG_FLOOR), 0.0))
        return
    if node.op == "cross_entropy":
        logits = vals[node.args[0]]
        labels = _int_labels(vals[node.args[1]], logits.shape[-1], i)
        p = _softmax(logits)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        py = np.take_along_axis(p, labels[..., None], axis=-1)[..., 0]
        live = (py > LOG_FLOOR)[..., None]  # floored positions give zero gradient
        dlogits = (p - onehot) * live
        if a["reduction"] == "mean":
            dlogits /= max(labels.size, 1)
        _accumulate(adj, node.args[0], float(g) * dlogits)
        return
    if node.op == "add":
        _accumulate(adj, node.args[0], g)
        _accumulate(adj, node.args[1], g)
        return
    if node.op == "mul":
        _accumulate(adj, node.args[0], g * vals[node.args[1]])
        _accumulate(adj, node.args[1], g * vals[node.args[0]])
        return
    if node.op == "scale":
        _accumulate(adj, node.args[0], a["c"] * g)
        return
    if node.op == "reduce_sum":
        x = vals[node.args[0]]
        if a["axis"] is None:
            _accumulate(adj, node.args[0], np.broadcast_to(g, x.shape))
        else:
            _accumulate(adj, node.args[0], np.broadcast_to(np.expand_dims(g, a["axis"]), x.shape))
        return
    if node.op == "slice":
        x = vals[node.args[0]]
        dx = np.zeros_like(x)
        dx[tuple(slice(*s) for s in a["spec"])] = g
        _accumulate(adj, node.args[0], dx)
        return
    raise GraphError(f"node {i}: unknown op {node.op!r}")


def _conv2d_backward(x, w, g, stride, pad):
    kh, kw, cin, cout = w.shape
    _, cols = _conv2d_forward(x, w, np.zeros(cout), stride, pad)
    oh, ow, _ = g.shape
    g2 = g.reshape(oh * ow, cout)
    dw = (cols.T @ g2).reshape(w.shape)
    db = g2.sum(axis=0)
    dcols = (g2 @ w.reshape(kh * kw * cin, cout).T).reshape(oh, ow, kh, kw, cin)
    hp, wp = x.shape[0] + 2 * pad, x.shape[1] + 2 * pad
    dxp = np.zeros((hp, wp, cin))
    for ki in range(kh):
        for kj in range(kw):
            dxp[ki : ki + stride * oh : stride, kj : kj + stride * ow : stride, :] += dcols[:, :, ki, kj, :]
    dx = dxp[pad : hp - pad, pad : wp - pad, :] if pad else dxp
    return dx, dw, db


def gradients(
    graph: CompGraph,
    bindings: Mapping[str, Tensor],
    output: str,
    wrt: Sequence[str],
) -> tuple[float, dict[str, Tensor]]:
    """One reverse sweep: scalar output value plus gradients for each
    requested input name. Inputs the output does not depend on come back
    as zero tensors with a DetachedInputWarning."""
    if output not in graph.outputs:
        raise GraphError(f"unknown output {output!r}")
    out_id = graph.outputs[output]
    if graph.shapes[out_id] != ():
        raise GraphError(
            f"output {output!r} has shape {graph.shapes[out_id]}, backward needs a scalar"
        )
    for name in wrt:
        if name not in graph.inputs:
            raise GraphError(f"unknown input {name!r}")

    arrays = _check_bindings(graph, bindings)
    vals = _run_forward(graph, arrays)
    reach = _reachable(graph, out_id)

    adj: list = [None] * len(graph.nodes)
    adj[out_id] = np.asarray(1.0)
    for i in range(out_id, -1, -1):
        if adj[i] is None or i not in reach:
            continue
        _backprop_node(graph.nodes[i], i, adj[i], vals, adj)

    grads = {}
    for name in wrt:
        i = graph.inputs[name]
        if i not in reach:
            warnings.warn(
                f"input {name!r} does not reach output {output!r}; gradient is zero",
                DetachedInputWarning,
                stacklevel=2,
            )
            grads[name] = Tensor.zeros(graph.shapes[i])
        else:
            g = adj[i] if adj[i] is not None else np.zeros(graph.shapes[i])
            grads[name] = Tensor(np.asarray(g))
    return float(vals[out_id]), grads


def backward(graph: CompGraph, bindings: Mapping[str, Tensor], output: str, wrt: str) -> Tensor:
    """Gradient of a scalar output with respect to one named input."""
    _, grads = gradients(graph, bindings, output, [wrt])
    return grads[wrt]


def grad_check(
    graph: CompGraph,
    bindings: Mapping[str, Tensor],
    output: str,
    wrt: str,
    coords: Sequence[tuple[int, ...]],
    h: float,
) -> float:
    """Max relative error between analytic and central-difference gradients
    over the sampled coordinates of the `wrt` input."""
    if h <= 0:
        raise ValueError("h must be positive")
    base = bindings[wrt].data
    analytic = backward(graph, bindings, output, wrt).data

    def eval_at(arr: np.ndarray) -> float:
        moved = dict(bindings)
        moved[wrt] = Tensor(arr)
        return forward(graph, moved)[output].item()

    worst = 0.0
    for coord in coords:
        coord = tuple(coord)
        if len(coord) != base.ndim or any(
            not (0 <= c < d) for c, d in zip(coord, base.shape)
        ):
            raise ValueError(f"coordinate {coord} out of bounds for shape {base.shape}")
        plus = base.copy()
        plus[coord] += h
        minus = base.copy()
        minus[coord] -= h
        fd = (eval_at(plus) - eval_at(minus)) / (2.0 * h)
        an = float(analytic[coord])
        err = abs(an - fd) / max(abs(an), abs(fd), 1e-12)
        worst = max(worst, err)
    return worst
