"""Dense 2-D tensor algebra with reverse-mode automatic differentiation.

A :class:`Graph` is a tape: building it records primitive ops in order (which
is therefore a valid topological order) and infers shapes, but computes
nothing. :func:`forward` binds named inputs and evaluates every node;
:func:`backward` then walks the tape in reverse, accumulating adjoints.

    g = Graph()
    x = g.param("x", (3,))
    g.set_output((x * x).sum())
    forward(g, {"x": [1.0, 2.0, 3.0]})
    backward(g)["x"]        # Tensor([2., 4., 6.])
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ADError",
    "ShapeError",
    "NumericInstabilityError",
    "GraphStateError",
    "Tensor",
    "Graph",
    "Var",
    "forward",
    "backward",
    "finite_difference_check",
    "FDReport",
]


class ADError(Exception):
    pass


class ShapeError(ADError, ValueError):
    pass


class NumericInstabilityError(ADError, ArithmeticError):
    pass


class GraphStateError(ADError, RuntimeError):
    pass


class Tensor:
    """Immutable-by-convention float64 array of rank 0, 1 or 2."""

    __slots__ = ("values", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are at most 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericInstabilityError("tensor created with NaN/Inf values")
        self.values = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def tolist(self):
        return self.values.tolist()

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"Tensor({self.values.tolist()!r})"


# --------------------------------------------------------------------------
# op table: name -> (forward, backward). backward returns one adjoint per
# parent (None when that parent needs none).


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(shape) == 1:
        return g.reshape(-1, shape[0]).sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


def _finite(x: np.ndarray) -> bool:
    # NaN/Inf propagate through the sum; the full scan only runs if the sum overflowed or is bad
    return math.isfinite(np.add.reduce(x, axis=None)) or bool(np.isfinite(x).all())


def _reduce_backward(g, x, axis):
    return np.broadcast_to(g, x.shape).copy()


def _mean_count(shape, axis):
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    return shape[axis]


_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (
        lambda v, a: v[0] + v[1],
        lambda g, v, out, a: (g, g),
    ),
    "sub": (
        lambda v, a: v[0] - v[1],
        lambda g, v, out, a: (g, -g),
    ),
    "mul": (
        lambda v, a: v[0] * v[1],
        lambda g, v, out, a: (g * v[1], g * v[0]),
    ),
    "scale": (
        lambda v, a: v[0] * a["c"],
        lambda g, v, out, a: (g * a["c"],),
    ),
    "shift": (
        lambda v, a: v[0] + a["c"],
        lambda g, v, out, a: (g,),
    ),
    "matmul": (
        lambda v, a: v[0] @ v[1],
        lambda g, v, out, a: (g @ v[1].T, v[0].T @ g),
    ),
    "transpose": (
        lambda v, a: v[0].T.copy(),
        lambda g, v, out, a: (g.T.copy(),),
    ),
    "sum": (
        lambda v, a: np.asarray(np.add.reduce(v[0], axis=a["axis"], keepdims=a["axis"] is not None)),
        lambda g, v, out, a: (_reduce_backward(g, v[0], a["axis"]),),
    ),
    "mean": (
        lambda v, a: np.asarray(
            np.add.reduce(v[0], axis=a["axis"], keepdims=a["axis"] is not None)
            / _mean_count(v[0].shape, a["axis"])
        ),
        lambda g, v, out, a: (
            _reduce_backward(g, v[0], a["axis"]) / _mean_count(v[0].shape, a["axis"]),
        ),
    ),
    "relu": (
        lambda v, a: np.maximum(v[0], 0.0),
        lambda g, v, out, a: (g * (v[0] > 0.0),),
    ),
    "clamp_min": (
        lambda v, a: np.maximum(v[0], a["c"]),
        lambda g, v, out, a: (g * (v[0] > a["c"]),),
    ),
    "square": (
        lambda v, a: v[0] * v[0],
        lambda g, v, out, a: (2.0 * v[0] * g,),
    ),
    "sqrt_eps": (
        lambda v, a: np.sqrt(v[0] + a["eps"]),
        lambda g, v, out, a: (g * 0.5 / out,),
    ),
    "softplus": (
        lambda v, a: np.logaddexp(0.0, v[0]),
        lambda g, v, out, a: (g * (0.5 * (1.0 + np.tanh(0.5 * v[0]))),),
    ),
    "broadcast_to": (
        lambda v, a: np.broadcast_to(v[0], a["target"]).copy(),
        lambda g, v, out, a: (_unbroadcast(g, v[0].shape),),
    ),
    "concat_rows": (
        lambda v, a: np.concatenate(v, axis=0),
        lambda g, v, out, a: tuple(
            np.split(g, np.cumsum([x.shape[0] for x in v])[:-1], axis=0)
        ),
    ),
    "slice_rows": (
        lambda v, a: v[0][a["start"] : a["stop"]].copy(),
        lambda g, v, out, a: (_pad_rows(g, v[0].shape, a["start"]),),
    ),
    "take_rows": (
        lambda v, a: v[0][a["index"]],
        lambda g, v, out, a: (_scatter_rows(g, v[0].shape, a["index"]),),
    ),
}

# ops whose derivative jumps where the input equals a threshold
_KINK_OPS = {"relu": lambda a: 0.0, "clamp_min": lambda a: a["c"]}


def _scatter_rows(g, shape, index):
    full = np.zeros(shape)
    np.add.at(full, index, g)
    return full


def _pad_rows(g, shape, start):
    full = np.zeros(shape)
    full[start : start + g.shape[0]] = g
    return full


@dataclass
class _Node:
    index: int
    op: str
    parents: tuple[int, ...]
    shape: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str | None = None
    requires_grad: bool = False


class Var:
    """Handle on a graph node; supports arithmetic that records new nodes."""

    __slots__ = ("graph", "index")

    def __init__(self, graph: "Graph", index: int):
        self.graph = graph
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.graph.nodes[self.index].shape

    @property
    def value(self) -> np.ndarray:
        return self.graph.value(self)

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.graph.constant(np.broadcast_to(np.asarray(other, dtype=float), self.shape))

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.shift(self, float(other))
        return self.graph.add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.shift(self, -float(other))
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.shift(self.graph.scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, float(other))
        return self.graph.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    @property
    def T(self):
        return self.graph.transpose(self)

    def sum(self, axis=None):
        return self.graph.sum(self, axis)

    def mean(self, axis=None):
        return self.graph.mean(self, axis)

    def relu(self):
        return self.graph.relu(self)

    def square(self):
        return self.graph.square(self)

    def sqrt(self, eps: float):
        return self.graph.sqrt_eps(self, eps)

    def clamp_min(self, c: float):
        return self.graph.clamp_min(self, c)

    def softplus(self):
        return self.graph.softplus(self)

    def broadcast_to(self, shape):
        return self.graph.broadcast_to(self, shape)

    def take_rows(self, index):
        return self.graph.take_rows(self, index)

    def rows(self, start: int, stop: int):
        return self.graph.slice_rows(self, start, stop)

    def __repr__(self):
        node = self.graph.nodes[self.index]
        return f"Var(#{self.index} {node.op} shape={node.shape})"


class Graph:
    """Recorded sequence of primitive ops.

    Build methods validate shapes immediately and raise :class:`ShapeError`
    naming the op and the offending shapes.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.output: int | None = None
        self._inputs: dict[str, int] = {}
        self._values: list[np.ndarray] | None = None

    # -- leaves ------------------------------------------------------------

    def input(self, name: str, shape: Sequence[int], requires_grad: bool = False) -> Var:
        if name in self._inputs:
            raise ValueError(f"duplicate input name {name!r}")
        shape = tuple(int(s) for s in shape)
        if len(shape) > 2:
            raise ShapeError(f"input {name!r}: at most 2-D, got {shape}")
        v = self._record("input", (), shape, name=name, requires_grad=requires_grad)
        self._inputs[name] = v.index
        return v

    def param(self, name: str, shape: Sequence[int]) -> Var:
        return self.input(name, shape, requires_grad=True)

    def constant(self, value) -> Var:
        arr = Tensor(value).values
        arr.setflags(write=False)
        return self._record("const", (), arr.shape, value=arr)

    @property
    def input_names(self) -> list[str]:
        return list(self._inputs)

    def grad_names(self) -> list[str]:
        return [n for n, i in self._inputs.items() if self.nodes[i].requires_grad]

    # -- ops ---------------------------------------------------------------

    def _record(self, op, parents, shape, name=None, requires_grad=None, **attrs) -> Var:
        if requires_grad is None:
            requires_grad = any(self.nodes[p].requires_grad for p in parents)
        node = _Node(len(self.nodes), op, tuple(parents), tuple(shape), attrs, name, requires_grad)
        self.nodes.append(node)
        self._values = None
        return Var(self, node.index)

    def _check(self, *vs: Var):
        for v in vs:
            if not isinstance(v, Var) or v.graph is not self:
                raise ValueError("operand does not belong to this graph")

    def _same_shape(self, op, a: Var, b: Var):
        self._check(a, b)
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        return self._record(op, (a.index, b.index), a.shape)

    def add(self, a, b):
        return self._same_shape("add", a, b)

    def sub(self, a, b):
        return self._same_shape("sub", a, b)

    def mul(self, a, b):
        return self._same_shape("mul", a, b)

    def scale(self, a, c: float):
        self._check(a)
        return self._record("scale", (a.index,), a.shape, c=float(c))

    def shift(self, a, c: float):
        self._check(a)
        return self._record("shift", (a.index,), a.shape, c=float(c))

    def matmul(self, a, b):
        self._check(a, b)
        if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        return self._record("matmul", (a.index, b.index), (a.shape[0], b.shape[1]))

    def transpose(self, a):
        self._check(a)
        if len(a.shape) != 2:
            raise ShapeError(f"transpose: expected 2-D, got {a.shape}")
        return self._record("transpose", (a.index,), a.shape[::-1])

    def _reduce(self, op, a, axis):
        self._check(a)
        if axis is None:
            shape = ()
        else:
            if len(a.shape) != 2 or axis not in (0, 1):
                raise ShapeError(f"{op}: axis={axis} needs a 2-D operand, got {a.shape}")
            shape = (1, a.shape[1]) if axis == 0 else (a.shape[0], 1)
        if op == "mean" and _mean_count(a.shape, axis) == 0:
            raise ShapeError(f"mean: empty operand {a.shape}")
        return self._record(op, (a.index,), shape, axis=axis)

    def sum(self, a, axis=None):
        return self._reduce("sum", a, axis)

    def mean(self, a, axis=None):
        return self._reduce("mean", a, axis)

    def relu(self, a):
        self._check(a)
        return self._record("relu", (a.index,), a.shape)

    def clamp_min(self, a, c: float):
        """max(a, c) elementwise; subgradient 0 at a == c."""
        self._check(a)
        return self._record("clamp_min", (a.index,), a.shape, c=float(c))

    def square(self, a):
        self._check(a)
        return self._record("square", (a.index,), a.shape)

    def sqrt_eps(self, a, eps: float):
        self._check(a)
        if not eps > 0:
            raise ValueError("sqrt_eps needs eps > 0")
        return self._record("sqrt_eps", (a.index,), a.shape, eps=float(eps))

    def softplus(self, a):
        self._check(a)
        return self._record("softplus", (a.index,), a.shape)

    def broadcast_to(self, a, shape):
        self._check(a)
        shape = tuple(int(s) for s in shape)
        src = a.shape
        ok = len(shape) == 2 and (
            src == ()
            or (len(src) == 2 and all(s in (1, t) for s, t in zip(src, shape)))
            or (len(src) == 1 and src[0] == shape[1])
        )
        if not ok and src != shape:
            raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}")
        return self._record("broadcast_to", (a.index,), shape, target=shape)

    def concat_rows(self, parts: Sequence[Var]):
        if not parts:
            raise ShapeError("concat_rows: no operands")
        self._check(*parts)
        cols = {p.shape[1] if len(p.shape) == 2 else None for p in parts}
        if len(cols) != 1 or None in cols:
            raise ShapeError(f"concat_rows: incompatible shapes {[p.shape for p in parts]}")
        n = sum(p.shape[0] for p in parts)
        return self._record("concat_rows", tuple(p.index for p in parts), (n, cols.pop()))

    def slice_rows(self, a, start: int, stop: int):
        self._check(a)
        if len(a.shape) != 2 or not 0 <= start < stop <= a.shape[0]:
            raise ShapeError(f"slice_rows: rows [{start}:{stop}] out of range for {a.shape}")
        return self._record("slice_rows", (a.index,), (stop - start, a.shape[1]), start=start, stop=stop)

    def take_rows(self, a, index: Sequence[int]):
        """Gather rows by index (repeats allowed); adjoint scatter-adds."""
        self._check(a)
        idx = np.asarray(index, dtype=np.intp)
        if len(a.shape) != 2 or idx.ndim != 1 or idx.size == 0 or idx.min() < 0 or idx.max() >= a.shape[0]:
            raise ShapeError(f"take_rows: bad row index for operand {a.shape}")
        idx.setflags(write=False)
        return self._record("take_rows", (a.index,), (idx.size, a.shape[1]), index=idx)

    # -- evaluation --------------------------------------------------------

    def set_output(self, v: Var):
        self._check(v)
        self.output = v.index
        self._values = None

    def value(self, v: Var) -> np.ndarray:
        if self._values is None:
            raise GraphStateError("graph has not been evaluated; call forward first")
        return self._values[v.index]

    def forward(self, inputs: Mapping[str, object], output: Var | None = None) -> Tensor:
        if output is not None:
            self.set_output(output)
        if self.output is None:
            raise GraphStateError("graph has no output; call set_output first")
        missing = set(self._inputs) - set(inputs)
        if missing:
            raise GraphStateError(f"unbound inputs: {sorted(missing)}")
        values = self._run(inputs)
        self._values = values
        return Tensor(values[self.output])

    def _run(self, inputs, cache: list[np.ndarray] | None = None, live: list[bool] | None = None):
        """Evaluate every node; with ``live`` given, dead nodes reuse ``cache``."""
        # non-finite results are reported by the check below, not as numpy warnings
        with np.errstate(all="ignore"):
            return self._run_nodes(inputs, cache, live)

    def _run_nodes(self, inputs, cache, live):
        values: list[np.ndarray] = []
        for node in self.nodes:
            if live is not None and not live[node.index]:
                values.append(cache[node.index])
                continue
            if node.op == "input":
                raw = inputs[node.name]
                arr = raw.values if isinstance(raw, Tensor) else np.asarray(raw, dtype=np.float64)
                if arr.shape != node.shape:
                    raise ShapeError(
                        f"input {node.name!r}: expected shape {node.shape}, got {arr.shape}"
                    )
                out = arr
            elif node.op == "const":
                # validated once at creation
                values.append(node.attrs["value"])
                continue
            else:
                fwd = _OPS[node.op][0]
                out = fwd([values[p] for p in node.parents], node.attrs)
            if not _finite(out):
                label = f"input {node.name!r}" if node.op == "input" else f"node #{node.index} ({node.op})"
                raise NumericInstabilityError(f"non-finite value produced at {label}")
            values.append(out)
        return values

    def _downstream(self, name: str) -> list[bool]:
        live = [False] * len(self.nodes)
        live[self._inputs[name]] = True
        for node in self.nodes:
            if any(live[p] for p in node.parents):
                live[node.index] = True
        return live

    def backward(self, seed=None) -> dict[str, Tensor]:
        if self._values is None:
            raise GraphStateError("backward called before forward")
        vals = self._values
        out_shape = self.nodes[self.output].shape
        if seed is None:
            seed_arr = np.ones(out_shape)
        else:
            seed_arr = seed.values if isinstance(seed, Tensor) else np.asarray(seed, dtype=np.float64)
            if seed_arr.shape != out_shape:
                raise ShapeError(f"seed shape {seed_arr.shape} != output shape {out_shape}")
        adj: list[np.ndarray | None] = [None] * len(self.nodes)
        adj[self.output] = seed_arr
        for node in reversed(self.nodes[: self.output + 1]):
            g = adj[node.index]
            if g is None or not node.requires_grad or not node.parents:
                continue
            bwd = _OPS[node.op][1]
            pgrads = bwd(g, [vals[p] for p in node.parents], vals[node.index], node.attrs)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not self.nodes[p].requires_grad:
                    continue
                adj[p] = pg if adj[p] is None else adj[p] + pg
        grads = {}
        for name, idx in self._inputs.items():
            if not self.nodes[idx].requires_grad:
                continue
            g = adj[idx]
            g = np.zeros(self.nodes[idx].shape) if g is None else np.asarray(g, dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise NumericInstabilityError(f"non-finite gradient for input {name!r}")
            grads[name] = Tensor(g)
        return grads

    def kink_signature(self) -> list[np.ndarray]:
        """Sign pattern of (input - threshold) at every kinked op, from the last forward."""
        if self._values is None:
            raise GraphStateError("graph has not been evaluated; call forward first")
        sig = []
        for node in self.nodes:
            if node.op in _KINK_OPS:
                x = self._values[node.parents[0]]
                sig.append(np.sign(x - _KINK_OPS[node.op](node.attrs)))
        return sig


def forward(graph: Graph, inputs: Mapping[str, object]) -> Tensor:
    return graph.forward(inputs)


def backward(graph: Graph, seed=None) -> dict[str, Tensor]:
    return graph.backward(seed)


@dataclass
class FDReport:
    max_rel_error: dict[str, float]
    excluded: dict[str, list[tuple[int, ...]]]
    tolerance: float
    step: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def _rel_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def finite_difference_check(
    graph: Graph,
    inputs: Mapping[str, object],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    names: Iterable[str] | None = None,
    floor: float = 1e-6,
) -> FDReport:
    """Compare analytic gradients with central differences for every element.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    gradients that are zero in exact arithmetic from dividing roundoff by
    roundoff. An element whose +/- step crosses (or sits on) the threshold of
    a relu/clamp_min node is non-differentiable there and is reported in
    ``excluded`` instead of compared.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: (v.values if isinstance(v, Tensor) else np.asarray(v, dtype=float)).copy()
            for k, v in inputs.items()}
    out = graph.forward(base)
    if out.shape != ():
        raise ShapeError(f"finite_difference_check needs a scalar output, got {out.shape}")
    base_kinks = graph.kink_signature()
    analytic = graph.backward()
    names = list(names) if names is not None else graph.grad_names()

    def same_side(sig):
        return all(np.array_equal(s, b) for s, b in zip(sig, base_kinks))

    max_err: dict[str, float] = {}
    excluded: dict[str, list] = {}
    # only nodes downstream of the perturbed input are recomputed
    base_values = list(graph._values)

    def probe(live) -> float:
        graph._values = graph._run(base, base_values, live)
        return float(graph._values[graph.output])

    for name in names:
        live = graph._downstream(name)
        x = base[name]
        a_grad = analytic[name].values
        worst = 0.0
        skipped = []
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + step
            f_plus = probe(live)
            sig_plus = graph.kink_signature()
            x[idx] = orig - step
            f_minus = probe(live)
            sig_minus = graph.kink_signature()
            x[idx] = orig
            # a kink sitting exactly at threshold has sign 0 and never matches
            if not (same_side(sig_plus) and same_side(sig_minus)):
                skipped.append(idx)
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, _rel_error(float(a_grad[idx]), numeric, floor))
        max_err[name] = worst
        if skipped:
            excluded[name] = skipped
    graph.forward(base)
    return FDReport(max_err, excluded, tolerance, step)
