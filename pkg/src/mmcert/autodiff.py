"""Dense-matrix reverse-mode differentiation.

A :class:`Tape` records primitive operations as they are evaluated.  Every
value is a 2-D ``float64`` array; vectors are ``1 x n`` rows and scalars are
``1 x 1``.  The recorded program can be replayed with new variable bindings
(:func:`forward`) and differentiated (:func:`backward`), which is what the
finite-difference checker (:func:`grad_check`) relies on.

The only broadcasting allowed is adding (or multiplying by) a ``1 x cols`` row
to every row of an ``n x cols`` matrix.  Anything else is a :class:`ShapeError`.

Example::

    tape = Tape()
    w = tape.var("w", [[3.0]])
    loss = w * w
    backward(tape)["w"]      # array([[6.]])
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Matrix = np.ndarray


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, OverflowError):
    pass


class UsageError(AutodiffError, RuntimeError):
    pass


def as_matrix(value, name: str = "value") -> Matrix:
    """Coerce scalars, vectors and matrices to a finite 2-D float64 array."""
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"{name}: expected at most 2 dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: non-finite entries")
    return arr


class Node:
    __slots__ = ("tape", "index", "op", "inputs", "attrs", "name", "value", "needs_grad")

    def __init__(self, tape, index, op, inputs, attrs, name, needs_grad):
        self.tape = tape
        self.index = index
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.name = name
        self.value = None
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def label(self) -> str:
        tag = f"'{self.name}'" if self.name else ""
        return f"node {self.index} <{self.op}{tag}>"

    def __repr__(self):
        return f"Node({self.label()}, shape={None if self.value is None else self.value.shape})"

    def _lift(self, other):
        return other if isinstance(other, Node) else self.tape.const(other)

    def __add__(self, other):
        return self.tape.add(self, self._lift(other))

    def __radd__(self, other):
        return self.tape.add(self._lift(other), self)

    def __sub__(self, other):
        return self.tape.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.sub(self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.scale(self, float(other))
        return self.tape.mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return self.tape.scale(self, 1.0 / float(other))
        return self.tape.div(self, self._lift(other))

    def __matmul__(self, other):
        return self.tape.matmul(self, self._lift(other))

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    @property
    def T(self):
        return self.tape.transpose(self)


# ---------------------------------------------------------------------------
# primitive forward rules: (input values, attrs, node) -> output value


def _fail(node, msg):
    raise ShapeError(f"{node.label()}: {msg}")


def _broadcastable(node, a, b):
    if a.shape == b.shape:
        return False
    if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return True
    _fail(node, f"incompatible shapes {a.shape} and {b.shape}")


def _f_matmul(v, at, node):
    a, b = v
    if a.shape[1] != b.shape[0]:
        _fail(node, f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _f_add(v, at, node):
    _broadcastable(node, *v)
    return v[0] + v[1]


def _f_sub(v, at, node):
    _broadcastable(node, *v)
    return v[0] - v[1]


def _f_mul(v, at, node):
    _broadcastable(node, *v)
    return v[0] * v[1]


def _f_div(v, at, node):
    if v[0].shape != v[1].shape:
        _fail(node, f"division needs equal shapes, got {v[0].shape} and {v[1].shape}")
    return v[0] / v[1]


def _f_dot(v, at, node):
    if v[0].shape != v[1].shape:
        _fail(node, f"dot needs equal shapes, got {v[0].shape} and {v[1].shape}")
    return np.array([[np.sum(v[0] * v[1])]])


def _f_row_select(v, at, node):
    rows = at["rows"]
    if rows.size and (rows.min() < 0 or rows.max() >= v[0].shape[0]):
        _fail(node, f"row index out of range for {v[0].shape}")
    return v[0][rows, :]


def _f_gather(v, at, node):
    rows, cols = at["rows"], at["cols"]
    a = v[0]
    if rows.size and (rows.max() >= a.shape[0] or cols.max() >= a.shape[1]
                      or rows.min() < 0 or cols.min() < 0):
        _fail(node, f"gather index out of range for {a.shape}")
    return a[rows, cols].reshape(-1, 1)


def _f_concat(v, at, node):
    if len({x.shape[0] for x in v}) != 1:
        _fail(node, "concat operands need equal row counts")
    return np.concatenate(v, axis=1)


def _f_logsumexp(v, at, node):
    a = v[0]
    mask = at.get("mask")
    if mask is not None:
        if mask.shape != a.shape:
            _fail(node, f"mask shape {mask.shape} does not match {a.shape}")
        a = np.where(mask, a, -np.inf)
    m = np.max(a, axis=1, keepdims=True)
    if not np.all(np.isfinite(m)):
        _fail(node, "logsumexp row with no included entries")
    return m + np.log(np.sum(np.exp(a - m), axis=1, keepdims=True))


def _log_softmax(z):
    m = np.max(z, axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def _f_softmax_ce(v, at, node):
    z = v[0]
    labels = at["labels"]
    if labels.shape != (z.shape[0],):
        _fail(node, f"{labels.shape[0]} labels for {z.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        _fail(node, "label out of range")
    picked = _log_softmax(z)[np.arange(z.shape[0]), labels]
    total = -np.sum(picked)
    if at["reduction"] == "mean":
        total = total / z.shape[0]
    return np.array([[total]])


def _f_sum(v, at, node):
    axis = at["axis"]
    if axis is None:
        return np.array([[np.sum(v[0])]])
    return np.sum(v[0], axis=axis, keepdims=True)


def _f_clamp(v, at, node):
    return np.clip(v[0], at["lo"], at["hi"])


def _f_sqrt(v, at, node):
    if np.any(v[0] < 0):
        raise NonFiniteError(f"{node.label()}: sqrt of negative entry")
    return np.sqrt(v[0])


_FORWARD = {
    "matmul": _f_matmul,
    "add": _f_add,
    "sub": _f_sub,
    "mul": _f_mul,
    "div": _f_div,
    "dot": _f_dot,
    "scale": lambda v, at, node: v[0] * at["factor"],
    "relu": lambda v, at, node: np.maximum(v[0], 0.0),
    "tanh": lambda v, at, node: np.tanh(v[0]),
    "square": lambda v, at, node: v[0] * v[0],
    "sqrt": _f_sqrt,
    "transpose": lambda v, at, node: v[0].T.copy(),
    "row_select": _f_row_select,
    "gather": _f_gather,
    "concat": _f_concat,
    "logsumexp": _f_logsumexp,
    "softmax_ce": _f_softmax_ce,
    "l2_norm": lambda v, at, node: np.array([[np.sqrt(np.sum(v[0] * v[0]))]]),
    "sum": _f_sum,
    "clamp": _f_clamp,
}


# ---------------------------------------------------------------------------
# primitive backward rules: (upstream grad, input values, output, attrs) -> grads


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.sum(g, axis=0, keepdims=True)


def _b_matmul(g, v, out, at):
    a, b = v
    return g @ b.T, a.T @ g


def _b_add(g, v, out, at):
    return g, _unbroadcast(g, v[1].shape)


def _b_sub(g, v, out, at):
    return g, -_unbroadcast(g, v[1].shape)


def _b_mul(g, v, out, at):
    a, b = v
    return g * b, _unbroadcast(g * a, b.shape)


def _b_div(g, v, out, at):
    a, b = v
    return g / b, -g * a / (b * b)


def _b_row_select(g, v, out, at):
    grad = np.zeros_like(v[0])
    np.add.at(grad, at["rows"], g)
    return (grad,)


def _b_gather(g, v, out, at):
    grad = np.zeros_like(v[0])
    np.add.at(grad, (at["rows"], at["cols"]), g[:, 0])
    return (grad,)


def _b_concat(g, v, out, at):
    edges = np.cumsum([0] + [x.shape[1] for x in v])
    return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(v)))


def _b_logsumexp(g, v, out, at):
    weights = np.exp(v[0] - out)
    mask = at.get("mask")
    if mask is not None:
        weights = np.where(mask, weights, 0.0)
    return (weights * g,)


def _b_softmax_ce(g, v, out, at):
    z = v[0]
    labels = at["labels"]
    probs = np.exp(_log_softmax(z))
    probs[np.arange(z.shape[0]), labels] -= 1.0
    if at["reduction"] == "mean":
        probs /= z.shape[0]
    return (probs * g[0, 0],)


def _b_sum(g, v, out, at):
    return (np.broadcast_to(g, v[0].shape).copy(),)


def _b_l2_norm(g, v, out, at):
    norm = out[0, 0]
    if norm == 0.0:
        return (np.zeros_like(v[0]),)
    return (v[0] * (g[0, 0] / norm),)


def _b_clamp(g, v, out, at):
    a = v[0]
    keep = np.ones(a.shape, dtype=bool)
    if at["lo"] is not None:
        keep &= a > at["lo"]
    if at["hi"] is not None:
        keep &= a < at["hi"]
    return (np.where(keep, g, 0.0),)


def _b_sqrt(g, v, out, at):
    with np.errstate(divide="ignore"):
        return (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),)


_BACKWARD = {
    "matmul": _b_matmul,
    "add": _b_add,
    "sub": _b_sub,
    "mul": _b_mul,
    "div": _b_div,
    "dot": lambda g, v, out, at: (g[0, 0] * v[1], g[0, 0] * v[0]),
    "scale": lambda g, v, out, at: (g * at["factor"],),
    "relu": lambda g, v, out, at: (np.where(v[0] > 0.0, g, 0.0),),
    "tanh": lambda g, v, out, at: (g * (1.0 - out * out),),
    "square": lambda g, v, out, at: (2.0 * v[0] * g,),
    "sqrt": _b_sqrt,
    "transpose": lambda g, v, out, at: (g.T,),
    "row_select": _b_row_select,
    "gather": _b_gather,
    "concat": _b_concat,
    "logsumexp": _b_logsumexp,
    "softmax_ce": _b_softmax_ce,
    "l2_norm": _b_l2_norm,
    "sum": _b_sum,
    "clamp": _b_clamp,
}

# ops whose derivative jumps; grad_check skips entries that flip their pattern
_KINKED = ("relu", "clamp")


class Tape:
    """Records operations in evaluation order.

    Nodes are appended as operations are called, so the insertion order is a
    topological order by construction.  ``output`` is the node that
    :func:`forward` returns and :func:`backward` differentiates; it defaults to
    the most recently recorded node.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.variables: dict[str, Node] = {}
        self.output: Node | None = None
        self.evaluated = True

    # -- construction ------------------------------------------------------

    def _push(self, op, inputs=(), attrs=None, name=None, value=None):
        for x in inputs:
            if not isinstance(x, Node) or x.tape is not self:
                raise UsageError(f"operand of {op} does not belong to this tape")
        needs = op == "var" or any(x.needs_grad for x in inputs)
        node = Node(self, len(self.nodes), op, tuple(inputs), attrs or {}, name, needs)
        if value is None:
            node.value = _evaluate(node)
        else:
            node.value = value
        self.nodes.append(node)
        return node

    def var(self, name: str, value) -> Node:
        if name in self.variables:
            raise UsageError(f"variable '{name}' already defined")
        node = self._push("var", name=name, value=as_matrix(value, name))
        self.variables[name] = node
        return node

    def const(self, value) -> Node:
        return self._push("const", value=as_matrix(value, "constant"))

    def matmul(self, a, b):
        return self._push("matmul", (a, b))

    def add(self, a, b):
        return self._push("add", (a, b))

    def sub(self, a, b):
        return self._push("sub", (a, b))

    def mul(self, a, b):
        return self._push("mul", (a, b))

    def div(self, a, b):
        return self._push("div", (a, b))

    def dot(self, a, b):
        return self._push("dot", (a, b))

    def scale(self, a, factor: float):
        return self._push("scale", (a,), {"factor": float(factor)})

    def relu(self, a):
        return self._push("relu", (a,))

    def tanh(self, a):
        return self._push("tanh", (a,))

    def square(self, a):
        return self._push("square", (a,))

    def sqrt(self, a):
        return self._push("sqrt", (a,))

    def transpose(self, a):
        return self._push("transpose", (a,))

    def row_select(self, a, rows):
        return self._push("row_select", (a,), {"rows": np.asarray(rows, dtype=np.int64).reshape(-1)})

    def gather(self, a, rows, cols):
        """Pick ``a[rows[i], cols[i]]`` into an ``n x 1`` column."""
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(cols, dtype=np.int64).reshape(-1)
        if rows.shape != cols.shape:
            raise ShapeError("gather: rows and cols differ in length")
        return self._push("gather", (a,), {"rows": rows, "cols": cols})

    def concat(self, parts):
        return self._push("concat", tuple(parts))

    def logsumexp(self, a, mask=None):
        """Row-wise log-sum-exp; ``mask`` (bool, same shape) selects the entries."""
        attrs = {} if mask is None else {"mask": np.asarray(mask, dtype=bool)}
        return self._push("logsumexp", (a,), attrs)

    def softmax_ce(self, logits, labels, reduction: str = "mean"):
        if reduction not in ("mean", "sum"):
            raise UsageError(f"unknown reduction {reduction!r}")
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        return self._push("softmax_ce", (logits,), {"labels": labels, "reduction": reduction})

    def l2_norm(self, a):
        return self._push("l2_norm", (a,))

    def sum(self, a, axis=None):
        if axis not in (None, 0, 1):
            raise UsageError(f"bad axis {axis!r}")
        return self._push("sum", (a,), {"axis": axis})

    def mean(self, a):
        return self.scale(self.sum(a), 1.0 / a.value.size)

    def clamp(self, a, lo=None, hi=None):
        return self._push("clamp", (a,), {"lo": lo, "hi": hi})

    # -- structure ---------------------------------------------------------

    def final(self) -> Node:
        if self.output is not None:
            return self.output
        if not self.nodes:
            raise UsageError("empty tape")
        return self.nodes[-1]

    def clone(self) -> "Tape":
        """Copy of the program with variable values dropped.

        Constants are part of the program and are kept; variables must be bound
        again through :func:`forward` before the clone can be differentiated.
        """
        other = Tape()
        for node in self.nodes:
            inputs = tuple(other.nodes[x.index] for x in node.inputs)
            copy = Node(other, node.index, node.op, inputs, node.attrs, node.name, node.needs_grad)
            copy.value = node.value if node.op == "const" else None
            other.nodes.append(copy)
            if node.op == "var":
                other.variables[node.name] = copy
        if self.output is not None:
            other.output = other.nodes[self.output.index]
        other.evaluated = False
        return other


def _evaluate(node: Node) -> Matrix:
    values = [x.value for x in node.inputs]
    with np.errstate(over="ignore", invalid="ignore"):
        out = _FORWARD[node.op](values, node.attrs, node)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{node.label()}: non-finite value")
    return out


def forward(tape: Tape, bindings: dict | None = None) -> Matrix:
    """Re-evaluate the recorded program, optionally rebinding variables.

    Unbound variables keep their current value; a variable that has never had
    a value (on a cloned tape) must appear in ``bindings``.
    """
    bindings = bindings or {}
    for name in bindings:
        if name not in tape.variables:
            raise UsageError(f"no variable named '{name}'")
    for node in tape.nodes:
        if node.op == "var":
            if node.name in bindings:
                value = as_matrix(bindings[node.name], node.name)
                if node.value is not None and value.shape != node.value.shape:
                    raise ShapeError(f"{node.label()}: bound shape {value.shape}, "
                                     f"expected {node.value.shape}")
                node.value = value
            elif node.value is None:
                raise UsageError(f"variable '{node.name}' is unbound")
        elif node.op != "const":
            node.value = _evaluate(node)
    tape.evaluated = True
    return tape.final().value


def backward(tape: Tape, output: Node | None = None) -> dict[str, Matrix]:
    """Gradient of a scalar node with respect to every variable on the tape."""
    if not tape.evaluated:
        raise UsageError("backward called before forward")
    out = output if output is not None else tape.final()
    if out.value.shape != (1, 1):
        raise UsageError(f"{out.label()} is not scalar (shape {out.value.shape})")
    grads: list = [None] * len(tape.nodes)
    grads[out.index] = np.ones((1, 1))
    for node in reversed(tape.nodes[: out.index + 1]):
        g = grads[node.index]
        if g is None or not node.inputs or not node.needs_grad:
            continue
        values = [x.value for x in node.inputs]
        parts = _BACKWARD[node.op](g, values, node.value, node.attrs)
        for x, part in zip(node.inputs, parts):
            if not x.needs_grad:
                continue
            if grads[x.index] is None:
                grads[x.index] = np.array(part, dtype=np.float64)
            else:
                grads[x.index] = grads[x.index] + part
    result = {}
    for name, node in tape.variables.items():
        g = grads[node.index]
        result[name] = np.zeros_like(node.value) if g is None else g
    return result


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: dict[str, float]
    failed: list[str]
    skipped: dict[str, int] = field(default_factory=dict)

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        worst = max(self.max_rel_error.values(), default=0.0)
        text = f"grad_check {status}: max rel error {worst:.3e}"
        if self.failed:
            text += f" (failing: {', '.join(self.failed)})"
        return text


def _kink_pattern(tape):
    return [np.sign(n.inputs[0].value).tobytes() if n.op == "relu" else
            (np.clip(n.inputs[0].value, n.attrs["lo"], n.attrs["hi"]) == n.inputs[0].value).tobytes()
            for n in tape.nodes if n.op in _KINKED]


def grad_check(tape: Tape, bindings: dict | None = None, step: float = 1e-5, tol: float = 1e-4,
               variables=None, analytic: dict | None = None, floor: float = 1e-6) -> GradCheckReport:
    """Compare backward gradients against central finite differences.

    The relative error of one entry is ``|g - n| / max(|g|, |n|, floor)``.
    Entries whose perturbation changes the active pattern of a ReLU or clamp
    are skipped.  ``analytic`` replaces the backward gradients, which lets a
    caller check gradients produced elsewhere.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    forward(tape, bindings)
    grads = backward(tape) if analytic is None else analytic
    base_pattern = _kink_pattern(tape)
    names = list(tape.variables) if variables is None else list(variables)
    errors, failed, skipped = {}, [], {}
    for name in names:
        node = tape.variables[name]
        base = node.value.copy()
        g = np.asarray(grads[name], dtype=np.float64).reshape(base.shape)
        worst, n_skip = 0.0, 0
        for idx in np.ndindex(base.shape):
            probe = base.copy()
            probe[idx] = base[idx] + step
            f_plus = forward(tape, {name: probe})[0, 0]
            kink = _kink_pattern(tape) != base_pattern
            probe[idx] = base[idx] - step
            f_minus = forward(tape, {name: probe})[0, 0]
            kink = kink or _kink_pattern(tape) != base_pattern
            if kink:
                n_skip += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(g[idx] - numeric) / max(abs(g[idx]), abs(numeric), floor)
            worst = max(worst, err)
        forward(tape, {name: base})
        errors[name] = worst
        skipped[name] = n_skip
        if worst > tol:
            failed.append(name)
    return GradCheckReport(not failed, errors, failed, skipped)
