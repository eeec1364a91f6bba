"""Dense float64 tensors and a reverse-mode gradient tape.

Everything downstream (convolutions, warping, losses) is built from the
primitives in this module.  Operations run eagerly on numpy arrays; when a
Tape is active, each primitive records a node with a closure that maps the
output gradient back to input gradients.  Backward walks the node list in
reverse insertion order, which is a valid topological order because nodes
are appended in execution order.

All data is float64 so that central finite differences at eps ~ 1e-5 are a
meaningful reference for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ContractViolation(ValueError):
    """An argument or state broke a documented precondition."""


class Tensor:
    """A dense float64 array, treated as immutable once constructed.

    Image batches use the layout (batch, channel, height, width); smaller
    ranks appear for vectors, matrices and scalars.  `tape_id` is the index
    of the producing node on the most recent tape (None for leaves).
    """

    __slots__ = ("data", "requires_grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tape_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar for same-shape tensors and python scalars.
    def __add__(self, other):
        return add_scalar(self, other) if _is_number(other) else add(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_number(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul_scalar(self, other) if _is_number(other) else mul(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __truediv__(self, other):
        return mul_scalar(self, 1.0 / other) if _is_number(other) else div(self, other)

    def __neg__(self):
        return neg(self)


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    del name  # naming lives in the module layer
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_TAPE_STACK: list["Tape"] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Records primitive ops during a forward pass for reverse-mode AD.

    Use as a context manager.  A tensor participates in at most one tape
    per forward pass: the innermost active one.  Gradients accumulate
    additively when a tensor fans out into several consumers.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._live: set[int] = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def watches(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._live

    def record(self, out: Tensor, inputs: tuple, vjp) -> None:
        out.tape_id = len(self.nodes)
        self.nodes.append(_Node(out, inputs, vjp))
        self._live.add(id(out))

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> dict:
        """Return {leaf tensor: gradient array} for every requires_grad leaf
        reachable from `output`.  `seed` defaults to ones and must match the
        output shape."""
        if seed is None:
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != output.data.shape:
                raise ContractViolation(
                    f"seed shape {seed.shape} != output shape {output.data.shape}")
        grads: dict[int, np.ndarray] = {id(output): seed}
        leaves: dict[int, Tensor] = {}
        if output.requires_grad and id(output) not in self._live:
            leaves[id(output)] = output
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue  # node does not influence the requested output
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not self.watches(t):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t.requires_grad and id(t) not in self._live:
                    leaves[key] = t
        return {leaves[k]: grads[k] for k in leaves if k in grads}


def record(out: Tensor, inputs: tuple, vjp) -> Tensor:
    """Attach `out` to the active tape if any input is being watched."""
    tape = active_tape()
    if tape is not None and any(tape.watches(t) for t in inputs):
        tape.record(out, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# elementwise primitives

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ContractViolation(
            f"{op}: shapes {a.data.shape} and {b.data.shape} must match exactly")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return record(out, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = Tensor(a.data / b.data)
    return record(out, (a, b),
                  lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def add_scalar(a: Tensor, c) -> Tensor:
    out = Tensor(a.data + float(c))
    return record(out, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    return record(out, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return record(out, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return record(out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return record(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    return record(out, (a,), lambda g: (g * 0.5 / out.data,))


def sin(a: Tensor) -> Tensor:
    out = Tensor(np.sin(a.data))
    return record(out, (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    out = Tensor(np.cos(a.data))
    return record(out, (a,), lambda g: (-g * np.sin(a.data),))


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))
    return record(out, (a,), lambda g: (g * np.sign(a.data),))


def reciprocal(a: Tensor) -> Tensor:
    out = Tensor(1.0 / a.data)
    return record(out, (a,), lambda g: (-g * out.data * out.data,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the gradient routes to the first argument."""
    _same_shape(a, b, "minimum")
    take_a = a.data <= b.data
    out = Tensor(np.where(take_a, a.data, b.data))
    return record(out, (a, b),
                  lambda g: (g * take_a, g * ~take_a))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first argument."""
    _same_shape(a, b, "maximum")
    take_a = a.data >= b.data
    out = Tensor(np.where(take_a, a.data, b.data))
    return record(out, (a, b),
                  lambda g: (g * take_a, g * ~take_a))


# ---------------------------------------------------------------------------
# reductions and broadcast helpers

def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return record(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape) * 1.0,))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())
    return record(out, (a,),
                  lambda g: (np.broadcast_to(g / n, a.data.shape) * 1.0,))


def mean_spatial(a: Tensor) -> Tensor:
    """(b, c, h, w) -> (b, c) spatial mean."""
    if a.data.ndim != 4:
        raise ContractViolation("mean_spatial expects a 4-d tensor")
    n = a.data.shape[2] * a.data.shape[3]
    out = Tensor(a.data.mean(axis=(2, 3)))
    return record(out, (a,),
                  lambda g: (np.broadcast_to((g / n)[:, :, None, None],
                                             a.data.shape) * 1.0,))


def mean_channels(a: Tensor) -> Tensor:
    """(b, c, h, w) -> (b, 1, h, w) channel mean."""
    if a.data.ndim != 4:
        raise ContractViolation("mean_channels expects a 4-d tensor")
    c = a.data.shape[1]
    out = Tensor(a.data.mean(axis=1, keepdims=True))
    return record(out, (a,),
                  lambda g: (np.broadcast_to(g / c, a.data.shape) * 1.0,))


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply (b, c, h, w) by per-channel weights (c,)."""
    if x.data.ndim != 4 or s.data.shape != (x.data.shape[1],):
        raise ContractViolation("scale_channels expects (b,c,h,w) and (c,)")
    out = Tensor(x.data * s.data[None, :, None, None])
    return record(out, (x, s),
                  lambda g: (g * s.data[None, :, None, None],
                             (g * x.data).sum(axis=(0, 2, 3))))


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add per-channel bias (c,) to (b, c, h, w)."""
    if x.data.ndim != 4 or b.data.shape != (x.data.shape[1],):
        raise ContractViolation("add_channel_bias expects (b,c,h,w) and (c,)")
    out = Tensor(x.data + b.data[None, :, None, None])
    return record(out, (x, b),
                  lambda g: (g, g.sum(axis=(0, 2, 3))))


def mul_gate(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply (b, c, h, w) by a per-sample per-channel gate (b, c)."""
    if x.data.ndim != 4 or gate.data.shape != x.data.shape[:2]:
        raise ContractViolation("mul_gate expects (b,c,h,w) and (b,c)")
    out = Tensor(x.data * gate.data[:, :, None, None])
    return record(out, (x, gate),
                  lambda g: (g * gate.data[:, :, None, None],
                             (g * x.data).sum(axis=(2, 3))))


# ---------------------------------------------------------------------------
# structural primitives

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = Tensor(a.data.reshape(shape))
    src = a.data.shape
    return record(out, (a,), lambda g: (g.reshape(src),))


def transpose_last2(a: Tensor) -> Tensor:
    out = Tensor(np.swapaxes(a.data, -1, -2).copy())
    return record(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors: list, axis: int) -> Tensor:
    if not tensors:
        raise ContractViolation("concat of an empty list")
    datas = [t.data for t in tensors]
    nd = datas[0].ndim
    for d in datas:
        if d.ndim != nd:
            raise ContractViolation("concat rank mismatch")
    out = Tensor(np.concatenate(datas, axis=axis))
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(out, tuple(tensors), vjp)


def stack(tensors: list, axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractViolation("stack of an empty list")
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def vjp(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return record(out, tuple(tensors), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; backward zero-pads the complement."""
    n = a.data.shape[axis]
    if not (0 <= start < stop <= n):
        raise ContractViolation(f"slice [{start}:{stop}) outside axis of size {n}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return record(out, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d (n,k)@(k,m) or batched 3-d (b,n,k)@(b,k,m) matrix product."""
    da, db = a.data, b.data
    if da.ndim == 2 and db.ndim == 2:
        out = Tensor(da @ db)
        return record(out, (a, b), lambda g: (g @ db.T, da.T @ g))
    if da.ndim == 3 and db.ndim == 3 and da.shape[0] == db.shape[0]:
        out = Tensor(da @ db)
        return record(out, (a, b),
                      lambda g: (g @ db.transpose(0, 2, 1),
                                 da.transpose(0, 2, 1) @ g))
    raise ContractViolation(f"matmul: unsupported shapes {da.shape} @ {db.shape}")


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    """Worst relative disagreement between tape and finite differences."""
    max_rel_err: float
    per_input: list = field(default_factory=list)

    def ok(self, tol: float = 1e-5) -> bool:
        return self.max_rel_err <= tol


def grad_check(fn, inputs: list, eps: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of sum(fn(*inputs)) against central differences.

    Every element of every input is perturbed by +/- eps.  Relative error
    uses an absolute floor of 1e-8 in the denominator.  Non-finite values
    anywhere abort with a diagnostic.
    """
    if not (0.0 < eps <= 1e-3):
        raise ContractViolation("grad_check eps must lie in (0, 1e-3]")
    probes = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    with Tape() as tape:
        out = fn(*probes)
        if not np.all(np.isfinite(out.data)):
            raise ContractViolation("grad_check: forward produced non-finite values")
        loss = sum_all(out)
        grads = tape.backward(loss)
    analytic = [grads.get(p, np.zeros_like(p.data)) for p in probes]

    def eval_sum(k, flat_idx, delta):
        args = [Tensor(p.data) for p in probes]
        flat = args[k].data.copy().ravel()
        flat[flat_idx] += delta
        args[k] = Tensor(flat.reshape(args[k].data.shape))
        val = fn(*args).data.sum()
        if not np.isfinite(val):
            raise ContractViolation(
                f"grad_check: non-finite forward at input {k}, element {flat_idx}")
        return val

    max_rel = 0.0
    per_input = []
    for k, p in enumerate(probes):
        a = analytic[k].ravel()
        worst = 0.0
        for i in range(p.data.size):
            fd = (eval_sum(k, i, eps) - eval_sum(k, i, -eps)) / (2.0 * eps)
            denom = max(abs(a[i]), abs(fd), 1e-8)
            worst = max(worst, abs(a[i] - fd) / denom)
        per_input.append(worst)
        max_rel = max(max_rel, worst)
    return GradCheckReport(max_rel_err=max_rel, per_input=per_input)


# ---------------------------------------------------------------------------
# serialization: each record is one ASCII manifest line followed by a flat
# little-endian float64 payload.

def write_tensor_records(path, named: dict) -> None:
    """Write an ordered {name: Tensor|ndarray} mapping to `path`."""
    with open(path, "wb") as f:
        for name, t in named.items():
            arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
            if arr.ndim == 0:
                arr = arr.reshape(1)  # records are at least rank 1
            if " " in name or "=" in name:
                raise ContractViolation(f"tensor name {name!r} has reserved characters")
            shape = ",".join(str(int(s)) for s in arr.shape) or "1"
            f.write(f"{name} shape={shape} dtype=f64\n".encode("ascii"))
            f.write(arr.astype("<f8").tobytes())


def read_tensor_records(path) -> dict:
    """Read records written by write_tensor_records, preserving order."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        while True:
            line = f.readline()
            if not line:
                break
            text = line.decode("ascii").strip()
            try:
                name, shape_part, dtype_part = text.split(" ")
                shape = tuple(int(s) for s in shape_part.removeprefix("shape=").split(","))
                assert dtype_part == "dtype=f64"
            except Exception as e:
                raise ContractViolation(f"bad tensor record header {text!r}") from e
            count = int(np.prod(shape)) if shape else 1
            payload = f.read(8 * count)
            if len(payload) != 8 * count:
                raise ContractViolation(f"truncated payload for record {name!r}")
            arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
            out[name] = arr.reshape(shape)
    return out
