"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape machine: forward values are computed eagerly and recorded as
nodes; ``backward`` runs one reverse sweep and returns adjoints keyed by
node id. Everything is plain numpy in C order, 64-bit; the only implicit
broadcasting is scalar-against-array. Replaying the same graph gives
bit-identical values and gradients, which keeps training reproducible.

Complex matrices are carried as (real, imag) pairs of nodes; helpers for
that representation live at the bottom of the module.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class TapeError(ValueError):
    """Raised on malformed graphs: shape mismatches, singular inverses, etc."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if not a.flags["C_CONTIGUOUS"]:
        a = np.ascontiguousarray(a)  # note: would promote 0-d, hence the guard
    return a


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    # Only scalar-vs-array broadcasting is supported, so the reduction is
    # either a no-op or a full sum back to the scalar operand.
    if tuple(grad.shape) == tuple(shape):
        return grad
    return np.asarray(grad.sum()).reshape(shape)


class Var:
    """Handle to one tape node. Arithmetic sugar records new nodes."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.nid]

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


# ---------------------------------------------------------------------------
# op registry: kind -> (forward, vjp)
# forward(values, attrs) -> ndarray
# vjp(grad_out, values, out_value, attrs) -> list of per-input grads (None
# for inputs that get no gradient from this op)
# ---------------------------------------------------------------------------

_OPS: dict[str, tuple[Callable, Callable]] = {}


def _same_shape(kind, a, b):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise TapeError(f"{kind}: operand shapes {a.shape} and {b.shape} do not match")


def _register(kind, forward, vjp):
    _OPS[kind] = (forward, vjp)


_register(
    "add",
    lambda v, at: (_same_shape("add", v[0], v[1]), v[0] + v[1])[1],
    lambda g, v, out, at: [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)],
)
_register(
    "sub",
    lambda v, at: (_same_shape("sub", v[0], v[1]), v[0] - v[1])[1],
    lambda g, v, out, at: [_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)],
)
_register(
    "mul",
    lambda v, at: (_same_shape("mul", v[0], v[1]), v[0] * v[1])[1],
    lambda g, v, out, at: [
        _unbroadcast(g * v[1], v[0].shape),
        _unbroadcast(g * v[0], v[1].shape),
    ],
)


def _div_fwd(v, at):
    _same_shape("div", v[0], v[1])
    if np.any(v[1] == 0.0):
        raise TapeError("div: zero denominator entry")
    return v[0] / v[1]


_register(
    "div",
    _div_fwd,
    lambda g, v, out, at: [
        _unbroadcast(g / v[1], v[0].shape),
        _unbroadcast(-g * v[0] / (v[1] * v[1]), v[1].shape),
    ],
)
_register("neg", lambda v, at: -v[0], lambda g, v, out, at: [-g])
_register(
    "scale",
    lambda v, at: v[0] * at["c"],
    lambda g, v, out, at: [g * at["c"]],
)


def _matmul_fwd(v, at):
    a, b = v
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return a @ b


_register(
    "matmul",
    _matmul_fwd,
    lambda g, v, out, at: [g @ v[1].T, v[0].T @ g],
)


def _affine_fwd(v, at):
    x, w, b = v
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise TapeError(
            f"affine: incompatible shapes x{x.shape} w{w.shape} b{b.shape}"
        )
    return x @ w + b


_register(
    "affine",
    _affine_fwd,
    lambda g, v, out, at: [g @ v[1].T, v[0].T @ g, g.sum(axis=0)],
)
_register("transpose", lambda v, at: v[0].T.copy(), lambda g, v, out, at: [g.T.copy()])
_register(
    "reshape",
    lambda v, at: v[0].reshape(at["shape"]).copy(),
    lambda g, v, out, at: [g.reshape(v[0].shape)],
)
_register(
    "relu",
    lambda v, at: np.maximum(v[0], 0.0),
    lambda g, v, out, at: [g * (v[0] > 0.0)],
)
_register(
    "sum",
    lambda v, at: np.asarray(v[0].sum()),
    lambda g, v, out, at: [np.broadcast_to(g, v[0].shape).copy()],
)
_register(
    "sumsq",
    lambda v, at: np.asarray((v[0] * v[0]).sum()),
    lambda g, v, out, at: [2.0 * g * v[0]],
)


def _trace_fwd(v, at):
    x = v[0]
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise TapeError(f"trace: needs a square matrix, got {x.shape}")
    return np.asarray(np.trace(x))


_register(
    "trace",
    _trace_fwd,
    lambda g, v, out, at: [g * np.eye(v[0].shape[0])],
)


def _inverse_fwd(v, at):
    x = v[0]
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise TapeError(f"inverse: needs a square matrix, got {x.shape}")
    cond = np.linalg.cond(x)
    if not np.isfinite(cond) or cond > 1e14:
        raise TapeError(f"inverse: matrix numerically singular (cond~{cond:.3e})")
    return np.linalg.inv(x)


_register(
    "inverse",
    _inverse_fwd,
    # d(X^-1) = -X^-1 dX X^-1  =>  grad_X = -out^T g out^T
    lambda g, v, out, at: [-(out.T @ g @ out.T)],
)


def _sqrt_fwd(v, at):
    if np.any(v[0] <= 0.0):
        raise TapeError("sqrt: requires strictly positive entries")
    return np.sqrt(v[0])


_register(
    "sqrt",
    _sqrt_fwd,
    lambda g, v, out, at: [g * 0.5 / out],
)


def _concat_fwd(v, at):
    return np.concatenate(v, axis=at["axis"])


def _concat_vjp(g, v, out, at):
    axis = at["axis"]
    sizes = [x.shape[axis] for x in v]
    return list(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


_register("concat", _concat_fwd, _concat_vjp)


def _narrow_fwd(v, at):
    sl = [slice(None)] * v[0].ndim
    sl[at["axis"]] = slice(at["start"], at["start"] + at["length"])
    return v[0][tuple(sl)].copy()


def _narrow_vjp(g, v, out, at):
    full = np.zeros_like(v[0])
    sl = [slice(None)] * v[0].ndim
    sl[at["axis"]] = slice(at["start"], at["start"] + at["length"])
    full[tuple(sl)] = g
    return [full]


_register("narrow", _narrow_fwd, _narrow_vjp)
_register(
    "stack",
    lambda v, at: np.stack([x.reshape(()) for x in v]),
    lambda g, v, out, at: [np.asarray(g[i]) for i in range(len(v))],
)


class Tape:
    """Ordered record of operations; inputs always precede their outputs."""

    def __init__(self):
        self.kinds: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.attrs: list[dict | None] = []
        self.values: list[np.ndarray] = []
        self.diff: list[bool] = []  # participates in differentiation

    def _push(self, kind, inputs, attrs, value, diff) -> Var:
        self.kinds.append(kind)
        self.inputs.append(tuple(inputs))
        self.attrs.append(attrs)
        self.values.append(value)
        self.diff.append(diff)
        return Var(self, len(self.values) - 1)

    def leaf(self, value) -> Var:
        """Differentiable input node (weights, optimization variables)."""
        return self._push("leaf", (), None, _as_array(value), True)

    def constant(self, value) -> Var:
        """Non-differentiable input node (data, masks, fixed matrices)."""
        return self._push("const", (), None, _as_array(value), False)

    def record(self, kind: str, inputs, forward_fn=None, **attrs) -> Var:
        """Record one operation and compute its value eagerly.

        Parameters
        ----------
        kind : str
            Operation name; its adjoint must be registered.
        inputs : sequence of Var or node ids
        forward_fn : callable, optional
            Override of the registered forward (same signature); the
            registered adjoint is still used for the backward sweep.

        Returns
        -------
        Var for the new node.
        """
        if kind not in _OPS:
            raise TapeError(f"unknown op kind '{kind}'")
        ids = [v.nid if isinstance(v, Var) else int(v) for v in inputs]
        for nid in ids:
            if not 0 <= nid < len(self.values):
                raise TapeError(f"{kind}: input node id {nid} not on this tape")
        vals = [self.values[nid] for nid in ids]
        fwd = forward_fn if forward_fn is not None else _OPS[kind][0]
        out = _as_array(fwd(vals, attrs))
        diff = any(self.diff[nid] for nid in ids)
        return self._push(kind, ids, attrs, out, diff)

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar loss node.

        Returns a map node-id -> adjoint for every differentiable node
        (zeros for differentiable nodes the loss does not depend on). The
        loss node's own adjoint is 1.
        """
        if loss.tape is not self:
            raise TapeError("backward: loss lives on a different tape")
        if self.values[loss.nid].size != 1:
            raise TapeError(
                f"backward: loss must be scalar, got shape {self.values[loss.nid].shape}"
            )
        # nodes that can influence the loss
        reachable = np.zeros(len(self.values), dtype=bool)
        stack = [loss.nid]
        reachable[loss.nid] = True
        while stack:
            nid = stack.pop()
            for pid in self.inputs[nid]:
                if not reachable[pid]:
                    reachable[pid] = True
                    stack.append(pid)
        adj: list[np.ndarray | None] = [None] * len(self.values)
        adj[loss.nid] = np.ones_like(self.values[loss.nid])
        for nid in range(loss.nid, -1, -1):
            if adj[nid] is None or not reachable[nid]:
                continue
            kind = self.kinds[nid]
            if kind in ("leaf", "const"):
                continue
            ids = self.inputs[nid]
            vals = [self.values[pid] for pid in ids]
            grads = _OPS[kind][1](adj[nid], vals, self.values[nid], self.attrs[nid])
            for pid, g in zip(ids, grads):
                if g is None or not self.diff[pid]:
                    continue
                # accumulation never mutates in place, so aliasing g with
                # adj[nid] (e.g. add's pass-through) is harmless
                adj[pid] = g if adj[pid] is None else adj[pid] + g
        out: dict[int, np.ndarray] = {}
        for nid in range(len(self.values)):
            if self.diff[nid]:
                out[nid] = adj[nid] if adj[nid] is not None else np.zeros_like(self.values[nid])
        return out


# ---- free-function op sugar ------------------------------------------------


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.constant(x)


def add(a: Var, b) -> Var:
    return a.tape.record("add", [a, _lift(a.tape, b)])


def sub(a: Var, b) -> Var:
    return a.tape.record("sub", [a, _lift(a.tape, b)])


def mul(a: Var, b) -> Var:
    return a.tape.record("mul", [a, _lift(a.tape, b)])


def div(a: Var, b) -> Var:
    return a.tape.record("div", [a, _lift(a.tape, b)])


def neg(a: Var) -> Var:
    return a.tape.record("neg", [a])


def scale(a: Var, c: float) -> Var:
    return a.tape.record("scale", [a], c=float(c))


def matmul(a: Var, b) -> Var:
    return a.tape.record("matmul", [a, _lift(a.tape, b)])


def affine(x: Var, w: Var, b: Var) -> Var:
    return x.tape.record("affine", [x, w, b])


def transpose(a: Var) -> Var:
    return a.tape.record("transpose", [a])


def reshape(a: Var, shape) -> Var:
    return a.tape.record("reshape", [a], shape=tuple(shape))


def relu(a: Var) -> Var:
    return a.tape.record("relu", [a])


def vsum(a: Var) -> Var:
    return a.tape.record("sum", [a])


def sumsq(a: Var) -> Var:
    """Sum of squared entries (squared Frobenius norm)."""
    return a.tape.record("sumsq", [a])


def trace(a: Var) -> Var:
    return a.tape.record("trace", [a])


def inverse(a: Var) -> Var:
    return a.tape.record("inverse", [a])


def sqrt(a: Var) -> Var:
    return a.tape.record("sqrt", [a])


def concat(parts, axis: int) -> Var:
    return parts[0].tape.record("concat", parts, axis=axis)


def narrow(a: Var, axis: int, start: int, length: int) -> Var:
    return a.tape.record("narrow", [a], axis=axis, start=start, length=length)


def stack_scalars(parts) -> Var:
    return parts[0].tape.record("stack", parts)


def mean(a: Var) -> Var:
    return scale(vsum(a), 1.0 / a.value.size)


def grad_check(f, x, step: float = 1e-5) -> float:
    """Compare the analytic gradient of ``f`` against central differences.

    Parameters
    ----------
    f : callable
        Maps a Var (leaf holding ``x``) to a scalar Var; a fresh tape is
        built per evaluation.
    x : array_like
        Point at which to check.
    step : float
        Absolute central-difference step.

    Returns
    -------
    Max over coordinates of |analytic - central| / max(1, |central|).
    """
    if step <= 0:
        raise TapeError("grad_check: step must be positive")
    x = _as_array(x)
    tape = Tape()
    v = tape.leaf(x)
    out = f(v)
    if out.value.size != 1:
        raise TapeError("grad_check: f must return a scalar")
    analytic = tape.backward(out)[v.nid]

    def eval_at(xp) -> float:
        t = Tape()
        val = f(t.leaf(xp)).value
        if not np.all(np.isfinite(val)):
            raise TapeError("grad_check: f evaluated non-finite at a perturbed point")
        return float(val)

    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += step
        fp = eval_at(xp.reshape(x.shape))
        xp[i] -= 2 * step
        fm = eval_at(xp.reshape(x.shape))
        central = (fp - fm) / (2 * step)
        err = abs(float(analytic.reshape(-1)[i]) - central) / max(1.0, abs(central))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# complex matrices as (real, imag) node pairs
# ---------------------------------------------------------------------------


class CxVar:
    """Complex matrix carried as two real nodes."""

    __slots__ = ("re", "im")

    def __init__(self, re: Var, im: Var):
        self.re = re
        self.im = im

    @property
    def value(self) -> np.ndarray:
        return self.re.value + 1j * self.im.value


def cx_constant(tape: Tape, z) -> CxVar:
    z = np.asarray(z, dtype=np.complex128)
    return CxVar(tape.constant(z.real.copy()), tape.constant(z.imag.copy()))


def cx_matmul(a: CxVar, b: CxVar) -> CxVar:
    re = sub(matmul(a.re, b.re), matmul(a.im, b.im))
    im = add(matmul(a.re, b.im), matmul(a.im, b.re))
    return CxVar(re, im)


def cx_conj_t(a: CxVar) -> CxVar:
    return CxVar(transpose(a.re), neg(transpose(a.im)))


def cx_frob2(a: CxVar) -> Var:
    return add(sumsq(a.re), sumsq(a.im))


def cx_trace_re(a: CxVar) -> Var:
    return trace(a.re)


def cx_inner_re(a: CxVar, b: CxVar) -> Var:
    """Re tr(A B^H) = sum(Re A * Re B) + sum(Im A * Im B)."""
    return add(vsum(mul(a.re, b.re)), vsum(mul(a.im, b.im)))
