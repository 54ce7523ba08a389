"""Scalar/array autodiff: a reverse-mode tape plus second-order forward jets.

Values on the tape are numpy float64 arrays (or python floats), typically
batched over sample points. Input derivatives (u_t, u_x, u_xx, ...) come from
`Jet`s: a value paired with first/second directional derivatives propagated by
truncated-Taylor rules. Jet components may themselves be tape variables, so a
reverse pass through a jet computation yields parameter gradients of losses
that contain input-derivative terms (reverse over forward).

Dispatch order for every op: Jet > Var > plain numpy/float. Anything that is
not a Jet or Var is treated as a constant (no derivative structure).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape", "Var", "Jet", "TapeConsumedError",
    "add", "sub", "neg", "mul", "div", "matmul", "pow_const",
    "exp", "log", "sin", "cos", "tanh", "sigmoid", "relu",
    "concat_cols", "slice_cols", "sum_all", "mean_sq",
    "jet_seed", "jet_forward", "grad_params", "flatten_vars",
]


class TapeConsumedError(RuntimeError):
    """Raised when a tape is asked to run more than one reverse pass."""


class Tape:
    """Ordered record of primitive ops, consumed by exactly one reverse pass."""

    __slots__ = ("_parents", "_backfns", "consumed")

    def __init__(self):
        self._parents = []   # tuple of parent node ids per node (Var parents only)
        self._backfns = []   # callable(grad) -> tuple of parent grads, or None for leaves
        self.consumed = False

    def leaf(self, value):
        return self._record(np.asarray(value, dtype=np.float64), (), None)

    def _record(self, value, parents, backfn):
        idx = len(self._parents)
        self._parents.append(parents)
        self._backfns.append(backfn)
        return Var(self, idx, value)

    def gradient(self, output, leaves):
        """d(output)/d(leaf) for each leaf; zeros for leaves the output ignores."""
        if self.consumed:
            raise TapeConsumedError("tape already consumed by a reverse pass")
        self.consumed = True
        if not isinstance(output, Var) or output.tape is not self:
            raise ValueError("output is not a variable of this tape")
        grads = [None] * (output.index + 1)
        out_val = output.value
        grads[output.index] = (
            np.ones_like(out_val) if isinstance(out_val, np.ndarray) else 1.0
        )
        parents_list, backfns = self._parents, self._backfns
        for i in range(output.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            backfn = backfns[i]
            if backfn is None:
                continue
            for p, pg in zip(parents_list[i], backfn(g)):
                old = grads[p]
                grads[p] = pg if old is None else old + pg
        out = []
        for leaf in leaves:
            if leaf.tape is not self:
                raise ValueError("leaf belongs to a different tape")
            g = grads[leaf.index] if leaf.index <= output.index else None
            if g is None:
                g = np.zeros_like(leaf.value)
            out.append(np.asarray(g, dtype=np.float64))
        return out


class Var:
    """Handle to one tape slot: a value plus its position in the record."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        v = self.value
        return v.shape if isinstance(v, np.ndarray) else ()

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"


def _val(x):
    return x.value if isinstance(x, Var) else x


def _shape_of(v):
    return v.shape if isinstance(v, np.ndarray) else ()


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if _shape_of(g) == shape:
        return g
    if shape == ():
        return float(np.sum(g))
    gnd = np.asarray(g)
    while gnd.ndim > len(shape):
        gnd = gnd.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and gnd.shape[ax] != 1:
            gnd = gnd.sum(axis=ax, keepdims=True)
    return gnd


# ---------------------------------------------------------------------------
# binary primitives
# ---------------------------------------------------------------------------

def add(a, b):
    if isinstance(a, Jet) or isinstance(b, Jet):
        return _jet_add(a, b)
    if isinstance(a, Var):
        av, tape = a.value, a.tape
        if isinstance(b, Var):
            bv = b.value
            sa, sb = _shape_of(av), _shape_of(bv)
            return tape._record(
                av + bv, (a.index, b.index),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))
        sa = _shape_of(av)
        return tape._record(av + b, (a.index,),
                            lambda g: (_unbroadcast(g, sa),))
    if isinstance(b, Var):
        bv, tape = b.value, b.tape
        sb = _shape_of(bv)
        return tape._record(a + bv, (b.index,),
                            lambda g: (_unbroadcast(g, sb),))
    return a + b


def sub(a, b):
    if isinstance(a, Jet) or isinstance(b, Jet):
        return _jet_add(a, _jet_neg(b))
    if isinstance(a, Var):
        av, tape = a.value, a.tape
        if isinstance(b, Var):
            bv = b.value
            sa, sb = _shape_of(av), _shape_of(bv)
            return tape._record(
                av - bv, (a.index, b.index),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))
        sa = _shape_of(av)
        return tape._record(av - b, (a.index,),
                            lambda g: (_unbroadcast(g, sa),))
    if isinstance(b, Var):
        bv, tape = b.value, b.tape
        sb = _shape_of(bv)
        return tape._record(a - bv, (b.index,),
                            lambda g: (_unbroadcast(-g, sb),))
    return a - b


def neg(a):
    if isinstance(a, Jet):
        return _jet_neg(a)
    if isinstance(a, Var):
        return a.tape._record(-a.value, (a.index,), lambda g: (-g,))
    return -a


def mul(a, b):
    if isinstance(a, Jet) or isinstance(b, Jet):
        return _jet_mul(a, b)
    if isinstance(a, Var):
        av, tape = a.value, a.tape
        if isinstance(b, Var):
            bv = b.value
            sa, sb = _shape_of(av), _shape_of(bv)
            return tape._record(
                av * bv, (a.index, b.index),
                lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))
        sa = _shape_of(av)
        return tape._record(av * b, (a.index,),
                            lambda g: (_unbroadcast(g * b, sa),))
    if isinstance(b, Var):
        bv, tape = b.value, b.tape
        sb = _shape_of(bv)
        return tape._record(a * bv, (b.index,),
                            lambda g: (_unbroadcast(g * a, sb),))
    return a * b


def div(a, b):
    if isinstance(a, Jet) or isinstance(b, Jet):
        return _jet_div(a, b)
    if isinstance(a, Var):
        av, tape = a.value, a.tape
        if isinstance(b, Var):
            bv = b.value
            out = av / bv
            sa, sb = _shape_of(av), _shape_of(bv)
            return tape._record(
                out, (a.index, b.index),
                lambda g: (_unbroadcast(g / bv, sa),
                           _unbroadcast(-g * out / bv, sb)))
        sa = _shape_of(av)
        return tape._record(av / b, (a.index,),
                            lambda g: (_unbroadcast(g / b, sa),))
    if isinstance(b, Var):
        bv, tape = b.value, b.tape
        out = a / bv
        sb = _shape_of(bv)
        return tape._record(out, (b.index,),
                            lambda g: (_unbroadcast(-g * out / bv, sb),))
    return a / b


def matmul(a, b):
    """2-D matrix product; either side may be a constant array."""
    if isinstance(a, Jet):
        assert not isinstance(b, Jet), "matmul between two jets is not supported"
        return Jet(matmul(a.value, b),
                   tuple((matmul(d1, b), None if d2 is None else matmul(d2, b))
                         for d1, d2 in a.parts))
    if isinstance(a, Var):
        av, tape = a.value, a.tape
        if isinstance(b, Var):
            bv = b.value
            return tape._record(av @ bv, (a.index, b.index),
                                lambda g: (g @ bv.T, av.T @ g))
        return tape._record(av @ b, (a.index,), lambda g: (g @ b.T,))
    if isinstance(b, Var):
        bv, tape = b.value, b.tape
        return tape._record(a @ bv, (b.index,), lambda g: (a.T @ g,))
    return a @ b


def pow_const(a, p):
    """a**p for a constant real exponent p."""
    p = float(p)
    if isinstance(a, Jet):
        v = a.value
        fp = mul(pow_const(v, p - 1.0), p)
        fpp = (mul(pow_const(v, p - 2.0), p * (p - 1.0))
               if any(d2 is not None for _, d2 in a.parts) else None)
        return _jet_unary_apply(a, pow_const(v, p), fp, fpp)
    if isinstance(a, Var):
        av, tape = a.value, a.tape
        return tape._record(av ** p, (a.index,),
                            lambda g: (g * (p * av ** (p - 1.0)),))
    return a ** p


# ---------------------------------------------------------------------------
# unary transcendental primitives
# ---------------------------------------------------------------------------

def exp(a):
    if isinstance(a, Jet):
        t = exp(a.value)
        return _jet_unary_apply(a, t, t, t)
    if isinstance(a, Var):
        out = np.exp(a.value)
        return a.tape._record(out, (a.index,), lambda g: (g * out,))
    return np.exp(a)


def log(a):
    if isinstance(a, Jet):
        v = a.value
        fp = div(1.0, v)
        fpp = neg(mul(fp, fp))
        return _jet_unary_apply(a, log(v), fp, fpp)
    if isinstance(a, Var):
        av = a.value
        return a.tape._record(np.log(av), (a.index,), lambda g: (g / av,))
    return np.log(a)


def sin(a):
    if isinstance(a, Jet):
        v = a.value
        t = sin(v)
        return _jet_unary_apply(a, t, cos(v), neg(t))
    if isinstance(a, Var):
        av = a.value
        return a.tape._record(np.sin(av), (a.index,),
                              lambda g: (g * np.cos(av),))
    return np.sin(a)


def cos(a):
    if isinstance(a, Jet):
        v = a.value
        t = cos(v)
        return _jet_unary_apply(a, t, neg(sin(v)), neg(t))
    if isinstance(a, Var):
        av = a.value
        return a.tape._record(np.cos(av), (a.index,),
                              lambda g: (-g * np.sin(av),))
    return np.cos(a)


def tanh(a):
    if isinstance(a, Jet):
        t = tanh(a.value)
        s = sub(1.0, mul(t, t))
        fpp = mul(-2.0, mul(t, s)) if any(d2 is not None for _, d2 in a.parts) else None
        return _jet_unary_apply(a, t, s, fpp)
    if isinstance(a, Var):
        out = np.tanh(a.value)
        return a.tape._record(out, (a.index,),
                              lambda g: (g * (1.0 - out * out),))
    return np.tanh(a)


def sigmoid(a):
    if isinstance(a, Jet):
        t = sigmoid(a.value)
        fp = mul(t, sub(1.0, t))
        fpp = (mul(fp, sub(1.0, mul(2.0, t)))
               if any(d2 is not None for _, d2 in a.parts) else None)
        return _jet_unary_apply(a, t, fp, fpp)
    if isinstance(a, Var):
        out = _np_sigmoid(a.value)
        return a.tape._record(out, (a.index,),
                              lambda g: (g * (out * (1.0 - out)),))
    return _np_sigmoid(a)


def _np_sigmoid(x):
    # 0.5*(tanh(x/2)+1) is overflow-free for large |x|
    return 0.5 * (np.tanh(np.asarray(x) * 0.5) + 1.0)


def relu(a):
    """max(0, x); derivative at 0 taken as 0."""
    if isinstance(a, Jet):
        mask = (np.asarray(_val(a.value)) > 0).astype(np.float64)
        parts = tuple((mul(mask, d1), None if d2 is None else mul(mask, d2))
                      for d1, d2 in a.parts)
        return Jet(relu(a.value), parts)
    if isinstance(a, Var):
        av = a.value
        mask = (np.asarray(av) > 0).astype(np.float64)
        return a.tape._record(av * mask, (a.index,), lambda g: (g * mask,))
    return np.maximum(a, 0.0)


# ---------------------------------------------------------------------------
# structural primitives
# ---------------------------------------------------------------------------

def concat_cols(a, b):
    """Column-wise concatenation of 2-D values (or jets of them)."""
    if isinstance(a, Jet) or isinstance(b, Jet):
        a, b = _as_jet_like(a, b), _as_jet_like(b, a)
        parts = tuple(
            (concat_cols(d1a, d1b),
             None if d2a is None else concat_cols(d2a, d2b))
            for (d1a, d2a), (d1b, d2b) in zip(a.parts, b.parts))
        return Jet(concat_cols(a.value, b.value), parts)
    if isinstance(a, Var) or isinstance(b, Var):
        av, bv = _val(a), _val(b)
        na = av.shape[1]
        out = np.concatenate([av, bv], axis=1)
        if isinstance(a, Var) and isinstance(b, Var):
            return a.tape._record(out, (a.index, b.index),
                                  lambda g: (g[:, :na], g[:, na:]))
        if isinstance(a, Var):
            return a.tape._record(out, (a.index,), lambda g: (g[:, :na],))
        return b.tape._record(out, (b.index,), lambda g: (g[:, na:],))
    return np.concatenate([a, b], axis=1)


def slice_cols(a, j0, j1):
    """Columns [j0:j1] of a 2-D value (or jet of one)."""
    if isinstance(a, Jet):
        parts = tuple((slice_cols(d1, j0, j1),
                       None if d2 is None else slice_cols(d2, j0, j1))
                      for d1, d2 in a.parts)
        return Jet(slice_cols(a.value, j0, j1), parts)
    if isinstance(a, Var):
        av = a.value

        def back(g):
            full = np.zeros_like(av)
            full[:, j0:j1] = g
            return (full,)

        return a.tape._record(av[:, j0:j1], (a.index,), back)
    return a[:, j0:j1]


def sum_all(a):
    """Sum of all entries, as a scalar."""
    if isinstance(a, Var):
        av = a.value
        shape = _shape_of(av)
        return a.tape._record(float(np.sum(av)), (a.index,),
                              lambda g: (np.full(shape, g),))
    return float(np.sum(a))


def mean_sq(a):
    """Mean over rows of the squared Euclidean row norm (0.0 for empty input)."""
    n = _val(a).shape[0]
    if n == 0:
        return 0.0
    return mul(sum_all(mul(a, a)), 1.0 / n)


# ---------------------------------------------------------------------------
# jets
# ---------------------------------------------------------------------------

class Jet:
    """Value with directional derivatives along one or more seed directions.

    `parts` is a tuple of (d1, d2) pairs, one per direction; d2 is None for
    first-order parts. Directions are independent (no mixed partials), which
    is all a residual like u_t + u_xx needs.
    """

    __slots__ = ("value", "parts")

    def __init__(self, value, parts):
        self.value = value
        self.parts = parts

    @property
    def d1(self):
        return self.parts[0][0]

    @property
    def d2(self):
        return self.parts[0][1]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __repr__(self):
        orders = ["2" if d2 is not None else "1" for _, d2 in self.parts]
        return f"Jet(orders={orders})"


def _as_jet_like(x, template):
    """Lift a non-jet operand to a constant jet matching `template.parts`."""
    if isinstance(x, Jet):
        return x
    parts = tuple((0.0, None if d2 is None else 0.0) for _, d2 in template.parts)
    return Jet(x, parts)


def _jet_neg(a):
    if not isinstance(a, Jet):
        return neg(a)
    return Jet(neg(a.value),
               tuple((neg(d1), None if d2 is None else neg(d2))
                     for d1, d2 in a.parts))


def _jet_add(a, b):
    if not isinstance(a, Jet):
        # constant + jet: derivatives pass through
        return Jet(add(a, b.value), b.parts)
    if not isinstance(b, Jet):
        return Jet(add(a.value, b), a.parts)
    parts = tuple(
        (add(d1a, d1b),
         None if (d2a is None and d2b is None)
         else add(0.0 if d2a is None else d2a, 0.0 if d2b is None else d2b))
        for (d1a, d2a), (d1b, d2b) in zip(a.parts, b.parts))
    return Jet(add(a.value, b.value), parts)


def _jet_mul(a, b):
    if not isinstance(a, Jet):
        # constant * jet
        return Jet(mul(a, b.value),
                   tuple((mul(a, d1), None if d2 is None else mul(a, d2))
                         for d1, d2 in b.parts))
    if not isinstance(b, Jet):
        return _jet_mul(b, a)
    av, bv = a.value, b.value
    parts = []
    for (d1a, d2a), (d1b, d2b) in zip(a.parts, b.parts):
        d1 = add(mul(d1a, bv), mul(av, d1b))
        if d2a is None and d2b is None:
            d2 = None
        else:
            d2 = add(add(mul(0.0 if d2a is None else d2a, bv),
                         mul(2.0, mul(d1a, d1b))),
                     mul(av, 0.0 if d2b is None else d2b))
        parts.append((d1, d2))
    return Jet(mul(av, bv), tuple(parts))


def _jet_div(a, b):
    if not isinstance(b, Jet):
        return _jet_mul(a, div(1.0, b))
    a = _as_jet_like(a, b)
    av, bv = a.value, b.value
    q = div(av, bv)
    parts = []
    for (d1a, d2a), (d1b, d2b) in zip(a.parts, b.parts):
        q1 = div(sub(d1a, mul(q, d1b)), bv)
        if d2a is None and d2b is None:
            q2 = None
        else:
            num = sub(sub(0.0 if d2a is None else d2a,
                          mul(2.0, mul(q1, d1b))),
                      mul(q, 0.0 if d2b is None else d2b))
            q2 = div(num, bv)
        parts.append((q1, q2))
    return Jet(q, tuple(parts))


def _jet_unary_apply(a, fv, fp, fpp):
    """Chain rule for f applied to jet a: given f(v), f'(v), f''(v)."""
    parts = []
    for d1, d2 in a.parts:
        nd1 = mul(fp, d1)
        if d2 is None:
            nd2 = None
        else:
            nd2 = add(mul(fpp, mul(d1, d1)), mul(fp, d2))
        parts.append((nd1, nd2))
    return Jet(fv, tuple(parts))


def jet_seed(x, directions):
    """Seed a jet on input matrix x for (direction, order) pairs.

    x: (n, d) array. Each direction is a coordinate index; d1 starts as the
    matching one-hot column matrix, d2 (order 2 only) as zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    parts = []
    for direction, order in directions:
        if not 0 <= direction < d:
            raise ValueError(f"direction {direction} out of range for {d} inputs")
        if order not in (1, 2):
            raise ValueError(f"derivative order must be 1 or 2, got {order}")
        d1 = np.zeros((n, d))
        d1[:, direction] = 1.0
        parts.append((d1, np.zeros((n, d)) if order == 2 else None))
    return Jet(x, tuple(parts))


def jet_forward(model, x, direction, order=2):
    """Evaluate `model` with exact input derivatives along one coordinate.

    x: (n, d) array (or a length-d vector, treated as one row). Returns a Jet
    whose value/d1/d2 are the model outputs and their first/second derivative
    with respect to input coordinate `direction`.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    out = model(jet_seed(x, [(direction, order)]))
    if squeeze and isinstance(out, Jet):
        sq = lambda v: v[0] if isinstance(v, np.ndarray) and v.ndim == 2 else v
        parts = tuple((sq(d1), None if d2 is None else sq(d2))
                      for d1, d2 in out.parts)
        return Jet(sq(out.value), parts)
    return out


# ---------------------------------------------------------------------------
# parameter gradients
# ---------------------------------------------------------------------------

def flatten_vars(params):
    """Depth-first list of Vars from nested lists/tuples (canonical order)."""
    if isinstance(params, Var):
        return [params]
    out = []
    for p in params:
        out.extend(flatten_vars(p))
    return out


def grad_params(loss, params):
    """Gradient of a recorded scalar loss w.r.t. every parameter, flattened.

    `params` is a Var or arbitrarily nested lists/tuples of Vars; the returned
    vector concatenates each leaf's gradient (ravelled, C order) in traversal
    order. Raises on a non-finite loss or an already-consumed tape.
    """
    if not isinstance(loss, Var):
        raise ValueError("loss must be a tape variable")
    lv = loss.value
    if isinstance(lv, np.ndarray):
        if lv.size != 1:
            raise ValueError("loss must be scalar")
        lv = float(lv)
    if not np.isfinite(lv):
        raise ValueError(f"non-finite loss: {lv}")
    leaves = flatten_vars(params)
    grads = loss.tape.gradient(loss, leaves)
    return np.concatenate([np.ravel(g) for g in grads])
