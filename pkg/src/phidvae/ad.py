"""Dense float64 linear algebra with reverse-mode differentiation.

Every differentiable operation is a registered :class:`Primitive` with a
forward function and a vector-Jacobian product.  Calling an operation on
plain arrays just evaluates the forward function; calling it with at least one
:class:`Var` records the call on that variable's :class:`Tape`.  Operations
broadcast over leading batch dimensions the way numpy does, and gradients are
summed back onto the shapes of the inputs.

    >>> p = ParamSet({"x": np.array(3.0)})
    >>> float(gradient(lambda q: q["x"] * q["x"], p)["x"])
    6.0
"""

from collections.abc import Mapping

import numpy as np
import scipy.linalg
from scipy.linalg import lapack
from scipy.special import expit

from .errors import DimensionError, NumericError, UnsupportedOperationError

__all__ = [
    "Var", "Tape", "ParamSet", "Primitive", "gradient", "value_and_gradient",
    "value", "is_traced", "registered_primitives",
    "add", "sub", "mul", "div", "neg", "matmul", "matvec", "transpose",
    "sum", "mean", "exp", "log", "sqrt", "square", "leaky_relu", "sigmoid",
    "clip", "getitem", "reshape", "concat", "stack", "diag_embed", "diagonal",
    "roll", "solve", "solve_spd", "logdet_spd", "cholesky", "symmetrize",
]

JITTER = 1e-10


class Primitive:
    __slots__ = ("name", "forward", "vjp")

    def __init__(self, name, forward, vjp):
        self.name = name
        self.forward = forward
        self.vjp = vjp

    def __repr__(self):
        return f"Primitive({self.name!r})"


_REGISTRY = {}


def registered_primitives():
    return dict(_REGISTRY)


class _Entry:
    __slots__ = ("prim", "refs", "values", "static", "out")

    def __init__(self, prim, refs, values, static, out):
        self.prim = prim
        self.refs = refs
        self.values = values
        self.static = static
        self.out = out


class Tape:
    """Linear record of primitive applications.

    A tape is single use: build it by evaluating a function on its variables,
    then call :meth:`grad` once or more. Not thread safe.
    """

    def __init__(self):
        self._entries = []

    def __len__(self):
        return len(self._entries)

    def variable(self, value):
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite value used as a tape input")
        self._entries.append(_Entry(None, (), (), {}, arr))
        return Var(arr, self, len(self._entries) - 1)

    def _record(self, prim, args, values, static, out):
        refs = tuple(a.index if isinstance(a, Var) else None for a in args)
        self._entries.append(_Entry(prim, refs, values, static, out))
        return Var(out, self, len(self._entries) - 1)

    def grad(self, output, wrt, seed=None):
        """Gradients of ``output`` with respect to each variable in ``wrt``."""
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if seed is None:
            if output.value.size != 1:
                raise DimensionError("seed required for non-scalar output")
            seed = np.ones_like(output.value)
        wanted = {v.index for v in wrt}
        grads = [None] * (output.index + 1)
        grads[output.index] = np.asarray(seed, dtype=np.float64)
        for i in range(output.index, -1, -1):
            g = grads[i]
            entry = self._entries[i]
            if g is None or entry.prim is None:
                continue
            if i not in wanted:
                grads[i] = None
            in_grads = entry.prim.vjp(g, entry.out, *entry.values, **entry.static)
            for ref, val, gi in zip(entry.refs, entry.values, in_grads):
                if ref is None or gi is None:
                    continue
                gi = _unbroadcast(gi, np.shape(val))
                grads[ref] = gi if grads[ref] is None else grads[ref] + gi
        out = []
        for v in wrt:
            g = grads[v.index] if v.index < len(grads) else None
            out.append(np.zeros_like(v.value) if g is None else np.array(g))
        return out

    def replay(self, output):
        """Re-evaluate every recorded primitive from the leaves; return ``output``'s value."""
        vals = [None] * (output.index + 1)
        for i in range(output.index + 1):
            e = self._entries[i]
            if e.prim is None:
                vals[i] = e.out
            else:
                args = [vals[r] if r is not None else v for r, v in zip(e.refs, e.values)]
                vals[i] = e.prim.forward(*args, **e.static)
        return vals[output.index]


class Var:
    """A traced array. Arithmetic on it is recorded on its tape."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 1000

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)
    size = property(lambda self: self.value.size)
    dtype = property(lambda self: self.value.dtype)

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var({self.value!r})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise UnsupportedOperationError("only integer power 2 is registered")

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        op = _UFUNCS.get(ufunc)
        if method == "__call__" and op is not None and not kwargs:
            return op(*inputs)
        raise UnsupportedOperationError(
            f"numpy.{ufunc.__name__} has no registered derivative; use phidvae.ad operations"
        )

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedOperationError(
            f"numpy.{func.__name__} has no registered derivative; use phidvae.ad operations"
        )


def value(x):
    """Underlying array of a traced or plain value."""
    return x.value if isinstance(x, Var) else x


def is_traced(x):
    return isinstance(x, Var)


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _apply(prim, args, static):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    if tape is None:
        return prim.forward(*args, **static)
    values = tuple(a.value if isinstance(a, Var) else a for a in args)
    out = prim.forward(*values, **static)
    return tape._record(prim, args, values, static, out)


def _register(name, forward, vjp):
    prim = Primitive(name, forward, vjp)
    _REGISTRY[name] = prim

    def op(*args, **static):
        return _apply(prim, args, static)

    op.__name__ = name
    op.primitive = prim
    return op


def _swap(a):
    return np.swapaxes(a, -1, -2)


# elementwise

add = _register("add", lambda a, b: np.add(a, b), lambda g, out, a, b: (g, g))
sub = _register("sub", lambda a, b: np.subtract(a, b), lambda g, out, a, b: (g, -g))
mul = _register("mul", lambda a, b: np.multiply(a, b), lambda g, out, a, b: (g * b, g * a))
div = _register(
    "div", lambda a, b: np.divide(a, b), lambda g, out, a, b: (g / b, -g * out / b)
)
neg = _register("neg", lambda a: np.negative(a), lambda g, out, a: (-g,))
exp = _register("exp", lambda a: np.exp(a), lambda g, out, a: (g * out,))
log = _register("log", lambda a: np.log(a), lambda g, out, a: (g / a,))
sqrt = _register("sqrt", lambda a: np.sqrt(a), lambda g, out, a: (g / (2.0 * out),))
square = _register("square", lambda a: np.square(a), lambda g, out, a: (2.0 * g * a,))
sigmoid = _register("sigmoid", lambda a: expit(a), lambda g, out, a: (g * out * (1.0 - out),))
leaky_relu = _register(
    "leaky_relu",
    lambda a, slope=0.01: np.where(a > 0, a, slope * a),
    lambda g, out, a, slope=0.01: (g * np.where(a > 0, 1.0, slope),),
)
clip = _register(
    "clip",
    lambda a, lo, hi: np.clip(a, lo, hi),
    lambda g, out, a, lo, hi: (g * ((a >= lo) & (a <= hi)),),
)

_UFUNCS = {
    np.add: add, np.subtract: sub, np.multiply: mul, np.true_divide: div,
    np.negative: neg, np.exp: exp, np.log: log, np.sqrt: sqrt, np.square: square,
}


# shape manipulation

def _sum_vjp(g, out, a, axis=None, keepdims=False):
    shape = np.shape(a)
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape),)


sum = _register("sum", lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims), _sum_vjp)


def mean(a, axis=None):
    n = np.size(value(a)) if axis is None else np.shape(value(a))[axis]
    return sum(a, axis=axis) / n


def _getitem_vjp(g, out, a, idx):
    z = np.zeros(np.shape(a))
    np.add.at(z, idx, g)
    return (z,)


_getitem = _register("getitem", lambda a, idx: np.asarray(a)[idx], _getitem_vjp)


def getitem(a, idx):
    return _getitem(a, idx=idx)


reshape = _register(
    "reshape",
    lambda a, shape: np.reshape(a, shape),
    lambda g, out, a, shape: (np.reshape(g, np.shape(a)),),
)


def _concat_vjp(g, out, *arrays, axis=-1):
    sizes = [np.shape(a)[axis] for a in arrays]
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


concat = _register("concat", lambda *arrays, axis=-1: np.concatenate(arrays, axis=axis), _concat_vjp)


def _stack_vjp(g, out, *arrays, axis=0):
    return tuple(np.take(g, i, axis=axis) for i in range(len(arrays)))


stack = _register("stack", lambda *arrays, axis=0: np.stack(arrays, axis=axis), _stack_vjp)


def _diag_embed(v):
    v = np.asarray(v)
    return v[..., :, None] * np.eye(v.shape[-1])


def _diagonal(a):
    return np.diagonal(a, axis1=-2, axis2=-1).copy()


diag_embed = _register("diag_embed", _diag_embed, lambda g, out, v: (_diagonal(g),))
diagonal = _register("diagonal", _diagonal, lambda g, out, a: (_diag_embed(g),))
roll = _register(
    "roll",
    lambda a, shift, axis=-1: np.roll(a, shift, axis=axis),
    lambda g, out, a, shift, axis=-1: (np.roll(g, -shift, axis=axis),),
)
transpose = _register("transpose", lambda a: _swap(np.asarray(a)), lambda g, out, a: (_swap(g),))


# products


def _matmul_fwd(a, b):
    sa, sb = np.shape(a), np.shape(b)
    ka = sa[-1]
    kb = sb[0] if len(sb) == 1 else sb[-2]
    if ka != kb:
        raise DimensionError(f"matmul: inner dimensions differ ({sa} @ {sb})")
    return np.matmul(a, b)


def _matmul_vjp(g, out, a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 1:
        return (b @ g[..., :, None])[..., 0], a[:, None] * g[..., None, :]
    if b.ndim == 1:
        return g[..., :, None] * b, (_swap(a) @ g[..., :, None])[..., 0]
    return g @ _swap(b), _swap(a) @ g


matmul = _register("matmul", _matmul_fwd, _matmul_vjp)


def _matvec_fwd(A, x):
    if np.shape(A)[-1] != np.shape(x)[-1]:
        raise DimensionError(f"matvec: {np.shape(A)} times {np.shape(x)}")
    return (A @ np.asarray(x)[..., :, None])[..., 0]


def _matvec_vjp(g, out, A, x):
    return g[..., :, None] * np.asarray(x)[..., None, :], (_swap(A) @ g[..., :, None])[..., 0]


matvec = _register("matvec", _matvec_fwd, _matvec_vjp)


def symmetrize(a):
    return 0.5 * (a + transpose(a))


# factorizations


def _sym(a):
    a = np.asarray(a, dtype=np.float64)
    return 0.5 * (a + _swap(a))


def _failing_pivot(a):
    flat = a.reshape((-1,) + a.shape[-2:])
    for m in flat:
        if not np.all(np.isfinite(m)):
            return 0
        _, info = lapack.dpotrf(m, lower=1, clean=1)
        if info > 0:
            return int(info) - 1
    return 0


def _chol(a):
    """Lower Cholesky factor of sym(a), with one jitter retry. Returns (L, a_used)."""
    a = _sym(a)
    if a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"expected square matrix, got {a.shape}")
    try:
        L = np.linalg.cholesky(a)
        if np.all(np.isfinite(L)):
            return L, a
    except np.linalg.LinAlgError:
        pass
    d = np.diagonal(a, axis1=-2, axis2=-1).mean(axis=-1)
    a = a + (JITTER * np.abs(d))[..., None, None] * np.eye(a.shape[-1])
    try:
        L = np.linalg.cholesky(a)
        if np.all(np.isfinite(L)):
            return L, a
    except np.linalg.LinAlgError:
        pass
    pivot = _failing_pivot(a)
    raise NumericError(f"matrix is not positive definite (pivot {pivot})", pivot=pivot)


def _chol_solve(L, b):
    if L.ndim == 2 and np.ndim(b) == 2:
        return scipy.linalg.cho_solve((L, True), b, check_finite=False)
    y = np.linalg.solve(L, b)
    return np.linalg.solve(_swap(L), y)


def _solve_spd_fwd(a, b):
    if np.ndim(b) < 2 or np.shape(b)[-2] != np.shape(a)[-1]:
        raise DimensionError(f"solve_spd: {np.shape(a)} with right-hand side {np.shape(b)}")
    L, _ = _chol(a)
    return _chol_solve(L, np.asarray(b, dtype=np.float64))


def _solve_spd_vjp(g, out, a, b):
    L, _ = _chol(a)
    gb = _chol_solve(L, g)
    ga = -gb @ _swap(out)
    return _sym(ga), gb


solve_spd = _register("solve_spd", _solve_spd_fwd, _solve_spd_vjp)


def _logdet_fwd(a):
    L, _ = _chol(a)
    return 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)


def _logdet_vjp(g, out, a):
    L, _ = _chol(a)
    inv = _chol_solve(L, np.broadcast_to(np.eye(L.shape[-1]), L.shape).copy())
    return (np.asarray(g)[..., None, None] * _sym(inv),)


logdet_spd = _register("logdet_spd", _logdet_fwd, _logdet_vjp)


def _cholesky_vjp(g, out, a):
    L = out
    n = L.shape[-1]
    P = np.tril(_swap(L) @ g) / (1.0 + np.eye(n))
    # S = L^-T P L^-1
    X = np.linalg.solve(_swap(L), P)
    S = _swap(np.linalg.solve(_swap(L), _swap(X)))
    return (_sym(S),)


cholesky = _register("cholesky", lambda a: _chol(a)[0], _cholesky_vjp)


def _solve_fwd(a, b):
    if np.ndim(b) < 2 or np.shape(b)[-2] != np.shape(a)[-1]:
        raise DimensionError(f"solve: {np.shape(a)} with right-hand side {np.shape(b)}")
    try:
        out = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular matrix in solve: {exc}") from exc
    return out


def _solve_vjp(g, out, a, b):
    gb = np.linalg.solve(_swap(a), g)
    return -gb @ _swap(out), gb


solve = _register("solve", _solve_fwd, _solve_vjp)


class ParamSet(Mapping):
    """Named array slots with a fixed name-to-shape layout."""

    def __init__(self, slots):
        self._slots = {}
        for k, v in dict(slots).items():
            self._slots[k] = v if isinstance(v, Var) else np.array(v, dtype=np.float64)

    def __getitem__(self, name):
        return self._slots[name]

    def __iter__(self):
        return iter(self._slots)

    def __len__(self):
        return len(self._slots)

    def __repr__(self):
        inner = ", ".join(f"{k}: {tuple(np.shape(value(v)))}" for k, v in self._slots.items())
        return f"ParamSet({{{inner}}})"

    @property
    def shapes(self):
        return {k: tuple(np.shape(value(v))) for k, v in self._slots.items()}

    @property
    def size(self):
        return int(np.sum([np.size(value(v)) for v in self._slots.values()], dtype=int))

    def flatten(self):
        if not self._slots:
            return np.zeros(0)
        return np.concatenate([np.ravel(value(v)) for v in self._slots.values()])

    def unflatten(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise DimensionError(f"expected flat vector of length {self.size}, got {vec.shape}")
        out, pos = {}, 0
        for k, shape in self.shapes.items():
            n = int(np.prod(shape, dtype=int))
            out[k] = vec[pos:pos + n].reshape(shape).copy()
            pos += n
        return ParamSet(out)

    def map(self, fn, *others):
        return ParamSet({k: fn(v, *(o[k] for o in others)) for k, v in self._slots.items()})

    def updated(self, **slots):
        new = dict(self._slots)
        for k, v in slots.items():
            if k not in new or np.shape(value(v)) != np.shape(value(new[k])):
                raise DimensionError(f"slot {k!r} missing or reshaped")
            new[k] = v
        return ParamSet(new)


def value_and_gradient(f, params):
    """Evaluate scalar ``f(params)`` and its gradient with respect to every slot."""
    params = params if isinstance(params, ParamSet) else ParamSet(params)
    tape = Tape()
    traced = ParamSet({k: tape.variable(v) for k, v in params.items()})
    out = f(traced)
    if not isinstance(out, Var):
        return float(np.asarray(out)), params.map(np.zeros_like)
    if out.value.size != 1:
        raise DimensionError(f"gradient requires a scalar output, got shape {out.shape}")
    names = list(traced)
    grads = tape.grad(out, [traced[k] for k in names])
    return float(out.value.reshape(())), ParamSet(dict(zip(names, grads)))


def gradient(f, params):
    """Gradient of scalar ``f`` at ``params`` as a ParamSet of the same layout."""
    return value_and_gradient(f, params)[1]
