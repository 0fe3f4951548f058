"""Reverse-mode gradient tape and small dense networks.

The tape records array-valued elementary operations (affine maps, tanh,
elementwise arithmetic) and replays them backwards to accumulate exact
adjoints.  It is deliberately minimal: enough to backpropagate through
network evaluations and Euler-Maruyama simulation steps, nothing more.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError


class Var:
    """A value recorded on a tape.  Holds the forward value and its node index."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index


class GradientTape:
    """Ordered operation record; reverse sweep visits each node exactly once."""

    def __init__(self):
        # per node: list of (parent_index, vjp) pairs
        self._edges: list[list] = []

    @property
    def n_nodes(self) -> int:
        return len(self._edges)

    def leaf(self, value) -> Var:
        return self._record(np.asarray(value, dtype=float), [])

    def _record(self, value, edges) -> Var:
        self._edges.append(edges)
        return Var(value, self, len(self._edges) - 1)


def value_of(x):
    """Forward value of a Var or plain array/scalar."""
    return x.value if isinstance(x, Var) else x


def _unbroadcast(grad, shape):
    """Sum an upstream gradient down to the shape of the broadcast operand."""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(a, b, out, da, db):
    """Record a two-operand elementwise op; constants contribute no edges."""
    edges = []
    tape = None
    if isinstance(a, Var):
        tape = a.tape
        sa = np.shape(a.value)
        edges.append((a.index, lambda g, da=da, sa=sa: _unbroadcast(da(g), sa)))
    if isinstance(b, Var):
        tape = b.tape if tape is None else tape
        sb = np.shape(b.value)
        edges.append((b.index, lambda g, db=db, sb=sb: _unbroadcast(db(g), sb)))
    if tape is None:
        raise PreconditionError("at least one operand must be a tape variable")
    return tape._record(out, edges)


def add(a, b) -> Var:
    return _binary(a, b, value_of(a) + value_of(b), lambda g: g, lambda g: g)


def sub(a, b) -> Var:
    return _binary(a, b, value_of(a) - value_of(b), lambda g: g, lambda g: -g)


def mul(a, b) -> Var:
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def neg(a: Var) -> Var:
    return a.tape._record(-a.value, [(a.index, lambda g: -g)])


def square(a: Var) -> Var:
    av = a.value
    return a.tape._record(av * av, [(a.index, lambda g: 2.0 * av * g)])


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape._record(out, [(a.index, lambda g: g * (1.0 - out * out))])


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape._record(out, [(a.index, lambda g: g * out)])


def rsum(a: Var, axis=None) -> Var:
    shape = np.shape(a.value)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return a.tape._record(np.sum(a.value, axis=axis), [(a.index, vjp)])


def rmean(a: Var, axis=None) -> Var:
    n = a.value.size if axis is None else np.shape(a.value)[axis]
    shape = np.shape(a.value)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / n, shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy()

    return a.tape._record(np.mean(a.value, axis=axis), [(a.index, vjp)])


def expand_col(a: Var) -> Var:
    """(S,) -> (S, 1), so path-wide scalars broadcast against factor blocks."""
    return a.tape._record(a.value[:, None], [(a.index, lambda g: g[:, 0])])


def squeeze_col(a: Var) -> Var:
    """(S, 1) -> (S,)."""
    if a.value.ndim != 2 or a.value.shape[1] != 1:
        raise PreconditionError("squeeze_col expects a single-column matrix")
    return a.tape._record(a.value[:, 0], [(a.index, lambda g: g[:, None])])


def getrow(a: Var, i: int) -> Var:
    """Row ``i`` of a matrix; the reverse pass scatters back into that row."""
    shape = np.shape(a.value)

    def vjp(g):
        out = np.zeros(shape)
        out[i] = g
        return out

    return a.tape._record(a.value[i], [(a.index, vjp)])


def rowslice(a: Var, lo: int, hi: int) -> Var:
    """Rows [lo, hi) of a matrix; the reverse pass zero-pads the complement."""
    shape = np.shape(a.value)

    def vjp(g):
        out = np.zeros(shape)
        out[lo:hi] = g
        return out

    return a.tape._record(a.value[lo:hi], [(a.index, vjp)])


def matmul(a, b) -> Var:
    """Product of a (batch, d) operand with a (d, k) or (d,) operand."""
    av, bv = np.asarray(value_of(a), dtype=float), np.asarray(value_of(b), dtype=float)
    out = av @ bv

    def da(g):
        if bv.ndim == 1:
            return np.multiply.outer(g, bv)
        return g @ bv.T

    def db(g):
        if bv.ndim == 1:
            return av.T @ g if av.ndim > 1 else av * g
        if av.ndim == 1:
            return np.multiply.outer(av, g)
        return av.T @ g

    return _binary(a, b, out, da, db)


def colstack(parts) -> Var:
    """Stack 1-d/column operands into a (batch, d) matrix; slices on the way back."""
    tape = None
    arrays = []
    for p in parts:
        v = np.asarray(value_of(p), dtype=float)
        arrays.append(v if v.ndim == 2 else v[:, None])
        if isinstance(p, Var) and tape is None:
            tape = p.tape
    if tape is None:
        raise PreconditionError("at least one operand must be a tape variable")
    out = np.concatenate(arrays, axis=1)
    edges = []
    col = 0
    for p, arr in zip(parts, arrays):
        w = arr.shape[1]
        if isinstance(p, Var):
            if np.asarray(p.value).ndim == 1:
                edges.append((p.index, lambda g, c=col: g[:, c]))
            else:
                edges.append((p.index, lambda g, c=col, w=w: g[:, c : c + w]))
        col += w
    return tape._record(out, edges)


def affine(x, w, b) -> Var:
    """Fused x @ w + b as a single node; any operand may be a constant."""
    xv = np.asarray(value_of(x), dtype=float)
    wv = np.asarray(value_of(w), dtype=float)
    bv = np.asarray(value_of(b), dtype=float)
    out = xv @ wv + bv
    edges = []
    tape = None
    if isinstance(x, Var):
        tape = x.tape
        edges.append((x.index, lambda g: np.asarray(g) @ wv.T))
    if isinstance(w, Var):
        tape = w.tape if tape is None else tape
        edges.append((w.index, lambda g: xv.T @ np.asarray(g)))
    if isinstance(b, Var):
        tape = b.tape if tape is None else tape
        sb = np.shape(bv)
        edges.append((b.index, lambda g: _unbroadcast(np.asarray(g), sb)))
    if tape is None:
        raise PreconditionError("at least one operand must be a tape variable")
    return tape._record(out, edges)


def affine_tanh(x, w, b) -> Var:
    """Fused tanh(x @ w + b) as a single node; any operand may be a constant."""
    xv = np.asarray(value_of(x), dtype=float)
    wv = np.asarray(value_of(w), dtype=float)
    bv = np.asarray(value_of(b), dtype=float)
    out = np.tanh(xv @ wv + bv)
    cache = []

    def pre(g):
        if not cache:
            cache.append(np.asarray(g) * (1.0 - out * out))
        return cache[0]

    edges = []
    tape = None
    if isinstance(x, Var):
        tape = x.tape
        edges.append((x.index, lambda g: pre(g) @ wv.T))
    if isinstance(w, Var):
        tape = w.tape if tape is None else tape
        edges.append((w.index, lambda g: xv.T @ pre(g)))
    if isinstance(b, Var):
        tape = b.tape if tape is None else tape
        sb = np.shape(bv)
        edges.append((b.index, lambda g: _unbroadcast(pre(g), sb)))
    if tape is None:
        raise PreconditionError("at least one operand must be a tape variable")
    return tape._record(out, edges)


def affine_col(x, w, b) -> Var:
    """Fused (x @ w + b)[:, 0] for a single-column output layer."""
    xv = np.asarray(value_of(x), dtype=float)
    wv = np.asarray(value_of(w), dtype=float)
    bv = np.asarray(value_of(b), dtype=float)
    if wv.shape[1] != 1:
        raise PreconditionError("affine_col expects a single-column weight matrix")
    out = (xv @ wv + bv)[:, 0]
    edges = []
    tape = None
    if isinstance(x, Var):
        tape = x.tape
        edges.append((x.index, lambda g: np.multiply.outer(np.asarray(g), wv[:, 0])))
    if isinstance(w, Var):
        tape = w.tape if tape is None else tape
        edges.append((w.index, lambda g: (xv.T @ np.asarray(g))[:, None]))
    if isinstance(b, Var):
        tape = b.tape if tape is None else tape
        edges.append((b.index, lambda g: np.array([np.sum(g)])))
    if tape is None:
        raise PreconditionError("at least one operand must be a tape variable")
    return tape._record(out, edges)


def gauss_nll_acc(ll: Var, x: Var, o: float, inv2: float, logc: float) -> Var:
    """Fused log-likelihood accumulation ll + ((o - x)^2 (-inv2) + logc)."""
    r = o - x.value
    out = ll.value + (r * r * (-inv2) + logc)
    edges = [
        (ll.index, lambda g: g),
        (x.index, lambda g: g * ((2.0 * inv2) * r)),
    ]
    return ll.tape._record(out, edges)


def energy_acc(en: Var, u: Var, half_dt: float) -> Var:
    """Fused control-energy accumulation en + (u * u) * half_dt."""
    uv = u.value
    out = en.value + (uv * uv) * half_dt
    edges = [
        (en.index, lambda g: g),
        (u.index, lambda g: g * ((2.0 * half_dt) * uv)),
    ]
    return en.tape._record(out, edges)


def lin_control(x: Var, k: float, c: float) -> Var:
    """Fused affine state feedback c + x * k."""
    out = c + x.value * k
    return x.tape._record(out, [(x.index, lambda g: g * k)])


def lin_control2(x: Var, y: Var, k0: float, kv: np.ndarray, c: float) -> Var:
    """Fused state feedback (c + x * k0) + y @ kv for an augmented state."""
    out = (c + x.value * k0) + y.value @ kv
    edges = [
        (x.index, lambda g: g * k0),
        (y.index, lambda g: np.multiply.outer(np.asarray(g), kv)),
    ]
    return x.tape._record(out, edges)


def clamp_shift(a: Var, shift, threshold: float, floor: float) -> Var:
    """Smooth one-sided clamp of (shift + a); see ``clamp_floor``."""
    if not floor < threshold:
        raise PreconditionError("floor must lie below threshold")
    v = value_of(shift) + a.value
    span = threshold - floor
    low = floor + span * np.exp(np.minimum(v - threshold, 0.0) / span)
    out = np.where(v >= threshold, v, low)
    deriv = np.where(v >= threshold, 1.0, np.exp(np.minimum(v - threshold, 0.0) / span))
    edges = [(a.index, lambda g: g * deriv)]
    if isinstance(shift, Var):
        edges.append((shift.index, lambda g: np.sum(g * deriv)))
    return a.tape._record(out, edges)


def euler_shared(x: Var, b_out, g_dif, u, lam, eta, dt: float, sxi: np.ndarray) -> Var:
    """One fused Euler-Maruyama update of the observed coordinate.

    Computes (x + (((-lam x + eta) [+ b_out]) + g u) dt) + g sxi with the
    exact grouping of the unrecorded sweep; b_out may be None, and any of
    b_out, g_dif, u, lam, eta may be constants instead of tape variables.
    """
    xv = x.value
    lamv, etav = value_of(lam), value_of(eta)
    gv = value_of(g_dif)
    uv = value_of(u)
    lind = xv * (-lamv) + etav
    t1 = lind if b_out is None else lind + value_of(b_out)
    t3 = t1 + gv * uv
    out = (xv + t3 * dt) + gv * sxi
    edges = [(x.index, lambda g: g * (1.0 - lamv * dt))]
    if isinstance(b_out, Var):
        edges.append((b_out.index, lambda g: g * dt))
    if isinstance(g_dif, Var):
        edges.append((g_dif.index, lambda g: g * (uv * dt + sxi)))
    if isinstance(u, Var):
        edges.append((u.index, lambda g: g * (gv * dt)))
    if isinstance(lam, Var):
        edges.append((lam.index, lambda g: -dt * np.sum(g * xv)))
    if isinstance(eta, Var):
        edges.append((eta.index, lambda g: dt * np.sum(g)))
    return x.tape._record(out, edges)


def euler_factor_obs(
    x: Var, y: Var, b_out, g_dif, u, lam, eta,
    wg: np.ndarray, sumw: float, dt: float, sxi: np.ndarray,
) -> Var:
    """Fused observed-coordinate update when factor noise is shared.

    Computes (x + ((((-lam x + eta) [+ b_out]) - g (y @ wg)) + (g sumw) u) dt)
    + (g sumw) sxi with the exact grouping of the unrecorded sweep.
    """
    xv, yv = x.value, y.value
    lamv, etav = value_of(lam), value_of(eta)
    gv = value_of(g_dif)
    uv = value_of(u)
    lind = xv * (-lamv) + etav
    t1 = lind if b_out is None else lind + value_of(b_out)
    yterm = yv @ wg
    t2 = t1 - gv * yterm
    l0 = gv * sumw
    t3 = t2 + l0 * uv
    out = (xv + t3 * dt) + l0 * sxi
    edges = [
        (x.index, lambda g: g * (1.0 - lamv * dt)),
        (y.index, lambda g: np.multiply.outer(np.asarray(g) * gv * (-dt), wg)),
    ]
    if isinstance(b_out, Var):
        edges.append((b_out.index, lambda g: g * dt))
    if isinstance(g_dif, Var):
        edges.append(
            (g_dif.index, lambda g: g * ((sumw * uv - yterm) * dt + sumw * sxi))
        )
    if isinstance(u, Var):
        edges.append((u.index, lambda g: g * (l0 * dt)))
    if isinstance(lam, Var):
        edges.append((lam.index, lambda g: -dt * np.sum(g * xv)))
    if isinstance(eta, Var):
        edges.append((eta.index, lambda g: dt * np.sum(g)))
    return x.tape._record(out, edges)


def euler_factor_block(y: Var, u, gammas: np.ndarray, dt: float, sxi: np.ndarray) -> Var:
    """Fused factor-block update (y + (y (-gammas) + u[:, None]) dt) + sxi[:, None]."""
    yv = y.value
    uv = value_of(u)
    out = (yv + (yv * (-gammas) + uv[:, None]) * dt) + sxi[:, None]
    edges = [(y.index, lambda g: g * (1.0 - gammas * dt))]
    if isinstance(u, Var):
        edges.append((u.index, lambda g: np.sum(g, axis=1) * dt))
    return y.tape._record(out, edges)


def clamp_floor(a: Var, threshold: float, floor: float) -> Var:
    """Smooth one-sided clamp: identity above ``threshold``, exponential
    approach to ``floor`` below it.  C^1 everywhere and strictly > floor."""
    if not floor < threshold:
        raise PreconditionError("floor must lie below threshold")
    av = a.value
    span = threshold - floor
    low = floor + span * np.exp(np.minimum(av - threshold, 0.0) / span)
    out = np.where(av >= threshold, av, low)
    deriv = np.where(av >= threshold, 1.0, np.exp(np.minimum(av - threshold, 0.0) / span))
    return a.tape._record(out, [(a.index, lambda g: g * deriv)])


def backward(tape: GradientTape, out: Var) -> list:
    """Adjoints of a scalar output with respect to every recorded node.

    Returns a list indexed by node position; nodes the output does not
    depend on get a zero adjoint of matching shape.
    """
    if out.tape is not tape:
        raise PreconditionError("output was not recorded on this tape")
    if np.size(out.value) != 1:
        raise PreconditionError("gradient target must be scalar")
    adjoint = [None] * tape.n_nodes
    adjoint[out.index] = np.ones_like(np.asarray(out.value, dtype=float))
    for i in range(out.index, -1, -1):
        g = adjoint[i]
        if g is None:
            continue
        for parent, vjp in tape._edges[i]:
            contrib = vjp(g)
            if adjoint[parent] is None:
                adjoint[parent] = np.array(contrib, dtype=float, copy=True)
            else:
                adjoint[parent] += contrib
    return adjoint


def grad(adjoint: list, var: Var) -> np.ndarray:
    """Adjoint for one variable, as a zero array when disconnected."""
    g = adjoint[var.index]
    if g is None:
        return np.zeros_like(np.asarray(var.value, dtype=float))
    return g


@dataclass(frozen=True)
class DenseNet:
    """Dense tanh network: affine-tanh chains with an identity output layer."""

    layer_dims: tuple
    weights: list
    biases: list

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)


def net_init(dims, seed: int, zero_last: bool = False) -> DenseNet:
    """Deterministic uniform fan-in init; optionally zero the final layer."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise PreconditionError("dims must list at least two positive layer sizes")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    last = len(dims) - 2
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / np.sqrt(d_in)
        w = rng.uniform(-bound, bound, size=(d_in, d_out))
        b = rng.uniform(-bound, bound, size=d_out)
        if zero_last and i == last:
            w = np.zeros_like(w)
            b = np.zeros_like(b)
        weights.append(w)
        biases.append(b)
    return DenseNet(layer_dims=dims, weights=weights, biases=biases)


def net_leaves(net: DenseNet, tape: GradientTape) -> list:
    """Register every layer's weight matrix and bias vector as tape leaves."""
    return [(tape.leaf(w), tape.leaf(b)) for w, b in zip(net.weights, net.biases)]


def net_forward(net: DenseNet, x, tape: GradientTape | None = None, params=None):
    """Evaluate the network; recording is observation-only.

    ``x`` may be a (batch, d_in) array, a (d_in,) vector, or a Var of either
    shape.  With ``params`` (from net_leaves) the evaluation differentiates
    with respect to the parameters as well as the input.
    """
    n_layers = len(net.weights)
    if tape is None and not isinstance(x, Var):
        h = np.asarray(x, dtype=float)
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            h = h @ w + b
            if i < n_layers - 1:
                h = np.tanh(h)
        return h
    if not isinstance(x, Var):
        x = tape.leaf(x)
    layers = params if params is not None else list(zip(net.weights, net.biases))
    h = x
    for i, (w, b) in enumerate(layers):
        h = add(matmul(h, w), b)
        if i < n_layers - 1:
            h = tanh(h)
    return h


def grad_check(fn, theta: np.ndarray, h: float = 1e-5) -> float:
    """Max relative disagreement between fn's gradient and central differences.

    ``fn(theta) -> (value, gradient)``; the relative error denominator is
    max(1e-8, |analytic| + |numeric|) per coordinate.
    """
    theta = np.asarray(theta, dtype=float)
    _, analytic = fn(theta)
    analytic = np.asarray(analytic, dtype=float)
    worst = 0.0
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        numeric = (fn(up)[0] - fn(dn)[0]) / (2.0 * h)
        denom = max(1e-8, abs(analytic[i]) + abs(numeric))
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
