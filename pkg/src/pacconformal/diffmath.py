"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to its :class:`Var` nodes
together with a vector-Jacobian product; :meth:`Tape.backward` replays the
records in reverse.  Operations broadcast like numpy and the backward pass sums
gradients back onto the operand shapes.

Parameter batches carry a leading sample axis: a ``(K, d)`` parameter matrix
pushed through :func:`forward_mlp` yields ``(K, J, out)`` activations, so the
K posterior samples of a minibatch are evaluated in one pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class Var:
    __slots__ = ("value", "tape", "index")
    __array_priority__ = 100.0

    def __init__(self, value, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Var(shape={np.shape(self.value)}, index={self.index})"


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self._parents: list[tuple] = []
        self._vjps: list[Callable | None] = []

    def __len__(self):
        return len(self._vjps)

    def variable(self, value) -> Var:
        return self._push(np.asarray(value, dtype=np.float64), (), None)

    def _push(self, value, parents, vjp) -> Var:
        self._parents.append(parents)
        self._vjps.append(vjp)
        return Var(value, self, len(self._vjps) - 1)

    def record(self, value, parents: Sequence, vjp: Callable) -> Var:
        """Add a node; ``vjp(g)`` returns one gradient per parent (None for constants)."""
        return self._push(value, tuple(parents), vjp)

    def backward(self, out: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of the scalar ``out`` with respect to each of ``wrt``."""
        if out.tape is not self:
            raise ValueError("output belongs to another tape")
        if np.size(out.value) != 1:
            raise ValueError("backward needs a scalar output")
        keep = {w.index for w in wrt}
        grads: dict[int, np.ndarray] = {out.index: np.ones_like(out.value)}
        for i in range(out.index, -1, -1):
            g = grads.get(i) if i in keep else grads.pop(i, None)
            if g is None or self._vjps[i] is None:
                continue
            parents = self._parents[i]
            for parent, pg in zip(parents, self._vjps[i](g)):
                if parent is None or pg is None:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        return [grads.get(w.index, np.zeros_like(w.value)) for w in wrt]


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _unary(x, value, local):
    """Record an elementwise op whose derivative is ``local`` (an array)."""
    tape = _tape_of(x)
    if tape is None:
        return value
    return tape.record(value, (x,), lambda g: (g * local,))


def _binary(a, b, value, ga: Callable, gb: Callable):
    tape = _tape_of(a, b)
    if tape is None:
        return value
    pa = a if isinstance(a, Var) else None
    pb = b if isinstance(b, Var) else None
    sa, sb = np.shape(_val(a)), np.shape(_val(b))

    def vjp(g):
        return (_unbroadcast(ga(g), sa) if pa is not None else None,
                _unbroadcast(gb(g), sb) if pb is not None else None)

    return tape.record(value, (pa, pb), vjp)


# --- elementwise arithmetic -------------------------------------------------

def add(a, b):
    return _binary(a, b, _val(a) + _val(b), lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, _val(a) - _val(b), lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * out / bv)


def neg(x):
    return _unary(x, -_val(x), -1.0)


def square(x):
    v = _val(x)
    return _unary(x, v * v, 2.0 * v)


def abs_(x):
    v = _val(x)
    return _unary(x, np.abs(v), np.sign(v))


def exp(x):
    out = np.exp(_val(x))
    return _unary(x, out, out)


def log(x):
    v = _val(x)
    return _unary(x, np.log(v), 1.0 / v)


# --- activations ------------------------------------------------------------

def sigmoid_np(v):
    # split by sign so neither branch overflows
    out = np.empty_like(v, dtype=np.float64)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus_np(v):
    return np.logaddexp(0.0, v)


def relu(x):
    v = _val(x)
    return _unary(x, np.maximum(v, 0.0), (v > 0).astype(np.float64))


def tanh(x):
    out = np.tanh(_val(x))
    return _unary(x, out, 1.0 - out * out)


def sigmoid(x):
    v = np.asarray(_val(x), dtype=np.float64)
    out = sigmoid_np(np.atleast_1d(v)).reshape(v.shape)
    return _unary(x, out, out * (1.0 - out))


def softplus(x):
    v = np.asarray(_val(x), dtype=np.float64)
    sg = sigmoid_np(np.atleast_1d(v)).reshape(v.shape)
    return _unary(x, softplus_np(v), sg)


def identity(x):
    return x


ACTIVATIONS = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "identity": identity,
}


# --- shape and reduction ----------------------------------------------------

def matmul(a, b):
    av, bv = _val(a), _val(b)
    out = av @ bv
    return _binary(a, b, out,
                   lambda g: g @ np.swapaxes(bv, -1, -2),
                   lambda g: np.swapaxes(av, -1, -2) @ g)


def sum_(x, axis=None, keepdims=False):
    v = _val(x)
    out = v.sum(axis=axis, keepdims=keepdims)
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, v.shape).copy(),)

    return tape.record(out, (x,), vjp)


def mean(x, axis=None, keepdims=False):
    v = _val(x)
    count = v.size if axis is None else np.prod([v.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    v = _val(x)
    tape = _tape_of(x)
    if tape is None:
        return v.reshape(shape)
    return tape.record(v.reshape(shape), (x,), lambda g: (g.reshape(v.shape),))


def getitem(x, key):
    v = _val(x)
    out = v[key]
    tape = _tape_of(x)
    if tape is None:
        return out

    keys = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(k, (np.ndarray, list)) for k in keys)

    def vjp(g):
        full = np.zeros_like(v)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return tape.record(out, (x,), vjp)


def take_along_last(x, idx):
    """``x[..., idx]`` with idx of the same leading shape (like np.take_along_axis)."""
    v = _val(x)
    out = np.take_along_axis(v, idx, axis=-1)
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        # indices may repeat; scatter with accumulation
        flat_lead = int(np.prod(v.shape[:-1]))
        fv = np.zeros((flat_lead, v.shape[-1]))
        fi = idx.reshape(flat_lead, idx.shape[-1])
        fg = g.reshape(flat_lead, idx.shape[-1])
        rows = np.repeat(np.arange(flat_lead), fi.shape[-1])
        np.add.at(fv, (rows, fi.ravel()), fg.ravel())
        return (fv.reshape(v.shape),)

    return tape.record(out, (x,), vjp)


def log_softmax(x, axis=-1):
    v = _val(x)
    m = v.max(axis=axis, keepdims=True)
    z = v - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    tape = _tape_of(x)
    if tape is None:
        return out
    sm = np.exp(out)
    return tape.record(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def softmax(x, axis=-1):
    return exp(log_softmax(x, axis=axis))


# --- parameter containers ---------------------------------------------------

@dataclass(frozen=True)
class ParamLayout:
    """Ordered (name, shape) segments of a flat parameter vector."""

    segments: tuple

    def __post_init__(self):
        object.__setattr__(self, "segments",
                           tuple((str(n), tuple(int(d) for d in s)) for n, s in self.segments))

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.segments)

    def slices(self) -> dict:
        out, start = {}, 0
        for name, shape in self.segments:
            n = int(np.prod(shape))
            out[name] = (slice(start, start + n), shape)
            start += n
        return out

    def to_list(self):
        return [[n, list(s)] for n, s in self.segments]

    @classmethod
    def from_list(cls, items):
        return cls(tuple((n, tuple(s)) for n, s in items))


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size != self.layout.size:
            raise ValueError(f"parameter vector of length {v.size} does not match layout of size {self.layout.size}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def segment(self, name) -> np.ndarray:
        sl, shape = self.layout.slices()[name]
        return self.values[sl].reshape(shape)


@dataclass(frozen=True, eq=False)
class DiagGaussian:
    """N(mu, diag(sigma^2)) with sigma = exp(log_sigma)."""

    mu: ParamVector
    log_sigma: ParamVector

    def __post_init__(self):
        if self.mu.layout != self.log_sigma.layout:
            raise ValueError("mu and log_sigma layouts differ")

    @classmethod
    def from_arrays(cls, mu, log_sigma, layout: ParamLayout) -> "DiagGaussian":
        return cls(ParamVector(mu, layout), ParamVector(log_sigma, layout))

    @property
    def layout(self) -> ParamLayout:
        return self.mu.layout

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.values)


# --- networks ---------------------------------------------------------------

@dataclass(frozen=True)
class MLPArch:
    """Dense network: layer sizes, hidden activation, output head."""

    sizes: tuple
    activation: str = "relu"
    head: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in ("identity", "log_softmax") and self.head not in ACTIVATIONS:
            raise ValueError(f"unknown head {self.head!r}")

    def layout(self, prefix: str = "") -> ParamLayout:
        segs = []
        for i, (fi, fo) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            segs.append((f"{prefix}{i}.W", (fi, fo)))
            segs.append((f"{prefix}{i}.b", (fo,)))
        return ParamLayout(tuple(segs))

    def fan_in(self) -> np.ndarray:
        """Per-parameter fan-in of the layer each parameter belongs to."""
        out = []
        for fi, fo in zip(self.sizes[:-1], self.sizes[1:]):
            out.append(np.full(fi * fo + fo, float(fi)))
        return np.concatenate(out)

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        bound = 1.0 / np.sqrt(self.fan_in())
        return rng.uniform(-bound, bound)

    def to_dict(self):
        return {"sizes": list(self.sizes), "activation": self.activation, "head": self.head}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["sizes"]), d.get("activation", "relu"), d.get("head", "identity"))


def forward_mlp(params, arch: MLPArch, x, offset: int = 0):
    """Dense forward pass.

    ``params`` is a flat ``(d,)`` vector or a ``(K, d)`` batch of vectors (Var or
    array); ``x`` is ``(J, in)`` or ``(K, J, in)``.  ``offset`` locates the
    network inside a longer parameter vector.
    """
    pv = _val(params)
    batched = pv.ndim == 2
    lead = (pv.shape[0],) if batched else ()
    if pv.shape[-1] < offset + arch.layout().size:
        raise ValueError(f"parameter vector too short for architecture {arch.sizes}")
    if np.shape(_val(x))[-1] != arch.sizes[0]:
        raise ValueError(f"input width {np.shape(_val(x))[-1]} != {arch.sizes[0]}")
    act = ACTIVATIONS[arch.activation]
    h = x
    pos = offset
    n_layers = len(arch.sizes) - 1
    for i, (fi, fo) in enumerate(zip(arch.sizes[:-1], arch.sizes[1:])):
        W = reshape(getitem(params, (Ellipsis, slice(pos, pos + fi * fo))), lead + (fi, fo))
        pos += fi * fo
        b = getitem(params, (Ellipsis, slice(pos, pos + fo)))
        pos += fo
        if batched:
            b = reshape(b, lead + (1, fo))
        h = add(matmul(h, W), b)
        if i < n_layers - 1:
            h = act(h)
    if arch.head == "log_softmax":
        h = log_softmax(h, axis=-1)
    elif arch.head != "identity":
        h = ACTIVATIONS[arch.head](h)
    return h


# --- conformal relaxations --------------------------------------------------

def quantile_rank(q: float, n: int) -> int:
    """1-based rank ceil(q * n) clamped to [1, n]."""
    r = math.ceil(q * n - 1e-9)
    return min(max(r, 1), n)


def soft_quantile(scores, q: float, temperature: float):
    """Differentiable ceil(q n)-th order statistic along the last axis.

    Uses the row of the unimodal soft-sort matrix for that rank: a softmax over
    negative squared distances between the hard order statistic and every
    score, dotted with the scores.
    """
    v = _val(scores)
    n = v.shape[-1]
    r = quantile_rank(q, n)
    idx = np.argsort(v, axis=-1, kind="stable")[..., r - 1:r]
    anchor = take_along_last(scores, idx)
    logits = mul(square(sub(anchor, scores)), -1.0 / temperature)
    w = softmax(logits, axis=-1)
    return sum_(mul(w, scores), axis=-1)


def hard_quantile_threshold(scores, alpha_hat: float) -> float:
    """The ceil((n+1)(1 - alpha_hat))-th smallest score, or +inf past n."""
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    n = s.size
    if n < 1:
        raise ValueError("need at least one score")
    r = math.ceil((n + 1) * (1.0 - alpha_hat) - 1e-9)
    if r > n:
        return math.inf
    return float(s[max(r, 1) - 1])


def soft_set_size(scores_per_label, tau, temperature: float):
    """Sum over labels of sigmoid((tau - s_y) / T), along the last axis."""
    z = mul(sub(tau, scores_per_label), 1.0 / temperature)
    return sum_(sigmoid(z), axis=-1)


# --- Gaussian posteriors ----------------------------------------------------

def reparam_sample(mu, log_sigma, noise):
    """theta = mu + exp(log_sigma) * noise; noise may carry a leading sample axis."""
    nv = np.asarray(noise, dtype=np.float64)
    if nv.shape[-1] != np.shape(_val(mu))[-1]:
        raise ValueError("noise length does not match the parameter layout")
    return add(mu, mul(exp(log_sigma), nv))


def gaussian_kl(mu_q, log_sigma_q, mu_p, log_sigma_p):
    """KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)) summed over coordinates."""
    if np.shape(_val(mu_q)) != np.shape(_val(mu_p)):
        raise ValueError("posterior and prior layouts differ")
    var_p = np.exp(2.0 * _val(log_sigma_p))
    term = add(sub(log_sigma_p, log_sigma_q),
               div(add(exp(mul(log_sigma_q, 2.0)), square(sub(mu_q, mu_p))), 2.0 * var_p))
    return sub(sum_(term), 0.5 * np.size(_val(mu_q)))


def kl_between(q: DiagGaussian, p: DiagGaussian) -> float:
    if q.layout != p.layout:
        raise ValueError("posterior and prior layouts differ")
    return float(gaussian_kl(q.mu.values, q.log_sigma.values, p.mu.values, p.log_sigma.values))
