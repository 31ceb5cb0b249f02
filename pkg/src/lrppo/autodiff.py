"""Define-by-run reverse-mode autodiff over small dense float64 tensors.

Every value on a tape is a 2-D ``numpy.ndarray`` of dtype float64 (rows are
batch entries).  The recorded primitives are deliberately few: affine, relu,
tanh, softmax, log, add, mul, mean and max-with-constant.  Structural helpers
such as column selection, row sums and concatenation are expressed as affine
maps with constant weights, so they need no extra backward rules.

Parameters live in :class:`ScorerParams`, which also carries the AdamW
moment buffers.  A tape remembers the version of every parameter set it read;
replaying it after an optimizer step raises :class:`TapeError`.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, TapeError

ACTIVATIONS = ("relu", "tanh")


class ScorerParams:
    """Weights of a fully connected network plus AdamW state.

    ``layers[i]`` is ``(W, b)`` with ``W`` of shape ``(out, in)`` and ``b`` of
    shape ``(out,)``.  The activation is applied after every layer except the
    last, and after the last one too when ``final_activation`` is set (used by
    the pair trunks, whose output is a hidden representation).
    """

    def __init__(self, layers, activation="tanh", final_activation=False):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layers = []
        for i, (w, b) in enumerate(layers):
            w = np.array(w, dtype=np.float64, ndmin=2)
            b = np.array(b, dtype=np.float64).reshape(-1)
            if w.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {i}: weight has {w.shape[0]} rows but bias has {b.shape[0]}")
            if i > 0 and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ShapeError(
                    f"layer {i}: expects input width {w.shape[1]}, "
                    f"previous layer emits {self.layers[i - 1][0].shape[0]}"
                )
            self.layers.append((w, b))
        self.activation = activation
        self.final_activation = final_activation
        self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers]
        self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers]
        self.step = 0
        self.version = 0

    @classmethod
    def init(cls, sizes, rng, activation="tanh", final_activation=False, scale=1.0):
        """Glorot-uniform weights and zero biases for widths ``sizes``."""
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = scale * math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            layers.append((w, np.zeros(fan_out)))
        return cls(layers, activation=activation, final_activation=final_activation)

    @classmethod
    def zeros(cls, sizes, bias=0.0, activation="tanh", final_activation=False):
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            layers.append((np.zeros((fan_out, fan_in)), np.full(fan_out, float(bias))))
        return cls(layers, activation=activation, final_activation=final_activation)

    @property
    def input_dim(self):
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self):
        return self.layers[-1][0].shape[0]

    @property
    def sizes(self):
        return [self.input_dim] + [w.shape[0] for w, _ in self.layers]

    def n_params(self):
        return sum(w.size + b.size for w, b in self.layers)

    def touch(self):
        """Mark the weights as mutated so stale tapes are rejected."""
        self.version += 1

    def copy(self):
        out = ScorerParams(
            [(w.copy(), b.copy()) for w, b in self.layers],
            activation=self.activation,
            final_activation=self.final_activation,
        )
        out.m = [(a.copy(), c.copy()) for a, c in self.m]
        out.v = [(a.copy(), c.copy()) for a, c in self.v]
        out.step = self.step
        return out

    def flat(self):
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def set_flat(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.n_params():
            raise ShapeError(f"expected {self.n_params()} values, got {vector.size}")
        pos = 0
        for w, b in self.layers:
            w[...] = vector[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            b[...] = vector[pos:pos + b.size]
            pos += b.size
        self.touch()

    def to_dict(self):
        return {
            "activation": self.activation,
            "final_activation": self.final_activation,
            "step": self.step,
            "layers": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in self.layers],
            "adam_m": [{"weight": a.tolist(), "bias": c.tolist()} for a, c in self.m],
            "adam_v": [{"weight": a.tolist(), "bias": c.tolist()} for a, c in self.v],
        }

    @classmethod
    def from_dict(cls, data):
        def pairs(entries):
            return [
                (np.array(e["weight"], dtype=np.float64).reshape(len(e["weight"]), -1),
                 np.array(e["bias"], dtype=np.float64))
                for e in entries
            ]

        out = cls(pairs(data["layers"]), activation=data["activation"],
                  final_activation=data["final_activation"])
        out.m = pairs(data["adam_m"])
        out.v = pairs(data["adam_v"])
        for (w, b), (mw, mb), (vw, vb) in zip(out.layers, out.m, out.v):
            if mw.shape != w.shape or vw.shape != w.shape or mb.shape != b.shape or vb.shape != b.shape:
                raise ShapeError("optimizer moments do not match parameter shapes")
        out.step = int(data["step"])
        return out

    def equals(self, other):
        """Bitwise equality of weights, moments and step counter."""
        if self.sizes != other.sizes or self.step != other.step:
            return False
        if (self.activation, self.final_activation) != (other.activation, other.final_activation):
            return False
        for mine, theirs in ((self.layers, other.layers), (self.m, other.m), (self.v, other.v)):
            for (a, b), (c, d) in zip(mine, theirs):
                if not (np.array_equal(a, c) and np.array_equal(b, d)):
                    return False
        return True


class Node:
    __slots__ = ("value", "tape", "index", "parents", "backward_fn")

    def __init__(self, value, tape, parents=(), backward_fn=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        if self.value.size != 1:
            raise ShapeError(f"item() on a node of shape {self.value.shape}")
        return float(self.value.reshape(()))

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.add(self, self.tape.mul(other, -1.0))

    def __rsub__(self, other):
        return self.tape.add(self.tape.mul(self, -1.0), other)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.mul(self, -1.0)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as2d(value):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    return arr


class Tape:
    """Records one forward computation for a single backward sweep."""

    def __init__(self):
        self.nodes = []
        self.output = None
        self._slots = {}
        self._versions = {}
        self.kink_distance = math.inf

    # -- leaves -----------------------------------------------------------
    def constant(self, value):
        return Node(_as2d(value), self)

    def param(self, params, layer, which):
        key = (id(params), layer, which)
        if key in self._slots:
            return self._slots[key][3]
        self._check_version(params)
        w, b = params.layers[layer]
        value = w if which == "weight" else b.reshape(1, -1)
        node = Node(value, self)
        self._slots[key] = (params, layer, which, node)
        return node

    def _check_version(self, params):
        seen = self._versions.get(id(params))
        if seen is None:
            self._versions[id(params)] = (params, params.version)
        elif seen[1] != params.version:
            raise TapeError("parameters were mutated while the tape was recording")

    def _lift(self, value):
        return value if isinstance(value, Node) else self.constant(value)

    # -- primitives -------------------------------------------------------
    def affine(self, x, weight, bias=None):
        """``x @ weight.T + bias``; weight and bias may be nodes or constants."""
        x = self._lift(x)
        weight = self._lift(weight)
        if x.value.shape[1] != weight.value.shape[1]:
            raise ShapeError(
                f"affine: input width {x.value.shape[1]} does not match weight width {weight.value.shape[1]}"
            )
        out = x.value @ weight.value.T
        parents = [x, weight]
        if bias is not None:
            bias = self._lift(bias)
            out = out + bias.value
            parents.append(bias)

        def backward(g):
            grads = [g @ weight.value, g.T @ x.value]
            if bias is not None:
                grads.append(g.sum(axis=0, keepdims=True))
            return grads

        return Node(out, self, tuple(parents), backward)

    def relu(self, x):
        mask = x.value > 0.0
        nz = np.abs(x.value[x.value != 0.0]) if x.value.size else np.array([])
        if nz.size:
            self.kink_distance = min(self.kink_distance, float(nz.min()))
        return Node(np.where(mask, x.value, 0.0), self, (x,), lambda g: [g * mask])

    def tanh(self, x):
        y = np.tanh(x.value)
        return Node(y, self, (x,), lambda g: [g * (1.0 - y * y)])

    def softmax(self, x):
        """Row-wise softmax."""
        z = x.value - x.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=1, keepdims=True)

        def backward(g):
            return [s * (g - (g * s).sum(axis=1, keepdims=True))]

        return Node(s, self, (x,), backward)

    def log(self, x):
        with np.errstate(divide="ignore", invalid="ignore"):
            y = np.log(x.value)
        return Node(y, self, (x,), lambda g: [g / x.value])

    def add(self, a, b):
        a, b = self._lift(a), self._lift(b)
        sa, sb = a.value.shape, b.value.shape
        return Node(a.value + b.value, self, (a, b),
                    lambda g: [_unbroadcast(g, sa), _unbroadcast(g, sb)])

    def mul(self, a, b):
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        return Node(av * bv, self, (a, b),
                    lambda g: [_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)])

    def mean(self, x):
        n = x.value.size
        shape = x.value.shape
        return Node(np.array([[x.value.mean()]]), self, (x,), lambda g: [np.full(shape, g.item() / n)])

    def maximum(self, x, c):
        """``max(x, c)`` for a constant ``c``.

        At ``x == c`` the gradient follows the ``x`` branch.
        """
        c = float(c)
        mask = x.value >= c
        if x.value.size:
            self.kink_distance = min(self.kink_distance, float(np.abs(x.value - c).min()))
        return Node(np.where(mask, x.value, c), self, (x,), lambda g: [g * mask])

    # -- composites built from the primitives ------------------------------
    def column(self, x, j):
        sel = np.zeros((1, x.value.shape[1]))
        sel[0, j] = 1.0
        return self.affine(x, sel)

    def row_sum(self, x):
        return self.affine(x, np.ones((1, x.value.shape[1])))

    def concat(self, a, b):
        wa, wb = a.value.shape[1], b.value.shape[1]
        eye = np.eye(wa + wb)
        return self.add(self.affine(a, eye[:, :wa]), self.affine(b, eye[:, wa:]))

    def minimum(self, a, b):
        """``min(a, b) = a - max(a - b, 0)``."""
        return self.add(a, self.mul(self.maximum(self.add(a, self.mul(b, -1.0)), 0.0), -1.0))

    def abs(self, x):
        """``|x| = 2 max(x, 0) - x``."""
        return self.add(self.mul(self.maximum(x, 0.0), 2.0), self.mul(x, -1.0))

    def clip(self, x, lo, hi):
        upper = self.minimum(x, self.constant(np.full(x.value.shape, float(hi))))
        return self.maximum(upper, lo)

    # -- reverse sweep ------------------------------------------------------
    def backward(self, output=None, output_grad=None):
        output = output if output is not None else self.output
        if output is None:
            raise TapeError("tape has no output node")
        for params, version in self._versions.values():
            if params.version != version:
                raise TapeError("parameters changed since this tape was recorded; re-run the forward pass")
        grads = [None] * len(self.nodes)
        if output_grad is None:
            output_grad = np.ones_like(output.value)
        grads[output.index] = np.asarray(output_grad, dtype=np.float64).reshape(output.value.shape)
        for node in reversed(self.nodes[: output.index + 1]):
            g = grads[node.index]
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if grads[parent.index] is None:
                    grads[parent.index] = pg
                else:
                    grads[parent.index] = grads[parent.index] + pg
        result = Gradients()
        for params, layer, which, node in self._slots.values():
            g = grads[node.index]
            if g is not None:
                result.accumulate(params, layer, which, g)
        return result


class Gradients:
    """Parameter gradients keyed by parameter set; untouched slots read as zero."""

    def __init__(self):
        self._store = {}

    def _entry(self, params):
        key = id(params)
        if key not in self._store:
            self._store[key] = (params, [[np.zeros_like(w), np.zeros_like(b)] for w, b in params.layers])
        return self._store[key][1]

    def accumulate(self, params, layer, which, grad):
        slot = self._entry(params)[layer]
        if which == "weight":
            slot[0] = slot[0] + grad
        else:
            slot[1] = slot[1] + grad.reshape(-1)

    def __getitem__(self, params):
        return [(w, b) for w, b in self._entry(params)]

    def __contains__(self, params):
        return id(params) in self._store

    def flat(self, params):
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self[params]])

    def __add__(self, other):
        out = Gradients()
        for source in (self, other):
            for params, layers in source._store.values():
                for i, (w, b) in enumerate(layers):
                    out.accumulate(params, i, "weight", w)
                    out.accumulate(params, i, "bias", b)
        return out


def apply_mlp(tape, params, x, activation=None):
    """Record ``params`` applied to the rows of ``x`` on ``tape``."""
    activation = activation or params.activation
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    h = tape._lift(x)
    last = len(params.layers) - 1
    for i in range(len(params.layers)):
        w = params.layers[i][0]
        if h.value.shape[1] != w.shape[1]:
            raise ShapeError(f"layer {i}: expected input width {w.shape[1]}, got {h.value.shape[1]}")
        h = tape.affine(h, tape.param(params, i, "weight"), tape.param(params, i, "bias"))
        if i < last or params.final_activation:
            h = tape.relu(h) if activation == "relu" else tape.tanh(h)
    return h


def mlp_forward(params, x, activation=None):
    """Evaluate the network on one input vector.

    Returns the output vector and the tape that recorded it.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != params.input_dim:
        raise ShapeError(f"layer 0: expected input of length {params.input_dim}, got shape {x.shape}")
    tape = Tape()
    out = apply_mlp(tape, params, x.reshape(1, -1), activation)
    tape.output = out
    return out.value.reshape(-1).copy(), tape


def forward_array(params, x):
    """Tape-free batch forward; bitwise equal to :func:`apply_mlp` values."""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.input_dim:
        raise ShapeError(f"layer 0: expected input width {params.input_dim}, got shape {h.shape}")
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = h @ w.T + b.reshape(1, -1)
        if i < last or params.final_activation:
            h = np.where(h > 0.0, h, 0.0) if params.activation == "relu" else np.tanh(h)
    return h


def backward(tape, output_grad=None):
    """Reverse sweep from ``tape.output``."""
    return tape.backward(tape.output, output_grad)


def adam_step(params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One AdamW update in place; returns ``params``.

    ``grads`` is a list of ``(dW, db)`` aligned with ``params.layers``.  Weight
    decay is decoupled: weights shrink by ``lr * weight_decay * w`` before the
    moment-based step.
    """
    if len(grads) != len(params.layers):
        raise ShapeError(f"got gradients for {len(grads)} layers, params have {len(params.layers)}")
    for i, ((gw, gb), (w, b)) in enumerate(zip(grads, params.layers)):
        if gw.shape != w.shape or np.shape(gb) != b.shape:
            raise ShapeError(f"layer {i}: gradient shape mismatch")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NonFiniteError(f"layer {i}: non-finite gradient")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (gw, gb) in enumerate(grads):
        w, b = params.layers[i]
        mw, mb = params.m[i]
        vw, vb = params.v[i]
        for p, g, m, v in ((w, gw, mw, vw), (b, gb, mb, vb)):
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            if weight_decay:
                p -= lr * weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    params.touch()
    return params


def numeric_gradient(fn: Callable[[], float], params_list: Sequence[ScorerParams], h=1e-5):
    """Central finite differences of ``fn`` with respect to every parameter."""
    out = []
    for params in params_list:
        base = params.flat()
        g = np.zeros_like(base)
        for i in range(base.size):
            probe = base.copy()
            probe[i] = base[i] + h
            params.set_flat(probe)
            up = fn()
            probe[i] = base[i] - h
            params.set_flat(probe)
            down = fn()
            g[i] = (up - down) / (2.0 * h)
        params.set_flat(base)
        out.append(g)
    return out


def flat_gradients(grads: Gradients, params_list: Iterable[ScorerParams]):
    return [grads.flat(p) for p in params_list]
