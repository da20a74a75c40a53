"""Reverse-mode automatic differentiation on float64 numpy arrays.

The graph is built per forward pass (define-by-run): every op returns a new
:class:`Tensor` holding the result plus a closure that maps the output
gradient to parent gradients. :func:`backward` walks the graph in reverse
topological order. Leaf tensors created with ``requires_grad=True``
accumulate into ``.grad`` across calls until :func:`zero_grads` resets them.

Every op checks its output for non-finite values and raises
``NaNDetectedError`` instead of propagating NaNs silently. Everything is
double precision; there is no GPU path and no higher-order differentiation.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    NaNDetectedError,
    NonScalarLossError,
    ShapeMismatchError,
)

Array = np.ndarray


class Tensor:
    """Dense n-dimensional array participating in reverse-mode differentiation."""

    __slots__ = ("values", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, values, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable[[Array], list[tuple["Tensor", Array]]] | None = None,
                 op: str = "leaf"):
        self.values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise NaNDetectedError(op)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar; non-Tensor operands become constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values: Array, parents: tuple[Tensor, ...],
          backward_fn: Callable[[Array], list[tuple[Tensor, Array]]],
          op: str) -> Tensor:
    req = any(p.requires_grad for p in parents)
    # subgraphs with no differentiable inputs degrade to constants
    if not req:
        return Tensor(values, op=op)
    t = Tensor(values, parents=parents, backward_fn=backward_fn, op=op)
    t.requires_grad = True
    return t


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ------------------------------------------------------------ basic ops

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.values + b.values

    def bw(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _node(out, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.values - b.values

    def bw(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _node(out, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.values * b.values

    def bw(g):
        return [(a, _unbroadcast(g * b.values, a.shape)),
                (b, _unbroadcast(g * a.values, b.shape))]

    return _node(out, (a, b), bw, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    out = a.values @ b.values

    def bw(g):
        ga = g @ b.values.swapaxes(-1, -2)
        gb = a.values.swapaxes(-1, -2) @ g
        return [(a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape))]

    return _node(out, (a, b), bw, "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with w 2-D and b 1-D; x may carry leading batch axes."""
    if w.ndim != 2 or b.ndim != 1 or x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"affine shapes {x.shape} @ {w.shape} + {b.shape}")
    out = x.values @ w.values + b.values

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        x2 = x.values.reshape(-1, w.shape[0])
        return [(x, (g @ w.values.T).reshape(x.shape)),
                (w, x2.T @ g2),
                (b, g2.sum(axis=0))]

    return _node(out, (x, w, b), bw, "affine")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.values, 0.0)

    def bw(g):
        # subgradient at 0 defined as 0
        return [(x, g * (x.values > 0.0))]

    return _node(out, (x,), bw, "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.values)

    def bw(g):
        return [(x, g * (1.0 - out * out))]

    return _node(out, (x,), bw, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.values)

    def bw(g):
        return [(x, g * out * (1.0 - out))]

    return _node(out, (x,), bw, "sigmoid")


def _sigmoid(v: Array) -> Array:
    # stable in both tails
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return [(x, out * (g - dot))]

    return _node(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no learned scale)."""
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * out).mean(axis=-1, keepdims=True)
        return [(x, inv * (g - gm - out * gym))]

    return _node(out, (x,), bw, "layer_norm")


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    out = x.values.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else x.values.size // out.size

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [(x, np.broadcast_to(g, x.shape) / count)]

    return _node(np.asarray(out), (x,), bw, "mean")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(tensors)
    out = np.concatenate([t.values for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return [(t, np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
                for i, t in enumerate(ts)]

    return _node(out, ts, bw, "concat")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.values.reshape(shape)

    def bw(g):
        return [(x, g.reshape(x.shape))]

    return _node(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = x.values.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return [(x, g.transpose(inverse))]

    return _node(out, (x,), bw, "transpose")


def select(x: Tensor, index: int, axis: int) -> Tensor:
    """Pick one slice along `axis`, removing that axis."""
    out = np.take(x.values, index, axis=axis)
    idx = (slice(None),) * axis + (index,)

    def bw(g):
        gx = np.zeros(x.shape)
        gx[idx] = g
        return [(x, gx)]

    return _node(out, (x,), bw, "select")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    idx = (slice(None),) * axis + (slice(start, start + length),)
    out = x.values[idx]

    def bw(g):
        gx = np.zeros(x.shape)
        gx[idx] = g
        return [(x, gx)]

    return _node(out, (x,), bw, "narrow")


# -------------------------------------------------------- fused layers

def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"mse_loss shapes {pred.shape} vs {target.shape}")
    diff = pred.values - target.values
    out = np.asarray((diff * diff).mean())
    n = pred.size

    def bw(g):
        gd = g * 2.0 * diff / n
        return [(pred, gd), (target, -gd)]

    return _node(out, (pred, target), bw, "mse_loss")


def lstm_cell(x: Tensor, h: Tensor, c: Tensor,
              w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step; gate order along the 4H axis is input, forget, candidate, output.

    Shapes: x (B, in), h and c (B, H), w_ih (in, 4H), w_hh (H, 4H), bias (4H,).
    Returns (h_next, c_next).
    """
    hidden = h.shape[-1]
    if w_ih.shape != (x.shape[-1], 4 * hidden) or w_hh.shape != (hidden, 4 * hidden) \
            or bias.shape != (4 * hidden,):
        raise ShapeMismatchError(
            f"lstm_cell shapes x{x.shape} h{h.shape} w_ih{w_ih.shape} w_hh{w_hh.shape} b{bias.shape}")
    z = x.values @ w_ih.values + h.values @ w_hh.values + bias.values
    zi, zf, zg, zo = np.split(z, 4, axis=-1)
    gi = _sigmoid(zi)
    gf = _sigmoid(zf)
    gg = np.tanh(zg)
    go = _sigmoid(zo)
    c_new = gf * c.values + gi * gg
    tc = np.tanh(c_new)
    h_new = go * tc

    def bw(g):
        gh = g[..., :hidden]
        gc_out = g[..., hidden:]
        go_g = gh * tc
        gc_total = gc_out + gh * go * (1.0 - tc * tc)
        gi_g = gc_total * gg
        gf_g = gc_total * c.values
        gg_g = gc_total * gi
        gz = np.concatenate([
            gi_g * gi * (1.0 - gi),
            gf_g * gf * (1.0 - gf),
            gg_g * (1.0 - gg * gg),
            go_g * go * (1.0 - go),
        ], axis=-1)
        return [
            (x, gz @ w_ih.values.T),
            (h, gz @ w_hh.values.T),
            (c, gc_total * gf),
            (w_ih, x.values.T @ gz),
            (w_hh, h.values.T @ gz),
            (bias, gz.sum(axis=0)),
        ]

    hc = _node(np.concatenate([h_new, c_new], axis=-1), (x, h, c, w_ih, w_hh, bias), bw, "lstm_cell")
    return narrow(hc, hc.ndim - 1, 0, hidden), narrow(hc, hc.ndim - 1, hidden, hidden)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """softmax(Q Kᵀ / √d_head) V with an optional multi-head split of the last axis.

    Accepts (T, d) or (B, T, d) inputs; k and v share their token count.
    """
    single = q.ndim == 2
    if single:
        q = reshape(q, (1,) + q.shape)
        k = reshape(k, (1,) + k.shape)
        v = reshape(v, (1,) + v.shape)
    bsz, tq, d = q.shape
    tk = k.shape[1]
    if d % heads != 0:
        raise ShapeMismatchError(f"model width {d} not divisible by {heads} heads")
    if k.shape != (bsz, tk, d) or v.shape != (bsz, tk, d):
        raise ShapeMismatchError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    dh = d // heads
    qh = transpose(reshape(q, (bsz, tq, heads, dh)), (0, 2, 1, 3))
    kh = transpose(reshape(k, (bsz, tk, heads, dh)), (0, 2, 1, 3))
    vh = transpose(reshape(v, (bsz, tk, heads, dh)), (0, 2, 1, 3))
    scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    weights = softmax(scores)
    out = matmul(weights, vh)
    out = reshape(transpose(out, (0, 2, 1, 3)), (bsz, tq, d))
    if single:
        out = reshape(out, out.shape[1:])
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW layout: x (N,C,H,W), w (O,C,kh,kw), b (O,)."""
    n, cin, hh, ww = x.shape
    cout, cw, kh, kw = w.shape
    if cw != cin or b.shape != (cout,):
        raise ShapeMismatchError(f"conv2d shapes x{x.shape} w{w.shape} b{b.shape}")
    xp = x.values
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    out = np.zeros((n, cout, ho, wo))
    for u in range(kh):
        for vv in range(kw):
            sl = xp[:, :, u:u + stride * ho:stride, vv:vv + stride * wo:stride]
            out += np.einsum("ncij,oc->noij", sl, w.values[:, :, u, vv], optimize=True)
    out += b.values[None, :, None, None]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.values)
        for u in range(kh):
            for vv in range(kw):
                sl = xp[:, :, u:u + stride * ho:stride, vv:vv + stride * wo:stride]
                gw[:, :, u, vv] = np.einsum("noij,ncij->oc", g, sl, optimize=True)
                gxp[:, :, u:u + stride * ho:stride, vv:vv + stride * wo:stride] += \
                    np.einsum("noij,oc->ncij", g, w.values[:, :, u, vv], optimize=True)
        gx = gxp[:, :, padding:hp - padding, padding:wp - padding] if padding else gxp
        return [(x, gx), (w, gw), (b, g.sum(axis=(0, 2, 3)))]

    return _node(out, (x, w, b), bw, "conv2d")


def max_pool(x: Tensor, size: int, stride: int | None = None) -> Tensor:
    """Max pooling over NCHW spatial dims; stride defaults to the pool size."""
    stride = size if stride is None else stride
    n, c, hh, ww = x.shape
    ho = (hh - size) // stride + 1
    wo = (ww - size) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(f"max_pool window {size} larger than input {hh}x{ww}")
    stack = np.stack([
        x.values[:, :, u:u + stride * ho:stride, vv:vv + stride * wo:stride]
        for u in range(size) for vv in range(size)
    ])
    arg = stack.argmax(axis=0)
    out = np.take_along_axis(stack, arg[None], axis=0)[0]

    def bw(g):
        gx = np.zeros(x.shape)
        for flat in range(size * size):
            u, vv = divmod(flat, size)
            mask = arg == flat
            view = gx[:, :, u:u + stride * ho:stride, vv:vv + stride * wo:stride]
            view += g * mask
        return [(x, gx)]

    return _node(out, (x,), bw, "max_pool")


# -------------------------------------------------------------- backward

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # dependencies first, root last


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    Repeated calls without ``zero_grads`` keep accumulating.
    """
    if loss.size != 1:
        raise NonScalarLossError(loss.shape)
    order = _toposort(loss)
    grads: dict[int, Array] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros(node.shape)
                node.grad = node.grad + g
            continue
        for parent, pg in node.backward_fn(g):
            if not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NaNDetectedError(node.op)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ------------------------------------------------------------- optimizer

def adam_step(params: dict[str, Array], grads: dict[str, Array], state: dict,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, Array], dict]:
    """One Adam update with bias correction. Pure: returns new params and state.

    `state` is ``{}`` on the first call; afterwards it holds per-name first and
    second moments plus the step counter.
    """
    if not state:
        state = {"t": 0,
                 "m": {k: np.zeros_like(v) for k, v in params.items()},
                 "v": {k: np.zeros_like(v) for k, v in params.items()}}
    t = state["t"] + 1
    new_params: dict[str, Array] = {}
    new_m: dict[str, Array] = {}
    new_v: dict[str, Array] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name!r}")
        m = beta1 * state["m"][name] + (1.0 - beta1) * g
        v = beta2 * state["v"][name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, {"t": t, "m": new_m, "v": new_v}


class Adam:
    """Stateful wrapper updating a named map of parameter Tensors in place."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict = {}

    def step(self) -> None:
        values = {k: p.values for k, p in self.params.items()}
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.values))
                 for k, p in self.params.items()}
        new_values, self.state = adam_step(values, grads, self.state,
                                           self.lr, self.beta1, self.beta2, self.eps)
        for k, p in self.params.items():
            p.values = new_values[k]

    def zero_grad(self) -> None:
        zero_grads(self.params.values())


# ------------------------------------------------------ gradient checker

class GradCheckReport:
    """Outcome of a finite-difference comparison for one scalar function."""

    def __init__(self, max_rel_err: float, tol: float,
                 failing: list[tuple[int, int, float]], kinks: list[tuple[int, int]],
                 n_checked: int):
        self.max_rel_err = max_rel_err
        self.tol = tol
        self.failing = failing      # (input index, coordinate, rel err)
        self.kinks = kinks          # excluded nondifferentiable coordinates
        self.n_checked = n_checked
        self.passed = not failing

    def __repr__(self) -> str:
        return (f"GradCheckReport(passed={self.passed}, max_rel_err={self.max_rel_err:.3g}, "
                f"checked={self.n_checked}, kinks={len(self.kinks)})")


def grad_check(f: Callable[..., Tensor], points: Sequence[Array], h: float = 1e-4,
               tol: float = 1e-4, n_sample: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare backward() gradients of ``f(*tensors)`` against central differences.

    `points` are the numeric inputs; each becomes a ``requires_grad`` leaf.
    When `n_sample` is given, only that many randomly chosen coordinates per
    input are probed (full models are too wide to sweep exhaustively).
    Coordinates where the one-sided difference quotients disagree by more than
    10% are treated as kinks (e.g. relu at 0), excluded from the comparison,
    and listed in the report.
    """
    arrays = [np.array(p, dtype=np.float64) for p in points]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = f(*leaves)
    if loss.size != 1:
        raise NonScalarLossError(loss.shape)
    backward(loss)
    analytic = [lf.grad if lf.grad is not None else np.zeros(lf.shape) for lf in leaves]

    def eval_at(mutated: list[Array]) -> float:
        return f(*[Tensor(a) for a in mutated]).item()

    rng = rng or np.random.default_rng(0)
    f_mid = loss.item()
    failing: list[tuple[int, int, float]] = []
    kinks: list[tuple[int, int]] = []
    max_rel = 0.0
    n_checked = 0
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        coords = np.arange(flat.size)
        if n_sample is not None and flat.size > n_sample:
            coords = rng.choice(flat.size, size=n_sample, replace=False)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + h
            f_plus = eval_at(arrays)
            flat[j] = orig - h
            f_minus = eval_at(arrays)
            flat[j] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            # kink detection: compare the two one-sided quotients
            d_plus = (f_plus - f_mid) / h
            d_minus = (f_mid - f_minus) / h
            if abs(d_plus - d_minus) > 0.1 * max(1.0, abs(d_plus), abs(d_minus)):
                kinks.append((i, int(j)))
                continue
            ad = analytic[i].reshape(-1)[j]
            rel = abs(ad - fd) / max(1.0, abs(ad), abs(fd))
            max_rel = max(max_rel, rel)
            n_checked += 1
            if rel >= tol:
                failing.append((i, int(j), rel))
    return GradCheckReport(max_rel, tol, failing, kinks, n_checked)


# --------------------------------------------------------- initializers

def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int | None = None, fan_out: int | None = None) -> Array:
    """uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    if fan_in is None:
        fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
    if fan_out is None:
        fan_out = shape[-1]
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)
