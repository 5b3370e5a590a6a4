"""Dense tensor math with reverse-mode gradients.

Only the operations the light field backbone needs are provided. Feature maps
are channel-major ``C x H x W`` arrays without a batch axis, and convolution
kernels are laid out ``k x k x C_in x C_out``.

Gradients are recorded on a tape: every op returns a new :class:`Tensor` that
remembers its parents and a closure mapping the output gradient to parent
gradients. :meth:`Tensor.backward` walks the tape in reverse topological order
and accumulates into the ``grad`` field of leaf tensors only.

Accumulation order inside an output element is fixed by construction
(im2col followed by one matrix product, separable interpolation matrices),
so repeated runs on one machine are bit-reproducible.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "add",
    "concat",
    "reshape",
    "take",
    "crop",
    "conv2d",
    "upsample_bicubic_2x",
    "bicubic_matrix",
    "batch_norm",
    "gelu",
    "sigmoid",
    "softmax",
    "activation",
    "mse",
    "AdamState",
    "adam_step",
    "finite_diff_check",
]

MAX_NDIM = 4
BICUBIC_A = -0.5


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


class Tensor:
    """A dense array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim > MAX_NDIM:
            raise ShapeError(f"tensors hold at most {MAX_NDIM} axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            label = self.name or "tensor"
            raise NonFiniteError(f"{label} of shape {self.shape} holds non-finite values")
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``.

        ``grad`` seeds the output gradient; it defaults to ones, which for a
        scalar loss is the usual ``d loss / d loss = 1``.
        """
        if not self.requires_grad:
            return
        if grad is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.broadcast_to(np.asarray(grad, dtype=self.dtype), self.shape).copy()

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    live = any(p.requires_grad for p in parents)
    out.requires_grad = live
    out._parents = parents if live else ()
    out._backward = backward if live else None
    return out


# ---------------------------------------------------------------------------
# structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; gradients are split back by extent."""
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(data, tensors, backward)


def reshape(t: Tensor, shape) -> Tensor:
    src = t.shape
    return _node(t.data.reshape(shape), (t,), lambda g: (g.reshape(src),))


def take(src: Tensor, index: np.ndarray, shape=None) -> Tensor:
    """Gather ``src[index]`` from a 1-D source.

    The reverse pass scatter-adds, so each source entry receives the sum of
    the gradients of every position that selected it.
    """
    if src.data.ndim != 1:
        raise ShapeError("take expects a 1-D source")
    index = np.asarray(index)
    out_shape = index.shape if shape is None else tuple(shape)
    flat = index.ravel()
    n = src.shape[0]
    data = src.data[flat].reshape(out_shape)

    def backward(g):
        return (np.bincount(flat, weights=g.ravel(), minlength=n).astype(src.dtype, copy=False),)

    return _node(data, (src,), backward)


def crop(t: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height x width`` window of a ``C x H x W`` map."""
    c, h, w = t.shape
    if height > h or width > w:
        raise ShapeError(f"crop window {height}x{width} exceeds map {h}x{w}")
    if (height, width) == (h, w):
        return t

    def backward(g):
        full = np.zeros(t.shape, dtype=g.dtype)
        full[:, :height, :width] = g
        return (full,)

    return _node(t.data[:, :height, :width].copy(), (t,), backward)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Dilated 2-D cross-correlation with zero "same" padding.

    ``x`` is ``C_in x H x W``, ``kernel`` is ``k x k x C_in x C_out`` with odd
    ``k`` and ``bias`` has ``C_out`` entries. The padding is
    ``dilation * (k - 1) / 2`` on every side so the spatial extent is kept.
    """
    if dilation < 1 or int(dilation) != dilation:
        raise ValueError(f"dilation must be a positive integer, got {dilation}")
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects C x H x W input and 4-D kernel, got {x.shape}, {kernel.shape}")
    cin, h, w = x.shape
    k, k2, kcin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel spatial size must be square and odd, got {k}x{k2}")
    if kcin != cin:
        raise ShapeError(f"input has {cin} channels but kernel expects {kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")

    d = int(dilation)
    pad = d * (k - 1) // 2
    dtype = np.result_type(x.dtype, kernel.dtype)
    xp = np.pad(x.data.astype(dtype, copy=False), ((0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((k, k, cin, h, w), dtype=dtype)
    for a in range(k):
        for b in range(k):
            cols[a, b] = xp[:, a * d : a * d + h, b * d : b * d + w]
    cols = cols.reshape(k * k * cin, h * w)
    kmat = kernel.data.astype(dtype, copy=False).reshape(k * k * cin, cout)
    out = (kmat.T @ cols).reshape(cout, h, w)
    if bias is not None:
        out += bias.data[:, None, None]

    def backward(g):
        g2 = g.reshape(cout, h * w)
        gk = (cols @ g2.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (kmat @ g2).reshape(k, k, cin, h, w)
            gxp = np.zeros((cin, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
            for a in range(k):
                for b in range(k):
                    gxp[:, a * d : a * d + h, b * d : b * d + w] += gcols[a, b]
            gx = gxp[:, pad : pad + h, pad : pad + w]
        return (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, backward)


# ---------------------------------------------------------------------------
# resampling


def _cubic_weight(t: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    t = np.abs(t)
    near = ((a + 2) * t - (a + 3)) * t * t + 1
    far = ((a * t - 5 * a) * t + 8 * a) * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


@functools.lru_cache(maxsize=64)
def bicubic_matrix(n: int, dtype: str = "float64") -> np.ndarray:
    """The ``2n x n`` matrix of 2x bicubic upsampling along one axis.

    Output sample ``i`` sits at source coordinate ``(i + 0.5) / 2 - 0.5``
    (pixel-centre alignment); taps outside ``[0, n)`` replicate the edge.
    """
    i = np.arange(2 * n)
    src = (i + 0.5) / 2 - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    m = np.zeros((2 * n, n))
    for offset in (-1, 0, 1, 2):
        cols = np.clip(base + offset, 0, n - 1)
        np.add.at(m, (i, cols), _cubic_weight(frac - offset))
    m = m.astype(dtype)
    m.setflags(write=False)
    return m


def upsample_bicubic_2x(x: Tensor) -> Tensor:
    """Separable 2x bicubic upsampling of a ``C x H x W`` map (a = -0.5)."""
    if x.data.ndim != 3:
        raise ShapeError(f"expected C x H x W, got {x.shape}")
    _, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"bicubic upsampling needs H, W >= 2, got {h}x{w}")
    mh = bicubic_matrix(h, x.dtype.name)
    mw = bicubic_matrix(w, x.dtype.name)
    out = mh @ (x.data @ mw.T)

    def backward(g):
        return ((mh.T @ g) @ mw,)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# normalisation and activations


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation with statistics of the current pass.

    Variance is the biased (population) estimate over the ``H*W`` positions.
    """
    c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine parameters must have {c} entries")
    n = h * w
    if n < 2:
        raise ShapeError("batch_norm needs at least two spatial positions")
    flat = x.data.reshape(c, n)
    mean = flat.mean(axis=1, keepdims=True)
    centered = flat - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = (gamma.data[:, None] * xhat + beta.data[:, None]).reshape(c, h, w)

    def backward(g):
        g2 = g.reshape(c, n)
        ggamma = (g2 * xhat).sum(axis=1)
        gbeta = g2.sum(axis=1)
        gx = None
        if x.requires_grad:
            dxhat = g2 * gamma.data[:, None]
            gx = (
                inv_std
                / n
                * (n * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
            ).reshape(c, h, w)
        return (gx, ggamma, gbeta)

    return _node(out, (x, gamma, beta), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _node(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    """Softmax across ``axis`` (the channel axis for ``C x H x W`` maps)."""
    if x.data.ndim == 0:
        raise ShapeError("softmax needs a channel axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward)


_ACTIVATIONS = {"gelu": gelu, "sigmoid": sigmoid, "softmax": softmax}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error as a 0-d tensor."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != tgt.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {tgt.shape}")
    diff = pred.data - tgt
    count = diff.size
    value = np.asarray(np.mean(diff * diff), dtype=pred.dtype)
    return _node(value, (pred,), lambda g: (g * (2.0 / count) * diff,))


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    """Adam moments keyed by parameter name.

    Step counts are kept per parameter: a modulator slice that is not sampled
    in an iteration is not touched, so its bias correction must not advance.
    """

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place to every entry of ``params``."""
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise KeyError(f"no gradient for parameter(s): {', '.join(missing)}")
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.steps[name] = 0
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ShapeError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        t = state.steps[name] + 1
        state.steps[name] = t
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / (1.0 - state.beta1**t)
        vhat = v / (1.0 - state.beta2**t)
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype, copy=False)
    state.step += 1


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_check(
    op: Callable[..., Tensor],
    inputs,
    h: float = 1e-4,
    samples: int = 24,
    seed: int = 0,
    dtype=np.float64,
) -> float:
    """Compare analytic gradients of ``op`` against central differences.

    ``op`` takes one tensor per entry of ``inputs`` and returns a tensor. The
    output is reduced through a fixed random linear functional. Analytic
    gradients are computed with inputs cast to ``dtype``; the numeric side
    always evaluates ``op`` in float64. Up to ``samples`` coordinates of every
    input are probed.

    Returns the largest ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if isinstance(inputs, np.ndarray) or not isinstance(inputs, (list, tuple)):
        inputs = [inputs]
    base = [np.asarray(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)

    probe = op(*[Tensor(a) for a in base])
    weights = rng.standard_normal(probe.shape)

    def functional(arrays):
        out = op(*[Tensor(a) for a in arrays]).data
        return float(np.sum(weights * out))

    leaves = [Tensor(a, requires_grad=True, dtype=dtype) for a in base]
    out = op(*leaves)
    out.backward(weights.astype(out.dtype))

    worst = 0.0
    for idx, arr in enumerate(base):
        analytic = leaves[idx].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        count = min(samples, arr.size)
        coords = rng.choice(arr.size, size=count, replace=False)
        for flat in coords:
            pos = np.unravel_index(flat, arr.shape)
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[idx][pos] += h
            minus[idx][pos] -= h
            numeric = (functional(plus) - functional(minus)) / (2 * h)
            err = abs(float(analytic[pos]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
