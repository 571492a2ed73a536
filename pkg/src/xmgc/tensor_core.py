"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Only the operations the generator, discriminator and classifier need are
provided. Storage is float32 by default; reductions accumulate in float64.
Use :func:`default_dtype` to switch storage precision (gradcheck runs in
float64).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class _State:
    def __init__(self) -> None:
        self.dtype = np.dtype(np.float32)
        self.grad_enabled = True
        self.tape = Tape()



@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def get_tape() -> "Tape":
    return _state.tape


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_from_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state.dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._from_op = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Operation records in execution order (hence topologically sorted)."""

    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_state = _State()


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out._from_op = True
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _state.tape.record(Node(op, inputs, out, backward))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Walks the active tape once in reverse and clears it afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if not tape.nodes:
        raise RuntimeError("backward() called with an empty tape")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(tape.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.shape)
                if inp._from_op:
                    key = id(inp)
                    pending[key] = pending[key] + gi if key in pending else gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    finally:
        tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise and reductions ------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def tensor_sum(a: Tensor) -> Tensor:
    total = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    shape = a.shape
    return _make("sum", total, (a,), lambda g: (np.broadcast_to(g, shape),))


def tensor_mean(a: Tensor) -> Tensor:
    n = a.data.size
    total = np.asarray(a.data.mean(dtype=np.float64), dtype=a.data.dtype)
    shape = a.shape
    return _make("mean", total, (a,), lambda g: (np.broadcast_to(g / n, shape),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return _make("leaky_relu", x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1 - out * out),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels expects NCHW tensors, got {a.shape} and {b.shape}")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"concat_channels needs matching N,H,W: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return _make("concat", np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :ca], g[:, ca:]))


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.data.dtype)
    return _make("global_avg_pool", out, (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape),))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[N,F] @ weight[O,F].T + bias[O]."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def _back(g):
        return g @ wd, g.T @ xd, g.sum(axis=0, dtype=np.float64)

    return _make("linear", out.astype(xd.dtype), (x, weight, bias), _back)


# --- convolution ------------------------------------------------------------

def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix [N*ho*wo, C*kh*kw] of a padded NCHW array."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _scatter_windows(cols: np.ndarray, n: int, c: int, hp: int, wp: int,
                     kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: sums patch contributions back into [N,C,hp,wp]."""
    cols = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise ShapeError(f"conv2d: input {x.shape} has {cin} channels but kernel {kernel.shape} expects {kcin}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding nonnegative")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _windows(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(cout, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def _back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (gm.T @ cols).reshape(kernel.shape)
        gb = gm.sum(axis=0, dtype=np.float64)
        gxp = _scatter_windows(gm @ wmat, n, cin, h + 2 * p, w + 2 * p, kh, kw, stride, ho, wo)
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gk, gb

    return _make("conv2d", np.ascontiguousarray(out), (x, kernel, bias), _back)


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Fractionally strided convolution; the adjoint of :func:`conv2d` plus bias.

    ``kernel`` is laid out [Cin, Cout, kh, kw].
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    kcin, cout, kh, kw = kernel.shape
    if cin != kcin:
        raise ShapeError(f"conv2d_transpose: input {x.shape} has {cin} channels but kernel {kernel.shape} expects {kcin}")
    p = padding
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = hf - 2 * p, wf - 2 * p
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d_transpose: computed output size {ho}x{wo} is not positive")
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    wmat = kernel.data.reshape(cin, -1)
    full = _scatter_windows(xm @ wmat, n, cout, hf, wf, kh, kw, stride, h, w)
    out = full[:, :, p:p + ho, p:p + wo] + bias.data[None, :, None, None]

    def _back(g):
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        gcols = _windows(gp, kh, kw, stride, h, w)
        gx = (gcols @ wmat.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
        gk = (xm.T @ gcols).reshape(kernel.shape)
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64)
        return gx, gk, gb

    return _make("conv2d_transpose", np.ascontiguousarray(out), (x, kernel, bias), _back)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train",
                running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
                momentum: float = 0.99, eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    """Per-channel normalization over N, H, W.

    Train mode uses batch statistics and, when ``update_stats`` is set, folds
    them into the running buffers in place (``running = m*running + (1-m)*batch``).
    Infer mode reads the running buffers.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    dt = x.data.dtype
    xd = x.data.astype(np.float64)
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ShapeError(f"batchnorm2d in train mode needs N*H*W >= 2, got input {x.shape}")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if update_stats and running_mean is not None and running_var is not None:
            running_mean[...] = momentum * running_mean + (1 - momentum) * mean
            running_var[...] = momentum * running_var + (1 - momentum) * var * m / (m - 1)
    elif mode == "infer":
        if running_mean is None or running_var is None:
            raise ValueError("infer mode requires running statistics")
        mean = np.asarray(running_mean, dtype=np.float64)
        var = np.asarray(running_var, dtype=np.float64)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv[None, :, None, None]
    g64 = gamma.data.astype(np.float64)
    out = (xhat * g64[None, :, None, None] + beta.data[None, :, None, None]).astype(dt)
    train = mode == "train"

    def _back(g):
        g = g.astype(np.float64)
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        if train:
            m = n * h * w
            dxhat = g * g64[None, :, None, None]
            dx = (inv[None, :, None, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        else:
            dx = g * (g64 * inv)[None, :, None, None]
        return dx, dgamma, dbeta

    return _make("batchnorm2d", out, (x, gamma, beta), _back)


# --- losses -----------------------------------------------------------------

def bce_loss(prediction, label: float) -> Tensor:
    """Binary cross-entropy of probabilities against a constant 0/1 label, batch mean."""
    p = _as_tensor(prediction)
    pd = p.data.astype(np.float64)
    clipped = np.clip(pd, BCE_EPS, 1 - BCE_EPS)
    inside = (pd >= BCE_EPS) & (pd <= 1 - BCE_EPS)
    y = float(label)
    vals = -(y * np.log(clipped) + (1 - y) * np.log1p(-clipped))
    k = pd.size
    loss = np.asarray(vals.mean(), dtype=p.data.dtype)

    def _back(g):
        d = (-(y / clipped) + (1 - y) / (1 - clipped)) / k
        return (g * d * inside,)

    return _make("bce", loss, (p,), _back)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss operands differ in shape: {a.shape} vs {b.shape}")
    diff = a.data.astype(np.float64) - b.data
    k = diff.size
    sign = np.sign(diff)
    loss = np.asarray(np.abs(diff).mean(), dtype=a.data.dtype)
    return _make("l1", loss, (a, b), lambda g: (g * sign / k, -g * sign / k))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    probs = softmax(logits.data)
    rows = np.arange(labels.shape[0])
    loss = np.asarray(-np.log(probs[rows, labels]).mean(), dtype=logits.data.dtype)

    def _back(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (g * d / labels.shape[0],)

    return _make("softmax_xent", loss, (logits,), _back)


# --- gradient checking ------------------------------------------------------

@dataclass
class GradcheckReport:
    passed: bool
    worst_relative_error: float
    tolerance: float
    per_input: list[float]


def gradcheck(builder: Callable, tolerance: float = 1e-3, seed: int = 0,
              h: float = 1e-3, max_probes: int = 64) -> GradcheckReport:
    """Compare analytic gradients against central differences.

    ``builder(rng)`` returns ``(fn, arrays)`` where ``fn(*tensors)`` builds a
    scalar Tensor. Everything is evaluated in float64. At most ``max_probes``
    seeded elements of each input are probed.
    """
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        fn, arrays = builder(rng)
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        _state.tape.clear()
        with _grad_enabled():
            out = fn(*leaves)
            backward(out)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]

        def evaluate(vals):
            with no_grad():
                return fn(*[Tensor(v) for v in vals]).item()

        per_input = []
        for k, base in enumerate(arrays):
            flat_idx = np.arange(base.size)
            if base.size > max_probes:
                flat_idx = np.sort(rng.choice(base.size, size=max_probes, replace=False))
            worst = 0.0
            for fi in flat_idx:
                idx = np.unravel_index(fi, base.shape)
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[k][idx] += h
                minus[k][idx] -= h
                numeric = (evaluate(plus) - evaluate(minus)) / (2 * h)
                a = float(analytic[k][idx])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, rel)
            per_input.append(worst)
    worst_all = max(per_input) if per_input else 0.0
    return GradcheckReport(worst_all <= tolerance, worst_all, tolerance, per_input)


@contextlib.contextmanager
def _grad_enabled() -> Iterator[None]:
    previous = _state.grad_enabled
    _state.grad_enabled = True
    try:
        yield
    finally:
        _state.grad_enabled = previous
