"""Dense NHWC tensor kernel with tape-based reverse-mode differentiation.

Tensors hold numpy arrays of up to 4 axes laid out as (batch, height,
width, channels). Operations executed while a :class:`Tape` is active are
recorded in execution order; ``Tape.backward`` replays their adjoints in
exact reverse order. Training runs in float32, gradient verification in
float64 (see :func:`grad_check`).

Shape discipline is strict: binary operations accept equal shapes, python
scalars, or same-rank operands with explicit size-1 axes. Anything else is
rejected rather than silently broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class NonDifferentiablePointError(RuntimeError):
    """Raised by grad_check when the numeric estimate is unstable."""


class Tensor:
    """A dense real-valued array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are limited to 4 axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


class _Node:
    """One recorded operation: output, inputs, and the adjoint callback."""

    __slots__ = ("out", "inputs", "bwd", "name")

    def __init__(self, out, inputs, bwd, name):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd
        self.name = name


class Tape:
    """Ordered record of executed operations for reverse-mode replay."""

    _active: "Tape | None" = None

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev = None

    def __enter__(self):
        self._prev = Tape._active
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = self._prev
        self._prev = None
        return False

    def backward(self, loss: Tensor, visit_log: list | None = None):
        """Accumulate adjoints of ``loss`` into ``.grad`` of leaf tensors.

        Nodes are visited in exact reverse execution order. Tensors that do
        not lie on a path to ``loss`` receive no contribution; their
        gradient is exactly zero (``grad`` stays ``None``).
        """
        if not isinstance(loss, Tensor):
            raise TypeError("backward expects a Tensor loss")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(n.out) for n in self.nodes}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if visit_log is not None:
                visit_log.append(node.name)
            for inp, gin in zip(node.inputs, node.bwd(g)):
                if gin is None or not isinstance(inp, Tensor):
                    continue
                key = id(inp)
                acc = grads.get(key)
                grads[key] = gin if acc is None else acc + gin
        # whatever remains was never produced by a node on this tape: leaves
        by_id = {}
        for node in self.nodes:
            for inp in node.inputs:
                if isinstance(inp, Tensor):
                    by_id[id(inp)] = inp
        by_id[id(loss)] = loss
        for key, g in grads.items():
            t = by_id.get(key)
            if t is not None and t.requires_grad and id(t) not in produced:
                t.grad = g if t.grad is None else t.grad + g


def grad_of(t: Tensor) -> np.ndarray:
    """Gradient of ``t`` after a backward pass; exact zeros when untouched."""
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out: Tensor, inputs, bwd, name: str):
    tape = Tape._active
    if tape is None:
        return
    if any(isinstance(i, Tensor) and i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, bwd, name))


def _check_dtypes(name, *tensors):
    dts = {t.dtype for t in tensors}
    if len(dts) > 1:
        raise ShapeError(f"{name}: mixed dtypes {sorted(str(d) for d in dts)}")


def _binary_shape(name, a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    if a.ndim == b.ndim and all(
        x == y or x == 1 or y == 1 for x, y in zip(a.shape, b.shape)
    ):
        return
    raise ShapeError(f"{name}: incompatible shapes {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of the permitted broadcasts)."""
    if g.shape == tuple(shape):
        return g
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_dtypes("add", a, b)
    _binary_shape("add", a, b)
    out = Tensor(a.data + b.data)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_dtypes("sub", a, b)
    _binary_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_dtypes("mul", a, b)
    _binary_shape("mul", a, b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    _record(out, (a, b), bwd, "mul")
    return out


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    _check_dtypes("div", a, b)
    _binary_shape("div", a, b)
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return (ga, gb)

    _record(out, (a, b), bwd, "div")
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    _record(out, (a,), lambda g: (-g,), "neg")
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    _record(out, (a,), lambda g: (g * out.data,), "exp")
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    _record(out, (a,), lambda g: (g / a.data,), "log")
    return out


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))

    def bwd(g):
        return (g * (0.5 / out.data),)

    _record(out, (a,), bwd, "sqrt")
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)
    _record(out, (a,), lambda g: (g * (2.0 * a.data),), "square")
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    _record(out, (a,), lambda g: (g * (a.data > 0),), "relu")
    return out


def sigmoid(a: Tensor) -> Tensor:
    """Elementwise logistic function, numerically stable on both tails."""
    x = a.data
    out_arr = np.empty_like(x)
    pos = x >= 0
    out_arr[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_arr[~pos] = ex / (1.0 + ex)
    out = Tensor(out_arr)
    _record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),), "sigmoid")
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; subgradient is zero outside the interval."""
    out = Tensor(np.clip(a.data, lo, hi))

    def bwd(g):
        mask = (a.data >= lo) & (a.data <= hi)
        return (g * mask,)

    _record(out, (a,), bwd, "clamp")
    return out


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    _record(out, (a,), bwd, "sum")
    return out


def mean_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    scale = 1.0 / n

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g * scale, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg * scale, a.shape).copy(),)

    _record(out, (a,), bwd, "mean")
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")
    return out


def transpose(a: Tensor, axes) -> Tensor:
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    _record(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    _check_dtypes("concat", *tensors)
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            i != axis % ref.ndim and a != b for i, (a, b) in enumerate(zip(t.shape, ref.shape))
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    _record(out, tuple(tensors), bwd, "concat")
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(np.ascontiguousarray(a.data[sl]))

    def bwd(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    _record(out, (a,), bwd, "narrow")
    return out


def flip(a: Tensor, axis: int) -> Tensor:
    out = Tensor(np.ascontiguousarray(np.flip(a.data, axis=axis)))
    _record(out, (a,), lambda g: (np.ascontiguousarray(np.flip(g, axis=axis)),), "flip")
    return out


def pad2d(a: Tensor, pad_h: tuple, pad_w: tuple) -> Tensor:
    """Zero-pad the spatial axes (1, 2) of a 4-axis tensor."""
    if a.ndim != 4:
        raise ShapeError(f"pad2d expects 4 axes, got {a.shape}")
    width = ((0, 0), pad_h, pad_w, (0, 0))
    out = Tensor(np.pad(a.data, width))
    h0, h1 = pad_h[0], pad_h[0] + a.shape[1]
    w0, w1 = pad_w[0], pad_w[0] + a.shape[2]

    def bwd(g):
        return (np.ascontiguousarray(g[:, h0:h1, w0:w1, :]),)

    _record(out, (a,), bwd, "pad2d")
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-axis operands or stacked 3-axis operands."""
    _check_dtypes("matmul", a, b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3) or a.ndim != b.ndim:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (ga, gb)

    _record(out, (a, b), bwd, "matmul")
    return out


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def softmax_channels(a: Tensor) -> Tensor:
    """Softmax over the last (channel) axis, stabilized by max-subtraction."""
    if a.shape[-1] == 0:
        raise ShapeError("softmax_channels: empty channel axis")
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    _record(out, (a,), bwd, "softmax_channels")
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Gather k*k taps of a padded NHWC array into (B*ho*wo, k*k*C)."""
    b, _, _, c = xp.shape
    cols = np.empty((b, ho, wo, k * k, c), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i * k + j, :] = xp[
                :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :
            ]
    return cols.reshape(b * ho * wo, k * k * c)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on NHWC input with an (kh, kw, Cin, Cout) kernel.

    Zero padding; output extent floor((in + 2*padding - k)/stride) + 1.
    """
    _check_dtypes("conv2d", *( [x, w] + ([b] if b is not None else []) ))
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-axis input/kernel, got {x.shape}, {w.shape}")
    kh, kw, cin, cout = w.shape
    if kh != kw or kh % 2 != 1:
        raise ShapeError(f"conv2d: kernel must be square with odd extent, got {kh}x{kw}")
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape[3]} do not match kernel {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    bsz, h, wdt, _ = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdt + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh} exceeds padded input {h}x{wdt} (padding {padding})")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    k = kh
    if k == 1 and stride == 1:
        cols = x.data.reshape(-1, cin)
    else:
        cols = _im2col(xp, k, stride, ho, wo)
    wf = w.data.reshape(k * k * cin, cout)
    y = cols @ wf
    if b is not None:
        y += b.data
    out = Tensor(y.reshape(bsz, ho, wo, cout))

    def bwd(g):
        gf = g.reshape(-1, cout)
        gw = (cols.T @ gf).reshape(w.shape)
        gb = gf.sum(axis=0) if b is not None else None
        gcols = gf @ wf.T  # (B*ho*wo, k*k*cin)
        if k == 1 and stride == 1:
            gx = gcols.reshape(x.shape)
        else:
            gxp = np.zeros_like(xp)
            gcols = gcols.reshape(bsz, ho, wo, k * k, cin)
            for i in range(k):
                for j in range(k):
                    gxp[
                        :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :
                    ] += gcols[:, :, :, i * k + j, :]
            gx = gxp[:, padding : padding + h, padding : padding + wdt, :] if padding else gxp
            gx = np.ascontiguousarray(gx)
        if b is not None:
            return (gx, gw, gb)
        return (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    _record(out, inputs, bwd, "conv2d")
    return out


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def bilinear_sample(img: Tensor, coords: Tensor) -> Tensor:
    """Sample ``img`` at real-valued coordinates with border clamping.

    ``coords[..., 0]`` holds x (width) and ``coords[..., 1]`` holds y
    positions in pixels. Differentiable with respect to both the image and
    the coordinates; the coordinate gradient is zero where clamping binds.
    """
    _check_dtypes("bilinear_sample", img, coords)
    if img.ndim != 4 or coords.ndim != 4 or coords.shape[3] != 2:
        raise ShapeError(f"bilinear_sample: got image {img.shape}, coords {coords.shape}")
    if img.shape[0] != coords.shape[0]:
        raise ShapeError("bilinear_sample: batch sizes differ")
    bsz, h, w, c = img.shape
    _, ho, wo, _ = coords.shape

    x = coords.data[..., 0]
    y = coords.data[..., 1]
    cx = np.clip(x, 0.0, w - 1.0)
    cy = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(cx).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    x0 = np.minimum(x0, w - 2) if w > 1 else np.zeros_like(x0)
    y0 = np.minimum(y0, h - 2) if h > 1 else np.zeros_like(y0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (cx - x0).astype(img.dtype)
    fy = (cy - y0).astype(img.dtype)

    bi = np.arange(bsz, dtype=np.intp)[:, None, None]
    v00 = img.data[bi, y0, x0]
    v01 = img.data[bi, y0, x1]
    v10 = img.data[bi, y1, x0]
    v11 = img.data[bi, y1, x1]
    wx = fx[..., None]
    wy = fy[..., None]
    top = v00 * (1 - wx) + v01 * wx
    bot = v10 * (1 - wx) + v11 * wx
    out = Tensor(top * (1 - wy) + bot * wy)

    def bwd(g):
        gimg = None
        if img.requires_grad:
            flat = np.zeros((bsz * h * w, c), dtype=img.dtype)
            base = (bi * (h * w)).astype(np.intp)
            i00 = (base + y0 * w + x0).ravel()
            i01 = (base + y0 * w + x1).ravel()
            i10 = (base + y1 * w + x0).ravel()
            i11 = (base + y1 * w + x1).ravel()
            gf = g.reshape(-1, c)
            w00 = ((1 - fx) * (1 - fy)).ravel()[:, None]
            w01 = (fx * (1 - fy)).ravel()[:, None]
            w10 = ((1 - fx) * fy).ravel()[:, None]
            w11 = (fx * fy).ravel()[:, None]
            np.add.at(flat, np.concatenate([i00, i01, i10, i11]),
                      np.concatenate([gf * w00, gf * w01, gf * w10, gf * w11]))
            gimg = flat.reshape(img.shape)
        gcoords = None
        if coords.requires_grad:
            dvx = (v01 - v00) * (1 - wy) + (v11 - v10) * wy
            dvy = (v10 - v00) * (1 - wx) + (v11 - v01) * wx
            inside_x = ((x > 0) & (x < w - 1)).astype(img.dtype)
            inside_y = ((y > 0) & (y < h - 1)).astype(img.dtype)
            gx = (g * dvx).sum(axis=-1) * inside_x
            gy = (g * dvy).sum(axis=-1) * inside_y
            gcoords = np.stack([gx, gy], axis=-1)
        return (gimg, gcoords)

    _record(out, (img, coords), bwd, "bilinear_sample")
    return out


# ---------------------------------------------------------------------------
# local correlation (cost volume over a square displacement window)
# ---------------------------------------------------------------------------

def correlation_offsets(radius: int) -> np.ndarray:
    """(2r+1)^2 displacement vectors (dx, dy), row-major over dy then dx."""
    rng = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(rng, rng, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=-1).astype(np.float64)


def local_correlation(f0: Tensor, f1: Tensor, radius: int) -> Tensor:
    """Channel dot products of f0 with f1 shifted over a (2r+1)^2 window.

    Output channel k corresponds to ``correlation_offsets(radius)[k]``;
    out-of-range shifts see zeros. Scores are scaled by 1/sqrt(C).
    """
    _check_dtypes("local_correlation", f0, f1)
    if f0.shape != f1.shape or f0.ndim != 4:
        raise ShapeError(f"local_correlation: shapes {f0.shape} vs {f1.shape}")
    bsz, h, w, c = f0.shape
    r = radius
    k = 2 * r + 1
    scale = np.asarray(1.0 / np.sqrt(c), dtype=f0.dtype)
    f1p = np.pad(f1.data, ((0, 0), (r, r), (r, r), (0, 0)))
    corr = np.empty((bsz, h, w, k * k), dtype=f0.dtype)
    for i in range(k):
        for j in range(k):
            shifted = f1p[:, i : i + h, j : j + w, :]
            corr[..., i * k + j] = np.einsum("bhwc,bhwc->bhw", f0.data, shifted)
    out = Tensor(corr * scale)

    def bwd(g):
        g0 = None
        g1 = None
        if f0.requires_grad:
            g0 = np.zeros_like(f0.data)
            for i in range(k):
                for j in range(k):
                    g0 += g[..., i * k + j : i * k + j + 1] * f1p[:, i : i + h, j : j + w, :]
            g0 *= scale
        if f1.requires_grad:
            g1p = np.zeros_like(f1p)
            for i in range(k):
                for j in range(k):
                    g1p[:, i : i + h, j : j + w, :] += g[..., i * k + j : i * k + j + 1] * f0.data
            g1 = np.ascontiguousarray(g1p[:, r : r + h, r : r + w, :]) * scale
        return (g0, g1)

    _record(out, (f0, f1), bwd, "local_correlation")
    return out


# ---------------------------------------------------------------------------
# embedding table lookup
# ---------------------------------------------------------------------------

def embedding_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a (rows, c) table by an integer index map."""
    if table.ndim != 2:
        raise ShapeError(f"embedding_rows: table must be 2-axis, got {table.shape}")
    idx = np.asarray(idx)
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ShapeError(
            f"embedding_rows: index range [{idx.min()}, {idx.max()}] outside table of {table.shape[0]} rows"
        )
    out = Tensor(table.data[idx])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    _record(out, (table,), bwd, "embedding_rows")
    return out


# ---------------------------------------------------------------------------
# instance normalization (composite)
# ---------------------------------------------------------------------------

def instance_normalize(x: Tensor, epsilon: float = 1e-5):
    """Per-sample, per-channel normalization over the spatial axes.

    Returns ``(normalized, mean, std)``. A constant channel maps to zeros
    through the epsilon guard.
    """
    if x.ndim != 4:
        raise ShapeError(f"instance_normalize expects 4 axes, got {x.shape}")
    m = mean_(x, axis=(1, 2), keepdims=True)
    centered = sub(x, m)
    var = mean_(square(centered), axis=(1, 2), keepdims=True)
    std = sqrt(add(var, Tensor(np.asarray(epsilon, dtype=x.dtype))))
    out = div(centered, std)
    return out, m, std


# ---------------------------------------------------------------------------
# windowed self-attention (composite)
# ---------------------------------------------------------------------------

@dataclass
class AttentionWeights:
    """Single-head q/k/v/output projection matrices for windowed attention."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


def windowed_self_attention(x: Tensor, window: int, weights: AttentionWeights) -> Tensor:
    """Single-head self-attention within non-overlapping square windows.

    Spatial extents are zero-padded up to multiples of ``window`` and the
    output is cropped back, so the output shape equals the input shape.
    """
    if x.ndim != 4:
        raise ShapeError(f"attention expects 4 axes, got {x.shape}")
    if window < 1:
        raise ShapeError(f"window must be positive, got {window}")
    bsz, h, w, cin = x.shape
    dk = weights.wq.shape[1]
    for name, mat in (("wq", weights.wq), ("wk", weights.wk), ("wv", weights.wv)):
        if mat.shape[0] != cin:
            raise ShapeError(f"attention {name}: expected {cin} input channels, got {mat.shape[0]}")
    hp = ((h + window - 1) // window) * window
    wp = ((w + window - 1) // window) * window
    if window > hp or window > wp:
        raise ShapeError(f"window {window} exceeds padded extent {hp}x{wp}")
    xt = pad2d(x, (0, hp - h), (0, wp - w)) if (hp != h or wp != w) else x

    nh, nw = hp // window, wp // window
    tokens = window * window
    xt = reshape(xt, (bsz, nh, window, nw * window * cin))
    # (B, nh, win, nw, win, C) is above 4 axes, so split the regrouping into
    # two rank-4 transposes
    xt = reshape(xt, (bsz * nh, window, nw, window * cin))
    xt = transpose(xt, (0, 2, 1, 3))
    xt = reshape(xt, (bsz * nh * nw, tokens, cin))

    q = matmul(xt, _expand3(weights.wq, xt.shape[0]))
    kk = matmul(xt, _expand3(weights.wk, xt.shape[0]))
    v = matmul(xt, _expand3(weights.wv, xt.shape[0]))
    scores = matmul(q, transpose(kk, (0, 2, 1)))
    scores = mul(scores, Tensor(np.asarray(1.0 / np.sqrt(dk), dtype=x.dtype)))
    attn = softmax_channels(scores)
    ctx = matmul(attn, v)
    ctx = matmul(ctx, _expand3(weights.wo, ctx.shape[0]))
    cout = weights.wo.shape[1]

    ctx = reshape(ctx, (bsz * nh, nw, window, window * cout))
    ctx = transpose(ctx, (0, 2, 1, 3))
    ctx = reshape(ctx, (bsz, nh * window, nw * window, cout))
    if hp != h or wp != w:
        ctx = narrow(narrow(ctx, 1, 0, h), 2, 0, w)
    return ctx


def _expand3(mat: Tensor, n: int) -> Tensor:
    """View a (a, b) matrix as (n, a, b) for stacked matmul without copy."""
    out = Tensor(np.broadcast_to(mat.data, (n,) + mat.shape))
    _record(out, (mat,), lambda g: (g.sum(axis=0),), "expand3")
    return out


def attention_probs(x: np.ndarray, window: int, weights: AttentionWeights) -> np.ndarray:
    """Forward-only attention weights per window, for normalization checks."""
    xt = Tensor(np.asarray(x))
    bsz, h, w, cin = xt.shape
    hp = ((h + window - 1) // window) * window
    wp = ((w + window - 1) // window) * window
    arr = np.pad(xt.data, ((0, 0), (0, hp - h), (0, wp - w), (0, 0)))
    nh, nw = hp // window, wp // window
    tok = window * window
    arr = arr.reshape(bsz, nh, window, nw, window, cin).transpose(0, 1, 3, 2, 4, 5)
    arr = arr.reshape(bsz * nh * nw, tok, cin)
    q = arr @ weights.wq.data
    k = arr @ weights.wk.data
    s = (q @ np.swapaxes(k, 1, 2)) / np.sqrt(weights.wq.shape[1])
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(fn, inputs, eps: float = 1e-5, seed: int = 0) -> float:
    """Compare tape adjoints of ``fn`` against central differences.

    ``fn`` maps the given tensors to a single output tensor; the output is
    reduced to a scalar through a fixed random projection so that every
    output element influences the check. All inputs must be float64.
    Returns the max over input elements of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.

    Raises :class:`NonDifferentiablePointError` when halving the step
    changes a numeric estimate materially, which indicates the function is
    not differentiable at this point.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.grad = None

    with Tape() as tape:
        out = fn(*inputs)
        rng = np.random.Generator(np.random.Philox(key=seed))
        proj = rng.standard_normal(out.shape)
        loss = sum_(mul(out, Tensor(proj)))
    tape.backward(loss)
    analytic = [grad_of(t) for t in inputs]

    def scalar_eval():
        res = fn(*inputs)
        return float((res.data * proj).sum())

    worst = 0.0
    unstable = 0
    for t, ana in zip(inputs, analytic):
        flat = t.data.ravel()
        ana_flat = ana.ravel()
        for i in range(flat.size):
            orig = flat[i]
            est = []
            for step in (eps, eps / 2.0):
                flat[i] = orig + step
                up = scalar_eval()
                flat[i] = orig - step
                dn = scalar_eval()
                est.append((up - dn) / (2.0 * step))
            flat[i] = orig
            n1, n2 = est
            denom_n = max(1.0, abs(n1), abs(n2))
            if abs(n1 - n2) / denom_n > 1e-3:
                unstable += 1
                continue
            a = ana_flat[i]
            rel = abs(a - n1) / max(1.0, abs(a), abs(n1))
            worst = max(worst, rel)
    if unstable:
        raise NonDifferentiablePointError(
            f"{unstable} element(s) had unstable central differences across eps and eps/2"
        )
    return worst
