"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (float32 by default, float64 for
gradient verification). While a GradTape is active on the current thread,
every primitive op records a backward closure; ``GradTape.backward``
replays the closures once, in reverse recording order. There is no
broadcasting except tensor-with-python-scalar, and every forward op
checks its output for NaN/Inf.
"""

from __future__ import annotations

import struct
import threading
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    pass


class NumericsError(TensorError):
    pass


class TapeError(TensorError):
    pass


_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "tape_ix")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape_ix: int | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    # operator sugar; real semantics live in the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(np.full(self.shape, other, self.dtype)), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


class GradTape:
    """Per-training-step record of primitive ops.

    Enter at most one tape per thread. ``backward(loss)`` seeds the scalar
    loss with d(loss)/d(loss) = 1 and replays the recorded closures in
    reverse; afterwards the tape is consumed and must be discarded.
    """

    def __init__(self):
        self._nodes: list = []
        self._consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise TapeError("another GradTape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls.tape = None
        return False

    def record(self, out: Tensor, backward_fn) -> None:
        out.requires_grad = True
        out.tape_ix = len(self._nodes)
        self._nodes.append((out, backward_fn))

    @property
    def num_nodes(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward()")
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if not loss.requires_grad:
            raise TapeError("loss is not connected to this tape")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)
        self._consumed = True
        self._nodes.clear()


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by {op}")


def _as_operands(a, b, op: str):
    """Coerce a binary op's operands; returns (a, b, b_is_scalar)."""
    if not isinstance(a, Tensor):
        raise TypeError(f"{op}: first operand must be a Tensor")
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        return a, b, False
    if isinstance(b, (int, float, np.floating, np.integer)):
        return a, float(b), True
    raise TypeError(f"{op}: unsupported operand {type(b)!r}")


def _unary(a: Tensor, fwd, make_backward, op: str) -> Tensor:
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        data = fwd(a.data)
    _check_finite(data, op)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and a.requires_grad:
        bw = make_backward(a, out)
        tape.record(out, bw)
    return out


def add(a: Tensor, b) -> Tensor:
    a, b, scalar = _as_operands(a, b, "add")
    data = a.data + (b if scalar else b.data)
    _check_finite(data, "add")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and (a.requires_grad or (not scalar and b.requires_grad)):

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if not scalar and b.requires_grad:
                b.accumulate_grad(g)

        tape.record(out, backward)
    return out


def sub(a: Tensor, b) -> Tensor:
    a, b, scalar = _as_operands(a, b, "sub")
    data = a.data - (b if scalar else b.data)
    _check_finite(data, "sub")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and (a.requires_grad or (not scalar and b.requires_grad)):

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if not scalar and b.requires_grad:
                b.accumulate_grad(-g)

        tape.record(out, backward)
    return out


def mul(a: Tensor, b) -> Tensor:
    a, b, scalar = _as_operands(a, b, "mul")
    data = a.data * (b if scalar else b.data)
    _check_finite(data, "mul")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and (a.requires_grad or (not scalar and b.requires_grad)):

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g * (b if scalar else b.data))
            if not scalar and b.requires_grad:
                b.accumulate_grad(g * a.data)

        tape.record(out, backward)
    return out


def div(a: Tensor, b) -> Tensor:
    a, b, scalar = _as_operands(a, b, "div")
    bdata = b if scalar else b.data
    if scalar:
        if bdata == 0.0:
            raise NumericsError("div: division by zero")
    elif np.any(bdata == 0.0):
        raise NumericsError("div: division by zero")
    data = a.data / bdata
    _check_finite(data, "div")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and (a.requires_grad or (not scalar and b.requires_grad)):

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g / bdata)
            if not scalar and b.requires_grad:
                b.accumulate_grad(-g * a.data / (bdata * bdata))

        tape.record(out, backward)
    return out


def texp(a: Tensor) -> Tensor:
    return _unary(
        a,
        np.exp,
        lambda a, out: lambda g: a.accumulate_grad(g * out.data),
        "exp",
    )


def tlog(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericsError("log: non-positive input")
    return _unary(
        a,
        np.log,
        lambda a, out: lambda g: a.accumulate_grad(g / a.data),
        "log",
    )


def tsqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericsError("sqrt: non-positive input")
    return _unary(
        a,
        np.sqrt,
        lambda a, out: lambda g: a.accumulate_grad(g * (0.5 / out.data)),
        "sqrt",
    )


def square(a: Tensor) -> Tensor:
    return _unary(
        a,
        np.square,
        lambda a, out: lambda g: a.accumulate_grad(g * (2.0 * a.data)),
        "square",
    )


def tanh(a: Tensor) -> Tensor:
    return _unary(
        a,
        np.tanh,
        lambda a, out: lambda g: a.accumulate_grad(g * (1.0 - out.data * out.data)),
        "tanh",
    )


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    return _unary(
        a,
        _sigmoid_np,
        lambda a, out: lambda g: a.accumulate_grad(g * out.data * (1.0 - out.data)),
        "sigmoid",
    )


def softplus(a: Tensor) -> Tensor:
    return _unary(
        a,
        lambda x: np.logaddexp(0.0, x),
        lambda a, out: lambda g: a.accumulate_grad(g * _sigmoid_np(a.data)),
        "softplus",
    )


def power(a: Tensor, p: float) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericsError("power: non-positive base")
    p = float(p)
    return _unary(
        a,
        lambda x: np.power(x, p),
        lambda a, out: lambda g: a.accumulate_grad(g * p * out.data / a.data),
        "power",
    )


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    if lo is None and hi is None:
        raise ValueError("clamp: need at least one bound")
    data = np.clip(a.data, lo, hi)
    _check_finite(data, "clamp")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and a.requires_grad:
        mask = np.ones_like(a.data)
        if lo is not None:
            mask *= a.data >= lo
        if hi is not None:
            mask *= a.data <= hi

        def backward(g):
            a.accumulate_grad(g * mask)

        tape.record(out, backward)
    return out


def relu(a: Tensor) -> Tensor:
    return clamp(a, lo=0.0)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data.copy())


def tsum(a: Tensor) -> Tensor:
    data = np.array(np.sum(a.data), dtype=a.dtype)
    _check_finite(data, "sum")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and a.requires_grad:

        def backward(g):
            a.accumulate_grad(np.full(a.shape, g.reshape(()), dtype=a.dtype))

        tape.record(out, backward)
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.size
    data = np.array(np.sum(a.data) / n, dtype=a.dtype)
    _check_finite(data, "mean")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and a.requires_grad:

        def backward(g):
            a.accumulate_grad(np.full(a.shape, g.reshape(()) / n, dtype=a.dtype))

        tape.record(out, backward)
    return out


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input")
    data = np.concatenate([p.data for p in parts], axis=axis)
    _check_finite(data, "concat")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parts):
        sizes = [p.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    p.accumulate_grad(g[tuple(idx)])

        tape.record(out, backward)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    out = Tensor(data.copy())
    tape = _active_tape()
    if tape is not None and a.requires_grad:

        def backward(g):
            a.accumulate_grad(g.reshape(a.shape))

        tape.record(out, backward)
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())
    tape = _active_tape()
    if tape is not None and a.requires_grad:

        def backward(g):
            full = np.zeros(a.shape, dtype=a.dtype)
            full[idx] = g
            a.accumulate_grad(full)

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# spatial ops (NCHW)


def _conv_geometry(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: unsupported stride {stride}")
    if stride == 2 and (h % 2 or w % 2):
        raise ShapeError(f"conv2d: stride-2 needs even spatial dims, got {h}x{w}")
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {k} too large for input {h}x{w} pad {pad}")
    return oh, ow


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, oh, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols


def _col_scatter(shape_padded, cols: np.ndarray, k: int, stride: int) -> np.ndarray:
    out = np.zeros(shape_padded, dtype=cols.dtype)
    oh, ow = cols.shape[-2:]
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return out


def _pad_nchw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIHW weights plus per-channel bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d: x and w must be 4-D")
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if kh != kw:
        raise ShapeError("conv2d: only square kernels supported")
    if c != cin:
        raise ShapeError(f"conv2d: input channels {c} != weight channels {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    k = kh
    oh, ow = _conv_geometry(h, wd, k, stride, pad)
    xp = _pad_nchw(x.data, pad)
    cols = _im2col(xp, k, stride, oh, ow)
    out_data = np.tensordot(w.data, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
    if b is not None:
        out_data = out_data + b.data.reshape(1, -1, 1, 1)
    out_data = np.ascontiguousarray(out_data)
    _check_finite(out_data, "conv2d")
    out = Tensor(out_data)
    tape = _active_tape()
    needs = [x.requires_grad, w.requires_grad, b is not None and b.requires_grad]
    if tape is not None and any(needs):

        def backward(g):
            if w.requires_grad:
                dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
                w.accumulate_grad(dw)
            if b is not None and b.requires_grad:
                b.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dcols = np.tensordot(w.data, g, axes=([0], [1]))  # (Cin,k,k,N,OH,OW)
                dcols = dcols.transpose(3, 0, 1, 2, 4, 5)
                dxp = _col_scatter(xp.shape, dcols, k, stride)
                if pad:
                    dxp = dxp[:, :, pad:-pad, pad:-pad]
                x.accumulate_grad(dxp)

        tape.record(out, backward)
    return out


def conv2d_transposed(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 2) -> Tensor:
    """Adjoint of a stride-``stride`` conv2d; doubles spatial dims at stride 2.

    Weight layout is (C_in, C_out, k, k). Padding is implied by the kernel
    so that the output is exactly ``stride``x the input size.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d_transposed: x and w must be 4-D")
    if stride != 2:
        raise ShapeError("conv2d_transposed: only stride 2 supported")
    n, c, h, wd = x.shape
    cin, cout, kh, kw = w.shape
    if kh != kw:
        raise ShapeError("conv2d_transposed: only square kernels supported")
    if c != cin:
        raise ShapeError(f"conv2d_transposed: input channels {c} != weight channels {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d_transposed: bias shape {b.shape} != ({cout},)")
    k = kh
    pad = (k - 1) // 2 if k % 2 else (k - 2) // 2
    oh, ow = stride * h, stride * wd
    cols = np.tensordot(w.data, x.data, axes=([0], [1]))  # (Cout,k,k,N,H,W)
    cols = cols.transpose(3, 0, 1, 2, 4, 5)
    out_data = _col_scatter((n, cout, oh + 2 * pad, ow + 2 * pad), cols, k, stride)
    if pad:
        out_data = out_data[:, :, pad:-pad, pad:-pad]
    if b is not None:
        out_data = out_data + b.data.reshape(1, -1, 1, 1)
    out_data = np.ascontiguousarray(out_data)
    _check_finite(out_data, "conv2d_transposed")
    out = Tensor(out_data)
    tape = _active_tape()
    needs = [x.requires_grad, w.requires_grad, b is not None and b.requires_grad]
    if tape is not None and any(needs):

        def backward(g):
            gp = _pad_nchw(g, pad)
            gcols = _im2col(gp, k, stride, h, wd)
            if w.requires_grad:
                dw = np.tensordot(x.data, gcols, axes=([0, 2, 3], [0, 4, 5]))
                # axes: x (N,Cin,H,W) x gcols (N,Cout,k,k,H,W) -> (Cin,Cout,k,k)
                w.accumulate_grad(dw)
            if b is not None and b.requires_grad:
                b.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dx = np.tensordot(w.data, gcols, axes=([1, 2, 3], [1, 2, 3]))
                x.accumulate_grad(dx.transpose(1, 0, 2, 3))

        tape.record(out, backward)
    return out


def avg_pool2(a: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; requires even spatial dims."""
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: needs even dims, got {h}x{w}")
    data = a.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    _check_finite(data, "avg_pool2")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and a.requires_grad:

        def backward(g):
            gi = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
            a.accumulate_grad(gi.astype(a.dtype, copy=False))

        tape.record(out, backward)
    return out


def upsample2_nearest(a: Tensor) -> Tensor:
    n, c, h, w = a.shape
    data = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and a.requires_grad:

        def backward(g):
            gi = g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
            a.accumulate_grad(gi)

        tape.record(out, backward)
    return out


def expand_channel(vec: Tensor, n: int, height: int, width: int) -> Tensor:
    """Broadcast a per-channel vector (C,) to an NCHW map."""
    if vec.ndim != 1:
        raise ShapeError(f"expand_channel: need 1-D input, got {vec.shape}")
    c = vec.shape[0]
    data = np.broadcast_to(vec.data.reshape(1, c, 1, 1), (n, c, height, width)).copy()
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and vec.requires_grad:

        def backward(g):
            vec.accumulate_grad(g.sum(axis=(0, 2, 3)))

        tape.record(out, backward)
    return out


def record_custom(out_data: np.ndarray, backward_fn, inputs: Iterable[Tensor], op: str) -> Tensor:
    """Register a custom primitive. ``backward_fn(g)`` must accumulate into inputs."""
    _check_finite(out_data, op)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# weight serialization: flat binary container
#   magic "RNVW", version u8, count u32, then per parameter:
#   name_len u16 + UTF-8 name, rank u8, extents u32 each, f32 LE values

WEIGHT_MAGIC = b"RNVW"
WEIGHT_VERSION = 1


def weights_to_bytes(params: dict[str, np.ndarray]) -> bytes:
    chunks = [WEIGHT_MAGIC, struct.pack("<BI", WEIGHT_VERSION, len(params))]
    for name, arr in params.items():
        encoded = name.encode("utf-8")
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr32.ndim))
        chunks.append(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
        chunks.append(arr32.tobytes())
    return b"".join(chunks)


def weights_from_bytes(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != WEIGHT_MAGIC:
        raise ValueError("bad weight container magic")
    version, count = struct.unpack_from("<BI", blob, 4)
    if version != WEIGHT_VERSION:
        raise ValueError(f"unsupported weight container version {version}")
    off = 9
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        extents = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(extents)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(extents)
        off += 4 * n
        params[name] = arr.copy()
    return params


def save_weights(path, params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(weights_to_bytes(params))


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return weights_from_bytes(fh.read())
