"""Neural building blocks: convolutions, ConvLSTM cells, GDN/IGDN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

GDN_BETA_MIN = 1e-6


def fanin_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class RecurrentState:
    """The (h, c) pair of one ConvLSTM cell, carried frame to frame."""

    h: T.Tensor
    c: T.Tensor

    @staticmethod
    def zeros(n: int, channels: int, height: int, width: int, dtype=np.float32) -> "RecurrentState":
        shape = (n, channels, height, width)
        return RecurrentState(T.zeros(shape, dtype), T.zeros(shape, dtype))


class Conv2d:
    """Stride 1 keeps spatial dims (odd k); stride 2 halves them exactly."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.stride = stride
        self.pad = (k - 1) // 2
        self.w = T.parameter(fanin_uniform(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.b = T.parameter(np.zeros(cout, dtype=dtype))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def params(self):
        yield "w", self.w
        yield "b", self.b


class ConvTranspose2d:
    """Stride-2 transposed convolution; doubles spatial dims exactly."""

    def __init__(self, cin: int, cout: int, k: int, *, rng: np.random.Generator, dtype=np.float32):
        self.w = T.parameter(fanin_uniform(rng, (cin, cout, k, k), cin * k * k, dtype))
        self.b = T.parameter(np.zeros(cout, dtype=dtype))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.conv2d_transposed(x, self.w, self.b, stride=2)

    def params(self):
        yield "w", self.w
        yield "b", self.b


class GdnLayer:
    """Divisive normalization: x_c / sqrt(beta_c + sum_j gamma_cj x_j^2).

    The inverse mode multiplies instead of dividing. ``project`` re-imposes
    beta >= beta_min and gamma >= 0 after an optimizer step.
    """

    def __init__(self, channels: int, inverse: bool = False, *,
                 rng: np.random.Generator | None = None, dtype=np.float32,
                 beta_min: float = GDN_BETA_MIN):
        self.channels = channels
        self.inverse = inverse
        self.beta_min = beta_min
        self.beta = T.parameter(np.ones(channels, dtype=dtype))
        self.gamma = T.parameter((0.1 * np.eye(channels)).astype(dtype))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        if x.shape[1] != self.channels:
            raise T.ShapeError(f"gdn: expected {self.channels} channels, got {x.shape[1]}")
        if np.any(self.beta.data <= 0.0):
            raise T.NumericsError("gdn: beta must stay positive (projection missing?)")
        c = self.channels
        kernel = T.reshape(self.gamma, (c, c, 1, 1))
        norm = T.conv2d(T.square(x), kernel, self.beta, stride=1, pad=0)
        root = T.tsqrt(norm)
        return T.mul(x, root) if self.inverse else T.div(x, root)

    def project(self) -> None:
        np.maximum(self.beta.data, self.beta_min, out=self.beta.data)
        np.maximum(self.gamma.data, 0.0, out=self.gamma.data)

    def params(self):
        yield "beta", self.beta
        yield "gamma", self.gamma


class ConvLstmCell:
    """ConvLSTM over NCHW maps: gates from one convolution of [x; h].

    i, f, o = sigmoid(conv([x;h]) + b), g = tanh(conv([x;h]) + b),
    c' = f*c + i*g, h' = o*tanh(c'). The forget-gate bias starts at 1.
    """

    def __init__(self, in_channels: int, hidden: int, k: int = 3, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.in_channels = in_channels
        self.hidden = hidden
        self.gates = Conv2d(in_channels + hidden, 4 * hidden, k, stride=1, rng=rng, dtype=dtype)
        self.gates.b.data[hidden : 2 * hidden] = 1.0

    def zero_state(self, n: int, height: int, width: int, dtype=np.float32) -> RecurrentState:
        return RecurrentState.zeros(n, self.hidden, height, width, dtype)

    def __call__(self, x: T.Tensor, state: RecurrentState) -> tuple[T.Tensor, RecurrentState]:
        if x.shape[1] != self.in_channels:
            raise T.ShapeError(f"convlstm: expected {self.in_channels} input channels, got {x.shape[1]}")
        expect = (x.shape[0], self.hidden, x.shape[2], x.shape[3])
        if state.h.shape != expect or state.c.shape != expect:
            raise T.ShapeError(f"convlstm: state shape {state.h.shape} != {expect}")
        z = self.gates(T.concat([x, state.h], axis=1))
        hd = self.hidden
        i = T.sigmoid(T.narrow(z, 1, 0, hd))
        f = T.sigmoid(T.narrow(z, 1, hd, hd))
        o = T.sigmoid(T.narrow(z, 1, 2 * hd, hd))
        g = T.tanh(T.narrow(z, 1, 3 * hd, hd))
        c_new = T.add(T.mul(f, state.c), T.mul(i, g))
        h_new = T.mul(o, T.tanh(c_new))
        return h_new, RecurrentState(h_new, c_new)

    def params(self):
        for name, p in self.gates.params():
            yield f"gates.{name}", p


def collect_params(module, prefix: str = "") -> dict[str, T.Tensor]:
    """Flatten a module's ``params()`` iterator into a name -> tensor dict."""
    out: dict[str, T.Tensor] = {}
    for name, p in module.params():
        out[prefix + name] = p
    return out
