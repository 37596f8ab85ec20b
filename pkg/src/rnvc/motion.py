"""Pyramid optical flow, bilinear warping, and motion compensation.

Flow maps are NCHW tensors with 2 channels: channel 0 is horizontal
displacement in pixels, channel 1 vertical. Warping samples bilinearly
with clamp-to-edge behavior and is differentiable in both the frame and
the flow.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Conv2d


def warp(frame: T.Tensor, flow: T.Tensor) -> T.Tensor:
    """Sample ``frame`` at (x + u, y + v); out-of-bounds clamps to border."""
    if frame.ndim != 4 or flow.ndim != 4 or flow.shape[1] != 2:
        raise T.ShapeError(f"warp: frame {frame.shape} flow {flow.shape}")
    if frame.shape[0] != flow.shape[0] or frame.shape[2:] != flow.shape[2:]:
        raise T.ShapeError(f"warp: spatial mismatch {frame.shape} vs {flow.shape}")
    n, c, h, w = frame.shape
    dt = frame.dtype
    u = flow.data[:, 0]
    v = flow.data[:, 1]
    base_x = np.arange(w, dtype=dt)[None, None, :]
    base_y = np.arange(h, dtype=dt)[None, :, None]
    gx = np.clip(base_x + u, 0.0, w - 1.0)
    gy = np.clip(base_y + v, 0.0, h - 1.0)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (gx - x0).astype(dt)[..., None]
    wy = (gy - y0).astype(dt)[..., None]
    ni = np.arange(n)[:, None, None]
    fr = frame.data.transpose(0, 2, 3, 1)  # NHWC for gather/scatter
    f00 = fr[ni, y0, x0]
    f01 = fr[ni, y0, x1]
    f10 = fr[ni, y1, x0]
    f11 = fr[ni, y1, x1]
    top = f00 + wx * (f01 - f00)
    bot = f10 + wx * (f11 - f10)
    out_data = (top + wy * (bot - top)).transpose(0, 3, 1, 2)
    out_data = np.ascontiguousarray(out_data)
    T._check_finite(out_data, "warp")
    out = T.Tensor(out_data)
    tape = T._active_tape()
    if tape is not None and (frame.requires_grad or flow.requires_grad):
        in_x = ((base_x + u) > 0.0) & ((base_x + u) < (w - 1.0))
        in_y = ((base_y + v) > 0.0) & ((base_y + v) < (h - 1.0))

        def backward(g):
            gl = g.transpose(0, 2, 3, 1)  # NHWC
            if frame.requires_grad:
                dfr = np.zeros_like(fr)
                w00 = (1.0 - wx) * (1.0 - wy)
                w01 = wx * (1.0 - wy)
                w10 = (1.0 - wx) * wy
                w11 = wx * wy
                np.add.at(dfr, (ni, y0, x0), w00 * gl)
                np.add.at(dfr, (ni, y0, x1), w01 * gl)
                np.add.at(dfr, (ni, y1, x0), w10 * gl)
                np.add.at(dfr, (ni, y1, x1), w11 * gl)
                frame.accumulate_grad(dfr.transpose(0, 3, 1, 2))
            if flow.requires_grad:
                dgx = ((1.0 - wy) * (f01 - f00) + wy * (f11 - f10)) * gl
                dgy = ((1.0 - wx) * (f10 - f00) + wx * (f11 - f01)) * gl
                du = dgx.sum(axis=-1) * in_x
                dv = dgy.sum(axis=-1) * in_y
                flow.accumulate_grad(np.stack([du, dv], axis=1).astype(flow.dtype))

        tape.record(out, backward)
    return out


def _diag_kernel(channels: int, window: np.ndarray, dtype) -> np.ndarray:
    k = np.zeros((channels, channels, *window.shape), dtype=dtype)
    for c in range(channels):
        k[c, c] = window
    return k


def _central_diff_kernels(channels: int, dtype):
    kx = np.zeros((3, 3))
    kx[1] = [-0.5, 0.0, 0.5]
    return (T.constant(_diag_kernel(channels, kx, dtype)),
            T.constant(_diag_kernel(channels, kx.T, dtype)))


def _bilinear_up2_kernel(channels: int, dtype):
    k1 = np.array([1.0, 3.0, 3.0, 1.0]) / 4.0
    return T.constant(_diag_kernel(channels, np.outer(k1, k1), dtype))


def flow_level_features(warped: T.Tensor, cur: T.Tensor, flow: T.Tensor,
                        grad_kernels) -> T.Tensor:
    """Input stack for one refinement level.

    Besides the raw frames, the nets get the temporal difference, spatial
    gradients of the warped frame, and the (clamped) per-pixel normal
    equation ratios dt*g/(gx^2+gy^2) whose aggregation is the classic
    small-displacement flow estimate; the convs then only need to smooth
    and gate these.
    """
    kx, ky = grad_kernels
    gx = T.conv2d(warped, kx, None, stride=1, pad=1)
    gy = T.conv2d(warped, ky, None, stride=1, pad=1)
    dt = T.sub(cur, warped)
    den = T.add(T.add(T.square(gx), T.square(gy)), 1e-4)
    u0 = T.clamp(T.div(T.mul(dt, gx), den), -2.0, 2.0)
    v0 = T.clamp(T.div(T.mul(dt, gy), den), -2.0, 2.0)
    return T.concat([warped, cur, dt, gx, gy, u0, v0, flow], axis=1)


class FlowLevelNet:
    """Per-level residual-flow predictor: 4 convs, starting as the zero map."""

    def __init__(self, frame_channels: int, width: int, *, rng, dtype=np.float32):
        cin = 7 * frame_channels + 2
        self.convs = [
            Conv2d(cin, width, 3, rng=rng, dtype=dtype),
            Conv2d(width, width, 3, rng=rng, dtype=dtype),
            Conv2d(width, width, 3, rng=rng, dtype=dtype),
            Conv2d(width, 2, 3, rng=rng, dtype=dtype),
        ]
        self.convs[-1].w.data[:] = 0.0

    def __call__(self, x: T.Tensor) -> T.Tensor:
        for conv in self.convs[:-1]:
            x = T.relu(conv(x))
        return self.convs[-1](x)

    def params(self):
        for i, conv in enumerate(self.convs):
            for name, p in conv.params():
                yield f"conv{i}.{name}", p


class FlowPyramidNet:
    """Coarse-to-fine flow estimation; level l runs at scale 1/2^l."""

    def __init__(self, levels: int, frame_channels: int, width: int, *, rng, dtype=np.float32):
        if levels < 1:
            raise ValueError("need at least one pyramid level")
        self.levels = levels
        self.frame_channels = frame_channels
        # index 0 = finest
        self.nets = [FlowLevelNet(frame_channels, width, rng=rng, dtype=dtype)
                     for _ in range(levels)]
        self._grad_kernels = _central_diff_kernels(frame_channels, dtype)
        self._up_kernel = _bilinear_up2_kernel(2, dtype)

    def refine(self, level: int, ref_l: T.Tensor, cur_l: T.Tensor, flow: T.Tensor) -> T.Tensor:
        warped = warp(ref_l, flow)
        inp = flow_level_features(warped, cur_l, flow, self._grad_kernels)
        return T.add(flow, self.nets[level](inp))

    def upsample_flow(self, flow: T.Tensor) -> T.Tensor:
        return T.mul(T.conv2d_transposed(flow, self._up_kernel, None, stride=2), 2.0)

    def __call__(self, ref: T.Tensor, cur: T.Tensor) -> T.Tensor:
        if ref.shape != cur.shape:
            raise T.ShapeError(f"flow: frame shapes differ {ref.shape} vs {cur.shape}")
        n, c, h, w = ref.shape
        scale = 1 << (self.levels - 1)
        if h % scale or w % scale:
            raise T.ShapeError(f"flow: dims {h}x{w} not divisible by {scale}")
        pyr_ref = [ref]
        pyr_cur = [cur]
        for _ in range(self.levels - 1):
            pyr_ref.append(T.avg_pool2(pyr_ref[-1]))
            pyr_cur.append(T.avg_pool2(pyr_cur[-1]))
        flow = T.zeros((n, 2, h // scale, w // scale), dtype=ref.dtype)
        for level in range(self.levels - 1, -1, -1):
            if level != self.levels - 1:
                flow = self.upsample_flow(flow)
            flow = self.refine(level, pyr_ref[level], pyr_cur[level], flow)
        return flow

    def params(self):
        for i, net in enumerate(self.nets):
            for name, p in net.params():
                yield f"level{i}.{name}", p


def estimate_flow(net: FlowPyramidNet, ref: T.Tensor, cur: T.Tensor) -> T.Tensor:
    return net(ref, cur)


class CompensationNet:
    """Prediction refinement on top of the warped reference.

    The net sees [warped, flow, ref] but only through the evidence channels
    (flow, ref - warped) and runs bias-free, so a reference that warping
    already explains (static content, zero flow) provably gets a zero
    correction: the warped frame passes straight to the clamped output."""

    def __init__(self, frame_channels: int, width: int, *, rng, dtype=np.float32):
        cin = frame_channels + 2
        self.convs = [Conv2d(cin, width, 3, rng=rng, dtype=dtype)]
        for _ in range(4):
            self.convs.append(Conv2d(width, width, 3, rng=rng, dtype=dtype))
        self.convs.append(Conv2d(width, frame_channels, 3, rng=rng, dtype=dtype))
        for conv in self.convs:
            conv.b.requires_grad = False  # bias-free: zero evidence -> zero output
        self.convs[-1].w.data[:] = 0.0

    def __call__(self, ref: T.Tensor, flow: T.Tensor) -> T.Tensor:
        warped = warp(ref, flow)
        x = T.concat([flow, T.sub(ref, warped)], axis=1)
        for conv in self.convs[:-1]:
            x = T.relu(conv(x))
        residual = self.convs[-1](x)
        return T.clamp(T.add(warped, residual), 0.0, 1.0)

    def params(self):
        for i, conv in enumerate(self.convs):
            yield f"conv{i}.w", conv.w


def motion_compensate(net: CompensationNet, ref: T.Tensor, flow_hat: T.Tensor) -> T.Tensor:
    """Motion-compensated prediction from the *decoded* flow."""
    return net(ref, flow_hat)
