"""Recurrent analysis/synthesis transforms around an integer latent.

The encoder stacks four stride-2 convolutions with GDN (16x spatial
reduction) and carries a ConvLSTM state between frames; the decoder
mirrors it with transposed convolutions and IGDN. ``recurrent=False``
bypasses the cells, which is the non-recurrent baseline used by the
ablation harness.

Inference quantizes latents with round-half-away-from-zero and saturates
them to the coding alphabet [-lsym, lsym]; training replaces rounding by
additive uniform noise on (-0.5, 0.5).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv2d, ConvLstmCell, ConvTranspose2d, GdnLayer, RecurrentState

logger = logging.getLogger(__name__)

LSYM_DEFAULT = 64


@dataclass
class Latent:
    """Quantized integer latent of one frame, one stream."""

    values: np.ndarray  # int32, (C, H/16, W/16)
    kind: str  # "motion" | "residual"
    frame_index: int = -1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int32)
        if self.values.ndim != 3:
            raise T.ShapeError(f"latent must be (C, h, w), got {self.values.shape}")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_latent(ytilde: np.ndarray, lsym: int = LSYM_DEFAULT) -> np.ndarray:
    """Round to integers and saturate to the alphabet; logs on saturation."""
    rounded = round_half_away(ytilde)
    clipped = np.clip(rounded, -lsym, lsym)
    n_sat = int(np.count_nonzero(rounded != clipped))
    if n_sat:
        logger.warning("latent saturation: %d values clamped to [-%d, %d]", n_sat, lsym, lsym)
    return clipped.astype(np.int32)


class RecurrentEncoder:
    def __init__(self, in_channels: int, latent_channels: int, width: int, kernel: int, *,
                 kind: str = "generic", recurrent: bool = True,
                 rng: np.random.Generator, dtype=np.float32):
        self.in_channels = in_channels
        self.latent_channels = latent_channels
        self.kind = kind
        k = kernel
        self.down1 = Conv2d(in_channels, width, k, stride=2, rng=rng, dtype=dtype)
        self.gdn1 = GdnLayer(width, dtype=dtype)
        self.down2 = Conv2d(width, width, k, stride=2, rng=rng, dtype=dtype)
        self.gdn2 = GdnLayer(width, dtype=dtype)
        self.cell = ConvLstmCell(width, width, 3, rng=rng, dtype=dtype) if recurrent else None
        self.down3 = Conv2d(width, width, k, stride=2, rng=rng, dtype=dtype)
        self.gdn3 = GdnLayer(width, dtype=dtype)
        self.down4 = Conv2d(width, latent_channels, k, stride=2, rng=rng, dtype=dtype)

    @property
    def recurrent(self) -> bool:
        return self.cell is not None

    def zero_state(self, n: int, frame_h: int, frame_w: int, dtype=np.float32):
        if self.cell is None:
            return None
        return self.cell.zero_state(n, frame_h // 4, frame_w // 4, dtype)

    def __call__(self, x: T.Tensor, state):
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise T.ShapeError(f"encoder input dims must divide by 16, got {x.shape}")
        z = self.gdn1(self.down1(x))
        z = self.gdn2(self.down2(z))
        if self.cell is not None:
            z, state = self.cell(z, state)
        z = self.gdn3(self.down3(z))
        return self.down4(z), state

    def project(self):
        for gdn in (self.gdn1, self.gdn2, self.gdn3):
            gdn.project()

    def params(self):
        parts = [("down1", self.down1), ("gdn1", self.gdn1), ("down2", self.down2),
                 ("gdn2", self.gdn2), ("down3", self.down3), ("gdn3", self.gdn3),
                 ("down4", self.down4)]
        if self.cell is not None:
            parts.insert(4, ("cell", self.cell))
        for tag, sub in parts:
            for name, p in sub.params():
                yield f"{tag}.{name}", p


class RecurrentDecoder:
    def __init__(self, latent_channels: int, out_channels: int, width: int, kernel: int, *,
                 recurrent: bool = True, rng: np.random.Generator, dtype=np.float32):
        self.latent_channels = latent_channels
        self.out_channels = out_channels
        k = kernel
        self.up1 = ConvTranspose2d(latent_channels, width, k, rng=rng, dtype=dtype)
        self.igdn1 = GdnLayer(width, inverse=True, dtype=dtype)
        self.up2 = ConvTranspose2d(width, width, k, rng=rng, dtype=dtype)
        self.igdn2 = GdnLayer(width, inverse=True, dtype=dtype)
        self.cell = ConvLstmCell(width, width, 3, rng=rng, dtype=dtype) if recurrent else None
        self.up3 = ConvTranspose2d(width, width, k, rng=rng, dtype=dtype)
        self.igdn3 = GdnLayer(width, inverse=True, dtype=dtype)
        self.up4 = ConvTranspose2d(width, out_channels, k, rng=rng, dtype=dtype)

    @property
    def recurrent(self) -> bool:
        return self.cell is not None

    def zero_state(self, n: int, frame_h: int, frame_w: int, dtype=np.float32):
        if self.cell is None:
            return None
        return self.cell.zero_state(n, frame_h // 4, frame_w // 4, dtype)

    def __call__(self, y: T.Tensor, state):
        z = self.igdn1(self.up1(y))
        z = self.igdn2(self.up2(z))
        if self.cell is not None:
            z, state = self.cell(z, state)
        z = self.igdn3(self.up3(z))
        return self.up4(z), state

    def project(self):
        for gdn in (self.igdn1, self.igdn2, self.igdn3):
            gdn.project()

    def params(self):
        parts = [("up1", self.up1), ("igdn1", self.igdn1), ("up2", self.up2),
                 ("igdn2", self.igdn2), ("up3", self.up3), ("igdn3", self.igdn3),
                 ("up4", self.up4)]
        if self.cell is not None:
            parts.insert(4, ("cell", self.cell))
        for tag, sub in parts:
            for name, p in sub.params():
                yield f"{tag}.{name}", p


def encode_step(enc: RecurrentEncoder, x: T.Tensor, state, mode: str = "infer", *,
                rng: np.random.Generator | None = None, lsym: int = LSYM_DEFAULT,
                frame_index: int = -1):
    """Run the encoder one frame; returns (Latent | noisy Tensor, state')."""
    ytilde, state = enc(x, state)
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng for the quantization noise")
        noise = rng.uniform(-0.5, 0.5, size=ytilde.shape).astype(ytilde.data.dtype)
        return T.add(ytilde, T.constant(noise)), state
    if mode != "infer":
        raise ValueError(f"unknown mode {mode!r}")
    if ytilde.shape[0] != 1:
        raise T.ShapeError("inference coding expects batch size 1")
    values = quantize_latent(ytilde.data[0], lsym)
    return Latent(values, kind=enc.kind, frame_index=frame_index), state


def decode_step(dec: RecurrentDecoder, y, state):
    """Reconstruct from an integer Latent (inference) or noisy Tensor (training)."""
    if isinstance(y, Latent):
        y = T.constant(y.values[None].astype(np.float32))
    return dec(y, state)
