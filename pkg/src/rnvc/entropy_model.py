"""Probability models for integer latents: discretized logistics, a
recurrent conditional prior, and a per-channel factorized prior.

Both the differentiable training rate and the inference-side quantized
CDFs are built from the same logistic CDF-difference formula, so train
and code paths cannot drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv2d, ConvLstmCell, RecurrentState
from .rangecoder import quantize_cdf_rows

S_MIN = 0.01
LSYM_DEFAULT = 64
_LN2 = float(np.log(2.0))
_PMF_FLOOR = 1e-9


@dataclass
class PmfParams:
    """Per-element location/scale of a discretized logistic; s >= s_min > 0."""

    mu: T.Tensor
    s: T.Tensor

    def __post_init__(self):
        if self.mu.shape != self.s.shape:
            raise T.ShapeError(f"pmf params shape mismatch {self.mu.shape} vs {self.s.shape}")


def _sigmoid64(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logistic_pmf(y, mu, s):
    """PMF of integer y under a discretized logistic (no tail absorption).

    Accepts tensors (differentiable, used with noisy latents at train time)
    or plain arrays/floats.
    """
    if isinstance(y, T.Tensor) or isinstance(mu, T.Tensor):
        centered = T.sub(y, mu)
        upper = T.sigmoid(T.div(T.add(centered, 0.5), s))
        lower = T.sigmoid(T.div(T.add(centered, -0.5), s))
        return T.sub(upper, lower)
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    return _sigmoid64((y + 0.5 - mu) / s) - _sigmoid64((y - 0.5 - mu) / s)


def pmf_table_range(mu: np.ndarray, s: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Rows of discretized-logistic PMFs over the integer alphabet [lo, hi].

    Edge symbols absorb the full tails, so every row sums to 1 exactly
    (telescoping CDF with endpoints pinned to 0 and 1).
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 1)
    s = np.asarray(s, dtype=np.float64).reshape(-1, 1)
    edges = np.arange(lo, hi, dtype=np.float64) + 0.5  # interior edges
    cdf = _sigmoid64((edges - mu) / s)
    n = hi - lo + 1
    full = np.empty((mu.shape[0], n + 1), dtype=np.float64)
    full[:, 0] = 0.0
    full[:, -1] = 1.0
    full[:, 1:-1] = cdf
    return np.diff(full, axis=1)


def pmf_table(mu: np.ndarray, s: np.ndarray, lsym: int = LSYM_DEFAULT) -> np.ndarray:
    """PMF rows over the symmetric latent alphabet [-lsym, lsym]."""
    return pmf_table_range(mu, s, -lsym, lsym)


def cdf_rows_for(params: PmfParams, lsym: int = LSYM_DEFAULT) -> np.ndarray:
    """Quantized integer CDF rows the coder uses, one per latent element."""
    pmf = pmf_table(params.mu.data.reshape(-1), params.s.data.reshape(-1), lsym)
    return quantize_cdf_rows(pmf)


def rate_bits(values: np.ndarray, params: PmfParams, lsym: int = LSYM_DEFAULT) -> float:
    """Coding cost of integer latents under the *quantized* probabilities.

    This is exactly the information content the range coder sees, so the
    reported bits match the emitted stream up to the per-chunk flush.
    """
    v = np.asarray(values).reshape(-1)
    if v.size != params.mu.size:
        raise T.ShapeError(f"rate_bits: {v.size} values vs {params.mu.size} params")
    if np.any(np.abs(v) > lsym):
        raise ValueError(f"latent values outside alphabet [-{lsym}, {lsym}]")
    rows = cdf_rows_for(params, lsym)
    idx = (v + lsym).astype(np.int64)
    freqs = rows[np.arange(v.size), idx + 1] - rows[np.arange(v.size), idx]
    return float(-np.log2(freqs / 65536.0).sum())


def train_rate_bits(y: T.Tensor, params: PmfParams) -> T.Tensor:
    """Differentiable rate: -sum log2 pmf(y) with the continuous relaxation."""
    pmf = logistic_pmf(y, params.mu, params.s)
    pmf = T.clamp(pmf, lo=_PMF_FLOOR)
    return T.div(T.tlog(pmf).sum(), -_LN2)


class RecurrentPrior:
    """Predicts per-element (mu, s) for the current latent from the decoded
    latent history, carried through a ConvLSTM state."""

    def __init__(self, latent_channels: int, width: int, *, rng: np.random.Generator,
                 dtype=np.float32, s_min: float = S_MIN):
        self.latent_channels = latent_channels
        self.s_min = s_min
        self.conv_in = Conv2d(latent_channels, width, 3, rng=rng, dtype=dtype)
        self.conv_mid = Conv2d(width, width, 3, rng=rng, dtype=dtype)
        self.cell = ConvLstmCell(width, width, 3, rng=rng, dtype=dtype)
        self.conv_out = Conv2d(width, width, 3, rng=rng, dtype=dtype)
        self.head = Conv2d(width, 2 * latent_channels, 3, rng=rng, dtype=dtype)

    def zero_state(self, n: int, h: int, w: int, dtype=np.float32) -> RecurrentState:
        return self.cell.zero_state(n, h, w, dtype)

    def step(self, y_prev: T.Tensor, state: RecurrentState) -> tuple[PmfParams, RecurrentState]:
        if y_prev.shape[1] != self.latent_channels:
            raise T.ShapeError(
                f"prior expects {self.latent_channels} latent channels, got {y_prev.shape[1]}")
        z = T.relu(self.conv_in(y_prev))
        z = T.relu(self.conv_mid(z))
        z, state = self.cell(z, state)
        z = T.relu(self.conv_out(z))
        z = self.head(z)
        c = self.latent_channels
        mu = T.narrow(z, 1, 0, c)
        s = T.add(T.softplus(T.narrow(z, 1, c, c)), self.s_min)
        return PmfParams(mu, s), state

    def params(self):
        for tag, sub in (("conv_in", self.conv_in), ("conv_mid", self.conv_mid),
                         ("cell", self.cell), ("conv_out", self.conv_out), ("head", self.head)):
            for name, p in sub.params():
                yield f"{tag}.{name}", p


class FactorizedPrior:
    """Per-channel trainable (mu, s) of a discretized logistic, broadcast
    spatially; models each latent element independently."""

    def __init__(self, channels: int, *, dtype=np.float32, s_min: float = S_MIN):
        self.channels = channels
        self.s_min = s_min
        self.mu = T.parameter(np.zeros(channels, dtype=dtype))
        # softplus(raw) + s_min == 1 at init
        raw0 = float(np.log(np.expm1(1.0 - s_min)))
        self.raw_s = T.parameter(np.full(channels, raw0, dtype=dtype))

    def pmf_params(self, n: int, h: int, w: int) -> PmfParams:
        mu = T.expand_channel(self.mu, n, h, w)
        s = T.add(T.softplus(T.expand_channel(self.raw_s, n, h, w)), self.s_min)
        return PmfParams(mu, s)

    def params(self):
        yield "mu", self.mu
        yield "raw_s", self.raw_s


def factorized_rate(values: np.ndarray, prior: FactorizedPrior, lsym: int = LSYM_DEFAULT) -> float:
    """Quantized-CDF coding cost of integer latents under a factorized prior."""
    v = np.asarray(values)
    if v.ndim == 3:
        v = v[None]
    n, c, h, w = v.shape
    params = prior.pmf_params(n, h, w)
    return rate_bits(v, params, lsym)


def factorized_train_rate(y: T.Tensor, prior: FactorizedPrior) -> T.Tensor:
    n, c, h, w = y.shape
    return train_rate_bits(y, prior.pmf_params(n, h, w))
