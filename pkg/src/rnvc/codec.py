"""End-to-end video codec: per-frame coding, GOP orchestration, bitstream.

Every quantity the decoder must replicate (reconstructions, recurrent
states, PMF parameters) is derived exclusively from decoded values, so
encoder and decoder stay bit-identical frame by frame ("codec closure").
The encoder additionally keeps its own analysis-side ConvLSTM states,
which the decoder never needs.

Bitstream container (little-endian):
  magic "RLV1", version u8, flags u8 (low bits: channel count),
  width u32, height u32, crop_w u32, crop_h u32, frame_count u32,
  gop_mode u8 (0 uni, 1 bi), N u8, M u8, lambda_id u8, model_hash u64,
  then frame records in coding order:
    'P' u8, motion_len u32 + bytes, residual_len u32 + bytes
    'I' u8, payload_len u32 + bytes
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rangecoder as rc
from . import tensor as T
from .autoencoder import Latent, RecurrentDecoder, RecurrentEncoder, decode_step, encode_step
from .config import CodecConfig
from .entropy_model import (FactorizedPrior, PmfParams, RecurrentPrior,
                            pmf_table_range, quantize_cdf_rows)
from .layers import RecurrentState
from .metrics import psnr
from .motion import CompensationNet, FlowPyramidNet, motion_compensate

MAGIC = b"RLV1"
VERSION = 1
_HEADER_FMT = "<4sBBIIIIIBBBBQ"
HEADER_SIZE = struct.calcsize(_HEADER_FMT)


class BitstreamError(Exception):
    pass


class ModelMismatchError(BitstreamError):
    pass


@dataclass
class GopStructure:
    mode: str = "uni"  # "uni" | "bi"
    n: int = 9         # forward P-frames per GOP
    m: int = 0         # backward P-frames (bi only)

    def __post_init__(self):
        if self.mode not in ("uni", "bi"):
            raise ValueError(f"gop mode must be uni or bi, got {self.mode!r}")
        if self.n < 0 or self.m < 0:
            raise ValueError("gop N and M must be >= 0")
        if self.mode == "uni" and self.m:
            raise ValueError("uni mode takes no backward frames")

    @property
    def size(self) -> int:
        return self.n + self.m + 1


@dataclass
class PlanStep:
    ftype: str           # "I" | "P"
    display: int
    new_chain: bool = False
    ref_display: int = -1


def gop_plan(frame_count: int, gop: GopStructure) -> list[PlanStep]:
    """Coding-order schedule derived only from (frame_count, gop)."""
    if frame_count < 1:
        raise ValueError("need at least one frame")
    steps: list[PlanStep] = []
    if gop.mode == "uni":
        size = gop.n + 1
        for start in range(0, frame_count, size):
            steps.append(PlanStep("I", start))
            prev = start
            for d in range(start + 1, min(start + size, frame_count)):
                steps.append(PlanStep("P", d, new_chain=(prev == start), ref_display=prev))
                prev = d
        return steps

    coded_i: set[int] = set()
    start = 0
    last = frame_count - 1
    while start <= last:
        if start not in coded_i:
            steps.append(PlanStep("I", start))
            coded_i.add(start)
        fwd_end = min(start + gop.n, last)
        prev = start
        for d in range(start + 1, fwd_end + 1):
            steps.append(PlanStep("P", d, new_chain=(prev == start), ref_display=prev))
            prev = d
        next_i = start + gop.size
        closing = next_i if next_i <= last else (last if fwd_end < last else None)
        if closing is not None:
            if closing not in coded_i:
                steps.append(PlanStep("I", closing))
                coded_i.add(closing)
            prev = closing
            for d in range(closing - 1, fwd_end, -1):
                steps.append(PlanStep("P", d, new_chain=(prev == closing), ref_display=prev))
                prev = d
        start = next_i
    return steps


class CodecModel:
    """All networks plus the factorized priors, built from one config."""

    def __init__(self, config: CodecConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        c = config.channels
        w = config.width
        lc = config.latent_channels
        rec = config.recurrent
        self.flow_net = FlowPyramidNet(config.pyramid_levels, c, config.flow_width,
                                       rng=rng, dtype=dtype)
        self.mc_net = CompensationNet(c, w, rng=rng, dtype=dtype)
        self.enc_m = RecurrentEncoder(2, lc, w, config.motion_kernel, kind="motion",
                                      recurrent=rec, rng=rng, dtype=dtype)
        self.dec_m = RecurrentDecoder(lc, 2, w, config.motion_kernel,
                                      recurrent=rec, rng=rng, dtype=dtype)
        self.enc_r = RecurrentEncoder(c, lc, w, config.residual_kernel, kind="residual",
                                      recurrent=rec, rng=rng, dtype=dtype)
        self.dec_r = RecurrentDecoder(lc, c, w, config.residual_kernel,
                                      recurrent=rec, rng=rng, dtype=dtype)
        self.prior_m = RecurrentPrior(lc, w, rng=rng, dtype=dtype, s_min=config.s_min)
        self.prior_r = RecurrentPrior(lc, w, rng=rng, dtype=dtype, s_min=config.s_min)
        self.fact_m = FactorizedPrior(lc, dtype=dtype, s_min=config.s_min)
        self.fact_r = FactorizedPrior(lc, dtype=dtype, s_min=config.s_min)

    def submodules(self):
        return (("flow", self.flow_net), ("mc", self.mc_net),
                ("enc_m", self.enc_m), ("dec_m", self.dec_m),
                ("enc_r", self.enc_r), ("dec_r", self.dec_r),
                ("prior_m", self.prior_m), ("prior_r", self.prior_r),
                ("fact_m", self.fact_m), ("fact_r", self.fact_r))

    def params(self):
        for tag, sub in self.submodules():
            for name, p in sub.params():
                yield f"{tag}.{name}", p

    def project(self):
        for enc_dec in (self.enc_m, self.dec_m, self.enc_r, self.dec_r):
            enc_dec.project()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params()}

    def load_state_dict(self, weights: dict[str, np.ndarray]) -> None:
        own = dict(self.params())
        missing = set(own) - set(weights)
        extra = set(weights) - set(own)
        if missing or extra:
            raise ValueError(f"weight mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
        for name, p in own.items():
            arr = np.asarray(weights[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data[:] = arr

    def weights_blob(self) -> bytes:
        ordered = dict(sorted(self.state_dict().items()))
        return T.weights_to_bytes(ordered)

    def model_hash(self) -> int:
        return int.from_bytes(hashlib.sha256(self.weights_blob()).digest()[:8], "big")

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.weights_blob())

    @classmethod
    def load(cls, path, config: CodecConfig, dtype=np.float32) -> "CodecModel":
        model = cls(config, seed=0, dtype=dtype)
        model.load_state_dict(T.load_weights(path))
        return model


@dataclass
class CodecState:
    """Per-sequence coding state; decoder-replicable parts are hashed."""

    fhat_prev: np.ndarray
    dec_m: RecurrentState | None
    dec_r: RecurrentState | None
    prior_m: RecurrentState
    prior_r: RecurrentState
    prev_ym: np.ndarray | None = None
    prev_yr: np.ndarray | None = None
    p_index: int = 0
    enc_m: RecurrentState | None = None   # encoder-side only
    enc_r: RecurrentState | None = None

    @classmethod
    def fresh(cls, model: CodecModel, reference: np.ndarray, *, encoder_side: bool) -> "CodecState":
        n, c, h, w = reference.shape
        lh, lw = h // 16, w // 16
        dt = model.dtype
        return cls(
            fhat_prev=np.ascontiguousarray(reference, dtype=dt),
            dec_m=model.dec_m.zero_state(n, h, w, dt),
            dec_r=model.dec_r.zero_state(n, h, w, dt),
            prior_m=model.prior_m.zero_state(n, lh, lw, dt),
            prior_r=model.prior_r.zero_state(n, lh, lw, dt),
            enc_m=model.enc_m.zero_state(n, h, w, dt) if encoder_side else None,
            enc_r=model.enc_r.zero_state(n, h, w, dt) if encoder_side else None,
        )

    def state_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.fhat_prev.tobytes())
        for st in (self.dec_m, self.dec_r, self.prior_m, self.prior_r):
            if st is not None:
                h.update(st.h.data.tobytes())
                h.update(st.c.data.tobytes())
        for lat in (self.prev_ym, self.prev_yr):
            if lat is not None:
                h.update(np.ascontiguousarray(lat).tobytes())
        h.update(struct.pack("<I", self.p_index))
        return h.hexdigest()


@dataclass
class FrameRecord:
    ftype: str
    display: int
    motion: bytes = b""
    residual: bytes = b""
    payload: bytes = b""

    @property
    def nbytes(self) -> int:
        if self.ftype == "I":
            return 5 + len(self.payload)
        return 9 + len(self.motion) + len(self.residual)


def _rows_bits(rows: np.ndarray, idx: np.ndarray) -> float:
    take = np.arange(idx.size)
    freqs = rows[take, idx + 1] - rows[take, idx]
    return float(-np.log2(freqs / rc.TOTAL).sum())


def _prior_rows(model: CodecModel, stream: str, state: CodecState):
    """CDF rows for the upcoming latent, conditioned only on decoded history."""
    prior = model.prior_m if stream == "m" else model.prior_r
    fact = model.fact_m if stream == "m" else model.fact_r
    prev = state.prev_ym if stream == "m" else state.prev_yr
    prior_state = state.prior_m if stream == "m" else state.prior_r
    lsym = model.config.lsym
    if state.p_index == 0 or not model.config.conditional_prior:
        n, h, w = 1, state.fhat_prev.shape[2] // 16, state.fhat_prev.shape[3] // 16
        params = fact.pmf_params(n, h, w)
        rows = quantize_cdf_rows(pmf_table_range(
            params.mu.data.reshape(-1), params.s.data.reshape(-1), -lsym, lsym))
        return rows, prior_state
    prev_t = T.constant(prev[None].astype(model.dtype))
    params, prior_state = prior.step(prev_t, prior_state)
    rows = quantize_cdf_rows(pmf_table_range(
        params.mu.data.reshape(-1), params.s.data.reshape(-1), -lsym, lsym))
    return rows, prior_state


def encode_frame(model: CodecModel, state: CodecState, frame: np.ndarray):
    """Code one P-frame; returns (record, fhat, state', stats)."""
    cfg = model.config
    lsym = cfg.lsym
    frame_t = T.constant(np.ascontiguousarray(frame, dtype=model.dtype))
    ref = T.constant(state.fhat_prev)

    flow = model.flow_net(ref, frame_t)
    latent_m, enc_m_st = encode_step(model.enc_m, flow, state.enc_m, "infer", lsym=lsym)
    rows_m, prior_m_st = _prior_rows(model, "m", state)
    idx_m = latent_m.values.reshape(-1).astype(np.int64) + lsym
    chunk_m = rc.encode(idx_m, rows_m)

    xm_hat, dec_m_st = decode_step(model.dec_m, latent_m, state.dec_m)
    f_prime = motion_compensate(model.mc_net, ref, xm_hat)
    resid = T.sub(frame_t, f_prime)
    latent_r, enc_r_st = encode_step(model.enc_r, resid, state.enc_r, "infer", lsym=lsym)
    rows_r, prior_r_st = _prior_rows(model, "r", state)
    idx_r = latent_r.values.reshape(-1).astype(np.int64) + lsym
    chunk_r = rc.encode(idx_r, rows_r)

    xr_hat, dec_r_st = decode_step(model.dec_r, latent_r, state.dec_r)
    fhat = T.clamp(T.add(f_prime, xr_hat), 0.0, 1.0)

    new_state = CodecState(
        fhat_prev=fhat.data, dec_m=dec_m_st, dec_r=dec_r_st,
        prior_m=prior_m_st, prior_r=prior_r_st,
        prev_ym=latent_m.values, prev_yr=latent_r.values,
        p_index=state.p_index + 1, enc_m=enc_m_st, enc_r=enc_r_st)
    stats = {
        "rate_bits_motion": _rows_bits(rows_m, idx_m),
        "rate_bits_residual": _rows_bits(rows_r, idx_r),
        "bytes_motion": len(chunk_m),
        "bytes_residual": len(chunk_r),
    }
    record = FrameRecord("P", -1, motion=chunk_m, residual=chunk_r)
    return record, fhat.data, new_state, stats


def decode_frame(model: CodecModel, state: CodecState, record: FrameRecord):
    """Bit-exact mirror of ``encode_frame`` fed only decoded quantities."""
    cfg = model.config
    lsym = cfg.lsym
    n, c, h, w = state.fhat_prev.shape
    lh, lw = h // 16, w // 16
    lc = cfg.latent_channels
    ref = T.constant(state.fhat_prev)

    rows_m, prior_m_st = _prior_rows(model, "m", state)
    idx_m = rc.decode(record.motion, rows_m)
    latent_m = Latent((idx_m - lsym).reshape(lc, lh, lw), kind="motion")
    xm_hat, dec_m_st = decode_step(model.dec_m, latent_m, state.dec_m)
    f_prime = motion_compensate(model.mc_net, ref, xm_hat)

    rows_r, prior_r_st = _prior_rows(model, "r", state)
    idx_r = rc.decode(record.residual, rows_r)
    latent_r = Latent((idx_r - lsym).reshape(lc, lh, lw), kind="residual")
    xr_hat, dec_r_st = decode_step(model.dec_r, latent_r, state.dec_r)
    fhat = T.clamp(T.add(f_prime, xr_hat), 0.0, 1.0)

    new_state = CodecState(
        fhat_prev=fhat.data, dec_m=dec_m_st, dec_r=dec_r_st,
        prior_m=prior_m_st, prior_r=prior_r_st,
        prev_ym=latent_m.values, prev_yr=latent_r.values,
        p_index=state.p_index + 1)
    return fhat.data, new_state


# ---------------------------------------------------------------------------
# I-frame codec: uniform scalar quantization + factorized logistic coding


def iframe_quantize_recon(frame: np.ndarray, q: int) -> np.ndarray:
    """Reconstruction the I-frame codec will produce (also used in training)."""
    levels = np.clip(np.rint(frame * (q - 1)), 0, q - 1)
    return (levels / (q - 1)).astype(np.float32)


def code_iframe(frame: np.ndarray, q: int) -> tuple[bytes, np.ndarray, float]:
    """Quantize pixels to q levels and entropy-code each channel plane.

    Returns (payload, reconstruction, ideal_bits). Each plane is coded with
    a fitted discretized logistic unless the uniform law is cheaper.
    """
    if not 2 <= q <= 4096:
        raise ValueError(f"iframe levels {q} out of range")
    n, c, h, w = frame.shape
    if n != 1:
        raise T.ShapeError("iframe coding expects batch size 1")
    levels = np.clip(np.rint(frame[0].astype(np.float64) * (q - 1)), 0, q - 1).astype(np.int64)
    parts = [struct.pack("<HB", q, c)]
    total_bits = 0.0
    for ch in range(c):
        plane = levels[ch].reshape(-1)
        mu = np.float32(plane.mean())
        std = float(plane.std())
        s = np.float32(max(std * np.sqrt(3.0) / np.pi, 0.05))
        pmf_log = pmf_table_range(np.float64(mu), np.float64(s), 0, q - 1)
        rows_log = quantize_cdf_rows(pmf_log)[0]
        rows_uni = quantize_cdf_rows(np.full((1, q), 1.0 / q))[0]
        counts = np.bincount(plane, minlength=q)
        bits_log = float(-(counts * np.log2(np.diff(rows_log) / rc.TOTAL)).sum())
        bits_uni = float(-(counts * np.log2(np.diff(rows_uni) / rc.TOTAL)).sum())
        if bits_log <= bits_uni:
            flag, rows, bits = 1, rows_log, bits_log
        else:
            flag, rows, bits = 0, rows_uni, bits_uni
        data = rc.encode(plane, rc.QuantizedCdf(rows), count=plane.size)
        parts.append(struct.pack("<Bff", flag, float(mu), float(s)))
        parts.append(struct.pack("<I", len(data)))
        parts.append(data)
        total_bits += bits
    recon = (levels / (q - 1)).astype(np.float32)[None]
    return b"".join(parts), recon, total_bits


def decode_iframe(payload: bytes, channels: int, h: int, w: int) -> np.ndarray:
    q, c = struct.unpack_from("<HB", payload, 0)
    if c != channels:
        raise BitstreamError(f"iframe payload has {c} channels, expected {channels}")
    off = 3
    planes = []
    for _ in range(c):
        flag, mu, s = struct.unpack_from("<Bff", payload, off)
        off += 9
        (length,) = struct.unpack_from("<I", payload, off)
        off += 4
        data = payload[off : off + length]
        if len(data) != length:
            raise BitstreamError("truncated iframe payload")
        off += length
        if flag == 1:
            rows = quantize_cdf_rows(pmf_table_range(np.float64(mu), np.float64(s), 0, q - 1))[0]
        else:
            rows = quantize_cdf_rows(np.full((1, q), 1.0 / q))[0]
        plane = rc.decode(data, rc.QuantizedCdf(rows), count=h * w)
        planes.append(plane.reshape(h, w))
    levels = np.stack(planes)
    return (levels / (q - 1)).astype(np.float32)[None]


# ---------------------------------------------------------------------------
# whole-video coding


def _require_coded_dims(h: int, w: int, levels: int) -> None:
    scale = max(16, 1 << (levels - 1))
    if h % scale or w % scale:
        raise BitstreamError(f"coded dims must divide by {scale}, got {h}x{w}")


def encode_video(model: CodecModel, frames: np.ndarray, gop: GopStructure,
                 crop: tuple[int, int] | None = None,
                 reset_before: set[int] | frozenset[int] = frozenset()):
    """Encode display-order frames (F, C, H, W) in [0, 1]; returns (bytes, stats).

    ``reset_before`` display indices zero the recurrent (h, c) states while
    keeping the reference frame and previous latents: the one-frame-prior
    probe of the ablation harness. (Streams written with nonempty
    ``reset_before`` are probe-only and not decodable by a stock decoder.)
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4:
        raise T.ShapeError("frames must be (F, C, H, W)")
    f_count, c, h, w = frames.shape
    if c != model.config.channels:
        raise BitstreamError(f"model codes {model.config.channels} channels, frames have {c}")
    _require_coded_dims(h, w, model.config.pyramid_levels)
    crop_w, crop_h = crop if crop is not None else (w, h)

    plan = gop_plan(f_count, gop)
    recons: dict[int, np.ndarray] = {}
    state: CodecState | None = None
    records: list[FrameRecord] = []
    per_frame: list[dict] = []
    state_hashes: dict[int, str] = {}

    for step in plan:
        frame = frames[step.display : step.display + 1]
        if step.ftype == "I":
            payload, recon, ibits = code_iframe(frame, model.config.iframe_levels)
            recons[step.display] = recon
            state = CodecState.fresh(model, recon, encoder_side=True)
            records.append(FrameRecord("I", step.display, payload=payload))
            per_frame.append({"display": step.display, "type": "I",
                              "bytes": len(payload) + 5, "rate_bits": ibits,
                              "psnr": psnr(frame, recon)})
            state_hashes[step.display] = state.state_hash()
            continue
        if step.new_chain:
            state = CodecState.fresh(model, recons[step.ref_display], encoder_side=True)
        if step.display in reset_before:
            fresh = CodecState.fresh(model, state.fhat_prev, encoder_side=True)
            fresh.prev_ym, fresh.prev_yr = state.prev_ym, state.prev_yr
            fresh.p_index = state.p_index
            state = fresh
        record, recon, state, stats = encode_frame(model, state, frame)
        record.display = step.display
        recons[step.display] = recon
        records.append(record)
        per_frame.append({"display": step.display, "type": "P",
                          "bytes": record.nbytes,
                          "bytes_motion": stats["bytes_motion"],
                          "bytes_residual": stats["bytes_residual"],
                          "rate_bits": stats["rate_bits_motion"] + stats["rate_bits_residual"],
                          "rate_bits_motion": stats["rate_bits_motion"],
                          "rate_bits_residual": stats["rate_bits_residual"],
                          "p_index": state.p_index,
                          "psnr": psnr(frame, recon)})
        state_hashes[step.display] = state.state_hash()

    header = struct.pack(_HEADER_FMT, MAGIC, VERSION, c & 0x03, w, h, crop_w, crop_h,
                         f_count, 0 if gop.mode == "uni" else 1, gop.n, gop.m,
                         model.config.lambda_id, model.model_hash())
    chunks = [header]
    for record in records:
        if record.ftype == "I":
            chunks.append(b"I" + struct.pack("<I", len(record.payload)) + record.payload)
        else:
            chunks.append(b"P" + struct.pack("<I", len(record.motion)) + record.motion
                          + struct.pack("<I", len(record.residual)) + record.residual)
    blob = b"".join(chunks)
    stats = {
        "total_bytes": len(blob),
        "header_bytes": HEADER_SIZE,
        "frame_count": f_count,
        "width": w, "height": h, "crop_w": crop_w, "crop_h": crop_h,
        "bpp": len(blob) * 8.0 / (f_count * h * w),
        "rate_bits_total": float(sum(row["rate_bits"] for row in per_frame)),
        "frames": sorted(per_frame, key=lambda r: r["display"]),
        "state_hashes": state_hashes,
        "recons": np.concatenate([recons[i] for i in range(f_count)], axis=0),
    }
    return blob, stats


def parse_header(blob: bytes) -> dict:
    if len(blob) < HEADER_SIZE:
        raise BitstreamError("stream shorter than header")
    magic, version, flags, w, h, crop_w, crop_h, f_count, gmode, n, m, lam, mhash = \
        struct.unpack_from(_HEADER_FMT, blob, 0)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}")
    return {
        "channels": flags & 0x03, "width": w, "height": h,
        "crop_w": crop_w, "crop_h": crop_h, "frame_count": f_count,
        "gop_mode": "uni" if gmode == 0 else "bi", "gop_n": n, "gop_m": m,
        "lambda_id": lam, "model_hash": mhash,
    }


def decode_video(model: CodecModel, blob: bytes):
    """Decode a bitstream; returns (frames (F, C, H, W) float32, stats)."""
    head = parse_header(blob)
    if head["model_hash"] != model.model_hash():
        raise ModelMismatchError("bitstream was written with different weights")
    if head["channels"] != model.config.channels:
        raise BitstreamError("channel count mismatch")
    f_count = head["frame_count"]
    h, w = head["height"], head["width"]
    gop = GopStructure(head["gop_mode"], head["gop_n"], head["gop_m"])
    plan = gop_plan(f_count, gop)

    off = HEADER_SIZE
    recons: dict[int, np.ndarray] = {}
    state: CodecState | None = None
    state_hashes: dict[int, str] = {}

    def take(nbytes: int) -> bytes:
        nonlocal off
        if off + nbytes > len(blob):
            raise BitstreamError("truncated stream")
        out = blob[off : off + nbytes]
        off += nbytes
        return out

    for step in plan:
        ftype = take(1)
        if ftype == b"I":
            if step.ftype != "I":
                raise BitstreamError(f"unexpected I-frame at display {step.display}")
            (plen,) = struct.unpack("<I", take(4))
            recon = decode_iframe(take(plen), model.config.channels, h, w)
            recons[step.display] = recon
            state = CodecState.fresh(model, recon, encoder_side=False)
        elif ftype == b"P":
            if step.ftype != "P":
                raise BitstreamError(f"unexpected P-frame at display {step.display}")
            (mlen,) = struct.unpack("<I", take(4))
            motion = take(mlen)
            (rlen,) = struct.unpack("<I", take(4))
            residual = take(rlen)
            if step.new_chain:
                state = CodecState.fresh(model, recons[step.ref_display], encoder_side=False)
            recon, state = decode_frame(model, state,
                                        FrameRecord("P", step.display, motion=motion,
                                                    residual=residual))
            recons[step.display] = recon
        else:
            raise BitstreamError(f"unknown record type {ftype!r}")
        state_hashes[step.display] = state.state_hash()
    if off != len(blob):
        raise BitstreamError(f"{len(blob) - off} trailing bytes after last record")

    frames = np.concatenate([recons[i] for i in range(f_count)], axis=0)
    return frames, {"state_hashes": state_hashes, **head}
