"""Ablation harness: baseline vs recurrent transforms vs conditional prior,
plus the state-reset and error-propagation probes.

Variants:
  bl      - ConvLSTM cells bypassed everywhere, factorized entropy model
  bl_rae  - recurrent transforms, factorized entropy model
  full    - bl_rae transforms plus the recurrent conditional prior

The full variant shares the bl_rae transform: the priors are trained
afterwards on the frozen transform's integer latents, which isolates the
entropy-model comparison (identical reconstructions, so distortion parity
is exact) and keeps desk-scale budgets sane.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .autoencoder import decode_step
from .codec import CodecModel, GopStructure, encode_video, iframe_quantize_recon
from .config import CodecConfig
from .entropy_model import train_rate_bits
from .metrics import psnr
from .motion import motion_compensate
from .train import Adam, SyntheticDataset, TrainConfig, train_pipeline

VARIANTS = ("bl", "bl_rae", "full")


def variant_config(codec: CodecConfig, variant: str) -> CodecConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    return dataclasses.replace(
        codec,
        recurrent=variant != "bl",
        conditional_prior=variant == "full",
    )


def collect_latent_sequences(model: CodecModel, frames: np.ndarray):
    """Run the frozen codec (rounded latents, no coding) over (B, T, C, H, W)
    batches and return per-frame integer latents for both streams."""
    b, t_n, c, h, w = frames.shape
    dt = model.dtype
    lsym = model.config.lsym
    fhat_prev = T.constant(iframe_quantize_recon(frames[:, 0], model.config.iframe_levels)
                           .astype(dt, copy=False))
    enc_m_st = model.enc_m.zero_state(b, h, w, dt)
    dec_m_st = model.dec_m.zero_state(b, h, w, dt)
    enc_r_st = model.enc_r.zero_state(b, h, w, dt)
    dec_r_st = model.dec_r.zero_state(b, h, w, dt)
    ym_seq, yr_seq, recon_psnr = [], [], []
    for t in range(1, t_n):
        ft = T.constant(frames[:, t].astype(dt, copy=False))
        flow = model.flow_net(fhat_prev, ft)
        ytil, enc_m_st = model.enc_m(flow, enc_m_st)
        ym = np.clip(np.sign(ytil.data) * np.floor(np.abs(ytil.data) + 0.5),
                     -lsym, lsym).astype(np.int32)
        xm, dec_m_st = decode_step(model.dec_m, T.constant(ym.astype(dt)), dec_m_st)
        f_prime = motion_compensate(model.mc_net, fhat_prev, xm)
        resid = T.sub(ft, f_prime)
        rtil, enc_r_st = model.enc_r(resid, enc_r_st)
        yr = np.clip(np.sign(rtil.data) * np.floor(np.abs(rtil.data) + 0.5),
                     -lsym, lsym).astype(np.int32)
        xr, dec_r_st = decode_step(model.dec_r, T.constant(yr.astype(dt)), dec_r_st)
        fhat = T.clamp(T.add(f_prime, xr), 0.0, 1.0)
        recon_psnr.append(psnr(fhat.data, frames[:, t]))
        ym_seq.append(ym)
        yr_seq.append(yr)
        fhat_prev = fhat
    return ym_seq, yr_seq, float(np.mean(recon_psnr))


def _prior_nll(model: CodecModel, stream: str, latents: list[np.ndarray]) -> T.Tensor:
    """Total conditional bits of integer latent sequences (frames 2..T)."""
    prior = model.prior_m if stream == "m" else model.prior_r
    b, c, h, w = latents[0].shape
    state = prior.zero_state(b, h, w, model.dtype)
    total = None
    for t in range(1, len(latents)):
        prev = T.constant(latents[t - 1].astype(model.dtype))
        params, state = prior.step(prev, state)
        bits = train_rate_bits(T.constant(latents[t].astype(model.dtype)), params)
        total = bits if total is None else T.add(total, bits)
    return total


def _factorized_nll(model: CodecModel, stream: str, latents: list[np.ndarray]) -> T.Tensor:
    fact = model.fact_m if stream == "m" else model.fact_r
    b, c, h, w = latents[0].shape
    total = None
    for lat in latents:
        params = fact.pmf_params(b, h, w)
        bits = train_rate_bits(T.constant(lat.astype(model.dtype)), params)
        total = bits if total is None else T.add(total, bits)
    return total


def fit_entropy_models(model: CodecModel, dataset: SyntheticDataset, *,
                       n_sequences: int = 32, steps: int = 400, lr: float = 1e-3,
                       batch: int = 4, train_priors: bool = True) -> list[dict]:
    """Freeze the transform; fit factorized marginals and (optionally) the
    conditional priors on its integer latents by NLL descent."""
    seqs = [dataset.batch(batch) for _ in range(max(1, n_sequences // batch))]
    cached = [collect_latent_sequences(model, s)[:2] for s in seqs]
    fact_params = ([p for _, p in model.fact_m.params()]
                   + [p for _, p in model.fact_r.params()])
    prior_params = ([p for _, p in model.prior_m.params()]
                    + [p for _, p in model.prior_r.params()])
    params = fact_params + (prior_params if train_priors else [])
    opt = Adam(params, lr=lr)
    log = []
    n_cases = len(cached)
    for step in range(steps):
        ym_seq, yr_seq = cached[step % n_cases]
        denom = float(ym_seq[0].shape[0] * len(ym_seq))
        with T.GradTape() as tape:
            loss = T.add(_factorized_nll(model, "m", ym_seq),
                         _factorized_nll(model, "r", yr_seq))
            if train_priors:
                loss = T.add(loss, T.add(_prior_nll(model, "m", ym_seq),
                                         _prior_nll(model, "r", yr_seq)))
            loss = T.div(loss, denom)
        tape.backward(loss)
        opt.step()
        log.append({"step": step + 1, "stage": "PRIOR", "loss": loss.item()})
    return log


def train_variant(variant: str, base: TrainConfig, *, transform_from: CodecModel | None = None,
                  prior_steps: int = 400, prior_sequences: int = 32) -> tuple[CodecModel, list]:
    """Train one ablation variant end to end (bl / bl_rae) or by attaching
    trained priors to an existing bl_rae transform (full)."""
    cfg = dataclasses.replace(base, codec=variant_config(base.codec, variant))
    if variant in ("bl", "bl_rae"):
        result = train_pipeline(cfg)
        return result.model, result.log
    # full: reuse (or train) the recurrent transform, then fit priors
    if transform_from is None:
        transform_from, _ = train_variant("bl_rae", base)
    model = CodecModel(cfg.codec, seed=cfg.seed)
    donor = dict(transform_from.params())
    for name, p in model.params():
        p.data[:] = donor[name].data
    dataset = SyntheticDataset(cfg.dataset, cfg.crop, cfg.seq_len, cfg.codec.channels,
                               seed=cfg.seed + 5000, motion_px=cfg.motion_px,
                               ar_rho=cfg.ar_rho, noise_amp=cfg.noise_amp)
    log = fit_entropy_models(model, dataset, n_sequences=prior_sequences,
                             steps=prior_steps, lr=1e-3)
    return model, log


def evaluate_rd(model: CodecModel, sequences: list[np.ndarray], gop: GopStructure):
    """Mean P-frame bpp / PSNR (plus per-frame rows) over evaluation clips."""
    p_bits, p_psnr, rows, i_bits = [], [], [], []
    for seq in sequences:
        _, stats = encode_video(model, seq, gop)
        h, w = stats["height"], stats["width"]
        for r in stats["frames"]:
            if r["type"] == "P":
                p_bits.append(r["rate_bits"])
                p_psnr.append(r["psnr"])
            else:
                i_bits.append(r["rate_bits"])
            rows.append(r)
    px = float(h * w)
    return {
        "p_bpp": float(np.mean(p_bits)) / px,
        "p_psnr": float(np.mean(p_psnr)),
        "i_bpp": float(np.mean(i_bits)) / px if i_bits else 0.0,
        "frames": rows,
    }


def reset_probe(model: CodecModel, sequences: list[np.ndarray], *,
                reset_display: int = 5, probe_display: int = 6):
    """Mirror of the one-frame-prior experiment: reset recurrent state before
    P-frame ``reset_display`` and report frame ``probe_display`` RD stats."""
    gop = GopStructure("uni", n=max(probe_display, 6))
    out = {}
    for tag, resets in (("sequential", frozenset()), ("reset", frozenset({reset_display}))):
        bits, quals = [], []
        for seq in sequences:
            _, stats = encode_video(model, seq, gop, reset_before=resets)
            row = [r for r in stats["frames"] if r["display"] == probe_display][0]
            bits.append(row["rate_bits"])
            quals.append(row["psnr"])
        px = float(stats["width"] * stats["height"])
        out[tag] = {"bpp": float(np.mean(bits)) / px, "psnr": float(np.mean(quals))}
    return out


def error_propagation(model: CodecModel, sequences: list[np.ndarray],
                      gop_size: int = 13):
    """Per-P-index (bpp, PSNR) averaged over GOPs: the error-propagation
    measurement (uni-IPPP)."""
    if gop_size < 2:
        raise ValueError("gop_size must be >= 2")
    gop = GopStructure("uni", n=gop_size - 1)
    acc: dict[int, list] = {}
    px = None
    for seq in sequences:
        _, stats = encode_video(model, seq, gop)
        px = float(stats["width"] * stats["height"])
        for r in stats["frames"]:
            if r["type"] == "P":
                acc.setdefault(r["p_index"], []).append((r["rate_bits"], r["psnr"]))
    rows = []
    for idx in sorted(acc):
        vals = acc[idx]
        rows.append({"p_index": idx,
                     "bpp": float(np.mean([v[0] for v in vals])) / px,
                     "psnr": float(np.mean([v[1] for v in vals])),
                     "gops": len(vals)})
    return rows
