"""Staged training: motion warmup, compensation, single-frame joint, then
the full unrolled sequence loss, with Adam and rate-distortion weighting.

Rates in every loss are bits per pixel; distortion is MSE on [0, 1] frames
or (1 - MS-SSIM). Stage convergence means the windowed mean loss improved
by less than ``plateau_tol`` relative; the FULL stage then decays the
learning rate by 10x until ``lr_min``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import metrics as MM
from . import tensor as T
from .autoencoder import decode_step, encode_step
from .codec import CodecModel, iframe_quantize_recon
from .config import CodecConfig
from .entropy_model import factorized_train_rate, train_rate_bits
from .motion import motion_compensate, warp

STAGES = ("ME", "MC", "P1", "FULL")


class TrainError(Exception):
    pass


class StageOrderError(TrainError):
    pass


class DivergenceError(TrainError):
    pass


@dataclass
class TrainConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    stage: str = "FULL"          # target stage
    lr: float = 1e-4
    lr_min: float = 1e-6
    seq_len: int = 7             # 1 I-frame + seq_len-1 P-frames
    batch_size: int = 4
    crop: int = 64
    seed: int = 0
    dataset: str = "mixed"       # translate | rotate | ar1 | noise | mixed
    motion_px: float = 3.0
    ar_rho: float = 0.9
    noise_amp: float = 0.05
    steps: dict = field(default_factory=lambda: {"ME": 300, "MC": 300, "P1": 300, "FULL": 600})
    plateau_window: int = 50
    plateau_tol: float = 0.01
    snapshot_every: int = 25
    clip_norm: float = 5.0       # global-norm cap; 0 disables

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2 (an I-frame plus at least one P)")
        if self.crop % 16:
            raise ValueError("crop must be divisible by 16")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["codec"] = self.codec.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["codec"] = CodecConfig.from_dict(d["codec"])
        return cls(**d)


# ---------------------------------------------------------------------------
# synthetic data


def _box_blur(img: np.ndarray, r: int) -> np.ndarray:
    k = 2 * r + 1
    p = np.pad(img, ((r, r + 1), (r, r + 1)), mode="edge").astype(np.float64)
    cs = p.cumsum(axis=0).cumsum(axis=1)
    return (cs[k:, k:] - cs[:-k, k:] - cs[k:, :-k] + cs[:-k, :-k]) / (k * k)


def _texture(rng: np.random.Generator, c: int, h: int, w: int) -> np.ndarray:
    """Multi-scale texture: coarse blobs plus fine detail so local matching
    is unambiguous (pure low-pass noise starves flow estimation)."""
    out = np.empty((c, h, w), dtype=np.float64)
    for ch in range(c):
        coarse = _box_blur(rng.random((h, w)), 3)
        mid = _box_blur(rng.random((h, w)), 1)
        img = 0.6 * coarse + 0.4 * mid
        lo, hi = img.min(), img.max()
        out[ch] = (img - lo) / max(hi - lo, 1e-9)
    return out


def _bilinear_crop(canvas: np.ndarray, oy: float, ox: float, h: int, w: int) -> np.ndarray:
    y0, x0 = int(np.floor(oy)), int(np.floor(ox))
    fy, fx = oy - y0, ox - x0
    tile = canvas[:, y0 : y0 + h + 1, x0 : x0 + w + 1]
    top = tile[:, :h, :w] * (1 - fx) + tile[:, :h, 1 : w + 1] * fx
    bot = tile[:, 1 : h + 1, :w] * (1 - fx) + tile[:, 1 : h + 1, 1 : w + 1] * fx
    return top * (1 - fy) + bot * fy


class SyntheticDataset:
    """Seeded generator of short sequences: translating textures, rotating
    gradients, AR(1)-correlated fields, or per-frame noise over a texture."""

    KINDS = ("translate", "rotate", "ar1", "noise", "static", "mixed")

    def __init__(self, kind: str = "mixed", crop: int = 64, seq_len: int = 7,
                 channels: int = 1, seed: int = 0, motion_px: float = 3.0,
                 ar_rho: float = 0.9, noise_amp: float = 0.05):
        if kind not in self.KINDS:
            raise ValueError(f"unknown dataset kind {kind!r}")
        self.kind = kind
        self.crop = crop
        self.seq_len = seq_len
        self.channels = channels
        self.motion_px = motion_px
        self.ar_rho = ar_rho
        self.noise_amp = noise_amp
        self._rng = np.random.default_rng(seed)

    def _translate(self, rng) -> np.ndarray:
        h = w = self.crop
        t_n = self.seq_len
        margin = int(np.ceil(self.motion_px * t_n)) + 2
        canvas = _texture(rng, self.channels, h + 2 * margin, w + 2 * margin)
        vy, vx = rng.uniform(-self.motion_px, self.motion_px, size=2)
        out = np.empty((t_n, self.channels, h, w), dtype=np.float32)
        for t in range(t_n):
            out[t] = _bilinear_crop(canvas, margin + t * vy, margin + t * vx, h, w)
        return out

    def _rotate(self, rng) -> np.ndarray:
        h = w = self.crop
        t_n = self.seq_len
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        theta0 = rng.uniform(0, np.pi)
        omega = rng.uniform(-0.15, 0.15)
        wavelength = rng.uniform(8.0, 24.0)
        phase = rng.uniform(0, 2 * np.pi)
        out = np.empty((t_n, self.channels, h, w), dtype=np.float32)
        for t in range(t_n):
            th = theta0 + t * omega
            g = 0.5 + 0.45 * np.sin(2 * np.pi * (xx * np.cos(th) + yy * np.sin(th)) / wavelength + phase)
            out[t] = np.broadcast_to(g, (self.channels, h, w))
        return out

    def _ar1(self, rng) -> np.ndarray:
        h = w = self.crop
        t_n = self.seq_len
        rho = self.ar_rho
        base = _texture(rng, self.channels, h, w)
        sigma = 0.12
        dev = np.stack([_box_blur(rng.standard_normal((h, w)), 1) for _ in range(self.channels)])
        dev *= sigma / max(dev.std(), 1e-9)
        out = np.empty((t_n, self.channels, h, w), dtype=np.float32)
        out[0] = np.clip(base + dev, 0, 1)
        scale = sigma * np.sqrt(1 - rho * rho)
        for t in range(1, t_n):
            innov = np.stack([_box_blur(rng.standard_normal((h, w)), 1) for _ in range(self.channels)])
            innov *= scale / max(innov.std(), 1e-9)
            dev = rho * dev + innov
            out[t] = np.clip(base + dev, 0, 1)
        return out

    def _noise(self, rng) -> np.ndarray:
        h = w = self.crop
        base = _texture(rng, self.channels, h, w)
        out = np.empty((self.seq_len, self.channels, h, w), dtype=np.float32)
        for t in range(self.seq_len):
            out[t] = np.clip(base + self.noise_amp * rng.standard_normal(base.shape), 0, 1)
        return out

    def _static(self, rng) -> np.ndarray:
        base = _texture(rng, self.channels, self.crop, self.crop).astype(np.float32)
        return np.repeat(base[None], self.seq_len, axis=0)

    def sequence(self) -> np.ndarray:
        kind = self.kind
        if kind == "mixed":
            kind = ("translate", "rotate", "ar1", "translate", "ar1", "static")[
                self._rng.integers(0, 6)]
        return getattr(self, f"_{kind}")(self._rng)

    def batch(self, n: int) -> np.ndarray:
        return np.stack([self.sequence() for _ in range(n)])


# ---------------------------------------------------------------------------
# losses


def distortion(a: T.Tensor, b: T.Tensor, kind: str = "mse") -> T.Tensor:
    if kind == "mse":
        return T.tmean(T.square(T.sub(a, b)))
    if kind == "msssim":
        return 1.0 - MM.msssim(a, b)
    raise ValueError(f"unknown distortion {kind!r}")


def loss_me(f_ref: T.Tensor, f1: T.Tensor, flow: T.Tensor, kind: str = "mse") -> T.Tensor:
    return distortion(f1, warp(f_ref, flow), kind)


def loss_mc(f1: T.Tensor, f1_prime: T.Tensor, rate_m: T.Tensor, lam: float,
            kind: str = "mse") -> T.Tensor:
    return T.add(T.mul(distortion(f1, f1_prime, kind), lam), rate_m)


def loss_p1(f1: T.Tensor, f1_hat: T.Tensor, rate_m: T.Tensor, rate_r: T.Tensor,
            lam: float, kind: str = "mse") -> T.Tensor:
    return T.add(T.add(T.mul(distortion(f1, f1_hat, kind), lam), rate_m), rate_r)


def loss_full(lam: float, distortions: list[T.Tensor], rates: list[T.Tensor]) -> T.Tensor:
    d_total = distortions[0]
    for d in distortions[1:]:
        d_total = T.add(d_total, d)
    total = T.mul(d_total, lam)
    for r in rates:
        total = T.add(total, r)
    return total


# ---------------------------------------------------------------------------
# optimizer


def adam_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
                lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    m *= beta1
    m += (1 - beta1) * g
    v *= beta2
    v += (1 - beta2) * (g * g)
    mhat = m / (1 - beta1**t)
    vhat = v / (1 - beta2**t)
    p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: list[T.Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in params]
        self._v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            adam_update(p.data, p.grad, m, v, self.t, self.lr, self.beta1, self.beta2, self.eps)
            p.zero_grad()


def adam_step(params: list[T.Tensor], opt: Adam) -> None:
    """One optimizer step over accumulated gradients (grads live on params)."""
    assert params is opt.params
    opt.step()


def clip_global_norm(params: list[T.Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# stage forwards


def stage_params(model: CodecModel, stage: str) -> list[T.Tensor]:
    groups = {"ME": ["flow"],
              "MC": ["flow", "mc", "enc_m", "dec_m", "fact_m"],
              "P1": ["flow", "mc", "enc_m", "dec_m", "fact_m", "enc_r", "dec_r", "fact_r"]}
    if stage in groups:
        tags = groups[stage]
    else:
        tags = [t for t, _ in model.submodules()
                if model.config.conditional_prior or not t.startswith("prior")]
    chosen = dict(model.submodules())
    out = []
    for tag in tags:
        out.extend(p for _, p in chosen[tag].params())
    return out


def _iframe_ref(model: CodecModel, f0: np.ndarray) -> T.Tensor:
    recon = iframe_quantize_recon(f0, model.config.iframe_levels)
    return T.constant(recon.astype(model.dtype, copy=False))


def stage_forward(model: CodecModel, stage: str, batch: np.ndarray,
                  noise_rng: np.random.Generator):
    """Build the stage loss for one batch; returns (loss, info)."""
    cfg = model.config
    lam = cfg.lambda_value
    kind = cfg.distortion
    b, t_n, c, h, w = batch.shape
    denom = float(b * h * w)
    fhat0 = _iframe_ref(model, batch[:, 0])
    f1 = T.constant(batch[:, 1])

    if stage == "ME":
        flow = model.flow_net(fhat0, f1)
        loss = loss_me(fhat0, f1, flow, kind)
        return loss, {"distortion": loss.item(), "rate_bpp": 0.0}

    if stage in ("MC", "P1"):
        flow = model.flow_net(fhat0, f1)
        ym, _ = encode_step(model.enc_m, flow, model.enc_m.zero_state(b, h, w, model.dtype),
                            "train", rng=noise_rng, lsym=cfg.lsym)
        rate_m = T.div(factorized_train_rate(ym, model.fact_m), denom)
        xm, _ = decode_step(model.dec_m, ym, model.dec_m.zero_state(b, h, w, model.dtype))
        f_prime = motion_compensate(model.mc_net, fhat0, xm)
        if stage == "MC":
            dist = distortion(f1, f_prime, kind)
            loss = loss_mc(f1, f_prime, rate_m, lam, kind)
            return loss, {"distortion": dist.item(), "rate_bpp": rate_m.item()}
        resid = T.sub(f1, f_prime)
        yr, _ = encode_step(model.enc_r, resid, model.enc_r.zero_state(b, h, w, model.dtype),
                            "train", rng=noise_rng, lsym=cfg.lsym)
        rate_r = T.div(factorized_train_rate(yr, model.fact_r), denom)
        xr, _ = decode_step(model.dec_r, yr, model.dec_r.zero_state(b, h, w, model.dtype))
        f1_hat = T.clamp(T.add(f_prime, xr), 0.0, 1.0)
        dist = distortion(f1, f1_hat, kind)
        loss = loss_p1(f1, f1_hat, rate_m, rate_r, lam, kind)
        return loss, {"distortion": dist.item(),
                      "rate_bpp": rate_m.item() + rate_r.item()}

    if stage != "FULL":
        raise ValueError(f"unknown stage {stage!r}")

    lh, lw = h // 16, w // 16
    dt = model.dtype
    fhat_prev = fhat0
    enc_m_st = model.enc_m.zero_state(b, h, w, dt)
    dec_m_st = model.dec_m.zero_state(b, h, w, dt)
    enc_r_st = model.enc_r.zero_state(b, h, w, dt)
    dec_r_st = model.dec_r.zero_state(b, h, w, dt)
    prior_m_st = model.prior_m.zero_state(b, lh, lw, dt)
    prior_r_st = model.prior_r.zero_state(b, lh, lw, dt)
    prev_ym = prev_yr = None
    dists: list[T.Tensor] = []
    rates: list[T.Tensor] = []
    conditional = cfg.conditional_prior
    for t in range(1, t_n):
        ft = T.constant(batch[:, t])
        flow = model.flow_net(fhat_prev, ft)
        ym, enc_m_st = encode_step(model.enc_m, flow, enc_m_st, "train",
                                   rng=noise_rng, lsym=cfg.lsym)
        if conditional and t >= 2:
            params_m, prior_m_st = model.prior_m.step(prev_ym, prior_m_st)
            rate_m = train_rate_bits(ym, params_m)
        else:
            rate_m = factorized_train_rate(ym, model.fact_m)
        xm, dec_m_st = decode_step(model.dec_m, ym, dec_m_st)
        f_prime = motion_compensate(model.mc_net, fhat_prev, xm)
        resid = T.sub(ft, f_prime)
        yr, enc_r_st = encode_step(model.enc_r, resid, enc_r_st, "train",
                                   rng=noise_rng, lsym=cfg.lsym)
        if conditional and t >= 2:
            params_r, prior_r_st = model.prior_r.step(prev_yr, prior_r_st)
            rate_r = train_rate_bits(yr, params_r)
        else:
            rate_r = factorized_train_rate(yr, model.fact_r)
        xr, dec_r_st = decode_step(model.dec_r, yr, dec_r_st)
        fhat = T.clamp(T.add(f_prime, xr), 0.0, 1.0)
        dists.append(distortion(ft, fhat, kind))
        rates.append(T.div(T.add(rate_m, rate_r), denom))
        prev_ym, prev_yr = ym, yr
        fhat_prev = fhat
    loss = loss_full(lam, dists, rates)
    n_p = t_n - 1
    return loss, {"distortion": float(np.mean([d.item() for d in dists])),
                  "rate_bpp": float(np.mean([r.item() for r in rates])),
                  "p_frames": n_p}


# ---------------------------------------------------------------------------
# stage loop and pipeline


@dataclass
class TrainResult:
    model: CodecModel
    log: list
    completed_stage: str


def _snapshot(model: CodecModel) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.params()}


def _restore(model: CodecModel, snap: dict[str, np.ndarray]) -> None:
    for name, p in model.params():
        p.data[:] = snap[name]


def run_stage(model: CodecModel, stage: str, config: TrainConfig,
              dataset: SyntheticDataset, noise_rng: np.random.Generator,
              log: list) -> None:
    params = stage_params(model, stage)
    opt = Adam(params, lr=config.lr)
    max_steps = int(config.steps.get(stage, 300))
    window = config.plateau_window
    losses: list[float] = []
    snap = _snapshot(model)
    recovered_once = False
    lr = config.lr

    step = 0
    while step < max_steps:
        step += 1
        batch = dataset.batch(config.batch_size)
        try:
            with T.GradTape() as tape:
                loss, info = stage_forward(model, stage, batch, noise_rng)
            tape.backward(loss)
        except T.NumericsError as exc:
            if recovered_once:
                raise DivergenceError(
                    f"stage {stage} diverged twice (step {step}): {exc}") from exc
            _restore(model, snap)
            recovered_once = True
            log.append({"step": step, "stage": stage, "loss": float("nan"),
                        "rate_bpp": float("nan"), "distortion": float("nan"),
                        "lr": lr, "grad_norm": float("nan"),
                        "event": "divergence: restored snapshot"})
            continue
        gnorm = clip_global_norm(params, config.clip_norm) if config.clip_norm else 0.0
        opt.step()
        model.project()
        val = loss.item()
        losses.append(val)
        log.append({"step": step, "stage": stage, "loss": val,
                    "rate_bpp": info.get("rate_bpp", 0.0),
                    "distortion": info.get("distortion", 0.0), "lr": lr,
                    "grad_norm": gnorm, "event": ""})
        if step % config.snapshot_every == 0:
            snap = _snapshot(model)
        if len(losses) >= 2 * window and len(losses) % window == 0:
            cur = float(np.mean(losses[-window:]))
            prev = float(np.mean(losses[-2 * window : -window]))
            improved = (prev - cur) / max(abs(prev), 1e-12)
            if improved < config.plateau_tol:
                if stage == "FULL" and lr > config.lr_min:
                    lr *= 0.1
                    opt.lr = lr
                else:
                    break


def train_pipeline(config: TrainConfig, *, model: CodecModel | None = None,
                   only_stage: bool = False, init_weights: dict | None = None,
                   init_stage: str | None = None, from_scratch: bool = False,
                   log_path=None) -> TrainResult:
    """Run the staged schedule up to ``config.stage``.

    ``only_stage`` runs just the target stage; targeting FULL that way
    requires a checkpoint that completed P1 (or ``from_scratch=True``).
    """
    target_ix = STAGES.index(config.stage)
    if only_stage and config.stage == "FULL" and not from_scratch:
        if init_stage is None or STAGES.index(init_stage) < STAGES.index("P1"):
            raise StageOrderError(
                "FULL stage needs a checkpoint that completed P1 (or from_scratch)")
    if model is None:
        model = CodecModel(config.codec, seed=config.seed)
    if init_weights is not None:
        model.load_state_dict(init_weights)

    if only_stage:
        stages = [config.stage]
    else:
        start_ix = 0
        if init_stage is not None:
            start_ix = STAGES.index(init_stage) + 1
        stages = list(STAGES[start_ix : target_ix + 1])

    dataset = SyntheticDataset(config.dataset, config.crop, config.seq_len,
                               config.codec.channels, seed=config.seed,
                               motion_px=config.motion_px, ar_rho=config.ar_rho,
                               noise_amp=config.noise_amp)
    noise_rng = np.random.default_rng(config.seed + 1)
    log: list[dict] = []
    completed = init_stage or ""
    for stage in stages:
        run_stage(model, stage, config, dataset, noise_rng, log)
        completed = stage
    if log_path is not None:
        write_log_csv(log_path, log)
    return TrainResult(model=model, log=log, completed_stage=completed)


def write_log_csv(path, rows: list[dict]) -> None:
    cols = ["step", "stage", "loss", "rate_bpp", "distortion", "lr", "grad_norm", "event"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in cols})


def save_checkpoint(path, model: CodecModel, config: TrainConfig,
                    completed_stage: str) -> None:
    model.save(path)
    meta = {"train_config": config.to_dict(), "completed_stage": completed_stage}
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2)


def load_checkpoint(path):
    weights = T.load_weights(path)
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    config = TrainConfig.from_dict(meta["train_config"])
    return weights, config, meta["completed_stage"]
