"""Shared model/codec configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

LAMBDA_GRID_MSE = (256.0, 512.0, 1024.0, 2048.0)
LAMBDA_GRID_MSSSIM = (8.0, 16.0, 32.0, 64.0)


@dataclass
class CodecConfig:
    """Architecture and coding knobs shared by training and the codec."""

    width: int = 32              # filters per layer (paper-scale value is 128)
    channels: int = 1            # frame channels: 1 grayscale, 3 RGB
    latent_channels: int = 0     # 0 -> same as width
    motion_kernel: int = 3
    residual_kernel: int = 5
    pyramid_levels: int = 3
    lsym: int = 64               # latent alphabet is [-lsym, lsym]
    s_min: float = 0.01
    iframe_levels: int = 64      # uniform quantizer levels for I-frames
    recurrent: bool = True       # False bypasses every ConvLSTM (BL variant)
    conditional_prior: bool = True  # False codes every frame with the factorized prior
    lambda_id: int = 2
    distortion: str = "mse"      # "mse" | "msssim"

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.distortion not in ("mse", "msssim"):
            raise ValueError(f"unknown distortion {self.distortion!r}")
        grid = self.lambda_grid
        if not 0 <= self.lambda_id < len(grid):
            raise ValueError(f"lambda_id {self.lambda_id} outside grid of {len(grid)}")
        if self.latent_channels == 0:
            self.latent_channels = self.width

    @property
    def lambda_grid(self):
        return LAMBDA_GRID_MSE if self.distortion == "mse" else LAMBDA_GRID_MSSSIM

    @property
    def lambda_value(self) -> float:
        return self.lambda_grid[self.lambda_id]

    @property
    def flow_width(self) -> int:
        return max(8, self.width // 2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        return cls(**d)
