"""Residual U-Net segmentation model on the polar grid.

Three scales (8, 8, 16 features) plus a 16-feature latent stage of two
convolutional complexes. Convolutions pad circularly along the angular axis
and with zeros radially, so the network is exactly equivariant to angular
shifts that are multiples of 4 A-lines.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import NUM_CLASSES, PolarImage, ProbMap
from .errors import FormatError, ShapeMismatch


@dataclass
class SegNetConfig:
    input_channels: int = 3
    classes: int = NUM_CLASSES
    features: tuple[int, int, int] = (8, 8, 16)
    latent_features: int = 16
    kernel: int = 3
    lrelu_slope: float = 0.3


class PolarConv2d(nn.Module):
    """'Same' convolution: circular padding angularly, zero padding radially."""

    def __init__(self, cin: int, cout: int, kernel: int = 3):
        super().__init__()
        self.pad = kernel // 2
        self.conv = nn.Conv2d(cin, cout, kernel, padding=0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.pad:
            x = F.pad(x, (self.pad, self.pad, 0, 0), mode="circular")
            x = F.pad(x, (0, 0, self.pad, self.pad))
        return self.conv(x)


class ConvComplex(nn.Module):
    """Three 3x3 convolutions with leaky-ReLU and an internal residual skip
    (1x1 projection when the channel count changes)."""

    def __init__(self, cin: int, cout: int, slope: float, kernel: int = 3):
        super().__init__()
        self.slope = slope
        self.conv1 = PolarConv2d(cin, cout, kernel)
        self.conv2 = PolarConv2d(cout, cout, kernel)
        self.conv3 = PolarConv2d(cout, cout, kernel)
        self.proj = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.conv1(x), self.slope)
        h = F.leaky_relu(self.conv2(h), self.slope)
        h = F.leaky_relu(self.conv3(h), self.slope)
        return h + (self.proj(x) if self.proj is not None else x)


def upsample2x_circular(x: torch.Tensor) -> torch.Tensor:
    """Bilinear 2x upsampling that honors angular wrap (radial edges clamp)."""
    x = torch.cat([x[..., -1:], x, x[..., :1]], dim=-1)
    x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
    return x[..., 2:-2]


class UpBlock(nn.Module):
    """Fixed bilinear 2x upsampling followed by a 3x3 convolution."""

    def __init__(self, cin: int, cout: int, slope: float, kernel: int = 3):
        super().__init__()
        self.slope = slope
        self.conv = PolarConv2d(cin, cout, kernel)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.leaky_relu(self.conv(upsample2x_circular(x)), self.slope)


class SegNet(nn.Module):
    """Encoder complex(8) -> pool -> complex(8) -> pool -> complex(16);
    two latent complexes (16); mirrored decoder with skip concatenation;
    1x1 head with per-pixel softmax.

    forward takes image batches (B, 3, R, A) and returns probability batches
    (B, R, A, 6). Channel normalization uses the stored training statistics.
    """

    def __init__(self, config: SegNetConfig | None = None):
        super().__init__()
        self.config = config or SegNetConfig()
        c = self.config
        f1, f2, f3 = c.features
        lat = c.latent_features
        k, s = c.kernel, c.lrelu_slope
        self.enc1 = ConvComplex(c.input_channels, f1, s, k)
        self.enc2 = ConvComplex(f1, f2, s, k)
        self.enc3 = ConvComplex(f2, f3, s, k)
        self.lat1 = ConvComplex(f3, lat, s, k)
        self.lat2 = ConvComplex(lat, lat, s, k)
        self.up2 = UpBlock(lat, f2, s, k)
        self.dec2 = ConvComplex(f2 + f2, f2, s, k)
        self.up1 = UpBlock(f2, f1, s, k)
        self.dec1 = ConvComplex(f1 + f1, f1, s, k)
        self.head = nn.Conv2d(f1, c.classes, 1)
        self.pool = nn.MaxPool2d(2)
        self.register_buffer("norm_mean", torch.zeros(c.input_channels))
        self.register_buffer("norm_std", torch.ones(c.input_channels))

    def set_normalization(self, mean, std) -> None:
        self.norm_mean.copy_(torch.as_tensor(mean, dtype=self.norm_mean.dtype))
        self.norm_std.copy_(torch.as_tensor(std, dtype=self.norm_std.dtype).clamp(min=1e-6))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ShapeMismatch(f"expected (B, {self.config.input_channels}, R, A), got {tuple(x.shape)}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeMismatch(f"spatial dims {tuple(x.shape[2:])} must be divisible by 4")
        x = (x - self.norm_mean.view(1, -1, 1, 1)) / self.norm_std.view(1, -1, 1, 1)
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        h = self.lat2(self.lat1(e3))
        h = self.dec2(torch.cat([self.up2(h), e2], dim=1))
        h = self.dec1(torch.cat([self.up1(h), e1], dim=1))
        probs = torch.softmax(self.head(h), dim=1)
        return probs.permute(0, 2, 3, 1)

    @torch.no_grad()
    def predict(self, image: PolarImage | np.ndarray) -> ProbMap:
        channels = image.channels if isinstance(image, PolarImage) else np.asarray(image)
        x = torch.from_numpy(np.ascontiguousarray(channels, dtype=np.float32)).unsqueeze(0)
        was_training = self.training
        self.eval()
        probs = self.forward(x)[0].numpy()
        self.train(was_training)
        return ProbMap(probs.astype(np.float32))


def parameter_count(config: SegNetConfig | None = None) -> int:
    """Closed-form parameter total for the configured architecture."""
    c = config or SegNetConfig()
    k2 = c.kernel * c.kernel

    def complex_params(cin, cout):
        n = (cin * k2 + 1) * cout + 2 * ((cout * k2 + 1) * cout)
        if cin != cout:
            n += (cin + 1) * cout
        return n

    f1, f2, f3 = c.features
    lat = c.latent_features
    total = complex_params(c.input_channels, f1)
    total += complex_params(f1, f2)
    total += complex_params(f2, f3)
    total += complex_params(f3, lat)
    total += complex_params(lat, lat)
    total += (lat * k2 + 1) * f2          # up2 conv
    total += complex_params(f2 + f2, f2)
    total += (f2 * k2 + 1) * f1           # up1 conv
    total += complex_params(f1 + f1, f1)
    total += (f1 + 1) * c.classes         # 1x1 head
    return total


# ---------------------------------------------------------------------------
# Checkpoint format: 4-byte LE header length, JSON header, float32 LE payload
# of all parameters in declaration order; normalization stats in the header.
# ---------------------------------------------------------------------------

def _write_checkpoint(path: str | Path, header: dict, model: nn.Module) -> None:
    blob = json.dumps(header).encode("utf-8")
    chunks = [p.detach().cpu().numpy().astype("<f4").tobytes()
              for _, p in model.named_parameters()]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def _read_checkpoint(path: str | Path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<I", raw[:4])
    if len(raw) < 4 + hlen:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: invalid checkpoint header: {exc}") from exc
    payload = np.frombuffer(raw[4 + hlen:], dtype="<f4")
    return header, payload


def _load_params(model: nn.Module, payload: np.ndarray, path) -> None:
    expected = sum(p.numel() for _, p in model.named_parameters())
    if payload.size != expected:
        raise ShapeMismatch(f"{path}: payload has {payload.size} values, expected {expected}")
    offset = 0
    with torch.no_grad():
        for _, p in model.named_parameters():
            n = p.numel()
            chunk = torch.from_numpy(payload[offset:offset + n].copy()).view_as(p)
            p.copy_(chunk)
            offset += n


def save_segnet(path: str | Path, model: SegNet) -> None:
    c = model.config
    header = {
        "kind": "segnet",
        "input_channels": c.input_channels,
        "classes": c.classes,
        "features": list(c.features),
        "latent_features": c.latent_features,
        "kernel": c.kernel,
        "lrelu_slope": c.lrelu_slope,
        "norm_mean": model.norm_mean.tolist(),
        "norm_std": model.norm_std.tolist(),
    }
    _write_checkpoint(path, header, model)


def load_segnet(path: str | Path) -> SegNet:
    header, payload = _read_checkpoint(path)
    if header.get("kind") != "segnet":
        raise FormatError(f"{path}: not a segnet checkpoint")
    config = SegNetConfig(
        input_channels=header["input_channels"],
        classes=header["classes"],
        features=tuple(header["features"]),
        latent_features=header["latent_features"],
        kernel=header["kernel"],
        lrelu_slope=header["lrelu_slope"],
    )
    model = SegNet(config)
    _load_params(model, payload, path)
    model.set_normalization(header["norm_mean"], header["norm_std"])
    model.eval()
    return model
