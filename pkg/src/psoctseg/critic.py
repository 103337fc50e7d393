"""Label-quality critic: a Wasserstein critic with gradient penalty.

Trained to score (image, labels) pairs so that high-quality labels receive
higher scores than degraded ones; once frozen it becomes a loss term that
rewards predictions the critic considers high quality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import Divergence, FormatError, ShapeMismatch
from .segnet import PolarConv2d, _load_params, _read_checkpoint, _write_checkpoint


@dataclass
class CriticConfig:
    input_shape: tuple[int, int] = (64, 128)
    in_channels: int = 9
    conv_features: tuple[int, int, int] = (32, 64, 128)
    dense_features: tuple[int, int, int] = (1024, 256, 128)
    kernel: int = 3


@dataclass
class CriticTrainConfig:
    steps: int = 300
    lr: float = 1e-4
    gp_weight: float = 10.0
    log_every: int = 5
    seed: int = 0


@dataclass
class QualityPairBatch:
    """Matched batches of (image, high-quality labels) and (image,
    low-quality labels); images are shared between the two sides."""

    images: torch.Tensor   # (B, 3, R, A)
    high: torch.Tensor     # (B, R, A, 6) one-hot or soft
    low: torch.Tensor      # (B, R, A, 6)


def make_critique_input(images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Concatenate image channels and label channels into (B, R, A, 9)."""
    return torch.cat([images.permute(0, 2, 3, 1), labels], dim=-1)


class CriticNet(nn.Module):
    """Three conv complexes (two 3x3 convolutions + ReLU, 2x2 max-pool) with
    32/64/128 features, flatten, dense 1024/256/128 with ReLU, and a single
    tanh output in (-1, 1).

    The flatten layer fixes the spatial input size at construction; pooling
    uses ceil mode so small grids stay valid.
    """

    def __init__(self, config: CriticConfig | None = None):
        super().__init__()
        self.config = config or CriticConfig()
        c = self.config
        cin = c.in_channels
        convs = []
        for feat in c.conv_features:
            convs.append(PolarConv2d(cin, feat, c.kernel))
            convs.append(PolarConv2d(feat, feat, c.kernel))
            cin = feat
        self.convs = nn.ModuleList(convs)
        self.pool = nn.MaxPool2d(2, ceil_mode=True)
        r, a = c.input_shape
        for _ in c.conv_features:
            r, a = math.ceil(r / 2), math.ceil(a / 2)
        self.flat_features = c.conv_features[-1] * r * a
        dims = [self.flat_features, *c.dense_features]
        self.dense = nn.ModuleList(nn.Linear(i, o) for i, o in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(c.dense_features[-1], 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[-1] != self.config.in_channels:
            raise ShapeMismatch(f"expected (B, R, A, {self.config.in_channels}), got {tuple(x.shape)}")
        if tuple(x.shape[1:3]) != tuple(self.config.input_shape):
            raise ShapeMismatch(
                f"spatial size {tuple(x.shape[1:3])} differs from configured "
                f"{tuple(self.config.input_shape)}")
        h = x.permute(0, 3, 1, 2)
        for i in range(0, len(self.convs), 2):
            h = F.relu(self.convs[i](h))
            h = F.relu(self.convs[i + 1](h))
            h = self.pool(h)
        h = h.flatten(1)
        for layer in self.dense:
            h = F.relu(layer(h))
        return torch.tanh(self.out(h)).squeeze(-1)


def parameter_count(config: CriticConfig | None = None) -> int:
    """Closed-form parameter total of the critic architecture."""
    c = config or CriticConfig()
    k2 = c.kernel * c.kernel
    total = 0
    cin = c.in_channels
    r, a = c.input_shape
    for feat in c.conv_features:
        total += (cin * k2 + 1) * feat + (feat * k2 + 1) * feat
        cin = feat
        r, a = math.ceil(r / 2), math.ceil(a / 2)
    dims = [c.conv_features[-1] * r * a, *c.dense_features, 1]
    for i, o in zip(dims[:-1], dims[1:]):
        total += (i + 1) * o
    return total


def freeze(critic: CriticNet) -> CriticNet:
    critic.eval()
    for p in critic.parameters():
        p.requires_grad_(False)
    return critic


def gradient_penalty(critic_fn: Callable[[torch.Tensor], torch.Tensor],
                     real: torch.Tensor, fake: torch.Tensor,
                     eps: torch.Tensor | None = None,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean squared deviation of the input-gradient norm from 1 on points
    interpolated uniformly between paired real/fake inputs."""
    if real.shape != fake.shape:
        raise ShapeMismatch(f"real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    b = real.shape[0]
    if eps is None:
        eps = torch.rand(b, dtype=real.dtype, generator=generator)
    eps = eps.view(b, *([1] * (real.ndim - 1)))
    x = (eps * real + (1.0 - eps) * fake).detach().requires_grad_(True)
    scores = critic_fn(x)
    grads = torch.autograd.grad(scores.sum(), x, create_graph=True)[0]
    norms = grads.flatten(1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_wasserstein_loss(critic: CriticNet, batch: QualityPairBatch,
                            gp_weight: float,
                            generator: torch.Generator | None = None
                            ) -> tuple[torch.Tensor, dict]:
    high_in = make_critique_input(batch.images, batch.high)
    low_in = make_critique_input(batch.images, batch.low)
    score_high = critic(high_in).mean()
    score_low = critic(low_in).mean()
    penalty = gradient_penalty(critic, high_in, low_in, generator=generator)
    wasserstein = score_high - score_low
    loss = -wasserstein + gp_weight * penalty
    stats = {"wasserstein": float(wasserstein.detach()),
             "penalty": float(penalty.detach()),
             "score_high": float(score_high.detach()),
             "score_low": float(score_low.detach())}
    return loss, stats


def train_critic(stream: Iterable[QualityPairBatch] | Iterator[QualityPairBatch],
                 config: CriticTrainConfig,
                 critic: CriticNet | None = None) -> tuple[CriticNet, list[dict]]:
    """Train a critic to separate high- from low-quality labels.

    Maximizes E[f(high)] - E[f(low)] - gp_weight * penalty over the batch
    stream; returns the trained critic and the per-step training curve.
    Raises Divergence after 100 consecutive non-finite steps.
    """
    torch.manual_seed(config.seed)
    it = iter(stream)
    first = next(it)
    r, a = first.images.shape[2], first.images.shape[3]
    if critic is None:
        critic = CriticNet(CriticConfig(input_shape=(r, a)))
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.RMSprop(critic.parameters(), lr=config.lr, alpha=0.9)
    history: list[dict] = []
    bad_streak = 0
    batch: QualityPairBatch | None = first
    for step in range(config.steps):
        if batch is None:
            try:
                batch = next(it)
            except StopIteration:
                break
        loss, stats = critic_wasserstein_loss(critic, batch, config.gp_weight, gen)
        batch = None
        if not torch.isfinite(loss):
            bad_streak += 1
            if bad_streak >= 100:
                raise Divergence("critic loss non-finite for 100 consecutive steps")
            opt.zero_grad()
            continue
        bad_streak = 0
        opt.zero_grad()
        loss.backward()
        opt.step()
        stats["step"] = step
        stats["loss"] = float(loss.detach())
        history.append(stats)
    return critic, history


def ap_loss(images: torch.Tensor, yhat: torch.Tensor, critic: CriticNet) -> torch.Tensor:
    """Attending-physician loss: the negated critic score of (image, yhat).

    The critic must be frozen; gradients then flow into yhat only. Soft
    predictions feed the label channels directly (no hard argmax), keeping
    the term differentiable. Values lie in (-1, 1).
    """
    return -critic(make_critique_input(images, yhat)).mean()


def score_batches(critic: CriticNet, images: torch.Tensor,
                  labels: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        return critic(make_critique_input(images, labels)).cpu().numpy()


def rank_auc(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic (tie-aware)."""
    from scipy.stats import rankdata

    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    ranks = rankdata(np.concatenate([pos, neg]))
    r_pos = ranks[:len(pos)].sum()
    return float((r_pos - len(pos) * (len(pos) + 1) / 2.0) / (len(pos) * len(neg)))


def save_critic(path: str | Path, critic: CriticNet) -> None:
    c = critic.config
    header = {
        "kind": "critic",
        "input_shape": list(c.input_shape),
        "in_channels": c.in_channels,
        "conv_features": list(c.conv_features),
        "dense_features": list(c.dense_features),
        "kernel": c.kernel,
    }
    _write_checkpoint(path, header, critic)


def load_critic(path: str | Path, frozen: bool = True) -> CriticNet:
    header, payload = _read_checkpoint(path)
    if header.get("kind") != "critic":
        raise FormatError(f"{path}: not a critic checkpoint")
    config = CriticConfig(
        input_shape=tuple(header["input_shape"]),
        in_channels=header["in_channels"],
        conv_features=tuple(header["conv_features"]),
        dense_features=tuple(header["dense_features"]),
        kernel=header["kernel"],
    )
    critic = CriticNet(config)
    _load_params(critic, payload, path)
    return freeze(critic) if frozen else critic
