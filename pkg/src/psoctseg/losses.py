"""The five training loss terms and their weighted combination.

All terms are differentiable with respect to the predicted probabilities.
Tensors are channel-last: labels one-hot ``(..., R, A, C)`` and predictions
``(..., R, A, C)``; leading dimensions are treated as batch. Losses accept
torch tensors, numpy arrays, or the LabelMap/ProbMap wrappers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .datamodel import NUM_CLASSES, LabelMap, ProbMap
from .errors import NonFiniteLoss

TERM_NAMES = ("wce", "dice", "bp", "ap", "bc")


@dataclass
class LossConfig:
    """Weights and constants of the combined loss.

    A weight of 0 disables its term (used by the ablation harness); nonzero
    weights are expected to lie in the grid-search range [1e-3, 1e3].
    ``m`` defaults to 100/epsilon, the saturation level at which the soft
    argmax reproduces hard class assignments.
    """

    lambda_wce: float = 1.0
    lambda_dice: float = 1.0
    lambda_bp: float = 1.0
    lambda_ap: float = 1.0
    lambda_bc: float = 1.0
    epsilon: float = 1e-7
    b: int = 10
    m: float | None = None
    sigma_kind: str = "norm1"
    gp_weight: float = 10.0

    def __post_init__(self):
        for name in TERM_NAMES:
            lam = getattr(self, f"lambda_{name}")
            if lam < 0:
                raise ValueError(f"lambda_{name} must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if int(self.b) != self.b or self.b < 1:
            raise ValueError("b must be an integer >= 1")
        self.b = int(self.b)
        if self.m is None:
            self.m = 100.0 / self.epsilon
        if self.m <= 0:
            raise ValueError("m must be > 0")
        if self.sigma_kind not in ("norm1", "norm2", "max"):
            raise ValueError(f"unknown sigma_kind {self.sigma_kind!r}")

    @property
    def lambdas(self) -> dict[str, float]:
        return {name: getattr(self, f"lambda_{name}") for name in TERM_NAMES}


def as_prob_tensor(yhat) -> torch.Tensor:
    if isinstance(yhat, ProbMap):
        yhat = yhat.probs
    if isinstance(yhat, np.ndarray):
        yhat = torch.from_numpy(np.ascontiguousarray(yhat))
    return yhat


def as_onehot_tensor(y, dtype: torch.dtype | None = None) -> torch.Tensor:
    """One-hot float tensor (..., R, A, C) from labels in any supported form."""
    if isinstance(y, LabelMap):
        y = y.classes
    if isinstance(y, np.ndarray):
        y = torch.from_numpy(np.ascontiguousarray(y))
    if not torch.is_floating_point(y):
        y = torch.nn.functional.one_hot(y.long() - 1, NUM_CLASSES)
        y = y.to(dtype or torch.float32)
    elif dtype is not None:
        y = y.to(dtype)
    return y


def clip_probs(yhat: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clamp probabilities to [epsilon, 1] before any logarithm."""
    return yhat.clamp(min=epsilon, max=1.0)


def class_weights(y: torch.Tensor) -> torch.Tensor:
    """Inverse-population weights per class; absent classes weigh 0."""
    counts = y.reshape(-1, NUM_CLASSES).sum(dim=0)
    total = counts.sum()
    weights = torch.zeros_like(counts)
    present = counts > 0
    weights[present] = total / counts[present]
    return weights


def wce(y, yhat, cfg: LossConfig | None = None) -> torch.Tensor:
    """Weighted cross-entropy with inverse class-population weights computed
    from the batch ground truth; absent classes are skipped."""
    cfg = cfg or LossConfig()
    yhat = as_prob_tensor(yhat)
    y = as_onehot_tensor(y, dtype=yhat.dtype)
    n_pixels = y.numel() // NUM_CLASSES
    weights = class_weights(y)
    log_p = torch.log(clip_probs(yhat, cfg.epsilon))
    per_class = (y * log_p).reshape(-1, NUM_CLASSES).sum(dim=0)
    return -(weights * per_class).sum() / n_pixels


def dice_loss(y, yhat, cfg: LossConfig | None = None) -> torch.Tensor:
    """Generalized soft Dice loss over all 6 classes.

    0 for a perfect prediction with every class present; a class absent from
    both maps contributes a full epsilon/epsilon = 1 term, so the value can
    go negative (range [-1, 1]).
    """
    cfg = cfg or LossConfig()
    yhat = as_prob_tensor(yhat)
    y = as_onehot_tensor(y, dtype=yhat.dtype)
    num = (y * yhat).reshape(-1, NUM_CLASSES).sum(dim=0) + cfg.epsilon
    den = (y * y + yhat * yhat).reshape(-1, NUM_CLASSES).sum(dim=0) + cfg.epsilon
    return 1.0 - (2.0 / NUM_CLASSES) * (num / den).sum()


def boundary_mask(y, b: int = 10) -> np.ndarray:
    """Pixels within b radial pixels of an inter-class boundary.

    Pure function of the ground-truth labels (never of the prediction), so
    no gradients flow through it. Equivalent to dilating every class plane
    and its complement radially and taking the exclusive-or union: a pixel
    is masked iff a different class occurs within b pixels along its A-line.
    """
    if isinstance(y, LabelMap):
        y = y.classes
    if isinstance(y, torch.Tensor):
        y = y.detach().cpu().numpy()
    y = np.asarray(y)
    if y.ndim >= 3 and y.shape[-1] == NUM_CLASSES:
        y = np.argmax(y, axis=-1)  # one-hot input
    hi = ndimage.maximum_filter1d(y, size=2 * b + 1, axis=-2, mode="nearest")
    lo = ndimage.minimum_filter1d(y, size=2 * b + 1, axis=-2, mode="nearest")
    return hi != lo


def bp_loss(y, yhat, beta: np.ndarray | torch.Tensor,
            cfg: LossConfig | None = None) -> torch.Tensor:
    """Boundary-precision loss: cross-entropy masked to the boundary band,
    normalized by the band size. Returns 0 (with a warning) on an empty mask."""
    cfg = cfg or LossConfig()
    yhat = as_prob_tensor(yhat)
    y = as_onehot_tensor(y, dtype=yhat.dtype)
    if isinstance(beta, np.ndarray):
        beta = torch.from_numpy(beta.astype(np.float64))
    beta = beta.to(yhat.dtype)
    total = beta.sum()
    if total.item() == 0:
        warnings.warn("empty boundary mask (single-class tile); bp_loss = 0")
        return yhat.sum() * 0.0
    log_p = torch.log(clip_probs(yhat, cfg.epsilon))
    masked = (beta.unsqueeze(-1) * y * log_p).sum()
    return -masked / total


def soft_argmax(yhat, m: float) -> torch.Tensor:
    """Differentiable argmax proxy: 1 + tanh(m * (p - max_c p)).

    Maps the most probable class to 1 and, for saturating m, every other
    class to ~0. Ties route the max-reduction subgradient to the first
    maximal channel.
    """
    yhat = as_prob_tensor(yhat)
    top = yhat.max(dim=-1, keepdim=True).values
    return 1.0 + torch.tanh(m * (yhat - top))


def boundary_cardinality(s: torch.Tensor) -> torch.Tensor:
    """Per-A-line soft count of class transitions along the radial axis.

    Half the summed absolute radial differences of the soft-argmax field; no
    radial wraparound (an A-line has a start and an end). Output shape
    (..., A).
    """
    diff = s[..., 1:, :, :] - s[..., :-1, :, :]
    return 0.5 * diff.abs().sum(dim=(-3, -1))


def bc_loss(y, yhat, cfg: LossConfig | None = None) -> torch.Tensor:
    """Boundary-cardinality loss: sigma-difference of per-A-line soft
    transition counts between prediction and ground truth.

    norm1 is normalized by the number of A-lines (mean absolute count error)
    so the weight has a grid-size-independent scale; norm2 is the RMS
    counterpart; max takes the worst A-line.
    """
    cfg = cfg or LossConfig()
    y = as_onehot_tensor(y, dtype=as_prob_tensor(yhat).dtype)
    yhat = as_prob_tensor(yhat)
    bc_true = boundary_cardinality(soft_argmax(y, cfg.m))
    bc_pred = boundary_cardinality(soft_argmax(yhat, cfg.m))
    delta = bc_pred - bc_true
    if cfg.sigma_kind == "norm1":
        return delta.abs().mean()
    if cfg.sigma_kind == "norm2":
        return torch.sqrt((delta * delta).mean())
    return delta.abs().max()


def combine(terms: dict[str, torch.Tensor], cfg: LossConfig) -> torch.Tensor:
    """Weighted sum of the loss terms; raises NonFiniteLoss naming the first
    non-finite term."""
    total = None
    for name in TERM_NAMES:
        lam = getattr(cfg, f"lambda_{name}")
        if lam == 0:
            continue
        if name not in terms:
            raise KeyError(f"loss term {name!r} required (lambda_{name}={lam}) but missing")
        value = terms[name]
        if not torch.isfinite(value).all():
            raise NonFiniteLoss(f"loss term {name!r} is non-finite: {value}")
        total = lam * value if total is None else total + lam * value
    if total is None:
        return torch.zeros(())
    return total
