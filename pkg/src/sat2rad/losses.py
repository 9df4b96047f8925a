"""Training objectives for both stages.

The coarse stage alternates between two frequency-domain losses:

* ``fibl`` constrains the wavelet sub-bands separately: mean squared error on
  the low-frequency approximation (intensity) plus a weighted sum of MSEs on
  the three detail bands (boundaries), coupled by ``alpha``.
* ``fgl`` compares global 2D Fourier amplitude spectra. Amplitude spectra are
  invariant under circular shifts, so this loss sees global structure but is
  blind to localization; that is exactly why it is only used early.

``schedule_select`` draws which of the two applies at a given step from the
cosine weight P(t) = cos(pi*t / (2*T)). The refinement stage adds the plain
noise-prediction MSE and reuses ``fibl`` on the estimate reconstructed from
the predicted noise (``stage2_loss``).

All losses reduce by mean over batch and spatial positions, so values are
comparable across resolutions, and all are differentiable with respect to the
prediction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .errors import ValidationError
from .wavelet import DEFAULT_BASIS, dwt2

FGL = "fgl"
FIBL = "fibl"

AS_WRITTEN = "as_written"
AS_DESCRIBED = "as_described"


@dataclass(frozen=True)
class FiblConfig:
    """Weights of the intensity-boundary decomposition.

    ``alpha`` couples the detail term to the approximation term; the ``w_*``
    weights set the relative importance of the three edge orientations
    (uniform by default).
    """

    alpha: float = 1.0
    w_lh: float = 1.0 / 3.0
    w_hl: float = 1.0 / 3.0
    w_hh: float = 1.0 / 3.0
    basis: str = DEFAULT_BASIS

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")
        weights = (self.w_lh, self.w_hl, self.w_hh)
        if any(w < 0 for w in weights):
            raise ValidationError(f"directional weights must be >= 0, got {weights}")
        if self.alpha > 0 and all(w == 0 for w in weights):
            raise ValidationError("all directional weights are zero while alpha > 0")


@dataclass
class FiblResult:
    """Scalar loss plus its (low, high) breakdown; total = low + alpha*high."""

    total: Tensor
    low: Tensor
    high: Tensor
    alpha: float


def _check_same_shape(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ValidationError(
            f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}"
        )


def _mse(a: Tensor, b: Tensor) -> Tensor:
    return torch.mean((a - b) ** 2)


def fibl(pred, target, cfg: FiblConfig = FiblConfig()) -> FiblResult:
    """Frequency-decomposed intensity-boundary loss."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target)
    _check_same_shape(pred, target)
    p = dwt2(pred, cfg.basis)
    t = dwt2(target, cfg.basis)
    low = _mse(p.ll, t.ll)
    high = (
        cfg.w_lh * _mse(p.lh, t.lh)
        + cfg.w_hl * _mse(p.hl, t.hl)
        + cfg.w_hh * _mse(p.hh, t.hh)
    )
    total = low + cfg.alpha * high
    return FiblResult(total=total, low=low, high=high, alpha=cfg.alpha)


def fgl(pred, target) -> Tensor:
    """Fourier global loss: mean squared difference of 2D amplitude spectra.

    Uses the unnormalized DFT and averages over all frequency bins, so a unit
    impulse against a zero target scores exactly 1. Circularly shifting the
    prediction leaves the value unchanged.
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target)
    _check_same_shape(pred, target)
    if pred.ndim < 2:
        raise ValidationError("fgl expects (..., H, W) fields")
    amp_p = torch.abs(torch.fft.fft2(pred))
    amp_t = torch.abs(torch.fft.fft2(target))
    return torch.mean((amp_p - amp_t) ** 2)


def alpha_from_energy(
    fields, alpha_min: float = 0.1, alpha_max: float = 10.0, basis: str = DEFAULT_BASIS
) -> float:
    """Estimate the FIBL coupling from the low/high energy ratio of a sample.

    Returns the sample mean of (ll energy) / (lh + hl + hh energy), clamped to
    [alpha_min, alpha_max]. A sample without any detail energy degenerates to
    the upper clamp (with a warning).
    """
    fields = list(fields)
    if not fields:
        raise ValidationError("alpha_from_energy needs a non-empty sample")
    if not 0 <= alpha_min <= alpha_max:
        raise ValidationError(f"bad clamp range [{alpha_min}, {alpha_max}]")
    ratios = []
    for f in fields:
        pyr = dwt2(f, basis)
        low = float(torch.sum(pyr.ll**2))
        high = float(torch.sum(pyr.lh**2) + torch.sum(pyr.hl**2) + torch.sum(pyr.hh**2))
        ratios.append(math.inf if high == 0.0 else low / high)
    mean = sum(ratios) / len(ratios)
    if math.isinf(mean):
        warnings.warn(
            "sample has no high-frequency energy; alpha clamped to alpha_max",
            RuntimeWarning,
            stacklevel=2,
        )
        return alpha_max
    return min(max(mean, alpha_min), alpha_max)


@dataclass
class ScheduleState:
    """Per-training-loop state of the stochastic loss schedule.

    ``direction`` picks how the cosine weight is read. ``as_written`` selects
    FGL when the uniform draw exceeds P(t), so FGL takes over as training
    progresses. ``as_described`` flips the branch so training transitions from
    FGL into FIBL, which matches the documented intent and is the default.
    """

    step: int
    total_steps: int
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    direction: str = AS_DESCRIBED

    def __post_init__(self) -> None:
        if self.total_steps <= 0:
            raise ValidationError(f"total_steps must be positive, got {self.total_steps}")
        if not 0 <= self.step <= self.total_steps:
            raise ValidationError(
                f"step {self.step} outside [0, {self.total_steps}]"
            )
        if self.direction not in (AS_WRITTEN, AS_DESCRIBED):
            raise ValidationError(f"unknown schedule direction {self.direction!r}")


def cosine_weight(step: int, total_steps: int) -> float:
    """P(t) = cos(pi*t / (2*T)), strictly decreasing from 1 to 0 on [0, T]."""
    return math.cos(math.pi * step / (2.0 * total_steps))


def schedule_select(state: ScheduleState) -> str:
    """Draw the loss to apply at the current step (consumes one uniform)."""
    p = state.rng.random()
    weight = cosine_weight(state.step, state.total_steps)
    if state.direction == AS_WRITTEN:
        return FGL if p > weight else FIBL
    return FIBL if p > weight else FGL


@dataclass
class Stage2Result:
    """Refinement loss and its terms; total = diff + lambda_freq*wavelet."""

    total: Tensor
    diff: Tensor
    wavelet: Tensor
    lambda_freq: float


def stage2_loss(
    eps_pred,
    eps_true,
    refined,
    target,
    lambda_freq: float = 0.1,
    cfg: FiblConfig = FiblConfig(),
) -> Stage2Result:
    """Noise-prediction MSE plus frequency-consistency FIBL on the x0 estimate."""
    if lambda_freq < 0:
        raise ValidationError(f"lambda_freq must be >= 0, got {lambda_freq}")
    eps_pred = torch.as_tensor(eps_pred)
    eps_true = torch.as_tensor(eps_true)
    _check_same_shape(eps_pred, eps_true)
    diff = _mse(eps_pred, eps_true)
    wavelet = fibl(refined, target, cfg).total
    total = diff + lambda_freq * wavelet
    return Stage2Result(total=total, diff=diff, wavelet=wavelet, lambda_freq=lambda_freq)
