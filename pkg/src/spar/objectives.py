"""Scalar training objectives.

Every log clamps its argument to ``[EPS, 1 - EPS]``; every loss is a mean
over pixels and batch items. Inputs may be torch tensors (gradients flow)
or array-likes.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import torch

EPS = 1e-7


class MethodKind(str, enum.Enum):
    BASELINE = "baseline"
    ADV_MASK = "adv-mask"
    SHAPE_L2 = "shape-l2"
    SPAR = "spar"

    @property
    def needs_encoder(self) -> bool:
        return self in (MethodKind.SHAPE_L2, MethodKind.SPAR)

    @property
    def adversarial(self) -> bool:
        return self in (MethodKind.ADV_MASK, MethodKind.SPAR)


@dataclass
class LossValue:
    """A scalar loss plus its named components (as floats)."""

    total: torch.Tensor
    parts: dict[str, float] = field(default_factory=dict)

    def __float__(self) -> float:
        return float(self.total.detach())

    def item(self) -> float:
        return float(self)


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(x, EPS, 1.0 - EPS))


def _check_probabilities(x: torch.Tensor, name: str) -> None:
    with torch.no_grad():
        if not torch.all(torch.isfinite(x)) or x.min() < 0 or x.max() > 1:
            raise ValueError(f"{name} must lie in [0, 1]")


def cross_entropy(pred, gt) -> LossValue:
    """Categorical cross-entropy between soft predictions and one-hot targets, class axis 1."""
    pred, gt = _t(pred), _t(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    per_pixel = -(gt * _log(pred)).sum(dim=1)
    loss = per_pixel.mean()
    return LossValue(loss, {"ce": float(loss.detach())})


def disc_loss(d_fake, d_real) -> LossValue:
    """Binary cross-entropy with fakes labelled 0 and reals labelled 1."""
    d_fake, d_real = _t(d_fake), _t(d_real)
    _check_probabilities(d_fake, "d_fake")
    _check_probabilities(d_real, "d_real")
    loss = -_log(1.0 - d_fake).mean() - _log(d_real).mean()
    return LossValue(loss, {"disc": float(loss.detach())})


def spar_loss(d_on_pred_code) -> LossValue:
    """Non-saturating adversarial term ``-log D(F(y_hat))``."""
    d = _t(d_on_pred_code)
    _check_probabilities(d, "discriminator output")
    loss = -_log(d).mean()
    return LossValue(loss, {"reg": float(loss.detach())})


def shape_l2_loss(code_pred, code_gt) -> LossValue:
    code_pred, code_gt = _t(code_pred), _t(code_gt)
    if code_pred.shape != code_gt.shape:
        raise ValueError(f"code shape mismatch: {tuple(code_pred.shape)} vs {tuple(code_gt.shape)}")
    loss = ((code_pred - code_gt) ** 2).mean()
    return LossValue(loss, {"reg": float(loss.detach())})


def mask_adv_losses(d_fake_mask, d_real_mask) -> tuple[LossValue, LossValue]:
    """Discriminator and generator losses for the mask-level adversarial comparator."""
    return disc_loss(d_fake_mask, d_real_mask), spar_loss(d_fake_mask)


def total_seg_loss(ce: LossValue, reg: LossValue | None, lam: float) -> LossValue:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if reg is None:
        return LossValue(ce.total, {"ce": float(ce), "reg": 0.0, "total": float(ce)})
    total = ce.total + lam * reg.total
    return LossValue(total, {"ce": float(ce), "reg": float(reg), "total": float(total.detach())})
