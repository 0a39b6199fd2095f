"""Training objectives: gaze-balanced CE, Dice, plain CE, weighted total.

Every loss comes in two layers: a typed public function matching the domain
types, and an array-level ``*_grad`` twin returning (loss, dloss/dpred) for
the training loop. Predictions are assumed clamped to [eps, 1-eps]; the
weighted product w*p is clamped again before the logs so everything stays
finite for any valid weight mask.
"""

from dataclasses import dataclass

import numpy as np

from .network import PROB_EPS

DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossWeights:
    """Mixing coefficients for the total objective."""

    lambda_gaa: float = 1.0
    lambda_gb: float = 1.0
    lambda_dice: float = 1.0
    lambda_ce: float = 1.0

    def __post_init__(self):
        for name in ("lambda_gaa", "lambda_gb", "lambda_dice", "lambda_ce"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def all_zero(self):
        return (self.lambda_gaa == self.lambda_gb == self.lambda_dice
                == self.lambda_ce == 0.0)


def _check_same_shape(*arrays):
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def gbl_grad(pred, target, weights):
    """Gaze balance loss and its gradient w.r.t. pred.

    L = -mean[ y*log(w*p) + (1-y)*log(1 - w*p) ], w*p clamped to [eps, 1-eps].
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    _check_same_shape(pred, target, weights)
    if weights.min() <= 0.0 or weights.max() > 1.0:
        raise ValueError("bad weight mask: values must lie in (0, 1]")
    u_raw = weights * pred
    u = np.clip(u_raw, PROB_EPS, 1.0 - PROB_EPS)
    inside = (u_raw > PROB_EPS) & (u_raw < 1.0 - PROB_EPS)
    n = pred.size
    loss = -(target * np.log(u) + (1.0 - target) * np.log1p(-u)).sum() / n
    dpred = -(target / u - (1.0 - target) / (1.0 - u)) * weights * inside / n
    return loss, dpred


def bce_grad(pred, target):
    """Pixel-mean binary cross-entropy and gradient w.r.t. pred."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same_shape(pred, target)
    p = np.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    inside = (pred > PROB_EPS) & (pred < 1.0 - PROB_EPS)
    n = pred.size
    loss = -(target * np.log(p) + (1.0 - target) * np.log1p(-p)).sum() / n
    dpred = -(target / p - (1.0 - target) / (1.0 - p)) * inside / n
    return loss, dpred


def dice_grad(pred, target):
    """Smoothed soft-Dice loss 1 - (2*sum(p*y)+s)/(sum(p)+sum(y)+s)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same_shape(pred, target)
    num = 2.0 * (pred * target).sum() + DICE_SMOOTH
    den = pred.sum() + target.sum() + DICE_SMOOTH
    loss = 1.0 - num / den
    dpred = -(2.0 * target * den - num) / (den * den)
    return loss, dpred


def gaze_balance_loss(pred, pseudo, weight_mask):
    loss, _ = gbl_grad(pred.probs, pseudo.pixels, weight_mask.values)
    return loss


def cross_entropy_loss(pred, target):
    loss, _ = bce_grad(pred.probs, target.pixels)
    return loss


def dice_loss(pred, target):
    loss, _ = dice_grad(pred.probs, target.pixels)
    return loss


def total_loss(l_gaa, l_gb, l_dice, l_ce, weights):
    """Weighted sum of the four components (the training objective)."""
    parts = np.array([l_gaa, l_gb, l_dice, l_ce], dtype=np.float64)
    if not np.isfinite(parts).all():
        raise RuntimeError(f"non-finite loss: components={parts.tolist()}")
    return (weights.lambda_gaa * l_gaa + weights.lambda_gb * l_gb
            + weights.lambda_dice * l_dice + weights.lambda_ce * l_ce)
