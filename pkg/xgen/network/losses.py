"""Training objective: occupancy + cross field + SDF + latent regularisation."""

from dataclasses import asdict, dataclass
from typing import Dict, List, Tuple

import numpy as np

from xgen.config.errors import XGenError
from xgen.config.settings import LossWeights
from xgen.network.autograd import (
    Tensor,
    abs_,
    add,
    bce_with_logits,
    concat,
    dot_rows,
    exp,
    mean,
    mul,
    relu,
)
from xgen.network.model import DecoderLevel, LatentGrid


@dataclass
class ForwardOutputs:
    """Everything one ground-truth-gated forward pass produces for the loss"""

    latent: LatentGrid
    levels: List[DecoderLevel]
    alpha: Tensor
    mu: np.ndarray
    nu: np.ndarray
    sdf_pred: Tensor
    sdf_target: np.ndarray


@dataclass
class LossBreakdown:
    total: float
    occupancy: float
    cross_field: float
    sdf: float
    kl: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def occupancy_loss(levels: List[DecoderLevel]) -> Tensor:
    """Mean BCE over the candidates of every level together"""
    if not levels:
        raise XGenError("occupancy loss needs at least one decoder level")
    if any(level.labels is None for level in levels):
        raise XGenError("occupancy loss needs ground-truth labels on every level")
    logits = concat([level.logits for level in levels], axis=0)
    labels = np.concatenate([level.labels for level in levels]).astype(np.float64)
    return bce_with_logits(logits, labels)


def cross_field_loss(alpha: Tensor, mu: np.ndarray, nu: np.ndarray) -> Tensor:
    """mean(relu(|a.mu| + |a.nu| - 1)); zero exactly when alpha is a quarter-turn of mu"""
    if not len(alpha.data):
        raise XGenError("cross-field loss over an empty point set")
    spread = add(add(abs_(dot_rows(alpha, Tensor(mu))), abs_(dot_rows(alpha, Tensor(nu)))), -1.0)
    return mean(relu(spread))


def sdf_loss(prediction: Tensor, target: np.ndarray) -> Tensor:
    if not len(prediction.data):
        raise XGenError("SDF loss over an empty query set")
    return mean(abs_(add(prediction, Tensor(-np.asarray(target, dtype=np.float64)))))


def kl_loss(latent_mean: Tensor, logvar: Tensor) -> Tensor:
    """Diagonal Gaussian KL to N(0, 1), averaged over voxels and channels"""
    terms = add(add(mul(latent_mean, latent_mean), exp(logvar)), add(mul(logvar, -1.0), -1.0))
    return mean(mul(terms, 0.5))


def loss_total(outputs: ForwardOutputs, weights: LossWeights) -> Tuple[Tensor, LossBreakdown]:
    terms = {
        "occupancy": occupancy_loss(outputs.levels),
        "cross_field": cross_field_loss(outputs.alpha, outputs.mu, outputs.nu),
        "sdf": sdf_loss(outputs.sdf_pred, outputs.sdf_target),
        "kl": kl_loss(outputs.latent.mean, outputs.latent.logvar),
    }
    total = add(
        add(mul(terms["occupancy"], weights.occupancy), mul(terms["cross_field"], weights.cross_field)),
        add(mul(terms["sdf"], weights.sdf), mul(terms["kl"], weights.kl)),
    )
    breakdown = LossBreakdown(total=total.item(), **{name: term.item() for name, term in terms.items()})
    return total, breakdown
