"""The three training losses and their weighted total.

Segmentation is a plain per-point binary cross-entropy on the final
mask logits, evaluated in the stable logit form softplus(x) - x*y so
huge logits never reach exp.  Area regularization is the mean predicted
probability, pushing the mask to stay small.  The point-to-point term
is a contrastive pull of every positive point's normalized feature
toward the positive average, against a sampled set of negative rows.

The contrastive ratio can be scored two ways, chosen by
``LossConfig.p2p_form``: ``log_form`` (the standard InfoNCE, default)
takes -mean(log ratio); ``as_written`` takes -mean(ratio) and is kept
for fidelity experiments.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError, TrainingError

logger = logging.getLogger(__name__)

P2P_FORMS = ("log_form", "as_written")


@dataclass
class LossConfig:
    lambda_seg: float = 1.0
    lambda_area: float = 1.0
    lambda_p2p: float = 0.05
    tau: float = 0.07
    p2p_form: str = "log_form"
    max_negatives: int = 4096

    def __post_init__(self):
        for name in ("lambda_seg", "lambda_area", "lambda_p2p"):
            w = getattr(self, name)
            if not (math.isfinite(w) and w >= 0.0):
                raise ContractError(f"{name} must be finite and >= 0, got {w}")
        if not self.tau > 0.0:
            raise ContractError(f"tau must be > 0, got {self.tau}")
        if self.p2p_form not in P2P_FORMS:
            raise ContractError(f"p2p_form must be one of {P2P_FORMS}, "
                                f"got {self.p2p_form!r}")
        if self.max_negatives < 1:
            raise ContractError(f"max_negatives must be >= 1, got {self.max_negatives}")


@dataclass
class LossReport:
    seg: float
    area: float
    p2p: float
    total: float


def _check_binary(targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if targets.size and not np.all((targets == 0.0) | (targets == 1.0)):
        raise ContractError("targets must be binary 0/1")
    return targets


def seg_loss(mask_logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy between sigmoid(logits) and the 0/1 targets."""
    targets = _check_binary(targets)
    if mask_logits.size != targets.size:
        raise ShapeError(f"{mask_logits.size} logits vs {targets.size} targets")
    x = ad.reshape(mask_logits, (1, targets.size))
    y = Tensor(targets.reshape(1, -1))
    return ad.mean(ad.sub(ad.softplus(x), ad.mul(x, y)))


def area_loss(mask_logits: Tensor) -> Tensor:
    """Mean predicted probability over all points."""
    return ad.mean(ad.sigmoid(mask_logits))


def p2p_core(pos: Tensor, neg: Tensor, tau: float, form: str) -> Tensor:
    """Contrastive score of normalized positive rows against negatives.

    ``pos`` and ``neg`` are already row-normalized.  Handles an empty
    negative set (the ratio is then exactly 1 for every positive).
    """
    pos_avg = ad.mean(pos, axis=0, keepdims=True)
    own = ad.matmul(pos, ad.transpose(pos_avg))
    against = ad.matmul(pos, ad.transpose(neg))
    logits = ad.scale(ad.concat([own, against], axis=1), 1.0 / tau)
    probs = ad.softmax(logits, axis=1)
    first_col = np.zeros((logits.shape[1], 1))
    first_col[0, 0] = 1.0
    ratio = ad.matmul(probs, Tensor(first_col))
    if form == "as_written":
        return ad.scale(ad.mean(ratio), -1.0)
    return ad.scale(ad.mean(ad.log(ratio)), -1.0)


def p2p_loss(point_feats: Tensor, targets: np.ndarray, cfg: LossConfig,
             rng: np.random.Generator) -> Tensor:
    """Pull positive rows toward their average, push sampled negatives away.

    Features are L2-normalized per row first.  If either side is empty
    the loss is skipped with a warning and contributes exactly 0.
    """
    targets = _check_binary(targets)
    if point_feats.shape[0] != targets.size:
        raise ShapeError(f"{point_feats.shape[0]} feature rows vs "
                         f"{targets.size} targets")
    pos_idx = np.flatnonzero(targets == 1.0)
    neg_idx = np.flatnonzero(targets == 0.0)
    if pos_idx.size == 0 or neg_idx.size == 0:
        logger.warning("contrastive loss skipped: %d positives, %d negatives",
                       pos_idx.size, neg_idx.size)
        return Tensor(np.zeros(()))
    if neg_idx.size > cfg.max_negatives:
        neg_idx = np.sort(rng.choice(neg_idx, size=cfg.max_negatives, replace=False))
    normalized = ad.l2_normalize_rows(point_feats)
    return p2p_core(ad.gather_rows(normalized, pos_idx),
                    ad.gather_rows(normalized, neg_idx),
                    cfg.tau, cfg.p2p_form)


def total_loss(seg: Tensor, area: Tensor, p2p: Tensor, cfg: LossConfig) -> Tensor:
    """Fixed-association weighted sum: (seg + area) + p2p."""
    for name, part in (("seg", seg), ("area", area), ("p2p", p2p)):
        if np.isnan(part.data).any():
            raise TrainingError(f"{name} loss is NaN")
    return ad.add(ad.add(ad.scale(seg, cfg.lambda_seg),
                         ad.scale(area, cfg.lambda_area)),
                  ad.scale(p2p, cfg.lambda_p2p))


def make_report(seg: Tensor, area: Tensor, p2p: Tensor, total: Tensor) -> LossReport:
    return LossReport(seg=float(seg.data), area=float(area.data),
                      p2p=float(p2p.data), total=float(total.data))
