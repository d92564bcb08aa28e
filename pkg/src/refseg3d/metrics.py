"""Mask evaluation metrics, label utilities, and the prediction file format.

A prediction file holds one line per sample: the sample id, the point
count, then the mask as run-length encoding.  Runs are space-separated
``<value>x<count>`` tokens in point order, e.g. ``0x17 1x5 0x3``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, LabelError, ShapeError


@dataclass
class LabelSet:
    """Per-point semantic class ids and instance ids; binary is per-sample."""

    semantic: np.ndarray
    instance: np.ndarray
    binary: np.ndarray | None = None

    def __post_init__(self):
        self.semantic = np.asarray(self.semantic, dtype=np.int64)
        self.instance = np.asarray(self.instance, dtype=np.int64)
        if self.semantic.shape != self.instance.shape:
            raise ShapeError(f"semantic {self.semantic.shape} vs instance "
                             f"{self.instance.shape}")


@dataclass
class EvalResult:
    per_sample_iou: list[float]
    miou: float
    acc_at: dict[float, float]

    @classmethod
    def from_ious(cls, ious, thresholds=(0.25, 0.5)) -> "EvalResult":
        ious = [float(v) for v in ious]
        if not ious:
            raise ContractError("cannot summarize an empty evaluation")
        return cls(per_sample_iou=ious,
                   miou=miou(ious),
                   acc_at={float(k): acc_at_k(ious, k) for k in thresholds})


def _as_mask(m, name: str) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {m.shape}")
    if m.size and not np.all((m == 0) | (m == 1)):
        raise ContractError(f"{name} must be binary 0/1")
    return m.astype(bool)


def iou(pred, gt) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    pred = _as_mask(pred, "pred")
    gt = _as_mask(gt, "gt")
    if pred.size != gt.size:
        raise ShapeError(f"pred has {pred.size} points, gt has {gt.size}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def miou(ious) -> float:
    ious = list(ious)
    if not ious:
        raise ContractError("mean IoU of zero samples is undefined")
    # summing in sorted order makes the mean independent of sample order
    return float(np.sum(np.sort(np.asarray(ious, dtype=np.float64))) / len(ious))


def acc_at_k(ious, k: float) -> float:
    """Fraction of samples with IoU strictly greater than k."""
    ious = list(ious)
    if not ious:
        raise ContractError("accuracy of zero samples is undefined")
    return sum(1 for v in ious if v > k) / len(ious)


def instance_to_binary(labels: LabelSet, target_instance_id: int) -> np.ndarray:
    mask = labels.instance == int(target_instance_id)
    if not mask.any():
        raise LabelError(f"instance id {target_instance_id} absent from scene")
    return mask.astype(np.int64)


# ---------------------------------------------------------------------------
# run-length mask encoding


def rle_encode(mask) -> str:
    mask = _as_mask(mask, "mask").astype(np.int64)
    if mask.size == 0:
        return ""
    change = np.flatnonzero(np.diff(mask)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [mask.size]]))
    return " ".join(f"{mask[s]}x{n}" for s, n in zip(starts, lengths))


def rle_decode(text: str, n: int) -> np.ndarray:
    parts = text.split()
    out = np.empty(n, dtype=np.int64)
    pos = 0
    for token in parts:
        try:
            value, count = token.split("x")
            value, count = int(value), int(count)
        except ValueError:
            raise ContractError(f"bad run token {token!r}") from None
        if value not in (0, 1) or count < 1:
            raise ContractError(f"bad run token {token!r}")
        if pos + count > n:
            raise ContractError(f"runs exceed declared length {n}")
        out[pos:pos + count] = value
        pos += count
    if pos != n:
        raise ContractError(f"runs cover {pos} of {n} points")
    return out


def write_predictions(path, records) -> None:
    """records: iterable of (sample_id, binary mask); ids must not hold spaces."""
    with open(path, "w") as fh:
        for sample_id, mask in records:
            sample_id = str(sample_id)
            if " " in sample_id:
                raise ContractError(f"sample id {sample_id!r} contains a space")
            mask = _as_mask(mask, "mask")
            if mask.size == 0:
                raise ContractError(f"sample {sample_id!r} has an empty mask")
            fh.write(f"{sample_id} {mask.size} {rle_encode(mask)}\n")


def read_predictions(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            sample_id, n, rest = line.split(" ", 2)
            out[sample_id] = rle_decode(rest, int(n))
    return out
