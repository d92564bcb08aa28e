"""Adam training loop, per-epoch metrics logging, and evaluation.

Determinism contract: a (config, seed, corpus) triple fixes the entire
run.  The root seed is split into independent streams for parameter
init, epoch shuffling, and negative subsampling, every float in the
metrics log is written with repr-faithful precision, and evaluation
never records onto a tape, so two identical runs produce byte-identical
logs and bit-identical checkpoints.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .errors import CheckpointError, ContractError, TrainingError
from .losses import LossConfig, area_loss, p2p_loss, seg_loss, total_loss
from .metrics import EvalResult, iou
from .model import ForwardResult, ReferringSegmentationModel
from .scenes import SceneSample, load_corpus, split_samples
from .text import Vocabulary

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray,
              v: np.ndarray, step: int, lr: float,
              beta1: float = BETA1, beta2: float = BETA2,
              eps: float = EPS) -> np.ndarray:
    """One bias-corrected update, in place; ``step`` counts from 1."""
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient in adam step")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


class AdamOptimizer:
    """Per-parameter moments plus a shared step counter."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = params
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0
        self.last_rates: dict[str, float] = {}

    def step(self, lr_for) -> None:
        """Update every parameter; ``lr_for(name)`` picks the group rate."""
        self.step_count += 1
        self.last_rates = {}
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(grad)):
                raise TrainingError(f"non-finite gradient for {name}")
            lr = float(lr_for(name))
            self.last_rates[name] = lr
            adam_step(p.data, grad, self.m[name], self.v[name],
                      self.step_count, lr)


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    epochs: int
    final_train: EvalResult
    log_lines: list[str]


def build_model(cfg: TrainConfig, vocab_size: int,
                rng: np.random.Generator) -> ReferringSegmentationModel:
    return ReferringSegmentationModel(
        rng, vocab_size, head=cfg.head_config(), fusion_mode=cfg.fusion,
        dim=cfg.dim, channels=cfg.channels, voxel_size=cfg.voxel_size,
        max_len=cfg.max_len)


def sample_losses(result: ForwardResult, sample: SceneSample, cfg: LossConfig,
                  rng: np.random.Generator) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Per-sample (seg, area, p2p, total) loss tensors."""
    seg = seg_loss(result.prediction.mask_logits, sample.targets)
    area = area_loss(result.prediction.mask_logits)
    p2p = p2p_loss(result.point_feats, sample.targets, cfg, rng)
    return seg, area, p2p, total_loss(seg, area, p2p, cfg)


def evaluate_model(model: ReferringSegmentationModel,
                   samples: list[SceneSample]
                   ) -> tuple[EvalResult, dict[str, np.ndarray]]:
    """Forward every sample off-tape and score the thresholded masks."""
    if not samples:
        raise ContractError("cannot evaluate on an empty sample list")
    ious = []
    masks: dict[str, np.ndarray] = {}
    for sample in samples:
        result = model.forward(sample.cloud, sample.tokens)
        masks[sample.sample_id] = result.prediction.mask
        ious.append(iou(result.prediction.mask, sample.targets))
    return EvalResult.from_ious(ious), masks


def format_metrics_line(epoch: int, lr: float, seg: float, area: float,
                        p2p: float, total: float, ev: EvalResult) -> str:
    parts = [f"epoch={epoch}"]
    for key, value in (("lr", lr), ("seg", seg), ("area", area), ("p2p", p2p),
                       ("total", total), ("miou", ev.miou),
                       ("acc25", ev.acc_at[0.25]), ("acc50", ev.acc_at[0.5])):
        parts.append(f"{key}={value:.17g}")
    return " ".join(parts)


def _state_arrays(model: ReferringSegmentationModel,
                  opt: AdamOptimizer) -> dict[str, np.ndarray]:
    arrays = {name: p.data for name, p in model.params().items()}
    for name in opt.m:
        arrays[f"adam.m.{name}"] = opt.m[name]
        arrays[f"adam.v.{name}"] = opt.v[name]
    arrays["adam.step"] = np.array(float(opt.step_count))
    return arrays


def save_model_checkpoint(path, model: ReferringSegmentationModel,
                          opt: AdamOptimizer, cfg: TrainConfig,
                          vocab: Vocabulary, epoch: int) -> None:
    # the vocabulary rides along so a checkpoint alone can serve queries
    save_checkpoint(path, _state_arrays(model, opt), epoch,
                    {"train": cfg.to_dict(), "vocab": vocab.words()})


def model_from_checkpoint(path) -> tuple[ReferringSegmentationModel,
                                         TrainConfig, int, Vocabulary]:
    """Rebuild the model a checkpoint describes and load its weights."""
    arrays, epoch, config = load_checkpoint(path)
    cfg = TrainConfig.from_dict(config["train"])
    vocab = Vocabulary(config["vocab"])
    model = build_model(cfg, len(vocab), np.random.default_rng(0))
    for name, p in model.params().items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(f"parameter {name!r} has shape "
                                  f"{arrays[name].shape}, model expects "
                                  f"{p.data.shape}")
        p.data[...] = arrays[name]
    return model, cfg, epoch, vocab


def train(cfg: TrainConfig) -> TrainResult:
    """Run the full loop: shuffle, accumulate, step, log, checkpoint."""
    if not cfg.corpus or not cfg.checkpoint:
        raise ContractError("config must set corpus and checkpoint paths")
    samples, vocab = load_corpus(cfg.corpus)
    train_samples, heldout = split_samples(samples, cfg.eval_split)
    if not train_samples:
        raise ContractError("the split left no training samples")
    logger.info("training on %d samples (%d held out)",
                len(train_samples), len(heldout))

    init_ss, shuffle_ss, loss_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    model = build_model(cfg, len(vocab), np.random.default_rng(init_ss))
    opt = AdamOptimizer(model.params())
    shuffle_rng = np.random.default_rng(shuffle_ss)
    loss_rng = np.random.default_rng(loss_ss)
    loss_cfg = cfg.loss_config()

    log_path = cfg.log_path()
    log_lines: list[str] = []
    final_train: EvalResult | None = None
    with open(log_path, "w") as log_file:
        for epoch in range(cfg.epochs):
            lr = cfg.lr * cfg.lr_decay ** epoch
            text_lr = cfg.text_lr * cfg.lr_decay ** epoch
            order = shuffle_rng.permutation(len(train_samples))
            sums = np.zeros(4)
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                model.zero_grads()
                for idx in batch:
                    sample = train_samples[idx]
                    with Tape() as tape:
                        result = model.forward(sample.cloud, sample.tokens)
                        seg, area, p2p, total = sample_losses(
                            result, sample, loss_cfg, loss_rng)
                        scaled = ad.scale(total, 1.0 / len(batch))
                    tape.backward(scaled)
                    sums += (float(seg.data), float(area.data),
                             float(p2p.data), float(total.data))
                opt.step(lambda name: text_lr if name.startswith("text.")
                         else lr)
            seg_m, area_m, p2p_m, total_m = sums / len(train_samples)
            final_train, _ = evaluate_model(model, train_samples)
            line = format_metrics_line(epoch, lr, seg_m, area_m, p2p_m,
                                       total_m, final_train)
            log_file.write(line + "\n")
            log_file.flush()
            log_lines.append(line)
            logger.info("%s", line)
            save_model_checkpoint(cfg.checkpoint, model, opt, cfg,
                                  vocab, epoch)
    return TrainResult(checkpoint_path=cfg.checkpoint, log_path=log_path,
                       epochs=cfg.epochs, final_train=final_train,
                       log_lines=log_lines)


def evaluate_checkpoint(checkpoint_path, corpus_dir
                        ) -> tuple[EvalResult, dict[str, np.ndarray]]:
    """Score a saved model against every sample in a corpus."""
    model, _, _, _ = model_from_checkpoint(checkpoint_path)
    samples, _ = load_corpus(corpus_dir)
    return evaluate_model(model, samples)
