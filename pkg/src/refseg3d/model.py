"""End-to-end assembly: voxels and words in, a per-point mask out.

The pipeline voxelizes the RGBXYZ cloud, encodes the query with the
recurrent text encoder, runs the sparse U-shaped network with a word
fusion stage hooked onto every encoder level, broadcasts the base-level
features back to the points, and decodes the final mask with the
sentence-aligned query head.

Every module boundary is checked for non-finite values so a diverging
run fails loudly with the producing module named.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, ModelError
from .fusion import AdditiveWordFusion, GatedWordFusion
from .head import HeadConfig, MaskDecoder, Prediction, align_sentence
from .sparse import SparseUNet, devoxelize, voxelize
from .text import TextEncoder, TextFeatures

FUSION_MODES = ("pwca", "baseline_add")


@dataclass
class ForwardResult:
    prediction: Prediction
    point_feats: Tensor
    text: TextFeatures


def _ensure_finite(module: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise ModelError(f"{module} produced non-finite values")


class ReferringSegmentationModel:
    """All learnable pieces behind a single forward call.

    Parameter creation order is fixed (text encoder, U-Net, fusion
    stages, decoder), so one seeded generator reproduces the same
    initialization every time.
    """

    def __init__(self, rng: np.random.Generator, vocab_size: int,
                 head: HeadConfig | None = None, fusion_mode: str = "pwca",
                 dim: int = 64, channels: tuple[int, ...] = (16, 32, 48, 64, 80),
                 voxel_size: float = 0.05, max_len: int = 32):
        if fusion_mode not in FUSION_MODES:
            raise ContractError(f"fusion mode must be one of {FUSION_MODES}, "
                                f"got {fusion_mode!r}")
        if voxel_size <= 0:
            raise ContractError(f"voxel size must be positive, got {voxel_size}")
        self.head = head if head is not None else HeadConfig()
        self.fusion_mode = fusion_mode
        self.dim = dim
        self.voxel_size = voxel_size
        self.text = TextEncoder(rng, vocab_size, dim=dim, max_len=max_len)
        self.unet = SparseUNet(rng, in_channels=6, channels=channels,
                               out_channels=dim)
        fuse_cls = GatedWordFusion if fusion_mode == "pwca" else AdditiveWordFusion
        self.fusions = [fuse_cls(rng, dim, ch) for ch in channels]
        self.decoder = MaskDecoder(rng, self.head, dim=dim)

    def params(self) -> dict[str, Tensor]:
        """Every learnable tensor, keyed module.name; text.* forms a group."""
        out: dict[str, Tensor] = {}
        for name, p in self.text.params.items():
            out[f"text.{name}"] = p
        for name, p in self.unet.params.items():
            out[f"unet.{name}"] = p
        for i, fusion in enumerate(self.fusions):
            for name, p in fusion.params.items():
                out[f"fuse{i}.{name}"] = p
        for name, p in self.decoder.params.items():
            out[f"decoder.{name}"] = p
        return out

    def zero_grads(self) -> None:
        for p in self.params().values():
            p.zero_grad()

    def forward(self, cloud: np.ndarray, tokens: list[int]) -> ForwardResult:
        voxels, vmap = voxelize(cloud, self.voxel_size)
        text = self.text.encode(tokens)
        _ensure_finite("text encoder", text.word_feats.data)

        def fuse(stage: int, feats: Tensor) -> Tensor:
            # blame the producer: a poisoned input is the backbone's fault,
            # a clean input turning bad is the fusion stage's
            _ensure_finite("backbone", feats.data)
            fused = self.fusions[stage].forward(feats, text.word_feats)
            _ensure_finite(f"fusion stage {stage + 1}", fused.data)
            return fused

        _, base = self.unet.forward(voxels, fuse=fuse)
        _ensure_finite("backbone", base.features.data)
        point_feats = devoxelize(base.features, vmap)
        state = self.decoder.forward(point_feats)
        _ensure_finite("mask decoder", state.mask_logits.data)
        prediction = align_sentence(state.query_feats, text.sentence_feat,
                                    state.mask_logits, self.head.selection)
        _ensure_finite("sentence alignment", prediction.mask_logits.data)
        return ForwardResult(prediction=prediction, point_feats=point_feats,
                             text=text)
