"""Word-to-point fusion applied at each encoder stage.

Two interchangeable flavors share the projection of word features down
to the stage width.  The gated variant cross-attends each voxel row to
the words, squashes the attended branch through a small MLP and a tanh,
and adds it back onto the voxel features, so the word signal can never
overwhelm the geometry (each element moves by less than 1).  The
additive variant simply shifts every voxel by the mean projected word
feature and exists as an ablation baseline.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


def _weight(rng: np.random.Generator, n_in: int, n_out: int) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out)),
                  requires_grad=True)


class CrossAttention:
    """Single-head scaled dot-product attention with learned projections."""

    def __init__(self, rng: np.random.Generator, dim: int):
        self.dim = dim
        self.params: dict[str, Tensor] = {
            "q": _weight(rng, dim, dim),
            "k": _weight(rng, dim, dim),
            "v": _weight(rng, dim, dim),
        }

    def forward(self, queries: Tensor, keyvals: Tensor) -> Tensor:
        if queries.shape[1] != self.dim or keyvals.shape[1] != self.dim:
            raise ShapeError(f"attention width {self.dim}, got queries "
                             f"{queries.shape} and key/values {keyvals.shape}")
        q = ad.matmul(queries, self.params["q"])
        k = ad.matmul(keyvals, self.params["k"])
        v = ad.matmul(keyvals, self.params["v"])
        logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(self.dim))
        return ad.matmul(ad.softmax(logits, axis=-1), v)


class GatedWordFusion:
    """Cross-attend voxels to words, gate with MLP + tanh, add residually.

    The gate MLP's output layer starts at zero, so a freshly built stage
    is exactly the identity on the voxel features.
    """

    def __init__(self, rng: np.random.Generator, word_dim: int, stage_dim: int):
        self.word_dim = word_dim
        self.stage_dim = stage_dim
        self.attn = CrossAttention(rng, stage_dim)
        self.params: dict[str, Tensor] = {
            "word_proj": _weight(rng, word_dim, stage_dim),
            "gate1": _weight(rng, stage_dim, stage_dim),
            "gate1_b": Tensor(np.zeros(stage_dim), requires_grad=True),
            "gate2": Tensor(np.zeros((stage_dim, stage_dim)), requires_grad=True),
            "gate2_b": Tensor(np.zeros(stage_dim), requires_grad=True),
        }
        for name, p in self.attn.params.items():
            self.params[f"attn.{name}"] = p

    def forward(self, voxel_feats: Tensor, word_feats: Tensor) -> Tensor:
        if word_feats.shape[1] != self.word_dim:
            raise ShapeError(f"word features are {word_feats.shape[1]} wide, "
                             f"expected {self.word_dim}")
        words = ad.matmul(word_feats, self.params["word_proj"])
        attended = self.attn.forward(voxel_feats, words)
        hidden = ad.relu(ad.bias_add(ad.matmul(attended, self.params["gate1"]),
                                     self.params["gate1_b"]))
        gate = ad.bias_add(ad.matmul(hidden, self.params["gate2"]),
                           self.params["gate2_b"])
        return ad.add(ad.tanh(gate), voxel_feats)


class AdditiveWordFusion:
    """Ablation baseline: shift every voxel by the mean projected word row."""

    def __init__(self, rng: np.random.Generator, word_dim: int, stage_dim: int):
        self.word_dim = word_dim
        self.stage_dim = stage_dim
        self.params: dict[str, Tensor] = {"word_proj": _weight(rng, word_dim, stage_dim)}

    def forward(self, voxel_feats: Tensor, word_feats: Tensor) -> Tensor:
        if word_feats.shape[1] != self.word_dim:
            raise ShapeError(f"word features are {word_feats.shape[1]} wide, "
                             f"expected {self.word_dim}")
        words = ad.matmul(word_feats, self.params["word_proj"])
        return ad.bias_add(voxel_feats, ad.mean(words, axis=0))
