"""Query-based mask decoding and sentence-guided mask selection.

A bank of K learned query vectors is refined against the fused point
features by masked cross-attention: each query only attends to the
points its own previous mask proposal marked positive.  Every layer
re-derives proposal logits by dotting the queries against a shared MLP
embedding of the points, and thresholds them at logit 0 (sigmoid 0.5,
inclusive) to form the next attention mask.

The final mask is chosen by similarity between the refined queries and
the sentence feature: either a softmax-weighted sum of all proposal
logits or the single best-matching proposal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

SELECTIONS = ("weighted_sum", "top1")


@dataclass
class HeadConfig:
    queries: int = 20
    layers: int = 1
    selection: str = "weighted_sum"

    def __post_init__(self):
        if self.queries < 1:
            raise ContractError(f"need at least 1 query, got {self.queries}")
        if self.layers < 1:
            raise ContractError(f"need at least 1 decoder layer, got {self.layers}")
        if self.selection not in SELECTIONS:
            raise ContractError(f"selection must be one of {SELECTIONS}, "
                                f"got {self.selection!r}")


@dataclass
class QueryState:
    """Queries (K, C), proposal logits (K, N), and the derived binary mask."""

    query_feats: Tensor
    mask_logits: Tensor
    attn_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.attn_mask = (self.mask_logits.data >= 0.0).astype(np.float64)


@dataclass
class Prediction:
    """Selection weights (K, 1), final logits (1, N), and the binary mask (N,)."""

    weights: Tensor
    mask_logits: Tensor
    mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mask = (self.mask_logits.data.reshape(-1) >= 0.0).astype(np.int64)


def align_sentence(query_feats: Tensor, sentence_feat: Tensor,
                   mask_logits: Tensor, selection: str = "weighted_sum") -> Prediction:
    """Score queries against the sentence and produce the final mask.

    weighted_sum blends all proposals by the softmax scores; top1 keeps
    only the highest-scoring proposal (ties break to the lowest index).
    """
    if selection not in SELECTIONS:
        raise ContractError(f"selection must be one of {SELECTIONS}, got {selection!r}")
    if query_feats.shape[1] != sentence_feat.shape[1]:
        raise ShapeError(f"queries {query_feats.shape} vs sentence "
                         f"{sentence_feat.shape}")
    scores = ad.matmul(query_feats, ad.transpose(sentence_feat))
    weights = ad.softmax(scores, axis=0)
    if selection == "weighted_sum":
        final = ad.matmul(ad.transpose(weights), mask_logits)
    else:
        best = int(np.argmax(weights.data))
        final = ad.reshape(ad.take(mask_logits, best), (1, mask_logits.shape[1]))
    return Prediction(weights=weights, mask_logits=final)


class MaskDecoder:
    """K learned queries refined by masked cross-attention over the points."""

    def __init__(self, rng: np.random.Generator, config: HeadConfig, dim: int = 64):
        self.config = config
        self.dim = dim
        s = 1.0 / np.sqrt(dim)

        def w(shape):
            return Tensor(rng.normal(0.0, s, shape), requires_grad=True)

        self.params: dict[str, Tensor] = {
            "queries": w((config.queries, dim)),
            "point_mlp.w1": w((dim, dim)),
            "point_mlp.b1": Tensor(np.zeros(dim), requires_grad=True),
            "point_mlp.w2": w((dim, dim)),
            "point_mlp.b2": Tensor(np.zeros(dim), requires_grad=True),
        }
        for j in range(config.layers):
            for name in ("attn.q", "attn.k", "attn.v", "ffn.w1", "ffn.w2"):
                self.params[f"layer{j}.{name}"] = w((dim, dim))
            for name in ("ffn.b1", "ffn.b2"):
                self.params[f"layer{j}.{name}"] = Tensor(np.zeros(dim),
                                                         requires_grad=True)

    def _point_embedding(self, point_feats: Tensor) -> Tensor:
        hidden = ad.relu(ad.bias_add(ad.matmul(point_feats, self.params["point_mlp.w1"]),
                                     self.params["point_mlp.b1"]))
        return ad.bias_add(ad.matmul(hidden, self.params["point_mlp.w2"]),
                           self.params["point_mlp.b2"])

    def mask_predict(self, query_feats: Tensor, point_feats: Tensor) -> QueryState:
        """Proposal logits = queries x shared point embedding, thresholded at 0."""
        if query_feats.shape[1] != point_feats.shape[1]:
            raise ShapeError(f"queries {query_feats.shape} vs points "
                             f"{point_feats.shape}")
        logits = ad.matmul(query_feats, ad.transpose(self._point_embedding(point_feats)))
        return QueryState(query_feats=query_feats, mask_logits=logits)

    def init_state(self, point_feats: Tensor) -> QueryState:
        return self.mask_predict(self.params["queries"], point_feats)

    def decode_layer(self, j: int, state: QueryState, point_feats: Tensor) -> QueryState:
        """One masked cross-attention + feed-forward refinement step."""
        p = self.params
        q = ad.matmul(state.query_feats, p[f"layer{j}.attn.q"])
        k = ad.matmul(point_feats, p[f"layer{j}.attn.k"])
        v = ad.matmul(point_feats, p[f"layer{j}.attn.v"])
        logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(self.dim))
        visible = state.attn_mask
        dead = visible.sum(axis=1) == 0
        if dead.any():
            # a query that proposes nothing gets full visibility instead
            # of an undefined all-hidden softmax
            visible = visible.copy()
            visible[dead] = 1.0
        attended = ad.matmul(ad.softmax(logits, axis=-1, mask=visible), v)
        queries = ad.add(state.query_feats, attended)
        hidden = ad.relu(ad.bias_add(ad.matmul(queries, p[f"layer{j}.ffn.w1"]),
                                     p[f"layer{j}.ffn.b1"]))
        queries = ad.add(queries, ad.bias_add(ad.matmul(hidden, p[f"layer{j}.ffn.w2"]),
                                              p[f"layer{j}.ffn.b2"]))
        return self.mask_predict(queries, point_feats)

    def forward(self, point_feats: Tensor) -> QueryState:
        state = self.init_state(point_feats)
        for j in range(self.config.layers):
            state = self.decode_layer(j, state, point_feats)
        return state

    def predict(self, point_feats: Tensor, sentence_feat: Tensor) -> Prediction:
        state = self.forward(point_feats)
        return align_sentence(state.query_feats, sentence_feat,
                              state.mask_logits, self.config.selection)
