"""Tokenizer, vocabulary, and a small recurrent text encoder.

Queries are short noun phrases, so the encoder is a single-direction
gated recurrent network over learned embeddings.  It returns one hidden
state per word plus the final state as the sentence feature; both live
in the same width as the fused point features so no extra projection is
needed downstream.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

logger = logging.getLogger(__name__)

UNK_ID = 0
PAD_ID = 1
_WORD = re.compile(r"[a-z0-9]+")


class Vocabulary:
    """Dense token-to-id map with reserved <unk>=0 and <pad>=1."""

    def __init__(self, tokens=()):
        self._ids: dict[str, int] = {"<unk>": UNK_ID, "<pad>": PAD_ID}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self._ids:
            self._ids[token] = len(self._ids)
        return self._ids[token]

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def words(self) -> list[str]:
        """Non-reserved tokens in id order."""
        return sorted((t for t, i in self._ids.items() if i >= 2),
                      key=self._ids.__getitem__)

    def save(self, path) -> None:
        # line number = id - 2; the two reserved ids are implicit
        with open(path, "w") as fh:
            for tok in self.words():
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path) as fh:
            return cls(line.strip() for line in fh if line.strip())


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Lowercase, split on anything that is not [a-z0-9], map with <unk> fallback."""
    words = _WORD.findall(text.lower())
    if not words:
        raise ContractError(f"query has no tokens: {text!r}")
    return [vocab.id_of(w) for w in words]


@dataclass
class TextFeatures:
    """Per-word hidden states (L, C) and the final state as a (1, C) row."""

    word_feats: Tensor
    sentence_feat: Tensor
    length: int


def gru_cell(x: Tensor, h: Tensor, p: dict[str, Tensor]) -> Tensor:
    """One recurrent step; x and h are (1, C) rows.

    reset r = sigmoid(x Wr + h Ur + br)
    update z = sigmoid(x Wz + h Uz + bz)
    candidate n = tanh(x Wn + (r * h) Un + bn)
    next h = (1 - z) * n + z * h
    """
    r = ad.sigmoid(ad.bias_add(ad.add(ad.matmul(x, p["Wr"]), ad.matmul(h, p["Ur"])), p["br"]))
    z = ad.sigmoid(ad.bias_add(ad.add(ad.matmul(x, p["Wz"]), ad.matmul(h, p["Uz"])), p["bz"]))
    n = ad.tanh(ad.bias_add(ad.add(ad.matmul(x, p["Wn"]),
                                   ad.matmul(ad.mul(r, h), p["Un"])), p["bn"]))
    return ad.add(ad.mul(ad.sub(1.0, z), n), ad.mul(z, h))


class TextEncoder:
    """Embedding lookup + single-layer recurrent pass over the token ids."""

    def __init__(self, rng: np.random.Generator, vocab_size: int,
                 dim: int = 64, max_len: int = 32):
        if vocab_size < 2:
            raise ContractError("vocabulary must at least hold <unk> and <pad>")
        self.dim = dim
        self.max_len = max_len
        s = 1.0 / np.sqrt(dim)
        self.params: dict[str, Tensor] = {
            "embed": Tensor(rng.normal(0.0, s, (vocab_size, dim)), requires_grad=True),
        }
        for gate in ("r", "z", "n"):
            self.params[f"W{gate}"] = Tensor(rng.normal(0.0, s, (dim, dim)), requires_grad=True)
            self.params[f"U{gate}"] = Tensor(rng.normal(0.0, s, (dim, dim)), requires_grad=True)
            self.params[f"b{gate}"] = Tensor(np.zeros(dim), requires_grad=True)

    def encode(self, token_ids: list[int]) -> TextFeatures:
        if len(token_ids) == 0:
            raise ContractError("cannot encode an empty token sequence")
        if len(token_ids) > self.max_len:
            logger.warning("query of %d tokens truncated to max_len=%d",
                           len(token_ids), self.max_len)
            token_ids = token_ids[:self.max_len]
        h = Tensor(np.zeros((1, self.dim)))
        states = []
        for tok in token_ids:
            x = ad.gather_rows(self.params["embed"], np.array([tok]))
            h = gru_cell(x, h, self.params)
            states.append(h)
        word_feats = states[0] if len(states) == 1 else ad.concat(states, axis=0)
        return TextFeatures(word_feats=word_feats, sentence_feat=h,
                            length=len(token_ids))
