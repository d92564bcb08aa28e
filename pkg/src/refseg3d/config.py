"""Training configuration and the flat key=value config file format.

A config file holds one ``key=value`` pair per line; ``#`` starts a
comment and blank lines are skipped.  Keys mirror the TrainConfig field
names exactly, so a file can be regenerated from a config and reparsed
without loss.  The same parser also reads scene-spec files for corpus
generation, where ranges are written ``lo,hi`` and name lists
``red,green,blue``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .errors import ContractError
from .head import SELECTIONS, HeadConfig
from .losses import P2P_FORMS, LossConfig
from .model import FUSION_MODES
from .scenes import SceneSpec


@dataclass
class TrainConfig:
    """Everything a training run needs, flat so the file format stays flat."""

    corpus: str = ""
    checkpoint: str = ""
    epochs: int = 20
    batch_size: int = 2
    lr: float = 1e-4
    text_lr: float = 2e-5
    lr_decay: float = 0.95
    seed: int = 0
    eval_split: float = 0.2
    fusion: str = "pwca"
    queries: int = 20
    decoder_layers: int = 1
    selection: str = "weighted_sum"
    lambda_seg: float = 1.0
    lambda_area: float = 1.0
    lambda_p2p: float = 0.05
    tau: float = 0.07
    p2p_form: str = "log_form"
    max_negatives: int = 4096
    voxel_size: float = 0.05
    max_len: int = 32
    dim: int = 64
    channels: tuple[int, ...] = (16, 32, 48, 64, 80)
    metrics_log: str = ""

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr <= 0 or self.text_lr <= 0:
            raise ContractError("learning rates must be positive, got "
                                f"lr={self.lr} text_lr={self.text_lr}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ContractError(f"lr decay must be in (0, 1], got {self.lr_decay}")
        if not 0.0 <= self.eval_split < 1.0:
            raise ContractError(f"eval split must be in [0, 1), got {self.eval_split}")
        if self.fusion not in FUSION_MODES:
            raise ContractError(f"fusion must be one of {FUSION_MODES}, "
                                f"got {self.fusion!r}")
        if self.selection not in SELECTIONS:
            raise ContractError(f"selection must be one of {SELECTIONS}, "
                                f"got {self.selection!r}")
        if self.p2p_form not in P2P_FORMS:
            raise ContractError(f"p2p_form must be one of {P2P_FORMS}, "
                                f"got {self.p2p_form!r}")

    def head_config(self) -> HeadConfig:
        return HeadConfig(queries=self.queries, layers=self.decoder_layers,
                          selection=self.selection)

    def loss_config(self) -> LossConfig:
        return LossConfig(lambda_seg=self.lambda_seg, lambda_area=self.lambda_area,
                          lambda_p2p=self.lambda_p2p, tau=self.tau,
                          p2p_form=self.p2p_form, max_negatives=self.max_negatives)

    def log_path(self) -> str:
        return self.metrics_log if self.metrics_log else self.checkpoint + ".log"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(int(c) for c in d["channels"])
        return cls(**d)


def read_kv(path) -> dict[str, str]:
    """Parse a flat key=value file into a string dict."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path} line {lineno}: expected key=value, "
                                    f"got {raw.strip()!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if key in out:
                raise ContractError(f"{path} line {lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def _coerce(name: str, text: str, typ) -> object:
    """Turn the string form of a field back into its annotated type.

    Annotations arrive as strings (postponed evaluation), so the type is
    matched by name.
    """
    try:
        if typ in (int, "int"):
            return int(text)
        if typ in (float, "float"):
            return float(text)
        if typ in (str, "str"):
            return text
        if typ in ("tuple[int, ...]", "tuple[int, int]"):
            return tuple(int(v) for v in text.split(","))
        if typ == "tuple[str, ...]":
            return tuple(v.strip() for v in text.split(","))
    except ValueError as exc:
        raise ContractError(f"bad value for {name}: {text!r}") from exc
    raise ContractError(f"field {name} has unsupported type {typ!r}")


def _from_kv(cls, pairs: dict[str, str]):
    known = {f.name: f.type for f in fields(cls)}
    unknown = set(pairs) - set(known)
    if unknown:
        raise ContractError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {name: _coerce(name, text, known[name])
              for name, text in pairs.items()}
    return cls(**kwargs)


def _kv_lines(obj) -> list[str]:
    lines = []
    for f in fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name}={text}")
    return lines


def load_train_config(path) -> TrainConfig:
    return _from_kv(TrainConfig, read_kv(path))


def save_train_config(path, cfg: TrainConfig) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(_kv_lines(cfg)) + "\n")


def load_scene_spec(path) -> SceneSpec:
    return _from_kv(SceneSpec, read_kv(path))


def save_scene_spec(path, spec: SceneSpec) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(_kv_lines(spec)) + "\n")
