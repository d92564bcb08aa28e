"""Request/response models for the HTTP service.

These mirror the core dataclasses field for field; the handlers convert
at the boundary so the core never depends on pydantic.
"""

from __future__ import annotations

from pydantic import BaseModel, Field

from ..config import TrainConfig
from ..scenes import SceneSpec


class HealthResponse(BaseModel):
    status: str
    version: str


class SceneSpecModel(BaseModel):
    object_count: tuple[int, int] = (4, 8)
    shapes: tuple[str, ...] = ("box", "cylinder", "sphere")
    colors: tuple[str, ...] | None = None  # None means the full palette
    floor_extent: float = 4.0
    floor_points: int = 800
    points_per_object: tuple[int, int] = (150, 400)
    near_radius: float = 0.9
    max_place_tries: int = 100

    def to_spec(self) -> SceneSpec:
        data = self.model_dump()
        if data["colors"] is None:
            del data["colors"]
        return SceneSpec(**data)

    @classmethod
    def from_spec(cls, spec: SceneSpec) -> "SceneSpecModel":
        return cls(object_count=spec.object_count, shapes=spec.shapes,
                   colors=spec.colors, floor_extent=spec.floor_extent,
                   floor_points=spec.floor_points,
                   points_per_object=spec.points_per_object,
                   near_radius=spec.near_radius,
                   max_place_tries=spec.max_place_tries)


class CorpusRequest(BaseModel):
    out_dir: str
    count: int = Field(ge=1)
    seed: int = 0
    spec: SceneSpecModel = SceneSpecModel()


class CorpusResponse(BaseModel):
    out_dir: str
    scenes: list[str]


class TrainConfigModel(BaseModel):
    corpus: str
    checkpoint: str
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

    def to_config(self) -> TrainConfig:
        return TrainConfig(**self.model_dump())

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "TrainConfigModel":
        return cls(**cfg.to_dict())


class TrainRequest(BaseModel):
    config: TrainConfigModel


class TrainResponse(BaseModel):
    checkpoint: str
    log: str
    epochs: int
    final_train_miou: float
    log_lines: list[str]


class EvalRequest(BaseModel):
    checkpoint: str
    corpus: str
    report: str = ""  # optional path for the JSON report


class EvalResponse(BaseModel):
    miou: float
    acc_at_25: float
    acc_at_50: float
    per_sample_iou: dict[str, float]
    report: str = ""


class GradcheckRequest(BaseModel):
    modules: list[str] | None = None
    seed: int = 0
    tolerance: float = 1e-4


class SuiteResult(BaseModel):
    name: str
    max_rel_err: float
    passed: bool


class GradcheckResponse(BaseModel):
    results: list[SuiteResult]
    all_passed: bool


class PredictRequest(BaseModel):
    checkpoint: str
    points: list[list[float]]  # N rows of x y z r g b
    query: str


class PredictResponse(BaseModel):
    mask: list[int]
    query_weights: list[float]
    n_points: int
