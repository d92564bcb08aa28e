"""Service operations as plain functions.

The CLI calls these in-process; the FastAPI app exposes the same
functions over HTTP.  Everything here speaks schema models on both
sides.
"""

from __future__ import annotations

import json

import numpy as np

from ..errors import ContractError
from ..gradcheck import run_suites
from ..scenes import generate_corpus, load_corpus
from ..text import tokenize
from ..trainer import evaluate_model, model_from_checkpoint, train
from . import schemas


def health() -> schemas.HealthResponse:
    from importlib.metadata import version
    try:
        ver = version("refseg3d")
    except Exception:
        ver = "unknown"
    return schemas.HealthResponse(status="ok", version=ver)


def gen_corpus(req: schemas.CorpusRequest) -> schemas.CorpusResponse:
    scenes = generate_corpus(req.spec.to_spec(), req.out_dir, req.count,
                             req.seed)
    return schemas.CorpusResponse(out_dir=req.out_dir, scenes=scenes)


def run_train(req: schemas.TrainRequest) -> schemas.TrainResponse:
    result = train(req.config.to_config())
    return schemas.TrainResponse(checkpoint=result.checkpoint_path,
                                 log=result.log_path, epochs=result.epochs,
                                 final_train_miou=result.final_train.miou,
                                 log_lines=result.log_lines)


def run_eval(req: schemas.EvalRequest) -> schemas.EvalResponse:
    model, _, _, _ = model_from_checkpoint(req.checkpoint)
    samples, _ = load_corpus(req.corpus)
    result, _ = evaluate_model(model, samples)
    per_sample = {s.sample_id: v
                  for s, v in zip(samples, result.per_sample_iou)}
    response = schemas.EvalResponse(miou=result.miou,
                                    acc_at_25=result.acc_at[0.25],
                                    acc_at_50=result.acc_at[0.5],
                                    per_sample_iou=per_sample,
                                    report=req.report)
    if req.report:
        with open(req.report, "w") as fh:
            json.dump({"miou": response.miou,
                       "acc_at_25": response.acc_at_25,
                       "acc_at_50": response.acc_at_50,
                       "per_sample_iou": per_sample}, fh, indent=2,
                      sort_keys=True)
            fh.write("\n")
    return response


def run_gradcheck(req: schemas.GradcheckRequest) -> schemas.GradcheckResponse:
    results = run_suites(req.modules, seed=req.seed, tolerance=req.tolerance)
    return schemas.GradcheckResponse(
        results=[schemas.SuiteResult(name=r.name, max_rel_err=r.max_rel_err,
                                     passed=r.passed) for r in results],
        all_passed=all(r.passed for r in results))


def run_predict(req: schemas.PredictRequest) -> schemas.PredictResponse:
    model, _, _, vocab = model_from_checkpoint(req.checkpoint)
    cloud = np.asarray(req.points, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 6:
        raise ContractError(f"points must be N rows of 6 floats, "
                            f"got shape {cloud.shape}")
    tokens = tokenize(req.query, vocab)
    result = model.forward(cloud, tokens)
    return schemas.PredictResponse(
        mask=[int(v) for v in result.prediction.mask],
        query_weights=[float(v) for v in
                       result.prediction.weights.data.reshape(-1)],
        n_points=cloud.shape[0])
