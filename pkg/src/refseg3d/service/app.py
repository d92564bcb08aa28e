"""FastAPI application exposing the service handlers."""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..errors import RefSegError
from . import handlers, schemas


def create_app() -> FastAPI:
    app = FastAPI(title="refseg3d",
                  description="Language-referred 3D segmentation service")

    @app.exception_handler(RefSegError)
    async def domain_error(request: Request, exc: RefSegError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(FileNotFoundError)
    async def missing_file(request: Request, exc: FileNotFoundError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return handlers.health()

    @app.post("/corpus", response_model=schemas.CorpusResponse)
    def corpus(req: schemas.CorpusRequest):
        return handlers.gen_corpus(req)

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        return handlers.run_train(req)

    @app.post("/eval", response_model=schemas.EvalResponse)
    def evaluate(req: schemas.EvalRequest):
        return handlers.run_eval(req)

    @app.post("/gradcheck", response_model=schemas.GradcheckResponse)
    def gradcheck(req: schemas.GradcheckRequest):
        return handlers.run_gradcheck(req)

    @app.post("/predict", response_model=schemas.PredictResponse)
    def predict(req: schemas.PredictRequest):
        return handlers.run_predict(req)

    return app
