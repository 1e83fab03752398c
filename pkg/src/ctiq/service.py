"""FastAPI service exposing every pipeline command.

The service is a job-runner: requests name input/output paths on the
server's filesystem, the handler computes synchronously and writes the
artifacts, and the response carries the summary plus artifact paths.
Validation errors map to 400/422, runtime failures (infeasible
smoothing, corrupt containers) to 409.
"""

from __future__ import annotations

from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse

from . import __version__
from . import runs
from . import schemas as S
from .errors import ConfigError, CtiqError
from .evaluation import PRESETS
from .runtime import tune_allocator


def create_app() -> FastAPI:
    tune_allocator()
    app = FastAPI(title="ctiq", version=__version__,
                  description="Certified NR-IQA via denoised median smoothing")

    @app.exception_handler(ConfigError)
    def _config_error(request: Request, exc: ConfigError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(CtiqError)
    def _runtime_error(request: Request, exc: CtiqError):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    @app.get("/api/health", response_model=S.HealthResponse)
    def health():
        return S.HealthResponse(status="ok", version=__version__)

    @app.get("/api/presets", response_model=list[S.PresetInfo])
    def presets():
        return [S.PresetInfo(name=k, sigma=v[0], epsilon=v[1]) for k, v in sorted(PRESETS.items())]

    @app.get("/api/feasibility", response_model=S.FeasibilityResponse)
    def feasibility(sigma: float = Query(...), epsilon: float = Query(...),
                    n: int = Query(2000)):
        return runs.feasibility(sigma, epsilon, n)

    @app.post("/api/gen-data", response_model=S.GenDataResponse)
    def gen_data(req: S.GenDataRequest):
        return runs.gen_data(req)

    @app.post("/api/train-metric", response_model=S.TrainMetricResponse)
    def train_metric(req: S.TrainMetricRequest):
        return runs.run_train_metric(req)

    @app.post("/api/train-denoiser", response_model=S.TrainDenoiserResponse)
    def train_denoiser(req: S.TrainDenoiserRequest):
        return runs.run_train_denoiser(req)

    @app.post("/api/certify", response_model=S.CertifyResponse)
    def certify(req: S.CertifyRequest):
        return runs.run_certify(req)

    @app.post("/api/attack", response_model=S.AttackResponse)
    def attack(req: S.AttackRequest):
        return runs.run_attack(req)

    @app.post("/api/eval-compare", response_model=S.EvalCompareResponse)
    def eval_compare(req: S.EvalCompareRequest):
        return runs.run_eval_compare(req)

    @app.post("/api/optimize", response_model=S.OptimizeResponse)
    def optimize(req: S.OptimizeRequest):
        return runs.run_optimize(req)

    @app.post("/api/sweep", response_model=S.SweepResponse)
    def sweep(req: S.SweepRequest):
        return runs.run_sweep(req)

    return app


app = create_app()
