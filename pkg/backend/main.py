# backend/main.py
"""
Main FastAPI application entrypoint.
"""

from contextlib import asynccontextmanager
import logging

import coloredlogs
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from backend.api.routes import estimate_routes, experiment_routes
from backend.db.session import init_db
from ope_pipeline import __version__, settings
from ope_pipeline.errors import EstimatorError, InputError

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    # Startup
    coloredlogs.install(level=settings.LOG_LEVEL)
    init_db()
    logger.info("[MAIN] Run registry ready.")
    yield
    logger.info("[MAIN] Lifespan shutdown.")


app = FastAPI(
    title="Robust Off-Policy Evaluation API",
    version=__version__,
    description="Robust/optimistic OPE bounds, adversarial estimation and batch policy optimisation "
                "on finite benchmark MDPs, with an experiment run registry.",
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=[
        "http://127.0.0.1:3000",
        "http://localhost:3000",
        "http://127.0.0.1:8000",
        "http://localhost:8000",
    ],
    allow_credentials=False,
    allow_methods=["*"],
    allow_headers=["*"],
)


# Library errors -> HTTP
@app.exception_handler(InputError)
async def input_error_handler(request: Request, exc: InputError):
    return JSONResponse(status_code=422, content={"detail": str(exc), "error": type(exc).__name__})


@app.exception_handler(EstimatorError)
async def estimator_error_handler(request: Request, exc: EstimatorError):
    return JSONResponse(status_code=409, content={"detail": str(exc), "error": type(exc).__name__})


# Register Routers
app.include_router(estimate_routes.router)
app.include_router(experiment_routes.router)


@app.get("/")
def root():
    return {"message": "Robust OPE API running", "version": __version__}
