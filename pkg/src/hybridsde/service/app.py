"""HTTP service wrapping ingestion, fitting, training, and simulation.

Endpoints execute synchronously (training runs are batch jobs at desk
scale) and return every artifact inline as text or structured JSON, so a
thin client can persist them wherever it likes.
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..dataio import Dataset, IngestError, ingest_fred_csv, prepare_dataset
from ..errors import (
    CalibrationError,
    CheckpointError,
    FitError,
    NumericError,
    PreconditionError,
    SimulationError,
)
from ..lingauss import ObservationSet, marginal_loglik, ou_moments_provider
from ..mafbm import augmented_moments_provider
from ..sdesim import DRIVER_MAFBM, SimConfig, build_model, elbo, simulate
from ..trainer import (
    TrainConfig,
    checkpoint_doc,
    loss_csv_text,
    loss_svg_text,
    model_from_checkpoint_doc,
    stage1_fit,
    train,
    compare_variants,
)
from .models import (
    CompareRequest,
    CompareResponse,
    DatasetModel,
    EstimateModel,
    EvalRequest,
    FitLinearRequest,
    FitLinearResponse,
    HealthResponse,
    IngestRequest,
    IngestResponse,
    LinearParamsModel,
    LossRecordModel,
    SimulateRequest,
    SimulateResponse,
    TrainRequest,
    TrainResponse,
)

_CLIENT_ERRORS = (PreconditionError, IngestError, CheckpointError, ValueError)
_SERVER_ERRORS = (NumericError, FitError, CalibrationError, SimulationError)


def _dataset_from_model(doc: DatasetModel) -> Dataset:
    obs = ObservationSet(
        times=np.asarray(doc.times, dtype=float),
        values=np.asarray(doc.values, dtype=float),
        noise_var=doc.noise_var,
    )
    return Dataset(
        obs=obs, horizon=doc.horizon, norm_mean=doc.norm_mean, norm_sd=doc.norm_sd
    )


def _dataset_to_model(ds: Dataset) -> DatasetModel:
    return DatasetModel(
        times=ds.obs.times.tolist(),
        values=ds.obs.values.tolist(),
        noise_var=ds.obs.noise_var,
        horizon=ds.horizon,
        norm_mean=ds.norm_mean,
        norm_sd=ds.norm_sd,
    )


def _estimate_model(est) -> EstimateModel:
    return EstimateModel(
        value=est.value,
        std_error=est.std_error,
        loglik_term=est.loglik_term,
        energy_term=est.energy_term,
    )


def _record_models(records) -> list:
    return [
        LossRecordModel(
            iteration=r.iteration,
            neg_elbo=r.neg_elbo,
            loglik_term=r.loglik_term,
            energy_term=r.energy_term,
            wall_time_s=r.wall_time_s,
        )
        for r in records
    ]


def _train_config(req, variant: str) -> TrainConfig:
    return TrainConfig(
        variant=variant,
        driver=req.driver,
        iterations=req.iterations,
        learn_rate=req.learn_rate,
        n_paths=req.n_paths,
        dt_max=req.dt_max,
        seed=req.seed,
        hurst=req.hurst,
        k_factors=req.k_factors,
        log_every=req.log_every,
    )


def create_app() -> FastAPI:
    app = FastAPI(title="hybridsde", version=__version__)

    @app.exception_handler(Exception)
    async def _on_error(request: Request, exc: Exception):
        if isinstance(exc, _CLIENT_ERRORS):
            return JSONResponse(status_code=400, content={"detail": str(exc)})
        if isinstance(exc, _SERVER_ERRORS):
            return JSONResponse(status_code=500, content={"detail": str(exc)})
        raise exc

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.post("/ingest", response_model=IngestResponse)
    def ingest(req: IngestRequest):
        raw = ingest_fred_csv(req.csv_text)
        ds = prepare_dataset(raw, n=req.n, sigma_obs=req.sigma_obs)
        missing = sum(1 for v in raw.raw_values if v == ".")
        return IngestResponse(
            dataset=_dataset_to_model(ds), rows_parsed=len(raw), rows_missing=missing
        )

    @app.post("/fit-linear", response_model=FitLinearResponse)
    def fit_linear_endpoint(req: FitLinearRequest):
        ds = _dataset_from_model(req.dataset)
        config = TrainConfig(
            variant="linear", driver=req.driver, hurst=req.hurst, k_factors=req.k_factors
        )
        params, mafbm = stage1_fit(ds, config)
        if mafbm is None:
            provider = ou_moments_provider
        else:
            provider = augmented_moments_provider(mafbm[0], mafbm[1])
        mom = provider(params, ds.obs.times)
        loglik = marginal_loglik(mom, ds.obs.values, ds.obs.noise_var)
        return FitLinearResponse(
            params=LinearParamsModel(
                lam=params.lam, eta=params.eta, varsigma=params.varsigma, x0=params.x0
            ),
            loglik=loglik,
            omegas=None if mafbm is None else mafbm[1].omegas.tolist(),
            gammas=None if mafbm is None else mafbm[0].gammas.tolist(),
        )

    @app.post("/train", response_model=TrainResponse)
    def train_endpoint(req: TrainRequest):
        ds = _dataset_from_model(req.dataset)
        config = _train_config(req, req.variant)
        params, mafbm = stage1_fit(ds, config)
        model = build_model(req.variant, req.driver, params, seed=req.seed, mafbm=mafbm)
        result = train(model, ds, config, record_timing=req.record_timing)
        return TrainResponse(
            records=_record_models(result.records),
            loss_csv=loss_csv_text(result.records),
            checkpoint=checkpoint_doc(result.model, (ds.norm_mean, ds.norm_sd)),
            final=_estimate_model(result.final_estimate),
        )

    @app.post("/compare", response_model=CompareResponse)
    def compare_endpoint(req: CompareRequest):
        ds = _dataset_from_model(req.dataset)
        config = _train_config(req, "hybrid")
        results = compare_variants(ds, config, record_timing=req.record_timing)
        return CompareResponse(
            series={v: _record_models(r.records) for v, r in results.items()},
            loss_csvs={v: loss_csv_text(r.records) for v, r in results.items()},
            svg=loss_svg_text({v: r.records for v, r in results.items()}),
            checkpoints={
                v: checkpoint_doc(r.model, (ds.norm_mean, ds.norm_sd))
                for v, r in results.items()
            },
            final={v: _estimate_model(r.final_estimate) for v, r in results.items()},
        )

    @app.post("/eval", response_model=EstimateModel)
    def eval_endpoint(req: EvalRequest):
        ds = _dataset_from_model(req.dataset)
        model, _ = model_from_checkpoint_doc(req.checkpoint)
        dt_max = req.dt_max if req.dt_max is not None else ds.horizon / 1000.0
        sim = SimConfig(
            dt_max=dt_max, n_paths=req.n_paths, seed=req.seed, horizon=ds.horizon
        )
        return _estimate_model(elbo(model, ds.obs, sim))

    @app.post("/simulate", response_model=SimulateResponse)
    def simulate_endpoint(req: SimulateRequest):
        model, _ = model_from_checkpoint_doc(req.checkpoint)
        obs = None
        horizon = req.horizon
        if req.dataset is not None:
            ds = _dataset_from_model(req.dataset)
            obs = ds.obs
            if horizon is None:
                horizon = ds.horizon
        if horizon is None:
            horizon = 1.0
        dt_max = req.dt_max if req.dt_max is not None else horizon / 1000.0
        sim = SimConfig(dt_max=dt_max, n_paths=req.n_paths, seed=req.seed, horizon=horizon)
        batch = simulate(model, obs, sim)
        observed = batch.states if model.driver != DRIVER_MAFBM else batch.states[:, :, 0]
        header = "t," + ",".join(f"path_{p}" for p in range(req.n_paths))
        lines = [header]
        for j, t in enumerate(batch.grid):
            row = ",".join(format(float(v), ".9g") for v in observed[:, j])
            lines.append(f"{format(float(t), '.9g')},{row}")
        return SimulateResponse(
            csv="\n".join(lines) + "\n", n_paths=req.n_paths, n_grid=batch.grid.size
        )

    return app
