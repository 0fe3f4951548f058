"""Request/response schemas for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetModel(StrictModel):
    """A prepared observation set plus its normalization constants."""

    times: list[float]
    values: list[float]
    noise_var: float
    horizon: float
    norm_mean: float = 0.0
    norm_sd: float = 1.0


class IngestRequest(StrictModel):
    csv_text: str
    n: int = 500
    sigma_obs: float = 0.1


class IngestResponse(StrictModel):
    dataset: DatasetModel
    rows_parsed: int
    rows_missing: int


class LinearParamsModel(StrictModel):
    lam: float
    eta: float
    varsigma: float
    x0: float


class FitLinearRequest(StrictModel):
    dataset: DatasetModel
    driver: str = "bm"
    hurst: float = 0.65
    k_factors: int = 5


class FitLinearResponse(StrictModel):
    params: LinearParamsModel
    loglik: float
    omegas: list[float] | None = None
    gammas: list[float] | None = None


class EstimateModel(StrictModel):
    value: float
    std_error: float
    loglik_term: float
    energy_term: float


class LossRecordModel(StrictModel):
    iteration: int
    neg_elbo: float
    loglik_term: float
    energy_term: float
    wall_time_s: float


class TrainRequest(StrictModel):
    dataset: DatasetModel
    variant: str
    driver: str = "bm"
    iterations: int = 2000
    learn_rate: float = 1e-3
    n_paths: int = 32
    dt_max: float | None = None
    seed: int = 0
    hurst: float = 0.65
    k_factors: int = 5
    log_every: int = 1
    record_timing: bool = False


class TrainResponse(StrictModel):
    records: list[LossRecordModel]
    loss_csv: str
    checkpoint: dict
    final: EstimateModel


class CompareRequest(StrictModel):
    dataset: DatasetModel
    driver: str = "bm"
    iterations: int = 2000
    learn_rate: float = 1e-3
    n_paths: int = 32
    dt_max: float | None = None
    seed: int = 0
    hurst: float = 0.65
    k_factors: int = 5
    log_every: int = 1
    record_timing: bool = False


class CompareResponse(StrictModel):
    series: dict[str, list[LossRecordModel]]
    loss_csvs: dict[str, str]
    svg: str
    checkpoints: dict[str, dict]
    final: dict[str, EstimateModel]


class EvalRequest(StrictModel):
    checkpoint: dict
    dataset: DatasetModel
    n_paths: int = 1000
    dt_max: float | None = None
    seed: int = 0


class SimulateRequest(StrictModel):
    checkpoint: dict
    dataset: DatasetModel | None = None
    n_paths: int = 10
    dt_max: float | None = None
    seed: int = 0
    horizon: float | None = None


class SimulateResponse(StrictModel):
    csv: str
    n_paths: int
    n_grid: int


class HealthResponse(StrictModel):
    status: str
    version: str
