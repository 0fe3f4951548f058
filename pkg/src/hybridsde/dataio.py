"""Ingestion of rate-series CSV exports and synthetic data generation.

The expected input format is the provider export with header ``DATE,DTB3``,
one row per business day and ``.`` marking missing values.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError
from .lingauss import LinearSDEParams, ObservationSet, _phi


@dataclass(frozen=True)
class RawSeries:
    """Parsed CSV rows: ISO dates plus raw string values ('.' = missing)."""

    dates: list[str]
    raw_values: list[str]

    def __len__(self):
        return len(self.dates)


@dataclass(frozen=True)
class Dataset:
    """Standardized observation set on the time axis [0, 1].

    ``norm_mean``/``norm_sd`` undo the standardization of the values.
    """

    obs: ObservationSet
    horizon: float
    norm_mean: float
    norm_sd: float

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values) * self.norm_sd + self.norm_mean


class IngestError(ValueError):
    pass


def ingest_fred_csv(text: str) -> RawSeries:
    """Parse a two-column rate CSV; malformed rows are rejected with line numbers."""
    lines = text.splitlines()
    if not lines:
        raise IngestError("empty input: missing DATE,DTB3 header")
    header = lines[0].strip().lstrip("﻿")
    if header != "DATE,DTB3":
        raise IngestError(f"unexpected header {header!r}, expected 'DATE,DTB3'")
    dates: list[str] = []
    values: list[str] = []
    prev: datetime.date | None = None
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise IngestError(f"line {lineno}: expected two comma-separated fields")
        date_str, value_str = parts[0].strip(), parts[1].strip()
        try:
            date = datetime.date.fromisoformat(date_str)
        except ValueError as exc:
            raise IngestError(f"line {lineno}: unparseable date {date_str!r}") from exc
        if prev is not None and date <= prev:
            raise IngestError(f"line {lineno}: dates not strictly increasing at {date_str}")
        prev = date
        if value_str != ".":
            try:
                float(value_str)
            except ValueError as exc:
                raise IngestError(
                    f"line {lineno}: value {value_str!r} is neither numeric nor '.'"
                ) from exc
        dates.append(date_str)
        values.append(value_str)
    return RawSeries(dates=dates, raw_values=values)


def prepare_dataset(raw: RawSeries, n: int = 500, sigma_obs: float = 0.1) -> Dataset:
    """First ``n`` non-missing records, index time scaled to [0,1], values standardized."""
    values = [float(v) for v in raw.raw_values if v != "."]
    if len(values) < n:
        raise PreconditionError(
            f"need at least {n} non-missing records, found {len(values)}"
        )
    vals = np.array(values[:n], dtype=float)
    mean = float(np.mean(vals))
    sd = float(np.std(vals))
    if sd == 0.0:
        raise PreconditionError("constant series: standard deviation is zero")
    standardized = (vals - mean) / sd
    times = np.arange(n, dtype=float) / (n - 1)
    obs = ObservationSet(times=times, values=standardized, noise_var=sigma_obs**2)
    return Dataset(obs=obs, horizon=1.0, norm_mean=mean, norm_sd=sd)


def synth_ou(
    params: LinearSDEParams,
    times: np.ndarray,
    seed: int,
    sigma_obs: float,
) -> ObservationSet:
    """Sample noisy observations of an exact OU path started at x0 at time 0.

    Uses the exact Gaussian transition between consecutive times (no Euler
    bias), so it serves as an independent oracle for recovery tests.
    """
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0) or np.any(times < 0):
        raise PreconditionError("times must be strictly increasing and >= 0")
    rng = np.random.default_rng(seed)
    lam, eta, vs = params.lam, params.eta, params.varsigma
    x = params.x0
    t_prev = 0.0
    path = np.empty_like(times)
    for i, t in enumerate(times):
        dt = t - t_prev
        if dt > 0:
            decay = np.exp(-lam * dt)
            mean = x * decay + eta * float(_phi(lam, np.array(dt)))
            var = vs * vs * float(_phi(2.0 * lam, np.array(dt)))
            x = mean + np.sqrt(max(var, 0.0)) * rng.standard_normal()
        path[i] = x
        t_prev = t
    noisy = path + sigma_obs * rng.standard_normal(times.size)
    return ObservationSet(times=times, values=noisy, noise_var=sigma_obs**2)
