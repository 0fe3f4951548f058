"""Tests for the HTTP service endpoints."""

import numpy as np
import pytest
from fastapi.testclient import TestClient

from hybridsde.service import create_app


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app(), raise_server_exceptions=False)


def _small_csv(n=12, seed=0):
    rng = np.random.default_rng(seed)
    lines = ["DATE,DTB3"]
    level = 2.0
    day = np.datetime64("2020-01-01")
    for i in range(n):
        level += 0.05 * rng.standard_normal()
        lines.append(f"{day + i},{level:.2f}")
    return "\n".join(lines) + "\n"


def _small_dataset(client, n=12):
    resp = client.post(
        "/ingest", json={"csv_text": _small_csv(n), "n": n, "sigma_obs": 0.1}
    )
    assert resp.status_code == 200
    return resp.json()["dataset"]


# ---------------------------------------------------------------------------
# health and ingestion


def test_health(client):
    resp = client.get("/health")
    assert resp.status_code == 200
    body = resp.json()
    assert body["status"] == "ok"
    assert body["version"]


def test_ingest_standardizes_and_counts(client):
    csv = "DATE,DTB3\n2020-01-02,1.54\n2020-01-03,.\n2020-01-06,1.52\n"
    resp = client.post("/ingest", json={"csv_text": csv, "n": 2, "sigma_obs": 0.1})
    assert resp.status_code == 200
    body = resp.json()
    assert body["rows_parsed"] == 3
    assert body["rows_missing"] == 1
    ds = body["dataset"]
    assert len(ds["times"]) == 2
    assert ds["times"][0] == 0.0 and ds["times"][-1] == 1.0
    assert abs(np.mean(ds["values"])) < 1e-12
    assert ds["noise_var"] == pytest.approx(0.01)


def test_ingest_rejects_bad_header(client):
    resp = client.post("/ingest", json={"csv_text": "a,b\n1,2\n", "n": 1})
    assert resp.status_code == 400
    assert "header" in resp.json()["detail"]


def test_ingest_rejects_out_of_order_dates(client):
    csv = "DATE,DTB3\n2020-01-06,1.5\n2020-01-03,1.4\n"
    resp = client.post("/ingest", json={"csv_text": csv, "n": 2})
    assert resp.status_code == 400
    assert "line 3" in resp.json()["detail"]


def test_ingest_insufficient_records(client):
    resp = client.post("/ingest", json={"csv_text": _small_csv(3), "n": 10})
    assert resp.status_code == 400


def test_request_validation_failure_is_422(client):
    resp = client.post("/ingest", json={"n": 5})
    assert resp.status_code == 422


# ---------------------------------------------------------------------------
# fitting


def test_fit_linear_bm(client):
    ds = _small_dataset(client)
    resp = client.post("/fit-linear", json={"dataset": ds, "driver": "bm"})
    assert resp.status_code == 200
    body = resp.json()
    for key in ("lam", "eta", "varsigma", "x0"):
        assert np.isfinite(body["params"][key])
    assert body["params"]["lam"] > 0
    assert body["params"]["varsigma"] > 0
    assert np.isfinite(body["loglik"])
    assert body["omegas"] is None


def test_fit_linear_mafbm_returns_calibration(client):
    ds = _small_dataset(client)
    resp = client.post(
        "/fit-linear",
        json={"dataset": ds, "driver": "mafbm", "hurst": 0.65, "k_factors": 3},
    )
    assert resp.status_code == 200
    body = resp.json()
    assert len(body["omegas"]) == 3
    assert len(body["gammas"]) == 3
    assert np.isfinite(body["loglik"])


# ---------------------------------------------------------------------------
# training


def _train_payload(ds, variant="hybrid", **kw):
    payload = {
        "dataset": ds,
        "variant": variant,
        "driver": "bm",
        "iterations": 2,
        "n_paths": 4,
        "dt_max": 0.05,
        "seed": 0,
        "k_factors": 3,
    }
    payload.update(kw)
    return payload


def test_train_returns_records_csv_and_checkpoint(client):
    ds = _small_dataset(client)
    resp = client.post("/train", json=_train_payload(ds))
    assert resp.status_code == 200
    body = resp.json()
    assert len(body["records"]) == 2
    assert body["records"][0]["iteration"] == 0
    assert body["loss_csv"].startswith("iter,neg_elbo,loglik_term,energy_term,wall_time_s")
    assert body["checkpoint"]["version"] == 1
    assert body["checkpoint"]["variant"] == "hybrid"
    assert np.isfinite(body["final"]["value"])
    r = body["records"][0]
    assert r["neg_elbo"] == pytest.approx(
        -(r["loglik_term"] - r["energy_term"]), abs=1e-12
    )


def test_train_rejects_unknown_variant(client):
    ds = _small_dataset(client)
    resp = client.post("/train", json=_train_payload(ds, variant="other"))
    assert resp.status_code == 400


def test_train_is_deterministic(client):
    ds = _small_dataset(client)
    a = client.post("/train", json=_train_payload(ds)).json()
    b = client.post("/train", json=_train_payload(ds)).json()
    assert a["loss_csv"] == b["loss_csv"]
    assert a["checkpoint"] == b["checkpoint"]


def test_compare_returns_three_series(client):
    ds = _small_dataset(client)
    payload = _train_payload(ds)
    del payload["variant"]
    resp = client.post("/compare", json=payload)
    assert resp.status_code == 200
    body = resp.json()
    assert set(body["series"]) == {"linear", "nonlinear", "hybrid"}
    assert {len(v) for v in body["series"].values()} == {2}
    assert set(body["loss_csvs"]) == {"linear", "nonlinear", "hybrid"}
    assert set(body["checkpoints"]) == {"linear", "nonlinear", "hybrid"}
    assert body["svg"].startswith("<svg")
    assert body["svg"].count("<polyline") == 3
    # shared stage-1 optimum: hybrid starts at the linear loss
    lin0 = body["series"]["linear"][0]["neg_elbo"]
    hyb0 = body["series"]["hybrid"][0]["neg_elbo"]
    assert lin0 == hyb0
    for final in body["final"].values():
        assert np.isfinite(final["value"])
        assert final["std_error"] >= 0


# ---------------------------------------------------------------------------
# evaluation and simulation


def _checkpoint(client, ds, variant="hybrid"):
    return client.post("/train", json=_train_payload(ds, variant=variant)).json()[
        "checkpoint"
    ]


def test_eval_checkpoint(client):
    ds = _small_dataset(client)
    ckpt = _checkpoint(client, ds)
    payload = {"checkpoint": ckpt, "dataset": ds, "n_paths": 32, "dt_max": 0.05, "seed": 1}
    a = client.post("/eval", json=payload)
    assert a.status_code == 200
    body = a.json()
    assert np.isfinite(body["value"])
    assert body["value"] == pytest.approx(
        body["loglik_term"] - body["energy_term"], abs=1e-12
    )
    b = client.post("/eval", json=payload)
    assert b.json() == body  # deterministic


def test_eval_rejects_malformed_checkpoint(client):
    ds = _small_dataset(client)
    resp = client.post(
        "/eval", json={"checkpoint": {"version": 99}, "dataset": ds, "n_paths": 4}
    )
    assert resp.status_code == 400
    assert "version" in resp.json()["detail"]


def test_simulate_prior_and_controlled(client):
    ds = _small_dataset(client)
    ckpt = _checkpoint(client, ds)
    resp = client.post(
        "/simulate",
        json={"checkpoint": ckpt, "n_paths": 3, "dt_max": 0.25, "seed": 0, "horizon": 1.0},
    )
    assert resp.status_code == 200
    body = resp.json()
    lines = body["csv"].strip().split("\n")
    assert lines[0] == "t,path_0,path_1,path_2"
    assert len(lines) == 1 + body["n_grid"]
    assert body["n_grid"] == 5  # horizon 1.0 at dt_max 0.25
    controlled = client.post(
        "/simulate",
        json={"checkpoint": ckpt, "dataset": ds, "n_paths": 3, "dt_max": 0.25, "seed": 0},
    )
    assert controlled.status_code == 200
    # observation anchors refine the grid
    assert controlled.json()["n_grid"] >= body["n_grid"]


def test_simulate_deterministic(client):
    ds = _small_dataset(client)
    ckpt = _checkpoint(client, ds)
    payload = {"checkpoint": ckpt, "n_paths": 2, "dt_max": 0.2, "seed": 7, "horizon": 1.0}
    a = client.post("/simulate", json=payload).json()
    b = client.post("/simulate", json=payload).json()
    assert a["csv"] == b["csv"]
