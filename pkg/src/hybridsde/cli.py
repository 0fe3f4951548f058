"""Command-line client for the training service.

Every subcommand talks to the HTTP service: by default an in-process
instance (no server management needed), or a remote one via ``--server``.
Artifacts returned by the service are written to ``--out`` together with a
``run.json`` manifest of the fully resolved configuration, sufficient to
reproduce the invocation byte-for-byte.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import os
import sys

import httpx

USAGE_ERROR = 1
RUNTIME_ERROR = 2

_DATASET_KEYS = {"times", "values", "noise_var", "horizon", "norm_mean", "norm_sd"}


class CliError(RuntimeError):
    pass


class ServiceClient:
    """Posts JSON requests either in-process (ASGI) or to a remote server."""

    def __init__(self, server: str | None = None):
        self.server = server
        self._app = None
        if server is None:
            from .service import create_app

            self._app = create_app()

    def post(self, path: str, payload: dict) -> dict:
        if self.server is not None:
            with httpx.Client(base_url=self.server, timeout=None) as client:
                response = client.post(path, json=payload)
        else:
            response = asyncio.run(self._post_asgi(path, payload))
        if response.status_code != 200:
            try:
                detail = response.json().get("detail", response.text)
            except ValueError:
                detail = response.text
            raise CliError(f"{path} failed ({response.status_code}): {detail}")
        return response.json()

    async def _post_asgi(self, path: str, payload: dict):
        transport = httpx.ASGITransport(app=self._app)
        async with httpx.AsyncClient(
            transport=transport, base_url="http://hybridsde.local", timeout=None
        ) as client:
            return await client.post(path, json=payload)


def _load_dataset(client: ServiceClient, path: str, n: int, sigma_obs: float) -> dict:
    """Accepts either a raw rate CSV (ingested via the service) or a prepared
    dataset JSON written by the ingest subcommand."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(f"cannot read data file {path}: {exc}") from exc
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid dataset JSON: {exc}") from exc
        missing = _DATASET_KEYS - set(doc)
        if missing:
            raise CliError(f"{path}: dataset JSON missing fields {sorted(missing)}")
        return doc
    result = client.post("/ingest", {"csv_text": text, "n": n, "sigma_obs": sigma_obs})
    return result["dataset"]


def _load_checkpoint(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc}") from exc


def _write_text(out_dir: str, name: str, text: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        fh.write(text)
    return name


def _write_json(out_dir: str, name: str, doc: dict) -> str:
    return _write_text(out_dir, name, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _write_manifest(out_dir: str, command: str, config: dict, outputs: list) -> None:
    _write_json(
        out_dir,
        "run.json",
        {"command": command, "config": config, "outputs": sorted(outputs)},
    )


def _add_data_flags(p):
    p.add_argument("--data", required=True, help="rate CSV or prepared dataset JSON")
    p.add_argument("--n", type=int, default=500, help="records to keep when ingesting")
    p.add_argument(
        "--sigma-obs", type=float, default=0.1, help="observation noise sd (normalized units)"
    )


def _add_train_flags(p):
    p.add_argument("--driver", choices=["bm", "mafbm"], default="bm")
    p.add_argument("--hurst", type=float, default=0.65)
    p.add_argument("--k", type=int, default=5, help="number of driver factors")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--paths", type=int, default=32, help="Monte Carlo paths per iteration")
    p.add_argument("--dt-max", type=float, default=None)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=1)
    p.add_argument("--timing", action="store_true", help="record wall times (non-reproducible)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridsde",
        description="Variational inference for 1-d SDEs: linear core plus neural residuals.",
    )
    parser.add_argument("--server", default=None, help="remote service URL (default: in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a rate CSV into a prepared dataset file")
    _add_data_flags(p)
    p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("fit-linear", help="stage-1 exact-likelihood linear fit")
    _add_data_flags(p)
    p.add_argument("--driver", choices=["bm", "mafbm"], default="bm")
    p.add_argument("--hurst", type=float, default=0.65)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("train", help="train one variant")
    _add_data_flags(p)
    p.add_argument("--variant", choices=["linear", "nonlinear", "hybrid"], required=True)
    _add_train_flags(p)
    p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("compare", help="train all three variants on shared data")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("eval", help="ELBO of a checkpoint on a dataset")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--paths", type=int, default=1000)
    p.add_argument("--dt-max", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("simulate", help="sample paths from a checkpoint to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="optional dataset for controlled paths")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--sigma-obs", type=float, default=0.1)
    p.add_argument("--paths", type=int, default=10)
    p.add_argument("--dt-max", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--out", default=".", help="output directory")

    return parser


def _cmd_ingest(client, args) -> int:
    dataset = _load_dataset(client, args.data, args.n, args.sigma_obs)
    outputs = [_write_json(args.out, "dataset.json", dataset)]
    config = {"data": args.data, "n": args.n, "sigma_obs": args.sigma_obs}
    _write_manifest(args.out, "ingest", config, outputs)
    print(f"dataset: {len(dataset['times'])} observations, horizon {dataset['horizon']}")
    print(f"normalization: mean {dataset['norm_mean']}, sd {dataset['norm_sd']}")
    return 0


def _cmd_fit_linear(client, args) -> int:
    dataset = _load_dataset(client, args.data, args.n, args.sigma_obs)
    result = client.post(
        "/fit-linear",
        {
            "dataset": dataset,
            "driver": args.driver,
            "hurst": args.hurst,
            "k_factors": args.k,
        },
    )
    params = result["params"]
    print(f"lam      = {params['lam']:.9g}")
    print(f"eta      = {params['eta']:.9g}")
    print(f"varsigma = {params['varsigma']:.9g}")
    print(f"x0       = {params['x0']:.9g}")
    print(f"loglik   = {result['loglik']:.9g}")
    config = {
        "data": args.data,
        "n": args.n,
        "sigma_obs": args.sigma_obs,
        "driver": args.driver,
        "hurst": args.hurst,
        "k": args.k,
    }
    _write_manifest(args.out, "fit-linear", config, [])
    return 0


def _train_payload(args, dataset: dict) -> dict:
    return {
        "dataset": dataset,
        "driver": args.driver,
        "iterations": args.iters,
        "learn_rate": args.lr,
        "n_paths": args.paths,
        "dt_max": args.dt_max,
        "seed": args.seed,
        "hurst": args.hurst,
        "k_factors": args.k,
        "log_every": args.log_every,
        "record_timing": args.timing,
    }


def _train_config_manifest(args) -> dict:
    return {
        "data": args.data,
        "n": args.n,
        "sigma_obs": args.sigma_obs,
        "driver": args.driver,
        "hurst": args.hurst,
        "k": args.k,
        "iters": args.iters,
        "paths": args.paths,
        "dt_max": args.dt_max,
        "lr": args.lr,
        "seed": args.seed,
        "log_every": args.log_every,
        "timing": args.timing,
    }


def _cmd_train(client, args) -> int:
    dataset = _load_dataset(client, args.data, args.n, args.sigma_obs)
    payload = _train_payload(args, dataset)
    payload["variant"] = args.variant
    result = client.post("/train", payload)
    outputs = [
        _write_text(args.out, "loss.csv", result["loss_csv"]),
        _write_json(args.out, "checkpoint.json", result["checkpoint"]),
    ]
    config = _train_config_manifest(args)
    config["variant"] = args.variant
    _write_manifest(args.out, "train", config, outputs)
    final = result["final"]
    print(
        f"final loss {-final['value']:.6g} "
        f"(loglik {final['loglik_term']:.6g}, energy {final['energy_term']:.6g}, "
        f"se {final['std_error']:.3g})"
    )
    return 0


def _cmd_compare(client, args) -> int:
    dataset = _load_dataset(client, args.data, args.n, args.sigma_obs)
    result = client.post("/compare", _train_payload(args, dataset))
    outputs = []
    for variant, csv_text in result["loss_csvs"].items():
        outputs.append(_write_text(args.out, f"loss_{variant}.csv", csv_text))
    for variant, doc in result["checkpoints"].items():
        outputs.append(_write_json(args.out, f"checkpoint_{variant}.json", doc))
    outputs.append(_write_text(args.out, "compare.svg", result["svg"]))
    _write_manifest(args.out, "compare", _train_config_manifest(args), outputs)
    for variant, final in result["final"].items():
        print(f"{variant}: final loss {-final['value']:.6g} (se {final['std_error']:.3g})")
    return 0


def _cmd_eval(client, args) -> int:
    dataset = _load_dataset(client, args.data, args.n, args.sigma_obs)
    result = client.post(
        "/eval",
        {
            "checkpoint": _load_checkpoint(args.checkpoint),
            "dataset": dataset,
            "n_paths": args.paths,
            "dt_max": args.dt_max,
            "seed": args.seed,
        },
    )
    print(
        f"elbo {result['value']:.9g} +- {result['std_error']:.3g} "
        f"(loglik {result['loglik_term']:.9g}, energy {result['energy_term']:.9g})"
    )
    config = {
        "data": args.data,
        "n": args.n,
        "sigma_obs": args.sigma_obs,
        "checkpoint": args.checkpoint,
        "paths": args.paths,
        "dt_max": args.dt_max,
        "seed": args.seed,
    }
    _write_manifest(args.out, "eval", config, [])
    return 0


def _cmd_simulate(client, args) -> int:
    payload = {
        "checkpoint": _load_checkpoint(args.checkpoint),
        "n_paths": args.paths,
        "dt_max": args.dt_max,
        "seed": args.seed,
        "horizon": args.horizon,
    }
    if args.data is not None:
        payload["dataset"] = _load_dataset(client, args.data, args.n, args.sigma_obs)
    result = client.post("/simulate", payload)
    outputs = [_write_text(args.out, "paths.csv", result["csv"])]
    config = {
        "checkpoint": args.checkpoint,
        "data": args.data,
        "n": args.n,
        "sigma_obs": args.sigma_obs,
        "paths": args.paths,
        "dt_max": args.dt_max,
        "seed": args.seed,
        "horizon": args.horizon,
    }
    _write_manifest(args.out, "simulate", config, outputs)
    print(f"wrote {result['n_paths']} paths over {result['n_grid']} grid points")
    return 0


_COMMANDS = {
    "ingest": _cmd_ingest,
    "fit-linear": _cmd_fit_linear,
    "train": _cmd_train,
    "compare": _cmd_compare,
    "eval": _cmd_eval,
    "simulate": _cmd_simulate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else USAGE_ERROR
    try:
        client = ServiceClient(server=args.server)
        return _COMMANDS[args.command](client, args)
    except (CliError, httpx.HTTPError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
