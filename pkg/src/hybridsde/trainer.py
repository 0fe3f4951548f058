"""Two-stage training: closed-form linear fit, then pathwise gradient descent.

Stage 1 maximizes the exact marginal likelihood over the linear parameters.
Stage 2 trains the residual networks (and, for the fully nonlinear variant,
the linear parameters too) by stochastic gradient ascent on the Monte Carlo
ELBO, with fresh per-iteration noise seeds so the estimator never reuses
paths.  A three-way comparison runs the linear, nonlinear, and hybrid
variants on shared data and emits loss curves plus a combined plot.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import DenseNet
from .dataio import Dataset
from .errors import CheckpointError, NumericError, PreconditionError, SimulationError
from .lingauss import LinearSDEParams, fit_linear, ou_moments_provider
from .mafbm import MafbmConfig, MafbmWeights, augmented_moments_provider, build_augmented, fit_omega
from .sdesim import (
    DRIVER_BM,
    DRIVER_MAFBM,
    VARIANT_HYBRID,
    VARIANT_LINEAR,
    VARIANT_NONLINEAR,
    ElboEstimate,
    SdeModel,
    SimConfig,
    build_model,
    elbo,
    elbo_with_grads,
)

CHECKPOINT_VERSION = 1
GRAD_CLIP_NORM = 10.0
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_NET_ATTRS = {
    "drift": "drift_net",
    "diffusion": "diff_net",
    "control": "control_net",
    "encoder": "encoder",
}

VARIANT_ORDER = (VARIANT_LINEAR, VARIANT_NONLINEAR, VARIANT_HYBRID)


@dataclass(frozen=True)
class TrainConfig:
    """Stage-2 settings; ``dt_max`` of None resolves to horizon/1000."""

    variant: str
    driver: str
    iterations: int = 2000
    learn_rate: float = 1e-3
    n_paths: int = 32
    dt_max: float | None = None
    seed: int = 0
    hurst: float = 0.65
    k_factors: int = 5
    log_every: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise PreconditionError("iterations must be at least 1")
        if not self.learn_rate > 0:
            raise PreconditionError("learn_rate must be positive")
        if self.n_paths < 1:
            raise PreconditionError("n_paths must be at least 1")
        if self.log_every < 1:
            raise PreconditionError("log_every must be at least 1")
        if self.variant not in (VARIANT_LINEAR, VARIANT_NONLINEAR, VARIANT_HYBRID):
            raise PreconditionError(f"unknown variant {self.variant!r}")
        if self.driver not in (DRIVER_BM, DRIVER_MAFBM):
            raise PreconditionError(f"unknown driver {self.driver!r}")


@dataclass(frozen=True)
class LossRecord:
    """One logged training iteration; neg_elbo is the plotted loss."""

    iteration: int
    neg_elbo: float
    loglik_term: float
    energy_term: float
    wall_time_s: float


@dataclass
class TrainResult:
    """Loss stream, the trained model, and the last ELBO estimate."""

    records: list
    model: SdeModel
    final_estimate: ElboEstimate


def iteration_seed(seed: int, iteration: int) -> int:
    """Deterministic per-iteration simulation seed derived from (seed, iteration)."""
    state = np.random.SeedSequence((int(seed), int(iteration))).generate_state(1, np.uint64)
    return int(state[0] >> 1)  # keep within 63 bits


def stage1_fit(dataset: Dataset, config: TrainConfig):
    """Exact-likelihood linear fit; also calibrates the fractional driver.

    Returns (params, mafbm_parts) where mafbm_parts is None for the plain
    driver and (MafbmConfig, MafbmWeights, AugmentedSystem) otherwise.
    """
    if config.driver == DRIVER_BM:
        params = fit_linear(dataset.obs, moments_provider=ou_moments_provider)
        return params, None
    mafbm_config = MafbmConfig.default(
        config.hurst, k_factors=config.k_factors, horizon=dataset.horizon
    )
    weights = fit_omega(mafbm_config)
    params = fit_linear(
        dataset.obs, moments_provider=augmented_moments_provider(mafbm_config, weights)
    )
    system = build_augmented(params, mafbm_config, weights)
    return params, (mafbm_config, weights, system)


class _Adam:
    """Adaptive moment updater over a list of equally-shaped parameter arrays."""

    def __init__(self, shapes, learn_rate):
        self.learn_rate = learn_rate
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1**self.t
        bc2 = 1.0 - ADAM_BETA2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g
            mh = self.m[i] / bc1
            vh = self.v[i] / bc2
            out.append(p - self.learn_rate * mh / (np.sqrt(vh) + ADAM_EPS))
        return out


def _clip_global_norm(grads, max_norm=GRAD_CLIP_NORM):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        return [g * scale for g in grads], total
    return grads, total


def _trainable_arrays(model: SdeModel):
    """Flat list of trainable parameter arrays, in a fixed traversal order."""
    arrays = []
    if model.uses_nets:
        for attr in _NET_ATTRS.values():
            net = getattr(model, attr)
            for w, b in zip(net.weights, net.biases):
                arrays.append(w)
                arrays.append(b)
    if model.variant == VARIANT_NONLINEAR:
        arrays.append(model.linear.to_unconstrained())
    return arrays


def _grad_arrays(model: SdeModel, grads):
    arrays = []
    if model.uses_nets:
        for name in _NET_ATTRS:
            for gw, gb in grads["nets"][name]:
                arrays.append(gw)
                arrays.append(gb)
    if model.variant == VARIANT_NONLINEAR:
        arrays.append(grads["linear"])
    # ascent on the ELBO = descent on the loss
    return [-g for g in arrays]


def _assign_arrays(model: SdeModel, arrays):
    pos = 0
    if model.uses_nets:
        for attr in _NET_ATTRS.values():
            net = getattr(model, attr)
            weights, biases = [], []
            for w, b in zip(net.weights, net.biases):
                weights.append(arrays[pos])
                biases.append(arrays[pos + 1])
                pos += 2
            setattr(model, attr, DenseNet(net.layer_dims, weights, biases))
    if model.variant == VARIANT_NONLINEAR:
        model.linear = LinearSDEParams.from_unconstrained(arrays[pos])
        model._coef_cache.clear()
        pos += 1
    assert pos == len(arrays)


def _snapshot(model: SdeModel):
    return ([getattr(model, a) for a in _NET_ATTRS.values()], model.linear)


def _restore(model: SdeModel, snap):
    nets, linear = snap
    for attr, net in zip(_NET_ATTRS.values(), nets):
        setattr(model, attr, net)
    model.linear = linear
    model._coef_cache.clear()


def train(
    model: SdeModel,
    dataset: Dataset,
    config: TrainConfig,
    checkpoint_path=None,
    record_timing: bool = False,
) -> TrainResult:
    """Stochastic gradient ascent on the Monte Carlo ELBO.

    The model is updated in place.  The linear variant has nothing to learn
    and only re-evaluates its loss; the hybrid variant trains the residual
    networks with the linear core frozen; the nonlinear variant additionally
    trains the linear parameters through their unconstrained coordinates.
    ``wall_time_s`` is recorded as 0 unless ``record_timing`` is set, keeping
    artifacts byte-reproducible.

    A non-finite loss aborts training: the parameters roll back to the last
    finite iterate, a checkpoint of that iterate is written when a path is
    given, and a numeric error is raised.
    """
    if model.variant != config.variant or model.driver != config.driver:
        raise PreconditionError("model variant/driver must match the training config")
    dt_max = config.dt_max if config.dt_max is not None else dataset.horizon / 1000.0
    trains_params = model.uses_nets
    optimizer = None
    if trains_params:
        optimizer = _Adam([a.shape for a in _trainable_arrays(model)], config.learn_rate)
    records: list[LossRecord] = []
    last_estimate = None
    start = time.perf_counter()
    snap = _snapshot(model)
    for it in range(config.iterations):
        sim = SimConfig(
            dt_max=dt_max,
            n_paths=config.n_paths,
            seed=iteration_seed(config.seed, it),
            horizon=dataset.horizon,
        )
        try:
            if trains_params:
                est, grads = elbo_with_grads(model, dataset.obs, sim)
            else:
                est = elbo(model, dataset.obs, sim)
        except (NumericError, SimulationError):
            est = None
        if est is None or not np.isfinite(est.value):
            _restore(model, snap)
            if checkpoint_path is not None:
                checkpoint_save(model, checkpoint_path, data_norm=(dataset.norm_mean, dataset.norm_sd))
            raise NumericError(
                f"non-finite loss at iteration {it}; parameters rolled back to the last finite iterate"
            )
        last_estimate = est
        snap = _snapshot(model)
        if it % config.log_every == 0:
            elapsed = time.perf_counter() - start if record_timing else 0.0
            records.append(
                LossRecord(
                    iteration=it,
                    neg_elbo=est.energy_term - est.loglik_term,
                    loglik_term=est.loglik_term,
                    energy_term=est.energy_term,
                    wall_time_s=elapsed,
                )
            )
        if trains_params:
            garr, _ = _clip_global_norm(_grad_arrays(model, grads))
            _assign_arrays(model, optimizer.step(_trainable_arrays(model), garr))
    if checkpoint_path is not None:
        checkpoint_save(model, checkpoint_path, data_norm=(dataset.norm_mean, dataset.norm_sd))
    return TrainResult(records=records, model=model, final_estimate=last_estimate)


def compare_variants(
    dataset: Dataset,
    config: TrainConfig,
    out_dir=None,
    record_timing: bool = False,
) -> dict:
    """Train all three variants on shared data after a single stage-1 fit.

    Returns {variant: TrainResult}; when ``out_dir`` is given, writes one
    loss CSV per variant, a combined log-scale SVG plot, and one checkpoint
    per variant into that directory.
    """
    params, mafbm = stage1_fit(dataset, config)
    results = {}
    for variant in VARIANT_ORDER:
        model = build_model(variant, config.driver, params, seed=config.seed, mafbm=mafbm)
        vconfig = replace(config, variant=variant)
        ckpt = None
        if out_dir is not None:
            ckpt = f"{out_dir}/checkpoint_{variant}.json"
        results[variant] = train(
            model, dataset, vconfig, checkpoint_path=ckpt, record_timing=record_timing
        )
    if out_dir is not None:
        for variant, result in results.items():
            write_loss_csv(result.records, f"{out_dir}/loss_{variant}.csv")
        series = {v: results[v].records for v in VARIANT_ORDER}
        write_loss_svg(series, f"{out_dir}/compare.svg")
    return results


# ---------------------------------------------------------------------------
# artifacts


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def loss_csv_text(records) -> str:
    lines = ["iter,neg_elbo,loglik_term,energy_term,wall_time_s"]
    for r in records:
        lines.append(
            f"{r.iteration},{_fmt(r.neg_elbo)},{_fmt(r.loglik_term)},"
            f"{_fmt(r.energy_term)},{_fmt(r.wall_time_s)}"
        )
    return "\n".join(lines) + "\n"


def write_loss_csv(records, path) -> None:
    with open(path, "w") as fh:
        fh.write(loss_csv_text(records))


def read_loss_csv(path) -> list:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    if not lines or lines[0] != "iter,neg_elbo,loglik_term,energy_term,wall_time_s":
        raise PreconditionError(f"{path}: not a loss CSV")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        out.append(
            LossRecord(
                iteration=int(parts[0]),
                neg_elbo=float(parts[1]),
                loglik_term=float(parts[2]),
                energy_term=float(parts[3]),
                wall_time_s=float(parts[4]),
            )
        )
    return out


_SVG_COLORS = {
    VARIANT_LINEAR: "#e08214",
    VARIANT_NONLINEAR: "#2166ac",
    VARIANT_HYBRID: "#1b7837",
}

_SVG_W, _SVG_H = 640, 440
_SVG_ML, _SVG_MR, _SVG_MT, _SVG_MB = 70, 20, 20, 50


def loss_svg_text(series: dict) -> str:
    """Combined loss plot: one polyline per variant, log-scale loss axis.

    Losses can be negative (the negative ELBO of a well-fit model), so the
    log axis shows loss - min + 1 when needed; the axis label states the
    shift.  Output is fully deterministic.
    """
    all_vals = [r.neg_elbo for recs in series.values() for r in recs]
    all_iters = [r.iteration for recs in series.values() for r in recs]
    if not all_vals:
        raise PreconditionError("nothing to plot")
    lo = min(all_vals)
    shift = 0.0 if lo > 0 else 1.0 - lo
    logs = [np.log10(v + shift) for v in all_vals]
    y_lo, y_hi = min(logs), max(logs)
    if y_hi - y_lo < 1e-9:
        y_hi = y_lo + 1.0
    x_lo, x_hi = min(all_iters), max(all_iters)
    if x_hi == x_lo:
        x_hi = x_lo + 1

    inner_w = _SVG_W - _SVG_ML - _SVG_MR
    inner_h = _SVG_H - _SVG_MT - _SVG_MB

    def sx(i):
        return _SVG_ML + inner_w * (i - x_lo) / (x_hi - x_lo)

    def sy(v):
        return _SVG_MT + inner_h * (1.0 - (np.log10(v + shift) - y_lo) / (y_hi - y_lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<line x1="{_SVG_ML}" y1="{_SVG_MT}" x2="{_SVG_ML}" y2="{_SVG_H - _SVG_MB}" '
        'stroke="black" stroke-width="1"/>',
        f'<line x1="{_SVG_ML}" y1="{_SVG_H - _SVG_MB}" x2="{_SVG_W - _SVG_MR}" '
        f'y2="{_SVG_H - _SVG_MB}" stroke="black" stroke-width="1"/>',
    ]
    n_ticks = 5
    for k in range(n_ticks):
        frac = k / (n_ticks - 1)
        yv = y_lo + (y_hi - y_lo) * (1.0 - frac)
        ypix = _SVG_MT + inner_h * frac
        label = format(10.0**yv - shift, ".3g") if shift else format(10.0**yv, ".3g")
        parts.append(
            f'<text x="{_SVG_ML - 8:.1f}" y="{ypix + 4:.1f}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif">{label}</text>'
        )
        xv = x_lo + (x_hi - x_lo) * frac
        xpix = _SVG_ML + inner_w * frac
        parts.append(
            f'<text x="{xpix:.1f}" y="{_SVG_H - _SVG_MB + 18:.1f}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">{xv:.0f}</text>'
        )
    axis_label = "loss (log scale)" if shift == 0.0 else "loss, shifted (log scale)"
    parts.append(
        f'<text x="14" y="{_SVG_MT + inner_h / 2:.1f}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 14 {_SVG_MT + inner_h / 2:.1f})">'
        f"{axis_label}</text>"
    )
    parts.append(
        f'<text x="{_SVG_ML + inner_w / 2:.1f}" y="{_SVG_H - 12}" text-anchor="middle" '
        'font-size="12" font-family="sans-serif">iteration</text>'
    )
    legend_y = _SVG_MT + 10
    for name in series:
        recs = series[name]
        if not recs:
            continue
        color = _SVG_COLORS.get(name, "#777777")
        points = " ".join(f"{sx(r.iteration):.2f},{sy(r.neg_elbo):.2f}" for r in recs)
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<line x1="{_SVG_W - 150}" y1="{legend_y}" x2="{_SVG_W - 128}" y2="{legend_y}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{_SVG_W - 122}" y="{legend_y + 4}" font-size="11" '
            f'font-family="sans-serif">{name}</text>'
        )
        legend_y += 16
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_loss_svg(series: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write(loss_svg_text(series))


# ---------------------------------------------------------------------------
# checkpoints


def _net_to_doc(name: str, net: DenseNet) -> dict:
    return {
        "name": name,
        "dims": list(net.layer_dims),
        "weights": [w.ravel().tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def _net_from_doc(doc: dict) -> DenseNet:
    dims = tuple(int(d) for d in doc["dims"])
    weights, biases = [], []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        flat = np.asarray(doc["weights"][i], dtype=float)
        if flat.size != d_in * d_out:
            raise CheckpointError(
                f"net {doc.get('name')!r} layer {i}: expected {d_in * d_out} weights, got {flat.size}"
            )
        weights.append(flat.reshape(d_in, d_out))
        b = np.asarray(doc["biases"][i], dtype=float)
        if b.size != d_out:
            raise CheckpointError(
                f"net {doc.get('name')!r} layer {i}: expected {d_out} biases, got {b.size}"
            )
        biases.append(b)
    return DenseNet(layer_dims=dims, weights=weights, biases=biases)


def checkpoint_doc(model: SdeModel, data_norm=(0.0, 1.0)) -> dict:
    """Versioned snapshot of every model parameter as a JSON-ready document."""
    lin = model.linear
    doc = {
        "version": CHECKPOINT_VERSION,
        "driver": model.driver,
        "variant": model.variant,
        "linear": {"lambda": lin.lam, "eta": lin.eta, "varsigma": lin.varsigma, "x0": lin.x0},
        "mafbm": None,
        "nets": [
            _net_to_doc(name, getattr(model, attr)) for name, attr in _NET_ATTRS.items()
        ],
        "data_norm": {"mean": float(data_norm[0]), "sd": float(data_norm[1])},
        "clamp_threshold": model.clamp_threshold,
    }
    if model.mafbm is not None:
        config, weights, _ = model.mafbm
        doc["mafbm"] = {
            "hurst": config.hurst,
            "k": config.k_factors,
            "gammas": config.gammas.tolist(),
            "omegas": weights.omegas.tolist(),
        }
    return doc


def checkpoint_save(model: SdeModel, path, data_norm=(0.0, 1.0)) -> None:
    """Write the versioned JSON snapshot of a model (lossless floats)."""
    with open(path, "w") as fh:
        json.dump(checkpoint_doc(model, data_norm), fh, indent=1)
        fh.write("\n")


def model_from_checkpoint_doc(doc, origin="<checkpoint>"):
    """Rebuild (model, (norm_mean, norm_sd)) from a checkpoint document."""
    path = origin
    if not isinstance(doc, dict):
        raise CheckpointError(f"{path}: checkpoint must be a JSON object")
    version = doc.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})"
        )
    try:
        lin = doc["linear"]
        params = LinearSDEParams(
            lam=float(lin["lambda"]),
            eta=float(lin["eta"]),
            varsigma=float(lin["varsigma"]),
            x0=float(lin["x0"]),
        )
        nets = {d["name"]: _net_from_doc(d) for d in doc["nets"]}
        missing = set(_NET_ATTRS) - set(nets)
        if missing:
            raise CheckpointError(f"{path}: missing nets {sorted(missing)}")
        mafbm = None
        if doc.get("mafbm") is not None:
            m = doc["mafbm"]
            config = MafbmConfig(
                hurst=float(m["hurst"]),
                k_factors=int(m["k"]),
                gammas=np.asarray(m["gammas"], dtype=float),
                horizon=1.0,
            )
            weights = MafbmWeights(omegas=np.asarray(m["omegas"], dtype=float))
            system = build_augmented(params, config, weights)
            mafbm = (config, weights, system)
        model = SdeModel(
            driver=doc["driver"],
            variant=doc["variant"],
            linear=params,
            drift_net=nets["drift"],
            diff_net=nets["diffusion"],
            control_net=nets["control"],
            encoder=nets["encoder"],
            mafbm=mafbm,
            clamp_threshold=float(doc.get("clamp_threshold", 0.0)),
        )
        norm = doc["data_norm"]
        return model, (float(norm["mean"]), float(norm["sd"]))
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, PreconditionError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint: {exc}") from exc


def checkpoint_load(path):
    """Load a checkpoint file; returns (model, (norm_mean, norm_sd))."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return model_from_checkpoint_doc(doc, origin=str(path))
