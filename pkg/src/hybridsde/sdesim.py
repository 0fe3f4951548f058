"""Controlled Euler-Maruyama simulation and Monte Carlo ELBO estimation.

A model couples a linear mean-reverting core with optional neural residuals
on drift, diffusion, and control.  The steering control splits into a
closed-form part computed from the linear submodel (affine in the state, so
its per-grid-point coefficients are precomputed once) and a learned residual
network fed with an encoding of the next upcoming observation.

The same step arithmetic runs in two modes: a fast numpy sweep for
evaluation, and a recorded sweep on a gradient tape for pathwise
(reparameterized) derivatives.  The two are kept operation-for-operation
identical so their estimates agree bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import autodiff as ad
from .autodiff import DenseNet, GradientTape, Var, net_forward, net_init, net_leaves
from .errors import NumericError, PreconditionError, SimulationError
from .lingauss import (
    LinearSDEParams,
    ObservationSet,
    optimal_control,
    ou_conditional_moments,
)
from .mafbm import (
    AugmentedSystem,
    MafbmConfig,
    MafbmWeights,
    augmented_conditional_moments,
    augmented_optimal_control,
)

DRIVER_BM = "bm"
DRIVER_MAFBM = "mafbm"
VARIANT_LINEAR = "linear"
VARIANT_NONLINEAR = "nonlinear"
VARIANT_HYBRID = "hybrid"

DIFFUSION_FLOOR = 1e-4
CONTEXT_DIM = 16


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings: step bound, Monte Carlo batch, seed, final time."""

    dt_max: float
    n_paths: int
    seed: int
    horizon: float

    def __post_init__(self):
        if not self.dt_max > 0:
            raise PreconditionError("dt_max must be positive")
        if self.n_paths < 1:
            raise PreconditionError("n_paths must be at least 1")
        if not self.horizon > 0:
            raise PreconditionError("horizon must be positive")
        if not 0 <= int(self.seed) < 2**63:
            raise PreconditionError("seed must be a nonnegative 63-bit integer")


@dataclass(frozen=True)
class PathBatch:
    """Simulated paths: grid times, states, per-step controls and noise.

    ``states`` is (S, n_grid) for the scalar driver and (S, n_grid, K+1)
    for the factor driver; controls and noise are (S, n_grid - 1).
    """

    grid: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    noise: np.ndarray


@dataclass(frozen=True)
class ElboEstimate:
    """Monte Carlo evidence lower bound: value = loglik_term - energy_term."""

    value: float
    std_error: float
    loglik_term: float
    energy_term: float


@dataclass
class SdeModel:
    """Hybrid SDE: linear core, neural residuals, learned control residual.

    ``clamp_threshold`` fixes where the smooth diffusion floor starts; it is
    frozen at construction so the clamp stays an exact identity at the
    linear operating point.
    """

    driver: str
    variant: str
    linear: LinearSDEParams
    drift_net: DenseNet
    diff_net: DenseNet
    control_net: DenseNet
    encoder: DenseNet
    mafbm: tuple | None = None
    clamp_threshold: float = 0.0
    _coef_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.driver not in (DRIVER_BM, DRIVER_MAFBM):
            raise PreconditionError(f"unknown driver {self.driver!r}")
        if self.variant not in (VARIANT_LINEAR, VARIANT_NONLINEAR, VARIANT_HYBRID):
            raise PreconditionError(f"unknown variant {self.variant!r}")
        if self.driver == DRIVER_MAFBM and self.mafbm is None:
            raise PreconditionError("factor-driver models need mafbm components")
        if self.clamp_threshold <= DIFFUSION_FLOOR:
            self.clamp_threshold = max(self.linear.varsigma / 2.0, 2 * DIFFUSION_FLOOR)
        sd = self.state_dim
        expect = sd + 1 + self.encoder.layer_dims[-1]
        if self.control_net.layer_dims[0] != expect:
            raise PreconditionError(
                f"control net expects input width {expect}, got {self.control_net.layer_dims[0]}"
            )
        for net in (self.drift_net, self.diff_net):
            if net.layer_dims[0] != 1 or net.layer_dims[-1] != 1:
                raise PreconditionError("drift/diffusion nets map scalar to scalar")
        if self.encoder.layer_dims[0] != 2:
            raise PreconditionError("encoder consumes (time-to-next, next-value) pairs")

    @property
    def linear_frozen(self) -> bool:
        return self.variant != VARIANT_NONLINEAR

    @property
    def state_dim(self) -> int:
        if self.driver == DRIVER_BM:
            return 1
        return self.mafbm[2].dim

    @property
    def uses_nets(self) -> bool:
        return self.variant != VARIANT_LINEAR


def build_model(
    variant: str,
    driver: str,
    linear: LinearSDEParams,
    seed: int,
    mafbm: tuple | None = None,
    hidden: int = 128,
    context_dim: int = CONTEXT_DIM,
) -> SdeModel:
    """Assemble a model with freshly initialized residual networks.

    The hybrid variant zero-initializes the final layers of the drift,
    diffusion, and control residuals so it starts exactly at the linear
    model; the nonlinear variant uses standard initialization throughout.
    """
    state_dim = 1 if driver == DRIVER_BM else mafbm[2].dim
    zero_last = variant == VARIANT_HYBRID
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence((seed, 977)).spawn(4)]
    drift = net_init([1, hidden, hidden, 1], seeds[0], zero_last=zero_last)
    diff = net_init([1, hidden, hidden, 1], seeds[1], zero_last=zero_last)
    control = net_init(
        [state_dim + 1 + context_dim, hidden, hidden, 1], seeds[2], zero_last=zero_last
    )
    encoder = net_init([2, hidden, hidden, context_dim], seeds[3])
    return SdeModel(
        driver=driver,
        variant=variant,
        linear=linear,
        drift_net=drift,
        diff_net=diff,
        control_net=control,
        encoder=encoder,
        mafbm=mafbm,
    )


def build_grid(obs_times, horizon: float, dt_max: float) -> np.ndarray:
    """Time grid anchored at 0, every observation time, and the horizon.

    Each anchor gap is split into ceil(gap / dt_max) equal steps, so
    observation times land exactly on grid nodes and no step exceeds dt_max.
    """
    if not horizon > 0 or not dt_max > 0:
        raise PreconditionError("horizon and dt_max must be positive")
    anchors = [0.0, float(horizon)]
    if obs_times is not None:
        times = np.asarray(obs_times, dtype=float)
        if times.size and (times.min() < 0 or times.max() > horizon):
            raise PreconditionError("observation times must lie within [0, horizon]")
        anchors.extend(times.tolist())
    anchors = np.unique(np.asarray(anchors))
    pieces = [np.array([anchors[0]])]
    for a, b in zip(anchors[:-1], anchors[1:]):
        n = max(1, int(math.ceil((b - a) / dt_max - 1e-12)))
        pieces.append(np.linspace(a, b, n + 1)[1:])
    return np.concatenate(pieces)


def _noise_step(seed: int, step: int, n_paths: int) -> np.ndarray:
    """Counter-based per-step Gaussian draws: keyed (seed, step), one lane per path."""
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, step], dtype=np.uint64)))
    return rng.standard_normal(n_paths)


def _encoder_features(obs, grid: np.ndarray, horizon: float) -> np.ndarray:
    """Per-step context features: time to the next strictly-future observation
    and its value, or (horizon - t, 0) once none remains."""
    steps = grid[:-1]
    feats = np.empty((steps.size, 2))
    if obs is None:
        feats[:, 0] = horizon - steps
        feats[:, 1] = 0.0
        return feats
    idx = np.searchsorted(obs.times, steps, side="right")
    has = idx < obs.m
    safe = np.minimum(idx, obs.m - 1)
    feats[:, 0] = np.where(has, obs.times[safe] - steps, horizon - steps)
    feats[:, 1] = np.where(has, obs.values[safe], 0.0)
    return feats


def _control_coefficients(model: SdeModel, obs, grid: np.ndarray):
    """Per-grid-point affine decomposition u_c(z, t_j) = alpha_j + beta_j . z.

    Valid only while the linear submodel is frozen; cached per (obs, grid).
    """
    steps = grid[:-1]
    sd = model.state_dim
    if obs is None:
        return np.zeros(steps.size), np.zeros((steps.size, sd))
    key = (steps.tobytes(), obs.times.tobytes(), obs.values.tobytes(), obs.noise_var)
    hit = model._coef_cache.get(key)
    if hit is not None:
        return hit
    alpha = np.zeros(steps.size)
    beta = np.zeros((steps.size, sd))
    params = model.linear
    for j, t in enumerate(steps):
        future = obs.after(t)
        if future is None:
            continue
        if model.driver == DRIVER_BM:
            mom = ou_conditional_moments(params, 0.0, t, future.times)
            grad = mom.mean_grad
        else:
            system = model.mafbm[2]
            mom = augmented_conditional_moments(system, np.zeros(sd), t, future.times)
            grad = mom.mean_grad
        kmat = mom.cov + future.noise_var * np.eye(future.m)
        try:
            factor = cho_factor(kmat, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"covariance factorization failed at t={t}: {exc}") from exc
        resid_dir = cho_solve(factor, future.values - mom.mean)
        if model.driver == DRIVER_BM:
            alpha[j] = params.varsigma * float(grad @ resid_dir)
            beta[j, 0] = -params.varsigma * float(grad @ cho_solve(factor, grad))
        else:
            loading = model.mafbm[2].noise_loading
            alpha[j] = float(loading @ (grad.T @ resid_dir))
            p = grad.T @ cho_solve(factor, grad)
            beta[j] = -(loading @ p)
    if len(model._coef_cache) > 16:
        model._coef_cache.clear()
    model._coef_cache[key] = (alpha, beta)
    return alpha, beta


def _clamp_np(v: np.ndarray, threshold: float, floor: float) -> np.ndarray:
    span = threshold - floor
    low = floor + span * np.exp(np.minimum(v - threshold, 0.0) / span)
    return np.where(v >= threshold, v, low)


def _net3_np(net: DenseNet, pre1: np.ndarray) -> np.ndarray:
    """Last two layers of a 3-layer net given the first pre-activation."""
    h1 = np.tanh(pre1)
    h2 = np.tanh(h1 @ net.weights[1] + net.biases[1])
    return (h2 @ net.weights[2] + net.biases[2])[:, 0]


def control_eval(model: SdeModel, state, t: float, obs, horizon: float | None = None) -> float:
    """Total control u = u_c + u_phi at one state and time.

    The closed-form part u_c comes from the linear submodel only; the
    residual part feeds the network with [state, t, encoder(next obs)].
    This mirrors the per-step evaluation inside ``simulate`` exactly, just
    without precomputation.  ``horizon`` only affects the post-observation
    sentinel feature; it defaults to the last observation time.
    """
    state = np.atleast_1d(np.asarray(state, dtype=float))
    if state.shape != (model.state_dim,):
        raise PreconditionError(f"state must have shape ({model.state_dim},)")
    u_c = 0.0
    if model.variant != VARIANT_NONLINEAR and obs is not None:
        if model.driver == DRIVER_BM:
            u_c = optimal_control(model.linear, float(state[0]), t, obs)
        else:
            u_c = augmented_optimal_control(model.mafbm[2], state, t, obs)
    u_phi = 0.0
    if model.uses_nets:
        if horizon is None:
            horizon = obs.times[-1] if obs is not None else t
        nxt = obs.after(t) if obs is not None else None
        if nxt is not None:
            feat = np.array([nxt.times[0] - t, nxt.values[0]])
        else:
            feat = np.array([horizon - t, 0.0])
        context = net_forward(model.encoder, feat)
        inp = np.concatenate([state, [t], context])[None, :]
        u_phi = float(net_forward(model.control_net, inp)[0, 0])
    return float(u_c) + u_phi


def _prepare(model: SdeModel, obs, sim: SimConfig):
    """Shared per-simulation constants for both evaluation modes."""
    if obs is not None and obs.times[-1] > sim.horizon:
        raise PreconditionError("observations extend past the simulation horizon")
    grid = build_grid(obs.times if obs is not None else None, sim.horizon, sim.dt_max)
    dts = np.diff(grid)
    feats = _encoder_features(obs, grid, sim.horizon)
    obs_at = {}
    if obs is not None:
        gi = np.searchsorted(grid, obs.times)
        if not np.allclose(grid[gi], obs.times, rtol=0.0, atol=1e-12):
            raise NumericError("observation times failed to land on grid nodes")
        for i, g in enumerate(gi):
            obs_at[int(g)] = float(obs.values[i])
    if model.variant == VARIANT_NONLINEAR:
        alpha = np.zeros(dts.size)
        beta = np.zeros((dts.size, model.state_dim))
    else:
        alpha, beta = _control_coefficients(model, obs, grid)
    return grid, dts, feats, obs_at, alpha, beta


def simulate(model: SdeModel, obs, sim: SimConfig, with_tape: bool = False) -> PathBatch:
    """Simulate S controlled paths on the anchored grid.

    ``obs`` may be None for prior simulation (zero control, no likelihood).
    ``with_tape`` runs the recorded sweep instead of the fast one and
    returns the identical batch; recording is observation-only.
    """
    if with_tape:
        _, _, batch = _taped_sweep(model, obs, sim, want_paths=True)
        return batch
    est, batch = _fast_sweep(model, obs, sim, want_paths=True)
    return batch


def elbo(model: SdeModel, obs, sim: SimConfig) -> ElboEstimate:
    """Monte Carlo ELBO: mean path log-likelihood minus mean control energy."""
    est, _ = _fast_sweep(model, obs, sim, want_paths=False)
    return est


def _estimate(ll: np.ndarray, en: np.ndarray) -> ElboEstimate:
    loglik_term = float(np.mean(ll))
    energy_term = float(np.mean(en))
    per_path = ll - en
    if per_path.size > 1:
        se = float(np.std(per_path, ddof=1) / np.sqrt(per_path.size))
    else:
        se = 0.0
    return ElboEstimate(
        value=loglik_term - energy_term,
        std_error=se,
        loglik_term=loglik_term,
        energy_term=energy_term,
    )


def _fast_sweep(model: SdeModel, obs, sim: SimConfig, want_paths: bool):
    grid, dts, feats, obs_at, alpha, beta = _prepare(model, obs, sim)
    n_steps = dts.size
    s_paths = sim.n_paths
    lin = model.linear
    lam, eta, vs, x0 = lin.lam, lin.eta, lin.varsigma, lin.x0
    thr, floor = model.clamp_threshold, DIFFUSION_FLOOR
    use_nets = model.uses_nets
    is_mafbm = model.driver == DRIVER_MAFBM
    if is_mafbm:
        config, weights, system = model.mafbm
        gammas = config.gammas
        wg = weights.omegas * gammas
        sumw = float(np.sum(weights.omegas))

    if use_nets:
        enc_out = net_forward(model.encoder, feats)
        unet = model.control_net
        sd = model.state_dim
        tc = np.concatenate([grid[:-1, None], enc_out], axis=1)
        a_all = tc @ unet.weights[0][sd:] + unet.biases[0]
        w1_state = unet.weights[0][:sd]
        bnet, snet = model.drift_net, model.diff_net

    x = np.full(s_paths, x0, dtype=float)
    if is_mafbm:
        y = np.zeros((s_paths, len(gammas)))
    ll = np.zeros(s_paths)
    en = np.zeros(s_paths)
    zero = np.zeros(s_paths)
    inv2 = 1.0 / (2.0 * obs.noise_var) if obs is not None else 0.0
    logc = -0.5 * np.log(2.0 * np.pi * obs.noise_var) if obs is not None else 0.0

    if want_paths:
        states = np.empty((s_paths, n_steps + 1, model.state_dim))
        controls = np.empty((s_paths, n_steps))
        noises = np.empty((s_paths, n_steps))
        states[:, 0, 0] = x
        if is_mafbm:
            states[:, 0, 1:] = y

    for j in range(n_steps):
        if j in obs_at:
            ll = ll + ((obs_at[j] - x) ** 2 * (-inv2) + logc)
        dt = dts[j]
        xi = _noise_step(sim.seed, j, s_paths)
        if use_nets:
            xc = x[:, None]
            b_out = _net3_np(bnet, xc @ bnet.weights[0] + bnet.biases[0])
            s_out = _net3_np(snet, xc @ snet.weights[0] + snet.biases[0])
            if is_mafbm:
                state_block = np.concatenate([xc, y], axis=1)
            else:
                state_block = xc
            u_phi = _net3_np(unet, state_block @ w1_state + a_all[j])
        else:
            b_out = zero
            s_out = zero
            u_phi = zero
        g = _clamp_np(vs + s_out, thr, floor)
        if is_mafbm:
            u_c = alpha[j] + beta[j, 0] * x + y @ beta[j, 1:]
        else:
            u_c = alpha[j] + beta[j, 0] * x
        u = u_c + u_phi
        en = en + (0.5 * dt) * (u * u)
        lind = -lam * x + eta
        if is_mafbm:
            t2 = (lind + b_out) - g * (y @ wg)
            l0 = g * sumw
            t3 = t2 + l0 * u
            x_new = (x + t3 * dt) + l0 * (np.sqrt(dt) * xi)
            y = (y + (y * (-gammas) + u[:, None]) * dt) + (np.sqrt(dt) * xi)[:, None]
        else:
            t3 = (lind + b_out) + g * u
            x_new = (x + t3 * dt) + g * (np.sqrt(dt) * xi)
        if not np.all(np.isfinite(x_new)):
            bad = int(np.flatnonzero(~np.isfinite(x_new))[0])
            raise SimulationError(
                f"non-finite state at path {bad}, step {j}", path_index=bad, step_index=j
            )
        x = x_new
        if want_paths:
            states[:, j + 1, 0] = x
            if is_mafbm:
                states[:, j + 1, 1:] = y
            controls[:, j] = u
            noises[:, j] = xi
    last = n_steps
    if last in obs_at:
        ll = ll + ((obs_at[last] - x) ** 2 * (-inv2) + logc)
    est = _estimate(ll, en)
    batch = None
    if want_paths:
        if not is_mafbm:
            states = states[:, :, 0]
        batch = PathBatch(grid=grid, states=states, controls=controls, noise=noises)
    return est, batch


def _taped_net3(net, params, h1):
    h2 = ad.affine_tanh(h1, params[1][0], params[1][1])
    return ad.affine_col(h2, params[2][0], params[2][1])


def _taped_sweep(model: SdeModel, obs, sim: SimConfig, want_paths: bool = False):
    """Recorded simulation; returns (tape context dict, scalar ELBO Var, batch)."""
    grid, dts, feats, obs_at, alpha, beta = _prepare(model, obs, sim)
    n_steps = dts.size
    s_paths = sim.n_paths
    lin = model.linear
    thr, floor = model.clamp_threshold, DIFFUSION_FLOOR
    use_nets = model.uses_nets
    is_mafbm = model.driver == DRIVER_MAFBM
    if is_mafbm:
        config, weights, _ = model.mafbm
        gammas = config.gammas
        wg = weights.omegas * gammas
        sumw = float(np.sum(weights.omegas))

    tape = GradientTape()
    leaves = {"nets": {}, "linear": None}
    if model.variant == VARIANT_NONLINEAR:
        unc = lin.to_unconstrained()
        lam_u = tape.leaf(unc[0])
        eta_v = tape.leaf(unc[1])
        vs_u = tape.leaf(unc[2])
        x0_v = tape.leaf(unc[3])
        leaves["linear"] = (lam_u, eta_v, vs_u, x0_v)
        lam = ad.exp(lam_u)
        eta = eta_v
        vs = ad.exp(vs_u)
        x = ad.add(np.zeros(s_paths), x0_v)
    else:
        lam, eta, vs = lin.lam, lin.eta, lin.varsigma
        x = tape.leaf(np.full(s_paths, lin.x0))

    if use_nets:
        p_drift = net_leaves(model.drift_net, tape)
        p_diff = net_leaves(model.diff_net, tape)
        unet = model.control_net
        sd = model.state_dim
        # the control input splits into per-step state columns and a
        # precomputed (time, context) block; the state half of the first
        # layer lives on this tape, the rest is chained through afterwards
        w1_state = tape.leaf(unet.weights[0][:sd])
        p_ctrl = [None] + [
            (tape.leaf(w), tape.leaf(b))
            for w, b in zip(unet.weights[1:], unet.biases[1:])
        ]
        enc_out = net_forward(model.encoder, feats)
        tc = np.concatenate([grid[:-1, None], enc_out], axis=1)
        a_all = tc @ unet.weights[0][sd:] + unet.biases[0]
        a_rows = [tape.leaf(a_all[j]) for j in range(n_steps)]
        leaves["nets"] = {"drift": p_drift, "diffusion": p_diff}
        leaves["control_state"] = w1_state
        leaves["control_rest"] = p_ctrl[1:]
        leaves["a_rows"] = a_rows

    if is_mafbm:
        y = tape.leaf(np.zeros((s_paths, len(gammas))))
        if model.variant == VARIANT_NONLINEAR:
            # factor block carries no trainable parameters; keep it a leaf
            pass
    ll = tape.leaf(np.zeros(s_paths))
    en = tape.leaf(np.zeros(s_paths))
    inv2 = 1.0 / (2.0 * obs.noise_var) if obs is not None else 0.0
    logc = -0.5 * np.log(2.0 * np.pi * obs.noise_var) if obs is not None else 0.0

    if want_paths:
        states = np.empty((s_paths, n_steps + 1, model.state_dim))
        controls = np.empty((s_paths, n_steps))
        noises = np.empty((s_paths, n_steps))
        states[:, 0, 0] = x.value
        if is_mafbm:
            states[:, 0, 1:] = y.value

    for j in range(n_steps):
        if j in obs_at:
            ll = ad.gauss_nll_acc(ll, x, obs_at[j], inv2, logc)
        dt = dts[j]
        xi = _noise_step(sim.seed, j, s_paths)
        sxi = np.sqrt(dt) * xi
        if use_nets:
            xc = ad.expand_col(x)
            b_out = _taped_net3(
                model.drift_net, p_drift, ad.affine_tanh(xc, p_drift[0][0], p_drift[0][1])
            )
            s_out = _taped_net3(
                model.diff_net, p_diff, ad.affine_tanh(xc, p_diff[0][0], p_diff[0][1])
            )
            if is_mafbm:
                state_block = ad.colstack([xc, y])
            else:
                state_block = xc
            u_phi = _taped_net3(
                model.control_net, p_ctrl, ad.affine_tanh(state_block, w1_state, a_rows[j])
            )
            g = ad.clamp_shift(s_out, vs, thr, floor)
            b_drift = b_out
        else:
            # no diffusion residual and frozen varsigma: g is a plain constant
            g = _clamp_np(np.full(s_paths, lin.varsigma), thr, floor)
            b_drift = None
        if model.variant == VARIANT_NONLINEAR:
            u = u_phi
        else:
            if is_mafbm:
                u_c = ad.lin_control2(x, y, beta[j, 0], beta[j, 1:], alpha[j])
            else:
                u_c = ad.lin_control(x, beta[j, 0], alpha[j])
            u = ad.add(u_c, u_phi) if use_nets else u_c
        en = ad.energy_acc(en, u, 0.5 * dt)
        if is_mafbm:
            x_new = ad.euler_factor_obs(
                x, y, b_drift, g, u, lam, eta, wg, sumw, dt, sxi
            )
            y = ad.euler_factor_block(y, u, gammas, dt, sxi)
        else:
            x_new = ad.euler_shared(x, b_drift, g, u, lam, eta, dt, sxi)
        if not np.all(np.isfinite(x_new.value)):
            bad = int(np.flatnonzero(~np.isfinite(x_new.value))[0])
            raise SimulationError(
                f"non-finite state at path {bad}, step {j}", path_index=bad, step_index=j
            )
        x = x_new
        if want_paths:
            states[:, j + 1, 0] = x.value
            if is_mafbm:
                states[:, j + 1, 1:] = y.value
            controls[:, j] = u.value
            noises[:, j] = xi
    last = n_steps
    if last in obs_at:
        ll = ad.gauss_nll_acc(ll, x, obs_at[last], inv2, logc)
    value = ad.sub(ad.rmean(ll), ad.rmean(en))
    batch = None
    if want_paths:
        if not is_mafbm:
            states = states[:, :, 0]
        batch = PathBatch(grid=grid, states=states, controls=controls, noise=noises)
    context = {
        "tape": tape,
        "leaves": leaves,
        "value": value,
        "ll": ll,
        "en": en,
        "feats": feats,
        "grid": grid,
    }
    return context, value, batch


def elbo_with_grads(model: SdeModel, obs, sim: SimConfig):
    """Taped ELBO plus gradients with respect to every trainable parameter.

    Returns (estimate, grads) where grads mirrors the leaf layout: per-net
    lists of (weight, bias) gradient arrays plus, for the nonlinear variant,
    a 4-vector in the unconstrained linear parameterization.
    """
    context, value, _ = _taped_sweep(model, obs, sim, want_paths=False)
    tape = context["tape"]
    leaves = context["leaves"]
    est = _estimate(context["ll"].value, context["en"].value)
    adjoint = ad.backward(tape, value)
    grads = {"nets": {}, "linear": None}
    if model.uses_nets:
        for name in ("drift", "diffusion"):
            grads["nets"][name] = [
                (ad.grad(adjoint, w), ad.grad(adjoint, b))
                for w, b in leaves["nets"][name]
            ]
        # chain the per-step adjoints of the precomputed (time, context)
        # first-layer block back through the encoder on a second short tape
        rows = leaves["a_rows"]
        unet = model.control_net
        sd = model.state_dim
        row_grads = np.zeros((len(rows), unet.weights[0].shape[1]))
        for j, r in enumerate(rows):
            gj = adjoint[r.index]
            if gj is not None:
                row_grads[j] = gj
        tape2 = GradientTape()
        p_enc2 = net_leaves(model.encoder, tape2)
        w1_rest2 = tape2.leaf(unet.weights[0][sd:])
        b1_2 = tape2.leaf(unet.biases[0])
        enc2 = net_forward(model.encoder, context["feats"], tape=tape2, params=p_enc2)
        tc2 = ad.colstack([context["grid"][:-1], enc2])
        inner = ad.rsum(ad.mul(ad.affine(tc2, w1_rest2, b1_2), row_grads))
        adj2 = ad.backward(tape2, inner)
        gw1 = np.concatenate(
            [ad.grad(adjoint, leaves["control_state"]), ad.grad(adj2, w1_rest2)],
            axis=0,
        )
        grads["nets"]["control"] = [(gw1, ad.grad(adj2, b1_2))] + [
            (ad.grad(adjoint, w), ad.grad(adjoint, b))
            for w, b in leaves["control_rest"]
        ]
        grads["nets"]["encoder"] = [
            (ad.grad(adj2, w), ad.grad(adj2, b)) for w, b in p_enc2
        ]
    if leaves["linear"] is not None:
        grads["linear"] = np.array(
            [float(ad.grad(adjoint, v)) for v in leaves["linear"]]
        )
    return est, grads
