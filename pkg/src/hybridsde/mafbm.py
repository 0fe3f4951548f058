"""Markov approximation of fractional Brownian motion.

The fractional driver is represented as a weighted sum of mean-reverting
factors Y_k sharing one Brownian motion.  Substituting that sum into the
linear prior yields an augmented linear system whose conditional moments and
optimal control are still closed form; the weights are calibrated so the
driver's variance function tracks t^(2H).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import CalibrationError, NumericError, PreconditionError
from .lingauss import (
    ConditionalMoments,
    LinearSDEParams,
    ObservationSet,
    _check_targets,
    _phi,
)

CALIBRATION_GRID_SIZE = 64
CALIBRATION_RIDGE = 1e-10


@dataclass(frozen=True)
class MafbmConfig:
    """Fractional driver configuration: Hurst index and factor relaxation rates."""

    hurst: float
    k_factors: int
    gammas: np.ndarray
    horizon: float

    def __post_init__(self):
        gammas = np.asarray(self.gammas, dtype=float)
        object.__setattr__(self, "gammas", gammas)
        if not 0.0 < self.hurst < 1.0:
            raise PreconditionError(f"hurst must lie in (0,1), got {self.hurst}")
        if self.k_factors < 1 or gammas.shape != (self.k_factors,):
            raise PreconditionError("k_factors must match the length of gammas")
        if np.any(gammas <= 0) or np.any(np.diff(gammas) <= 0):
            raise PreconditionError("gammas must be positive and strictly increasing")
        if not self.horizon > 0:
            raise PreconditionError("horizon must be positive")

    @staticmethod
    def default(hurst: float, k_factors: int = 5, ratio: float = 10.0, horizon: float = 1.0):
        return MafbmConfig(hurst, k_factors, gamma_grid(k_factors, ratio), horizon)


@dataclass(frozen=True)
class MafbmWeights:
    """Calibrated factor weights plus the fit quality recorded at calibration.

    ``rel_error`` is the relative l2 error of the fitted variance function
    against the target s^(2H) over the calibration grid.
    """

    omegas: np.ndarray
    rel_error: float = np.nan

    def __post_init__(self):
        omegas = np.asarray(self.omegas, dtype=float)
        object.__setattr__(self, "omegas", omegas)
        if not np.all(np.isfinite(omegas)):
            raise PreconditionError("weights must be finite")


@dataclass(frozen=True)
class AugmentedSystem:
    """Linear system dZ = (A Z + c) dt + L dB for Z = (X, Y_1..Y_K)."""

    drift_matrix: np.ndarray
    drift_offset: np.ndarray
    noise_loading: np.ndarray
    observed_index: int = 0

    @property
    def dim(self) -> int:
        return self.drift_matrix.shape[0]

    @property
    def rates(self) -> np.ndarray:
        """(-diagonal) relaxation rates, (lam, gamma_1..gamma_K)."""
        return -np.diag(self.drift_matrix)


def gamma_grid(k_factors: int, ratio: float) -> np.ndarray:
    """Geometric relaxation-rate grid centered at 1: r^(k - (K+1)/2), k=1..K."""
    if k_factors < 1 or ratio <= 1:
        raise PreconditionError("need k_factors >= 1 and ratio > 1")
    k = np.arange(1, k_factors + 1, dtype=float)
    return ratio ** (k - (k_factors + 1) / 2.0)


def variance_function(config: MafbmConfig, omegas: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Var of sum_k w_k Y_k(s) for factors started at 0 on a shared BM.

    Each factor pair contributes (1 - exp(-(g_k+g_l) s)) / (g_k + g_l).
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    g = config.gammas
    gsum = g[:, None] + g[None, :]
    pair = _phi(1.0, gsum[None, :, :] * s[:, None, None])  # (1-e^{-gsum s})
    # _phi(1, x) = 1 - e^{-x}; divide by the pair rate afterwards
    kern = pair / gsum[None, :, :]
    return np.einsum("k,l,skl->s", omegas, omegas, kern)


def _calibration_grid(horizon: float) -> np.ndarray:
    return np.geomspace(horizon / 1000.0, horizon, CALIBRATION_GRID_SIZE)


def fit_omega(config: MafbmConfig) -> MafbmWeights:
    """Calibrate weights so the driver variance tracks s^(2H) on a log grid.

    The variance is a quadratic form in the weights, so least squares over
    the pairwise products w_k w_l is linear and solved by ridge-regularized
    normal equations; the weight vector is then recovered from the dominant
    eigenpair and polished by Gauss-Newton steps on the residuals.
    """
    s = _calibration_grid(config.horizon)
    target = s ** (2.0 * config.hurst)
    g = config.gammas
    k = config.k_factors
    gsum = g[:, None] + g[None, :]
    kern = (1.0 - np.exp(-gsum[None, :, :] * s[:, None, None])) / gsum[None, :, :]

    # linear stage: unknowns are the symmetric pairwise products w_k w_l
    iu = np.triu_indices(k)
    mult = np.where(iu[0] == iu[1], 1.0, 2.0)
    design = kern[:, iu[0], iu[1]] * mult[None, :]
    gram = design.T @ design + CALIBRATION_RIDGE * np.eye(design.shape[1])
    try:
        coeffs = np.linalg.solve(gram, design.T @ target)
    except np.linalg.LinAlgError as exc:
        raise CalibrationError(f"singular normal equations: {exc}") from exc
    prod = np.zeros((k, k))
    prod[iu] = coeffs
    prod = prod + prod.T - np.diag(np.diag(prod))
    evals, evecs = np.linalg.eigh(prod)
    idx = int(np.argmax(evals))
    if evals[idx] <= 0:
        raise CalibrationError("pairwise-product fit has no positive mode")
    omegas = np.sqrt(evals[idx]) * evecs[:, idx]
    if np.sum(omegas) < 0:
        omegas = -omegas

    # Gauss-Newton polish of the weights on the residuals V(s_j) - target_j
    for _ in range(500):
        v = np.einsum("k,l,skl->s", omegas, omegas, kern)
        jac = 2.0 * np.einsum("l,skl->sk", omegas, kern)
        jtj = jac.T @ jac + CALIBRATION_RIDGE * np.eye(k)
        try:
            step = np.linalg.solve(jtj, jac.T @ (v - target))
        except np.linalg.LinAlgError as exc:
            raise CalibrationError(f"singular Gauss-Newton system: {exc}") from exc
        omegas = omegas - step
        if np.max(np.abs(step)) < 1e-13 * max(1.0, np.max(np.abs(omegas))):
            break

    v = variance_function(config, omegas, s)
    rel = float(np.linalg.norm(v - target) / np.linalg.norm(target))
    return MafbmWeights(omegas=omegas, rel_error=rel)


def build_augmented(
    params: LinearSDEParams, config: MafbmConfig, weights: MafbmWeights
) -> AugmentedSystem:
    """Substitute the factor representation of the driver into the linear prior."""
    k = config.k_factors
    g = config.gammas
    w = weights.omegas
    vs = params.varsigma
    a = np.zeros((k + 1, k + 1))
    a[0, 0] = -params.lam
    a[0, 1:] = -vs * w * g
    a[1:, 1:] = -np.diag(g)
    c = np.zeros(k + 1)
    c[0] = params.eta
    loading = np.ones(k + 1)
    loading[0] = vs * np.sum(w)
    return AugmentedSystem(drift_matrix=a, drift_offset=c, noise_loading=loading)


DEGENERACY_GAP = 5e-6


def _split_rates(system: AugmentedSystem):
    """Relaxation rates with the near-degeneracy guard applied to lam.

    The moments are expressed in the exponential eigenbasis, whose
    coefficients scale like 1/(lam - gamma_k); pushing lam a relative
    5e-6 off a coinciding gamma_k keeps the coefficient products small
    enough that roundoff cancellation stays below the perturbation bias
    (both are O(1e-5) at worst).
    """
    rates = system.rates
    lam, gammas = rates[0], rates[1:]
    close = np.abs(lam - gammas) < DEGENERACY_GAP * np.maximum.reduce(
        [np.full_like(gammas, lam), gammas, np.ones_like(gammas)]
    )
    if np.any(close):
        k = int(np.argmax(close))
        scale = max(lam, gammas[k], 1.0)
        lam = gammas[k] + DEGENERACY_GAP * scale * (1.0 if lam >= gammas[k] else -1.0)
    return lam, gammas


def _observed_row_coeffs(system: AugmentedSystem):
    """Exponential-sum coefficients of row 0 of exp(A tau).

    Returns (lam, gammas, couple) with
      [exp(A tau)]_{00} = e^{-lam tau}
      [exp(A tau)]_{0k} = couple_k * (e^{-gamma_k tau} - e^{-lam tau})
    exploiting that the factor rows are decoupled and diagonal.
    """
    lam, gammas = _split_rates(system)
    a0k = system.drift_matrix[0, 1:]
    couple = a0k / (lam - gammas)
    return lam, gammas, couple


def augmented_expm(system: AugmentedSystem, tau: float) -> np.ndarray:
    """Full matrix exponential exp(A tau) from the known spectrum."""
    lam, gammas, couple = _observed_row_coeffs(system)
    k = gammas.size
    out = np.zeros((k + 1, k + 1))
    el = np.exp(-lam * tau)
    eg = np.exp(-gammas * tau)
    out[0, 0] = el
    out[0, 1:] = couple * (eg - el)
    out[1:, 1:] = np.diag(eg)
    return out


def _noise_row_expansion(system: AugmentedSystem):
    """[exp(A tau) L]_0 as sum_p c_p exp(-rho_p tau)."""
    lam, gammas, couple = _observed_row_coeffs(system)
    l0 = system.noise_loading[0]
    lk = system.noise_loading[1:]
    coefs = np.concatenate(([l0 - np.sum(couple * lk)], couple * lk))
    rhos = np.concatenate(([lam], gammas))
    return coefs, rhos


def augmented_conditional_moments(
    system: AugmentedSystem, z: np.ndarray, t: float, targets: np.ndarray
) -> ConditionalMoments:
    """Moments of the observed coordinate at target times given Z(t) = z.

    ``mean_grad`` is the (M, K+1) matrix of observed-row state gradients.
    """
    targets = _check_targets(t, targets)
    z = np.asarray(z, dtype=float)
    if z.shape != (system.dim,):
        raise PreconditionError(f"state must have shape ({system.dim},)")
    if np.any(system.drift_offset[1:] != 0.0):
        raise NumericError("drift offset must be confined to the observed row")

    lam, gammas, couple = _observed_row_coeffs(system)
    dt = targets - t
    el = np.exp(-lam * dt[:, None])
    eg = np.exp(-gammas[None, :] * dt[:, None])
    grad = np.concatenate([el, couple[None, :] * (eg - el)], axis=1)  # (M, K+1)
    mean = grad @ z + system.drift_offset[0] * _phi(lam, dt)

    coefs, rhos = _noise_row_expansion(system)
    # cov_ij = sum_pq c_p c_q e^{-rho_p (T_i - m)} e^{-rho_q (T_j - m)} phi(rho_p + rho_q, m - t)
    # with m = min(T_i, T_j).  Targets are sorted, so on the lower triangle
    # (i >= j) m = T_j and the q-sum collapses to s_p(T_j) = sum_q c_q
    # phi(rho_p + rho_q, T_j - t); only one M x M exponential per p remains.
    sep = np.abs(targets[:, None] - targets[None, :])
    cov = np.zeros((targets.size, targets.size))
    for cp, rp in zip(coefs, rhos):
        s = np.zeros(targets.size)
        for cq, rq in zip(coefs, rhos):
            s += cq * _phi(rp + rq, dt)
        cov += cp * np.exp(-rp * sep) * s[None, :]
    cov = np.tril(cov) + np.tril(cov, -1).T
    return ConditionalMoments(mean=mean, cov=cov, mean_grad=grad)


def augmented_optimal_control(
    system: AugmentedSystem, z: np.ndarray, t: float, obs: ObservationSet
) -> float:
    """Scalar control on the shared noise steering toward future observations."""
    future = obs.after(t)
    if future is None:
        return 0.0
    mom = augmented_conditional_moments(system, z, t, future.times)
    k = mom.cov + obs.noise_var * np.eye(future.m)
    try:
        factor = cho_factor(k, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"covariance factorization failed: {exc}") from exc
    alpha = cho_solve(factor, future.values - mom.mean)
    return float(system.noise_loading @ (mom.mean_grad.T @ alpha))


def augmented_moments_provider(config: MafbmConfig, weights: MafbmWeights):
    """Provider for fit_linear: observed-coordinate moments under the fractional prior.

    The conditioning state is (x0, 0, ..., 0) at time 0.  The gradient used
    during fitting is analytic in (eta, varsigma, x0); the lam direction uses
    central differences because lam enters the spectrum.
    """

    def provider(params: LinearSDEParams, times: np.ndarray) -> ConditionalMoments:
        system = build_augmented(params, config, weights)
        z0 = np.zeros(system.dim)
        z0[0] = params.x0
        mom = augmented_conditional_moments(system, z0, 0.0, times)
        return mom

    def loglik_grad(params: LinearSDEParams, obs: ObservationSet):
        mom = provider(params, obs.times)
        m = obs.m
        k = mom.cov + obs.noise_var * np.eye(m)
        try:
            factor = cho_factor(k, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"covariance factorization failed: {exc}") from exc
        resid = obs.values - mom.mean
        alpha = cho_solve(factor, resid)
        logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
        ll = float(-0.5 * (m * np.log(2.0 * np.pi) + logdet + resid @ alpha))

        system = build_augmented(params, config, weights)
        lam_eff, _ = _split_rates(system)
        # analytic directions
        dm_x0 = mom.mean_grad[:, 0]
        dm_eta = np.asarray(_phi(lam_eff, obs.times))
        g_eta = float(dm_eta @ alpha)
        g_x0 = float(dm_x0 @ alpha)
        # cov scales as varsigma^2 and the mean is varsigma-free at z = (x0, 0..0)
        kinv_diag_term = m - obs.noise_var * np.trace(cho_solve(factor, np.eye(m)))
        g_vs = float(
            (1.0 / params.varsigma)
            * (-(kinv_diag_term) + alpha @ (mom.cov @ alpha))
        )
        # lam via central differences
        h = 1e-6 * max(1.0, params.lam)
        up = LinearSDEParams(params.lam + h, params.eta, params.varsigma, params.x0)
        dn = LinearSDEParams(params.lam - h, params.eta, params.varsigma, params.x0)
        from .lingauss import marginal_loglik

        lp = marginal_loglik(provider(up, obs.times), obs.values, obs.noise_var)
        lm = marginal_loglik(provider(dn, obs.times), obs.values, obs.noise_var)
        g_lam = (lp - lm) / (2.0 * h)
        return ll, np.array([g_lam, g_eta, g_vs, g_x0])

    provider.loglik_grad = loglik_grad
    return provider
