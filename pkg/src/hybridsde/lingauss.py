"""Closed-form machinery for the linear (Ornstein-Uhlenbeck) prior.

Everything here is exact linear-Gaussian algebra: conditional moments of the
OU process, the marginal likelihood of noisy observations, the optimal
control term for steering the prior onto the observations, maximum-likelihood
fitting of the four linear parameters, and an exact Gaussian smoother used as
a test oracle elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.linalg.lapack import dpotri

from .errors import FitError, NumericError, PreconditionError

# Below this value of |rate * dt| the exponential expressions are replaced by
# second-order series to avoid 0/0 cancellation.
SMALL_EXPONENT = 1e-6


@dataclass(frozen=True)
class LinearSDEParams:
    """Parameters of the mean-reverting linear prior dX = (-lam X + eta) dt + varsigma dB.

    ``x0`` is the state the process is conditioned on at time 0.
    """

    lam: float
    eta: float
    varsigma: float
    x0: float

    def __post_init__(self):
        vals = (self.lam, self.eta, self.varsigma, self.x0)
        if not all(np.isfinite(v) for v in vals):
            raise PreconditionError(f"non-finite linear parameters: {vals}")
        if self.lam <= 0 or self.varsigma <= 0:
            raise PreconditionError(
                f"lam and varsigma must be positive, got lam={self.lam}, varsigma={self.varsigma}"
            )

    @staticmethod
    def from_unconstrained(u: np.ndarray) -> "LinearSDEParams":
        """Map (log lam, eta, log varsigma, x0) to constrained parameters."""
        return LinearSDEParams(
            lam=float(np.exp(u[0])), eta=float(u[1]),
            varsigma=float(np.exp(u[2])), x0=float(u[3]),
        )

    def to_unconstrained(self) -> np.ndarray:
        return np.array([np.log(self.lam), self.eta, np.log(self.varsigma), self.x0])


@dataclass(frozen=True)
class ObservationSet:
    """Noisy point observations O_i of the latent path at times t_i.

    All observations share one scalar noise variance ``noise_var``.
    """

    times: np.ndarray
    values: np.ndarray
    noise_var: float

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if times.ndim != 1 or values.shape != times.shape or times.size < 1:
            raise PreconditionError("times and values must be equal-length 1-d arrays, M >= 1")
        if np.any(times < 0) or np.any(np.diff(times) <= 0):
            raise PreconditionError("observation times must be strictly increasing and >= 0")
        if not (np.isfinite(self.noise_var) and self.noise_var > 0):
            raise PreconditionError(f"noise_var must be positive, got {self.noise_var}")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise PreconditionError("non-finite observation data")

    @property
    def m(self) -> int:
        return int(self.times.size)

    def after(self, t: float) -> "ObservationSet | None":
        """Observations strictly later than ``t``, or None if none remain."""
        mask = self.times > t
        if not np.any(mask):
            return None
        return ObservationSet(self.times[mask], self.values[mask], self.noise_var)


@dataclass(frozen=True)
class ConditionalMoments:
    """Gaussian moments of the prior at target times, conditioned on a state.

    ``mean_grad`` is the derivative of the mean vector with respect to the
    conditioning state: shape (M,) for the scalar OU state, (M, K+1) for the
    augmented state of the fractional driver.
    """

    mean: np.ndarray
    cov: np.ndarray
    mean_grad: np.ndarray


@dataclass(frozen=True)
class PosteriorMarginal:
    time: float
    mean: float
    var: float


def _phi(rate: float, dt: np.ndarray) -> np.ndarray:
    """(1 - exp(-rate*dt)) / rate with a series guard near rate*dt = 0."""
    dt = np.asarray(dt, dtype=float)
    x = rate * dt
    small = np.abs(x) < SMALL_EXPONENT
    safe = np.where(small, 1.0, x)
    exact = (1.0 - np.exp(-x)) / np.where(small, 1.0, rate)
    series = dt * (1.0 - x / 2.0 + x * x / 6.0)
    return np.where(small, series, np.where(np.abs(safe) > 0, exact, dt))


def _dphi_drate(rate: float, dt: np.ndarray) -> np.ndarray:
    """d/drate of (1 - exp(-rate*dt))/rate, series-guarded."""
    dt = np.asarray(dt, dtype=float)
    x = rate * dt
    small = np.abs(x) < 1e-4
    safe_rate = rate if abs(rate) > 0 else 1.0
    exact = (dt * np.exp(-x) - _phi(rate, dt)) / safe_rate
    series = -dt * dt / 2.0 + rate * dt**3 / 3.0 - rate * rate * dt**4 / 8.0
    return np.where(small, series, exact)


def _check_targets(t: float, targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=float)
    if targets.ndim != 1 or targets.size == 0:
        raise PreconditionError("targets must be a nonempty 1-d sequence")
    if np.any(np.diff(targets) < 0):
        raise PreconditionError("targets must be sorted ascending")
    if np.any(targets < t):
        raise PreconditionError(f"targets must all be >= conditioning time t={t}")
    return targets


def ou_conditional_moments(
    params: LinearSDEParams, x: float, t: float, targets: Sequence[float]
) -> ConditionalMoments:
    """Mean, covariance and state-gradient of X(T_i) given X(t) = x."""
    targets = _check_targets(t, targets)
    lam, eta, vs = params.lam, params.eta, params.varsigma
    dt = targets - t
    decay = np.exp(-lam * dt)
    mean = x * decay + eta * _phi(lam, dt)
    # C_ij = vs^2 * exp(-lam |T_i - T_j|) * phi(2 lam, min(dt_i, dt_j))
    absdiff = np.abs(targets[:, None] - targets[None, :])
    overlap = np.minimum(dt[:, None], dt[None, :])
    cov = vs * vs * np.exp(-lam * absdiff) * _phi(2.0 * lam, overlap)
    return ConditionalMoments(mean=mean, cov=cov, mean_grad=decay)


def _spd_factor(cov: np.ndarray, noise_var: float):
    k = cov + noise_var * np.eye(cov.shape[0])
    if not np.all(np.isfinite(k)):
        raise NumericError("non-finite covariance passed to factorization")
    try:
        return cho_factor(k, lower=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - noise_var > 0 prevents this
        raise NumericError(f"covariance factorization failed: {exc}") from exc


def marginal_loglik(
    moments: ConditionalMoments, obs_values: np.ndarray, noise_var: float
) -> float:
    """log N(O; m, C + noise_var * I) via a Cholesky factorization."""
    obs_values = np.asarray(obs_values, dtype=float)
    m = moments.mean.size
    if obs_values.shape != (m,):
        raise PreconditionError("observation vector length must match the moments")
    factor = _spd_factor(moments.cov, noise_var)
    resid = obs_values - moments.mean
    alpha = cho_solve(factor, resid)
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    return float(-0.5 * (m * np.log(2.0 * np.pi) + logdet + resid @ alpha))


def optimal_control(
    params: LinearSDEParams, x: float, t: float, obs: ObservationSet
) -> float:
    """Drift correction steering the prior toward future observations.

    Only observations strictly later than ``t`` contribute; with none left
    the control vanishes.
    """
    future = obs.after(t)
    if future is None:
        return 0.0
    mom = ou_conditional_moments(params, x, t, future.times)
    factor = _spd_factor(mom.cov, obs.noise_var)
    alpha = cho_solve(factor, future.values - mom.mean)
    return float(params.varsigma * (mom.mean_grad @ alpha))


def ou_moments_provider(params: LinearSDEParams, times: np.ndarray) -> ConditionalMoments:
    """Moments of the plain-BM prior at ``times``, conditioned on x0 at time 0."""
    return ou_conditional_moments(params, params.x0, 0.0, times)


def _ou_loglik_grad_factory(obs: ObservationSet):
    """Closure computing (loglik, gradient wrt (lam, eta, varsigma, x0)).

    Time geometry is precomputed once per observation set; per call only two
    M x M exponentials remain.  Gradients use the Gaussian identities
    dL = dm' a - tr(K^-1 dC)/2 + a' dC a / 2 with a = K^-1 (O - m).
    """
    times = obs.times
    dt = times  # conditioned at t = 0
    absdiff = np.abs(times[:, None] - times[None, :])
    overlap = np.minimum(dt[:, None], dt[None, :])
    tsum = times[:, None] + times[None, :]
    m = times.size
    const = m * np.log(2.0 * np.pi)

    def evaluate(params: LinearSDEParams):
        lam, eta, vs, x0 = params.lam, params.eta, params.varsigma, params.x0
        lam2 = 2.0 * lam
        decay = np.exp(-lam * dt)
        phi = _phi(lam, dt)
        mean = x0 * decay + eta * phi

        # e^{-lam|Ti-Tj|} e^{-2 lam min} = e^{-lam(Ti+Tj)} = outer(decay, decay)
        edecay = np.exp(-lam * absdiff)
        esum = np.outer(decay, decay)
        diff_e = edecay - esum
        cov0 = diff_e / lam2  # = e^{-lam|Ti-Tj|} phi(2 lam, min)
        dcov0 = (tsum * esum - absdiff * edecay) / lam2 - diff_e / (lam2 * lam)
        x2 = lam2 * overlap
        small = x2 < 1e-4
        if small.any():
            ov = overlap[small]
            xs = x2[small]
            ed = edecay[small]
            ab = absdiff[small]
            phi2s = ov * (1.0 - xs / 2.0 + xs * xs / 6.0)
            dphi2s = -ov * ov / 2.0 + lam2 * ov**3 / 3.0 - lam2 * lam2 * ov**4 / 8.0
            cov0[small] = ed * phi2s
            dcov0[small] = ed * (-ab * phi2s + 2.0 * dphi2s)
        vs2 = vs * vs
        cov = vs2 * cov0

        factor = _spd_factor(cov, obs.noise_var)
        resid = obs.values - mean
        alpha = cho_solve(factor, resid)
        logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
        loglik = float(-0.5 * (const + logdet + resid @ alpha))

        kinv, info = dpotri(factor[0], lower=True)
        if info != 0:
            raise NumericError(f"dpotri failed with info={info}")
        tr_kinv = float(np.trace(kinv))
        # dpotri fills one triangle; the trace of K^-1 D needs both
        trace_prod = 2.0 * float(np.sum(np.tril(kinv, -1) * np.tril(dcov0, -1))) + float(
            np.sum(np.diag(kinv) * np.diag(dcov0))
        )

        dm_dlam = -x0 * dt * decay + eta * _dphi_drate(lam, dt)
        g_lam = float(
            dm_dlam @ alpha
            + vs2 * (-0.5 * trace_prod + 0.5 * alpha @ (dcov0 @ alpha))
        )
        g_eta = float(phi @ alpha)
        # dC/dvs = 2 C / vs, so tr(K^-1 dC) = (2/vs)(m - noise_var tr(K^-1))
        g_vs = float(
            (1.0 / vs) * (-(m - obs.noise_var * tr_kinv) + alpha @ (cov @ alpha))
        )
        g_x0 = float(decay @ alpha)
        return loglik, np.array([g_lam, g_eta, g_vs, g_x0])

    return evaluate


def ou_loglik_grad(params: LinearSDEParams, obs: ObservationSet):
    """(loglik, d loglik / d (lam, eta, varsigma, x0)) for the OU prior."""
    return _ou_loglik_grad_factory(obs)(params)


# Analytic gradient hooks let fit_linear stay provider-generic.
ou_moments_provider.loglik_grad = ou_loglik_grad
ou_moments_provider.loglik_grad_factory = _ou_loglik_grad_factory


def _provider_loglik(provider, params: LinearSDEParams, obs: ObservationSet) -> float:
    mom = provider(params, obs.times)
    return marginal_loglik(mom, obs.values, obs.noise_var)


def _fd_loglik_grad(provider, params: LinearSDEParams, obs: ObservationSet):
    """Central finite differences in the constrained parameter space."""
    loglik = _provider_loglik(provider, params, obs)
    base = np.array([params.lam, params.eta, params.varsigma, params.x0])
    grad = np.zeros(4)
    for i in range(4):
        h = 1e-6 * max(1.0, abs(base[i]))
        up, dn = base.copy(), base.copy()
        up[i] += h
        dn[i] -= h
        lp = _provider_loglik(provider, LinearSDEParams(*up), obs)
        lm = _provider_loglik(provider, LinearSDEParams(*dn), obs)
        grad[i] = (lp - lm) / (2.0 * h)
    return loglik, grad


def fit_linear(
    obs: ObservationSet,
    moments_provider: Callable[[LinearSDEParams, np.ndarray], ConditionalMoments] | None = None,
    init: LinearSDEParams | None = None,
    steps: int = 2000,
    step_size: float = 1e-2,
) -> LinearSDEParams:
    """Maximize the marginal likelihood over (lam, eta, varsigma, x0).

    Full-batch Adam in the unconstrained space (log lam, eta, log varsigma, x0).
    The provider supplies conditional moments at the observation times given
    the state x0 at time 0; the same routine therefore serves both the plain
    BM prior and the augmented fractional prior.
    """
    if obs.m < 2:
        raise PreconditionError("fitting requires at least 2 observations")
    provider = moments_provider if moments_provider is not None else ou_moments_provider
    if init is None:
        init = LinearSDEParams(lam=1.0, eta=0.0, varsigma=1.0, x0=float(obs.values[0]))

    factory = getattr(provider, "loglik_grad_factory", None)
    if factory is not None:
        eval_point = factory(obs)
    else:
        grad_fn = getattr(provider, "loglik_grad", None)
        if grad_fn is not None:
            eval_point = lambda params: grad_fn(params, obs)
        else:
            eval_point = lambda params: _fd_loglik_grad(provider, params, obs)

    u = init.to_unconstrained()
    m1 = np.zeros(4)
    m2 = np.zeros(4)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    last_finite = init
    initial_ll = None
    best_u, best_ll = u.copy(), -np.inf

    for it in range(steps):
        params = LinearSDEParams.from_unconstrained(u)
        ll, grad = eval_point(params)
        if not (np.isfinite(ll) and np.all(np.isfinite(grad))):
            raise FitError(
                f"non-finite likelihood at step {it}; last finite iterate kept",
                last_params=last_finite,
            )
        last_finite = params
        if initial_ll is None:
            initial_ll = ll
        if ll > best_ll:
            best_ll, best_u = ll, u.copy()
        # chain rule into the unconstrained space: d/dlog(lam) = lam * d/dlam
        g = grad * np.array([params.lam, 1.0, params.varsigma, 1.0])
        m1 = beta1 * m1 + (1.0 - beta1) * g
        m2 = beta2 * m2 + (1.0 - beta2) * g * g
        mh = m1 / (1.0 - beta1 ** (it + 1))
        vh = m2 / (1.0 - beta2 ** (it + 1))
        u = u + step_size * mh / (np.sqrt(vh) + eps)  # ascent

    final = LinearSDEParams.from_unconstrained(u)
    final_ll, _ = eval_point(final)
    if not np.isfinite(final_ll):
        raise FitError("non-finite likelihood at final iterate", last_params=last_finite)
    if final_ll < best_ll:
        final = LinearSDEParams.from_unconstrained(best_u)
    return final


def _unordered_cov(params: LinearSDEParams, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cov(X(a_i), X(b_j)) conditioned on X(0), for arbitrary time arrays."""
    lam, vs = params.lam, params.varsigma
    absdiff = np.abs(a[:, None] - b[None, :])
    overlap = np.minimum(a[:, None], b[None, :])
    return vs * vs * np.exp(-lam * absdiff) * _phi(2.0 * lam, overlap)


def posterior_marginals(
    params: LinearSDEParams,
    obs: ObservationSet | None,
    query_times: Sequence[float],
) -> list[PosteriorMarginal]:
    """Exact smoother: mean/variance of X(s) given all observations.

    Joint-Gaussian conditioning of (X(s), X(T_1..T_M)) given X(0) = x0; the
    oracle counterpart of simulating the controlled posterior process.
    """
    query = np.asarray(query_times, dtype=float)
    if np.any(query < 0):
        raise PreconditionError("query times must be >= 0")
    prior = ou_conditional_moments(params, params.x0, 0.0, np.sort(query))
    order = np.argsort(query)
    prior_mean = np.empty_like(query)
    prior_var = np.empty_like(query)
    prior_mean[order] = prior.mean
    prior_var[order] = np.diag(prior.cov)

    if obs is None:
        return [
            PosteriorMarginal(float(s), float(mu), float(max(v, 0.0)))
            for s, mu, v in zip(query, prior_mean, prior_var)
        ]

    obs_mom = ou_conditional_moments(params, params.x0, 0.0, obs.times)
    factor = _spd_factor(obs_mom.cov, obs.noise_var)
    alpha = cho_solve(factor, obs.values - obs_mom.mean)
    cross = _unordered_cov(params, query, obs.times)  # (Q, M)
    mean_post = prior_mean + cross @ alpha
    var_post = prior_var - np.sum(cross * cho_solve(factor, cross.T).T, axis=1)
    return [
        PosteriorMarginal(float(s), float(mu), float(max(v, 0.0)))
        for s, mu, v in zip(query, mean_post, var_post)
    ]
