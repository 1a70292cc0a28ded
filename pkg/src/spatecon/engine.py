"""Grid-based integrated-Laplace inference.

The engine works on a compiled latent structure z = (x, c): an
n-dimensional random effect x plus p coefficients c, with a sparse joint
prior precision Q(theta) and linear predictor eta = x + X_b c. Two
observation layers are supported:

* Gaussian: y = eta + e with e at a fixed high "copy" precision (or a
  hyperparameter). The conditional evidence pi(y|theta) is then exact.
  To keep every intermediate at O(1) scale despite the 1e8 copy
  precision, the quadratic form is evaluated in residual-shifted
  coordinates (the observed-row residual u = y - eta is substituted for
  x as a latent coordinate; the substitution is unimodular, so the log
  determinant is unchanged).
* Probit: y_i ~ Bernoulli(Phi(eta_i)). The conditional evidence is a
  Laplace approximation at the Newton mode, multiplied by per-site
  Gauss-Hermite correction factors that make it exact when the sites are
  independent.

The hyperparameters theta (internal rho, log precisions) are explored on
a regular grid around the posterior mode; latent and coefficient
marginals are Gaussian mixtures over that grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.optimize
import scipy.sparse as sp
from scipy.interpolate import PchipInterpolator
from scipy.special import gammaln, log_ndtr, logsumexp, ndtr

from . import marginals as mg
from .errors import InvalidInputError, NumericFailureError
from .gmrf import RHO_INTERNAL_EPS, CholeskyHandle

_LOG_2PI = math.log(2.0 * math.pi)
_LOG_SQRT_2PI = 0.5 * _LOG_2PI


# ---------------------------------------------------------------------------
# hyperparameter dimensions and priors
# ---------------------------------------------------------------------------


def logit_gaussian_logpdf(r: float, mean: float = 0.0, prec: float = 10.0) -> float:
    """Density of the internal rho in (0, 1) when logit(rho) is Gaussian."""
    r = float(r)
    if not 0.0 < r < 1.0:
        return -np.inf
    logit = math.log(r) - math.log1p(-r)
    return (
        0.5 * (math.log(prec) - _LOG_2PI)
        - 0.5 * prec * (logit - mean) ** 2
        - math.log(r)
        - math.log1p(-r)
    )


def log_gamma_logpdf(t: float, shape: float = 1.0, rate: float = 5e-5) -> float:
    """Density of t = log(tau) when tau ~ Gamma(shape, rate)."""
    return shape * math.log(rate) - gammaln(shape) + shape * t - rate * math.exp(t)


@dataclass(frozen=True)
class HyperDim:
    """One hyperparameter axis: a name, its log prior on the grid scale,
    an optional fixed value, and an initial value for the mode search."""

    name: str
    log_prior: Callable[[float], float]
    fixed: float | None = None
    init: float = 0.0


@dataclass(frozen=True)
class GridSettings:
    k: int = 3
    step: float = 0.8
    drop: float = 6.0
    hess_step: float = 1e-4
    dic_gh_nodes: int = 21
    hyper_marginal_points: int = 201
    mixture_points: int = 401


@dataclass
class CompiledModel:
    """Latent structure the engine consumes.

    prior_builder(theta) must return the sparse joint precision of
    z = (x, c) and its log determinant.
    """

    y: np.ndarray
    b_design: np.ndarray
    likelihood: str
    prior_builder: Callable[[Mapping[str, float]], tuple[sp.csc_matrix, float]]
    hyper_dims: tuple[HyperDim, ...]
    coef_names: tuple[str, ...]
    rho_bounds: tuple[float, float] | None = None
    tau_obs: float | None = 1e8  # None means exp(theta["log_tau_obs"])

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.b_design = np.asarray(self.b_design, dtype=float)
        if self.b_design.ndim == 1:
            self.b_design = self.b_design[:, None]
        if self.b_design.shape[0] != self.y.shape[0]:
            raise InvalidInputError("design and response lengths differ")
        if len(self.coef_names) != self.b_design.shape[1]:
            raise InvalidInputError("one name per coefficient required")
        if self.likelihood not in ("gaussian", "probit"):
            raise InvalidInputError(f"unknown likelihood {self.likelihood!r}")
        self.obs_idx = np.flatnonzero(~np.isnan(self.y))
        self.miss_idx = np.flatnonzero(np.isnan(self.y))
        if self.obs_idx.size == 0:
            raise InvalidInputError("all responses are missing")
        if self.likelihood == "probit":
            vals = self.y[self.obs_idx]
            if not np.all(np.isin(vals, (0.0, 1.0))):
                raise InvalidInputError("probit responses must be binary 0/1")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.b_design.shape[1]

    def free_dims(self) -> tuple[HyperDim, ...]:
        return tuple(d for d in self.hyper_dims if d.fixed is None)

    def theta_from_vector(self, vec: Sequence[float]) -> dict[str, float]:
        theta = {d.name: d.fixed for d in self.hyper_dims if d.fixed is not None}
        for d, v in zip(self.free_dims(), vec):
            theta[d.name] = float(v)
        return _clamp_theta(theta)

    def tau_obs_value(self, theta: Mapping[str, float]) -> float:
        if self.tau_obs is not None:
            return self.tau_obs
        return math.exp(theta["log_tau_obs"])


def _clamp_theta(theta: dict[str, float]) -> dict[str, float]:
    out = dict(theta)
    for name, value in out.items():
        if name == "rho_internal":
            out[name] = min(max(value, RHO_INTERNAL_EPS), 1.0 - RHO_INTERNAL_EPS)
        else:
            out[name] = min(max(value, -40.0), 40.0)
    return out


@dataclass
class GaussianState:
    """Conditional Gaussian of z = (x, c) given theta and the data."""

    mean_x: np.ndarray
    var_x: np.ndarray
    mean_c: np.ndarray
    cov_c: np.ndarray
    mean_eta: np.ndarray
    var_eta: np.ndarray


# ---------------------------------------------------------------------------
# Gaussian observation layer
# ---------------------------------------------------------------------------


def _residual_shift_map(model: CompiledModel) -> tuple[sp.csr_matrix, np.ndarray]:
    """Unimodular map z = G z' + z0 with z' = (u_obs, x_miss, c).

    On observed rows x = y - u - X_b c, so the copy penalty becomes the
    diagonal tau_obs * ||u||^2 and no large-scale cancellation occurs.
    """
    n, p = model.n, model.p
    obs, mis = model.obs_idx, model.miss_idx
    n_o, n_m = obs.size, mis.size
    rows, cols, vals = [], [], []
    rows.extend(obs)
    cols.extend(range(n_o))
    vals.extend([-1.0] * n_o)
    if p:
        xb = model.b_design[obs]
        r, c = np.nonzero(xb)
        rows.extend(obs[r])
        cols.extend(n_o + n_m + c)
        vals.extend(-xb[r, c])
    rows.extend(mis)
    cols.extend(range(n_o, n_o + n_m))
    vals.extend([1.0] * n_m)
    rows.extend(range(n, n + p))
    cols.extend(range(n_o + n_m, n_o + n_m + p))
    vals.extend([1.0] * p)
    g = sp.csr_matrix(
        (vals, (rows, cols)), shape=(n + p, n + p)
    )
    z0 = np.zeros(n + p)
    z0[obs] = model.y[obs]
    return g, z0


def gaussian_evidence(
    model: CompiledModel, theta: Mapping[str, float], want_state: bool = False
) -> tuple[float, GaussianState | None]:
    """Exact log pi(y | theta) for the Gaussian copy likelihood."""
    q_prior, logdet_qp = model.prior_builder(theta)
    tau_obs = model.tau_obs_value(theta)
    n, p = model.n, model.p
    obs, mis = model.obs_idx, model.miss_idx
    n_o, n_m = obs.size, mis.size

    g, z0 = _residual_shift_map(model)
    qz0 = q_prior @ z0
    shift = np.concatenate([np.full(n_o, tau_obs), np.zeros(n_m + p)])
    a_tilde = ((g.T @ (q_prior @ g)) + sp.diags(shift)).tocsc()
    c_vec = -(g.T @ qz0)
    const = float(z0 @ qz0)

    factor = CholeskyHandle(a_tilde, context=f"theta = {dict(theta)}")
    w = factor.solve(c_vec)
    s_min = const - float(c_vec @ w)
    log_z = (
        -0.5 * n_o * _LOG_2PI
        + 0.5 * n_o * math.log(tau_obs)
        + 0.5 * logdet_qp
        - 0.5 * factor.logdet()
        - 0.5 * s_min
    )
    if not want_state:
        return log_z, None

    mean_z = g @ w + z0
    mean_x, mean_c = mean_z[:n], mean_z[n:]
    mean_eta = mean_x + model.b_design @ mean_c

    minv = factor.inverse_dense()
    c0 = n_o + n_m
    cov_c = minv[c0:, c0:]
    var_eta = np.empty(n)
    var_x = np.empty(n)
    # Observed rows: eta = y - u, so Var(eta) is the u-block diagonal and
    # Var(x) = Var(u + X_b c).
    du = np.arange(n_o)
    var_eta[obs] = minv[du, du]
    if p:
        xb_o = model.b_design[obs]
        cross_uc = minv[:n_o, c0:]
        quad = np.einsum("ij,jk,ik->i", xb_o, cov_c, xb_o)
        var_x[obs] = minv[du, du] + 2.0 * np.einsum("ij,ij->i", xb_o, cross_uc) + quad
    else:
        var_x[obs] = minv[du, du]
    if n_m:
        dm = n_o + np.arange(n_m)
        var_x[mis] = minv[dm, dm]
        if p:
            xb_m = model.b_design[mis]
            cross_mc = minv[n_o : n_o + n_m, c0:]
            quad_m = np.einsum("ij,jk,ik->i", xb_m, cov_c, xb_m)
            var_eta[mis] = (
                minv[dm, dm] + 2.0 * np.einsum("ij,ij->i", xb_m, cross_mc) + quad_m
            )
        else:
            var_eta[mis] = minv[dm, dm]
    state = GaussianState(
        mean_x=mean_x,
        var_x=np.maximum(var_x, 0.0),
        mean_c=mean_c,
        cov_c=cov_c,
        mean_eta=mean_eta,
        var_eta=np.maximum(var_eta, 0.0),
    )
    return log_z, state


# ---------------------------------------------------------------------------
# probit observation layer (inner Laplace)
# ---------------------------------------------------------------------------


def _probit_site_derivs(eta: np.ndarray, y: np.ndarray):
    """Per-site log-likelihood, gradient and negative curvature."""
    t = 2.0 * y - 1.0
    u = t * eta
    loglik = log_ndtr(u)
    zeta = np.exp(-0.5 * u * u - _LOG_SQRT_2PI - loglik)
    grad = t * zeta
    curv = zeta * (u + zeta)  # -d2/deta2, positive
    return loglik, grad, curv


def laplace_inner(
    model: CompiledModel, theta: Mapping[str, float], want_state: bool = True
) -> tuple[float, GaussianState | None]:
    """Newton mode + Laplace evidence for the probit likelihood.

    The returned evidence includes per-site Gauss-Hermite correction
    factors (exact for independent sites); the Gaussian posterior is the
    plain mode/curvature approximation.
    """
    if model.likelihood != "probit":
        raise InvalidInputError("laplace_inner requires a probit model")
    q_prior, logdet_qp = model.prior_builder(theta)
    n, p = model.n, model.p
    obs = model.obs_idx
    y_o = model.y[obs]
    xb = model.b_design

    def eta_of(z):
        return z[:n] + xb @ z[n:]

    def objective(z):
        ll, _, _ = _probit_site_derivs(eta_of(z)[obs], y_o)
        return float(-0.5 * z @ (q_prior @ z) + ll.sum())

    z = np.zeros(n + p)
    obj = objective(z)
    step_inf = np.inf
    factor = None
    for _ in range(100):
        eta = eta_of(z)
        _, s_site, d_site = _probit_site_derivs(eta[obs], y_o)
        s_full = np.zeros(n)
        s_full[obs] = s_site
        grad = -(q_prior @ z) + np.concatenate([s_full, xb.T @ s_full])
        gnorm = float(np.max(np.abs(grad)))
        if step_inf < 1e-8 and gnorm < 1e-7:
            break
        d_full = np.zeros(n)
        d_full[obs] = d_site
        h = _hessian_matrix(q_prior, xb, d_full)
        factor = CholeskyHandle(h, context=f"probit Hessian, theta = {dict(theta)}")
        delta = factor.solve(grad)
        t = 1.0
        while t >= 2.0**-30:
            cand = z + t * delta
            cand_obj = objective(cand)
            if cand_obj >= obj - 1e-12:
                break
            t *= 0.5
        z = z + t * delta
        obj = objective(z)
        step_inf = float(np.max(np.abs(t * delta)))
    else:
        raise NumericFailureError(
            f"probit Newton did not converge (last gradient sup-norm {gnorm:.3e})"
        )

    eta = eta_of(z)
    ll, s_site, d_site = _probit_site_derivs(eta[obs], y_o)
    d_full = np.zeros(n)
    d_full[obs] = d_site
    h = _hessian_matrix(q_prior, xb, d_full)
    factor = CholeskyHandle(h, context=f"probit Hessian, theta = {dict(theta)}")
    log_laplace = (
        float(ll.sum()) + 0.5 * logdet_qp - 0.5 * float(z @ (q_prior @ z))
        - 0.5 * factor.logdet()
    )

    minv = factor.inverse_dense()
    cov_c = minv[n:, n:]
    dx = np.arange(n)
    var_x = minv[dx, dx]
    if p:
        cross = minv[:n, n:]
        var_eta = (
            var_x
            + 2.0 * np.einsum("ij,ij->i", xb, cross)
            + np.einsum("ij,jk,ik->i", xb, cov_c, xb)
        )
    else:
        var_eta = var_x.copy()
    var_eta = np.maximum(var_eta, 0.0)

    log_z = log_laplace + _site_corrections(eta[obs], y_o, var_eta[obs])
    if not want_state:
        return log_z, None
    state = GaussianState(
        mean_x=z[:n],
        var_x=np.maximum(var_x, 0.0),
        mean_c=z[n:],
        cov_c=cov_c,
        mean_eta=eta,
        var_eta=var_eta,
    )
    return log_z, state


def _hessian_matrix(q_prior, xb, d_full) -> sp.csc_matrix:
    n = d_full.shape[0]
    p = xb.shape[1]
    d_mat = sp.diags(d_full)
    if p == 0:
        return (q_prior + sp.block_diag([d_mat])).tocsc()
    dx = d_full[:, None] * xb
    blocks = sp.bmat(
        [[d_mat, sp.csr_matrix(dx)], [sp.csr_matrix(dx.T), sp.csr_matrix(xb.T @ dx)]]
    )
    return (q_prior + blocks).tocsc()


def _site_corrections(eta_hat, y_o, var_eta_o, nodes: int = 41) -> float:
    """Sum of log E[exp(remainder)] over sites.

    remainder_i(s) = l_i(eta_i + s) - l_i(eta_i) - l_i'(eta_i) s
                     + (1/2) D_i s^2 under s ~ N(0, var_i),
    i.e. the part of the site log likelihood the Gaussian approximation
    drops. Evaluated with probabilists' Gauss-Hermite nodes.
    """
    u_nodes, w_nodes = np.polynomial.hermite_e.hermegauss(nodes)
    log_w = np.log(w_nodes) - 0.5 * math.log(2.0 * math.pi)
    ll0, g0, d0 = _probit_site_derivs(eta_hat, y_o)
    s = np.sqrt(np.maximum(var_eta_o, 0.0))[:, None] * u_nodes[None, :]
    ll_s, _, _ = _probit_site_derivs(eta_hat[:, None] + s, y_o[:, None])
    r = ll_s - ll0[:, None] - g0[:, None] * s + 0.5 * d0[:, None] * s * s
    return float(np.sum(logsumexp(log_w[None, :] + r, axis=1)))


def log_conditional_evidence(
    model, theta: Mapping[str, float], want_state: bool = True
) -> tuple[float, GaussianState | None]:
    """log pi(y | theta) and the conditional Gaussian for any likelihood."""
    compiled = getattr(model, "compiled", model)
    theta = _clamp_theta(dict(theta))
    if compiled.likelihood == "gaussian":
        return gaussian_evidence(compiled, theta, want_state)
    return laplace_inner(compiled, theta, want_state)


# ---------------------------------------------------------------------------
# hyperparameter grid
# ---------------------------------------------------------------------------


@dataclass
class HyperGrid:
    """Evaluated hyperparameter grid with integration weights."""

    dims: tuple[str, ...]
    points: np.ndarray  # (G, D)
    log_evidence: np.ndarray
    log_prior: np.ndarray
    delta: float
    theta_fixed: dict[str, float]
    mode_point: np.ndarray
    sigma: np.ndarray

    @property
    def log_post(self) -> np.ndarray:
        return self.log_evidence + self.log_prior

    @property
    def weights(self) -> np.ndarray:
        lp = self.log_post
        w = np.exp(lp - lp.max())
        return w / w.sum()

    def theta_at(self, g: int) -> dict[str, float]:
        theta = dict(self.theta_fixed)
        for d, v in zip(self.dims, self.points[g]):
            theta[d] = float(v)
        return theta

    def axis_values(self, name: str) -> np.ndarray:
        j = self.dims.index(name)
        return np.unique(self.points[:, j])

    def axis_masses(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        j = self.dims.index(name)
        vals = np.unique(self.points[:, j])
        w = self.weights
        masses = np.array([w[self.points[:, j] == v].sum() for v in vals])
        return vals, masses


def _log_posterior_fn(model: CompiledModel):
    free = model.free_dims()

    def f(vec):
        theta = model.theta_from_vector(vec)
        log_z, _ = log_conditional_evidence(model, theta, want_state=False)
        lp = sum(d.log_prior(theta[d.name]) for d in free)
        return log_z + lp

    return f


def _numeric_hessian(f, x0: np.ndarray, h: float) -> np.ndarray:
    d = x0.size
    hess = np.empty((d, d))
    f0 = f(x0)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h
        hess[i, i] = (f(x0 + ei) - 2.0 * f0 + f(x0 - ei)) / h**2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = h
            hess[i, j] = hess[j, i] = (
                f(x0 + ei + ej) - f(x0 + ei - ej) - f(x0 - ei + ej) + f(x0 - ei - ej)
            ) / (4.0 * h**2)
    return hess


def _mode_and_scale(model: CompiledModel, settings: GridSettings):
    free = model.free_dims()
    d = len(free)
    if d == 0:
        return np.empty(0), np.empty(0)
    f = _log_posterior_fn(model)
    x0 = np.array([dim.init for dim in free])
    res = scipy.optimize.minimize(
        lambda v: -f(v),
        x0,
        method="Nelder-Mead",
        options={"xatol": 1e-4, "fatol": 1e-7, "maxiter": 400 * d, "maxfev": 600 * d},
    )
    if not res.success:
        raise NumericFailureError(
            f"hyperparameter mode search did not converge: {res.message} "
            f"(nit = {res.nit}, nfev = {res.nfev})"
        )
    mode = np.array([model.theta_from_vector(res.x)[dim.name] for dim in free])
    hess = _numeric_hessian(f, mode, settings.hess_step)
    neg_h = -hess
    try:
        eigval, eigvec = np.linalg.eigh(neg_h)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise NumericFailureError(f"Hessian eigendecomposition failed: {exc}") from exc
    floor = max(np.abs(eigval).max() * 1e-6, 1e-8)
    eigval = np.maximum(eigval, floor)
    cov = (eigvec / eigval) @ eigvec.T
    sigma = np.sqrt(np.clip(np.diag(cov), 1e-8, None))
    sigma = np.clip(sigma, 1e-3, 5.0)
    return mode, sigma


def _build_grid(model: CompiledModel, settings: GridSettings, want_states: bool):
    free = model.free_dims()
    d = len(free)
    theta_fixed = {dim.name: dim.fixed for dim in model.hyper_dims if dim.fixed is not None}
    mode, sigma = _mode_and_scale(model, settings)

    if d == 0:
        points = np.zeros((1, 0))
        delta = 1.0
    else:
        offsets = np.arange(-settings.k, settings.k + 1)
        axes = [mode[j] + settings.step * sigma[j] * offsets for j in range(d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack([m.ravel() for m in mesh], axis=1)
        # rho stays strictly inside (0, 1); out-of-domain points are dropped
        # rather than piled up at the boundary.
        keep = np.ones(points.shape[0], dtype=bool)
        for j, dim in enumerate(free):
            if dim.name == "rho_internal":
                keep &= (points[:, j] > 0.0) & (points[:, j] < 1.0)
        points = points[keep]
        delta = float(np.prod(settings.step * sigma))

    log_ev = np.empty(points.shape[0])
    log_pr = np.empty(points.shape[0])
    states: list[GaussianState] = []
    for g in range(points.shape[0]):
        theta = model.theta_from_vector(points[g])
        lz, state = log_conditional_evidence(model, theta, want_state=want_states)
        log_ev[g] = lz
        log_pr[g] = sum(dim.log_prior(theta[dim.name]) for dim in free)
        if want_states:
            states.append(state)

    log_post = log_ev + log_pr
    keep = log_post >= log_post.max() - settings.drop
    grid = HyperGrid(
        dims=tuple(dim.name for dim in free),
        points=points[keep],
        log_evidence=log_ev[keep],
        log_prior=log_pr[keep],
        delta=delta,
        theta_fixed=theta_fixed,
        mode_point=mode,
        sigma=sigma,
    )
    kept_states = [s for s, k in zip(states, keep) if k] if want_states else None
    return grid, kept_states


def explore_hypergrid(model, settings: GridSettings | None = None) -> HyperGrid:
    """Locate the hyperparameter mode and lay a weighted grid around it."""
    compiled = getattr(model, "compiled", model)
    grid, _ = _build_grid(compiled, settings or GridSettings(), want_states=False)
    return grid


def marginal_likelihood(grid: HyperGrid) -> float:
    """log pi(y | model): grid quadrature of evidence x prior."""
    return float(logsumexp(grid.log_post + math.log(grid.delta)))


def _axis_marginal(
    grid: HyperGrid, name: str, settings: GridSettings
) -> mg.Marginal | None:
    """Smooth 1D marginal of one grid axis (interpolated log density)."""
    if name not in grid.dims:
        return None
    vals, masses = grid.axis_masses(name)
    if vals.size < 3:
        return None
    h = float(np.median(np.diff(vals)))
    dens = masses / h
    log_floor = math.log(max(dens.max(), 1e-300)) - 41.0
    log_dens = np.log(np.maximum(dens, math.exp(log_floor)))
    interp = PchipInterpolator(vals, log_dens, extrapolate=True)
    lo, hi = vals[0] - h / 2.0, vals[-1] + h / 2.0
    if name == "rho_internal":
        lo, hi = max(lo, 1e-9), min(hi, 1.0 - 1e-9)
    x = np.linspace(lo, hi, settings.hyper_marginal_points)
    return mg.normalized(x, np.exp(interp(x)))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    """Everything downstream modules need from one fitted model."""

    likelihood: str
    coef_names: tuple[str, ...]
    n: int
    grid: HyperGrid
    weights: np.ndarray
    rho_bounds: tuple[float, float] | None
    rho_marginal: mg.Marginal | None
    tau_marginal: mg.Marginal | None
    coef_means: np.ndarray  # (G, p)
    coef_covs: np.ndarray  # (G, p, p)
    x_means: np.ndarray  # (G, n)
    x_vars: np.ndarray
    eta_means: np.ndarray
    eta_vars: np.ndarray
    log_mlik: float
    dic: float
    p_eff: float
    predictive: dict[int, mg.Marginal]
    settings: GridSettings
    kind: str | None = None
    model: object = None

    @property
    def eta_mean(self) -> np.ndarray:
        """Posterior (mixture) mean of the linear predictor."""
        return self.weights @ self.eta_means

    def coef_index(self, name_or_idx) -> int:
        if isinstance(name_or_idx, str):
            try:
                return self.coef_names.index(name_or_idx)
            except ValueError as exc:
                raise InvalidInputError(
                    f"unknown coefficient {name_or_idx!r}; have {self.coef_names}"
                ) from exc
        return int(name_or_idx)

    def coef_mixture(self, name_or_idx) -> tuple[np.ndarray, np.ndarray]:
        j = self.coef_index(name_or_idx)
        return self.coef_means[:, j], self.coef_covs[:, j, j]

    def coef_marginal(self, name_or_idx) -> mg.Marginal:
        means, variances = self.coef_mixture(name_or_idx)
        return mg.gaussian_mixture_marginal(
            means, variances, self.weights, self.settings.mixture_points
        )

    def coef_moments(self, name_or_idx) -> tuple[float, float]:
        means, variances = self.coef_mixture(name_or_idx)
        return mg.mixture_moments(means, variances, self.weights)

    def linear_combination_moments(self, coeffs: Mapping[str, float]) -> tuple[float, float]:
        """Mixture mean/variance of sum_j a_j beta_j (within-grid covariances kept)."""
        a = np.zeros(len(self.coef_names))
        for name, val in coeffs.items():
            a[self.coef_index(name)] = val
        means = self.coef_means @ a
        variances = np.einsum("j,gjk,k->g", a, self.coef_covs, a)
        return mg.mixture_moments(means, variances, self.weights)

    def linear_combination_marginal(self, coeffs: Mapping[str, float]) -> mg.Marginal:
        a = np.zeros(len(self.coef_names))
        for name, val in coeffs.items():
            a[self.coef_index(name)] = val
        means = self.coef_means @ a
        variances = np.einsum("j,gjk,k->g", a, self.coef_covs, a)
        return mg.gaussian_mixture_marginal(
            means, variances, self.weights, self.settings.mixture_points
        )

    def latent_marginal(self, index: int) -> mg.Marginal:
        if not 0 <= index < self.n:
            raise InvalidInputError(f"latent index {index} out of range [0, {self.n})")
        return mg.gaussian_mixture_marginal(
            self.x_means[:, index],
            self.x_vars[:, index],
            self.weights,
            self.settings.mixture_points,
        )

    def coef_summary(self) -> dict[str, dict[str, float]]:
        return {name: self.coef_marginal(name).summary() for name in self.coef_names}

    def hyper_summary(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        if self.rho_marginal is not None:
            out["rho"] = self.rho_marginal.summary()
        if self.tau_marginal is not None:
            out["tau"] = self.tau_marginal.summary()
        return out


def latent_marginal(fit: FitResult, index: int) -> mg.Marginal:
    """Mixture marginal of one latent coordinate (module-level alias)."""
    return fit.latent_marginal(index)


def _gaussian_dic(model: CompiledModel, grid, weights, states) -> tuple[float, float]:
    obs = model.obs_idx
    y_o = model.y[obs]
    e_d = 0.0
    tau_mix = 0.0
    for w_g, state, g in zip(weights, states, range(len(states))):
        tau_o = model.tau_obs_value(grid.theta_at(g))
        resid2 = (y_o - state.mean_eta[obs]) ** 2 + state.var_eta[obs]
        e_d += w_g * float(np.sum(np.log(2.0 * math.pi / tau_o) + tau_o * resid2))
        tau_mix += w_g * tau_o
    eta_bar = np.zeros(model.n)
    for w_g, state in zip(weights, states):
        eta_bar += w_g * state.mean_eta
    d_plug = float(
        np.sum(np.log(2.0 * math.pi / tau_mix) + tau_mix * (y_o - eta_bar[obs]) ** 2)
    )
    dic = 2.0 * e_d - d_plug
    return dic, e_d - d_plug


def _probit_dic(
    model: CompiledModel, weights, states, nodes: int
) -> tuple[float, float]:
    obs = model.obs_idx
    y_o = model.y[obs]
    u_nodes, w_nodes = np.polynomial.hermite_e.hermegauss(nodes)
    wbar = w_nodes / w_nodes.sum()
    e_d = 0.0
    eta_bar = np.zeros(model.n)
    for w_g, state in zip(weights, states):
        s = np.sqrt(state.var_eta[obs])[:, None] * u_nodes[None, :]
        ll, _, _ = _probit_site_derivs(state.mean_eta[obs][:, None] + s, y_o[:, None])
        e_d += w_g * float(-2.0 * np.sum(ll @ wbar))
        eta_bar += w_g * state.mean_eta
    p_hat = ndtr(eta_bar[obs])
    if np.any(p_hat <= 1e-12) or np.any(p_hat >= 1.0 - 1e-12):
        # Degenerate fitted probabilities: deviance at the plug-in blows up.
        return math.inf, math.inf
    ll_plug = y_o * np.log(p_hat) + (1.0 - y_o) * np.log1p(-p_hat)
    d_plug = float(-2.0 * ll_plug.sum())
    dic = 2.0 * e_d - d_plug
    return dic, e_d - d_plug


def _predictive_marginals(
    model: CompiledModel, grid, weights, states, settings
) -> dict[int, mg.Marginal]:
    out: dict[int, mg.Marginal] = {}
    for i in model.miss_idx:
        means = np.array([s.mean_eta[i] for s in states])
        variances = np.array([s.var_eta[i] for s in states])
        if model.likelihood == "gaussian":
            noise = np.array(
                [1.0 / model.tau_obs_value(grid.theta_at(g)) for g in range(len(states))]
            )
            out[int(i)] = mg.gaussian_mixture_marginal(
                means, variances + noise, weights, settings.mixture_points
            )
        else:
            eta_marg = mg.gaussian_mixture_marginal(
                means, variances, weights, settings.mixture_points
            )
            phi = lambda x: np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
            out[int(i)] = mg.transform_marginal(eta_marg, ndtr, deriv=phi)
    return out


def fit_compiled(
    model: CompiledModel, settings: GridSettings | None = None
) -> FitResult:
    """Full inference pass: grid, marginals, evidence, DIC, predictions."""
    settings = settings or GridSettings()
    grid, states = _build_grid(model, settings, want_states=True)
    weights = grid.weights
    g_count, n, p = len(states), model.n, model.p

    coef_means = np.stack([s.mean_c for s in states]) if p else np.zeros((g_count, 0))
    coef_covs = (
        np.stack([s.cov_c for s in states]) if p else np.zeros((g_count, 0, 0))
    )
    x_means = np.stack([s.mean_x for s in states])
    x_vars = np.stack([s.var_x for s in states])
    eta_means = np.stack([s.mean_eta for s in states])
    eta_vars = np.stack([s.var_eta for s in states])

    rho_marg = None
    if model.rho_bounds is not None and "rho_internal" in grid.dims:
        internal = _axis_marginal(grid, "rho_internal", settings)
        if internal is not None:
            lo, hi = model.rho_bounds
            rho_marg = mg.transform_marginal(
                internal,
                lambda r: lo + r * (hi - lo),
                deriv=lambda r: np.full_like(np.asarray(r, dtype=float), hi - lo),
            )
    tau_marg = None
    for tau_dim in ("log_tau", "log_tau_iid"):
        if tau_dim in grid.dims:
            log_tau_marg = _axis_marginal(grid, tau_dim, settings)
            if log_tau_marg is not None:
                tau_marg = mg.transform_marginal(log_tau_marg, np.exp, deriv=np.exp)
            break

    if model.likelihood == "gaussian":
        dic, p_eff = _gaussian_dic(model, grid, weights, states)
    else:
        dic, p_eff = _probit_dic(model, weights, states, settings.dic_gh_nodes)

    predictive = _predictive_marginals(model, grid, weights, states, settings)

    return FitResult(
        likelihood=model.likelihood,
        coef_names=model.coef_names,
        n=n,
        grid=grid,
        weights=weights,
        rho_bounds=model.rho_bounds,
        rho_marginal=rho_marg,
        tau_marginal=tau_marg,
        coef_means=coef_means,
        coef_covs=coef_covs,
        x_means=x_means,
        x_vars=x_vars,
        eta_means=eta_means,
        eta_vars=eta_vars,
        log_mlik=marginal_likelihood(grid),
        dic=dic,
        p_eff=p_eff,
        predictive=predictive,
        settings=settings,
    )


def dic(fit: FitResult) -> tuple[float, float]:
    """(DIC, effective number of parameters) of a fitted model."""
    return fit.dic, fit.p_eff
