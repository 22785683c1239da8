"""Runtime guards: state-density OOD correction, progress targets, affordance lifting."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import DomainError

RIDGE = 1e-6
LL_TOL = 1e-6
MAX_ITER = 200
DEFAULT_QUANTILE = 0.005
DEFAULT_ALPHA = 0.2
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(eq=False)
class GmmDensityModel:
    """Gaussian mixture over (optionally standardized) robot states.

    When ``center``/``scale`` are set, densities and ``tau_ood`` live in the
    standardized space ``z = (s - center) / scale`` while callers pass raw
    states.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    tau_ood: float = 0.0
    alpha_step: float = DEFAULT_ALPHA
    center: np.ndarray | None = None
    scale: np.ndarray | None = None
    seed: int | None = None
    log_likelihood_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covariances = np.asarray(self.covariances, dtype=np.float64).reshape(
            self.means.shape[0], self.means.shape[1], self.means.shape[1]
        )
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise DomainError("mixture weights must sum to 1")
        self._chol = [np.linalg.cholesky(c) for c in self.covariances]
        self._log_norm = np.array([
            np.log(self.weights[k]) - 0.5 * self.dim * LOG_2PI - np.log(np.diag(L)).sum()
            for k, L in enumerate(self._chol)
        ])

    @property
    def K(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def standardize(self, s: np.ndarray) -> np.ndarray:
        if self.center is None:
            return s
        return (s - self.center) / self.scale

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        if self.center is None:
            return z
        return z * self.scale + self.center

    def component_log_density(self, z: np.ndarray) -> np.ndarray:
        """log(phi_k N(z | mu_k, Sigma_k)) for each row of ``z``, shape (n, K)."""
        out = np.empty((z.shape[0], self.K))
        for k, L in enumerate(self._chol):
            w = solve_triangular(L, (z - self.means[k]).T, lower=True)
            out[:, k] = self._log_norm[k] - 0.5 * np.sum(w * w, axis=0)
        return out

    def density(self, s) -> np.ndarray:
        z = self.standardize(np.atleast_2d(np.asarray(s, dtype=np.float64)))
        return np.exp(logsumexp(self.component_log_density(z), axis=1))

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "tau_ood": self.tau_ood,
            "alpha_step": self.alpha_step,
            "standardization": None if self.center is None else {
                "mean": self.center.tolist(), "std": self.scale.tolist()
            },
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmDensityModel":
        std = d.get("standardization")
        return cls(
            weights=d["weights"],
            means=d["means"],
            covariances=d["covariances"],
            tau_ood=d["tau_ood"],
            alpha_step=d.get("alpha_step", DEFAULT_ALPHA),
            center=None if std is None else np.asarray(std["mean"], dtype=np.float64),
            scale=None if std is None else np.asarray(std["std"], dtype=np.float64),
            seed=d.get("seed"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "GmmDensityModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _kmeanspp_means(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """Seed means by picking points with probability proportional to squared distance."""
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    d2 = np.sum((X - X[idx[0]]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        else:
            nxt = int(rng.integers(n))
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((X - X[nxt]) ** 2, axis=1))
    return X[idx].copy()


def _m_step(X, resp):
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    weights = nk / nk.sum()
    means = (resp.T @ X) / nk[:, None]
    D = X.shape[1]
    covs = np.empty((resp.shape[1], D, D))
    for k in range(resp.shape[1]):
        diff = X - means[k]
        covs[k] = (resp[:, k, None] * diff).T @ diff / nk[k] + RIDGE * np.eye(D)
    return weights, means, covs


def fit_gmm(states, K: int, seed: int = 0, *, standardize: bool = False,
            quantile: float = DEFAULT_QUANTILE, alpha_step: float = DEFAULT_ALPHA,
            max_iter: int = MAX_ITER, tol: float = LL_TOL) -> GmmDensityModel:
    """Fit a full-covariance Gaussian mixture by EM.

    Means are seeded by distance-weighted sampling, every covariance gets a
    ``1e-6 * I`` ridge, and iteration stops once the mean log-likelihood
    improves by less than ``tol`` or after ``max_iter`` rounds. An iteration
    that would lower the likelihood is discarded and ends the fit, so
    ``log_likelihood_history`` never decreases. ``tau_ood`` is the
    ``quantile`` of the training densities.
    """
    X = check_array(states, dtype=np.float64, ensure_min_samples=1)
    n, D = X.shape
    if not 1 <= K <= n:
        raise DomainError(f"need 1 <= K <= N, got K={K}, N={n}")
    center = scale = None
    if standardize:
        center = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        X = (X - center) / scale

    rng = np.random.default_rng(seed)
    means = _kmeanspp_means(X, K, rng)
    base_cov = np.atleast_2d(np.cov(X, rowvar=False, bias=True)) + RIDGE * np.eye(D)
    model = GmmDensityModel(np.full(K, 1.0 / K), means, np.repeat(base_cov[None], K, axis=0))
    history = []
    for _ in range(max_iter):
        log_p = model.component_log_density(X)
        log_tot = logsumexp(log_p, axis=1)
        ll = float(log_tot.mean())
        if history and ll < history[-1]:
            model = previous
            break
        history.append(ll)
        if len(history) > 1 and ll - history[-2] < tol:
            break
        previous = model
        weights, means, covs = _m_step(X, np.exp(log_p - log_tot[:, None]))
        model = GmmDensityModel(weights / weights.sum(), means, covs)

    dens = np.exp(logsumexp(model.component_log_density(X), axis=1))
    return GmmDensityModel(
        weights=model.weights,
        means=model.means,
        covariances=model.covariances,
        tau_ood=float(np.quantile(dens, quantile)),
        alpha_step=alpha_step,
        center=center,
        scale=scale,
        seed=seed,
        log_likelihood_history=history,
    )


def gmm_density_grad(model: GmmDensityModel, s) -> tuple[float, np.ndarray]:
    """Mixture density at ``s`` and its analytic gradient with respect to ``s``.

    In standardized space the gradient is
    ``sum_k phi_k N(z | mu_k, Sigma_k) Sigma_k^{-1} (mu_k - z)``; the chain
    rule through the standardization divides it by ``scale``.
    """
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if s.size != model.dim:
        raise DomainError(f"state has {s.size} dims, model has {model.dim}")
    if not np.all(np.isfinite(s)):
        raise DomainError("state must be finite")
    z = model.standardize(s)
    comp = np.exp(model.component_log_density(z[None])[0])
    grad = np.zeros(model.dim)
    for k in range(model.K):
        grad += comp[k] * cho_solve((model._chol[k], True), model.means[k] - z)
    if model.scale is not None:
        grad = grad / model.scale
    return float(comp.sum()), grad


def gmm_log_density_grad(model: GmmDensityModel, s) -> tuple[float, np.ndarray]:
    """``log p(s)`` and its gradient, stable where the density itself underflows.

    The gradient is the responsibility-weighted sum of
    ``Sigma_k^{-1} (mu_k - z)``, chained through the standardization.
    """
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if s.size != model.dim:
        raise DomainError(f"state has {s.size} dims, model has {model.dim}")
    if not np.all(np.isfinite(s)):
        raise DomainError("state must be finite")
    z = model.standardize(s)
    log_comp = model.component_log_density(z[None])[0]
    log_p = float(logsumexp(log_comp))
    resp = np.exp(log_comp - log_p)
    grad = np.zeros(model.dim)
    for k in range(model.K):
        grad += resp[k] * cho_solve((model._chol[k], True), model.means[k] - z)
    if model.scale is not None:
        grad = grad / model.scale
    # a standardized log-density differs from the raw one by a constant only
    return log_p, grad


def ood_correct(model: GmmDensityModel, s, max_steps: int = 1) -> tuple[np.ndarray, bool]:
    """Nudge a low-density state up the density gradient.

    In-distribution states (density >= ``tau_ood``) come back unchanged with
    ``False``. Otherwise one step ``z + alpha_step * grad_z p(z)`` is taken
    in the model's space; ``max_steps`` > 1 keeps stepping until the state
    clears the threshold or the budget runs out.
    """
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    p, _ = gmm_density_grad(model, s)
    if p >= model.tau_ood:
        return s.copy(), False
    cur = s.copy()
    for _ in range(max(1, max_steps)):
        p, grad = gmm_density_grad(model, cur)
        if p >= model.tau_ood:
            break
        # grad is w.r.t. raw s; the step is defined in standardized coordinates
        step = grad if model.scale is None else grad * model.scale**2
        cur = cur + model.alpha_step * step
    return cur, True


class GmmOodDetector(BaseEstimator):
    """scikit-learn style wrapper around :func:`fit_gmm`.

    ``predict`` follows the outlier-detector convention (+1 inlier, -1
    outlier) and ``transform`` returns corrected states.
    """

    def __init__(self, n_components: int = 4, quantile: float = DEFAULT_QUANTILE,
                 alpha_step: float = DEFAULT_ALPHA, standardize: bool = True,
                 max_steps: int = 1, random_state: int = 0):
        self.n_components = n_components
        self.quantile = quantile
        self.alpha_step = alpha_step
        self.standardize = standardize
        self.max_steps = max_steps
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.model_ = fit_gmm(X, self.n_components, self.random_state, standardize=self.standardize,
                              quantile=self.quantile, alpha_step=self.alpha_step)
        self.n_features_in_ = X.shape[1]
        return self

    def score_samples(self, X):
        check_is_fitted(self, "model_")
        return self.model_.density(check_array(X, dtype=np.float64))

    def predict(self, X):
        return np.where(self.score_samples(X) >= self.model_.tau_ood, 1, -1)

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return np.stack([ood_correct(self.model_, row, self.max_steps)[0] for row in X])


# --- episode progress ------------------------------------------------------


def progress_labels(T: int) -> np.ndarray:
    """Targets ``t / T`` for ``t = 1..T``; the last step is exactly 1."""
    if T < 1:
        raise DomainError("T must be at least 1")
    return np.arange(1, T + 1, dtype=np.float64) / T


def episode_end(progress: float, threshold: float = 0.98) -> bool:
    return progress > threshold


# --- affordance lifting ----------------------------------------------------


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    T_cw: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        T = np.asarray(self.T_cw, dtype=np.float64)
        if T.shape != (4, 4):
            raise DomainError("T_cw must be 4x4")
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        R = T[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0) or not np.allclose(T[3], [0, 0, 0, 1]):
            raise DomainError("T_cw must be a rigid transform")
        object.__setattr__(self, "T_cw", T)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


def lift_point(u: float, v: float, depth: float, cam: CameraModel) -> np.ndarray:
    """World-frame 3-D point seen at pixel (u, v) with the given depth."""
    if not depth > 0:
        raise DomainError("depth must be positive")
    p_cam = depth * np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    return cam.T_cw[:3, :3] @ p_cam + cam.T_cw[:3, 3]
