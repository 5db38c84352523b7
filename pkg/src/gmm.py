"""Gaussian mixture models fitted by Expectation-Maximization."""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Tuple, Union

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

from config import COLLAPSE_WEIGHT, GMM_DEFAULTS
from errors import ComponentCollapseError, GmmFitError
from features import FeatureMatrix

logger = logging.getLogger(__name__)

DIAGONAL = 'diagonal'
FULL = 'full'

MODEL_FORMAT = 'urbanform-gmm'
MODEL_FORMAT_VERSION = 1

LOG_2PI = math.log(2 * math.pi)

Data = Union[FeatureMatrix, np.ndarray]


def as_array(matrix: Data) -> np.ndarray:
    values = matrix.values if isinstance(matrix, FeatureMatrix) else matrix
    X = np.asarray(values, dtype=float)
    if X.ndim != 2:
        raise GmmFitError(f"expected a 2-D matrix, got shape {X.shape}")
    return X


@dataclass(frozen=True)
class GmmConfig:
    n_components: int
    covariance: str = GMM_DEFAULTS['covariance']
    max_iter: int = GMM_DEFAULTS['max_iter']
    tol: float = GMM_DEFAULTS['tol']
    n_restarts: int = GMM_DEFAULTS['n_restarts']
    reg_var: float = GMM_DEFAULTS['reg_var']
    seed: int = 0

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError(f"n_components must be >= 1, got {self.n_components}")
        if self.covariance not in (DIAGONAL, FULL):
            raise ValueError(f"covariance must be '{DIAGONAL}' or '{FULL}'")
        if self.max_iter < 1 or self.n_restarts < 1 or not self.tol > 0 or not self.reg_var > 0:
            raise ValueError("max_iter, n_restarts, tol and reg_var must be positive")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")


@dataclass(frozen=True, eq=False)
class GmmModel:
    """Fitted mixture: weights (K,), means (K, d), covariances (K, d) or (K, d, d)."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    covariance: str
    train_log_likelihood: float = float('nan')
    config: Optional[GmmConfig] = None
    converged: bool = False
    n_iter: int = 0
    restart: int = 0
    failed_attempts: int = 0
    converged_restarts: int = 0
    history: Tuple[float, ...] = field(default=(), compare=False)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def n_parameters(self) -> int:
        return n_parameters(self.n_components, self.d, self.covariance)


@dataclass(frozen=True, eq=False)
class Responsibilities:
    """Posterior component probabilities, rows x K."""

    matrix: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.matrix, axis=1)


def n_parameters(n_components: int, d: int, covariance: str) -> int:
    cov_params = d if covariance == DIAGONAL else d * (d + 1) // 2
    return (n_components - 1) + n_components * d + n_components * cov_params


def _log_gaussian(X: np.ndarray, means: np.ndarray, covariances: np.ndarray, covariance: str) -> np.ndarray:
    """log N(x_n | mu_k, Sigma_k) as an (n, K) array."""
    n, d = X.shape
    K = means.shape[0]
    out = np.empty((n, K))
    for k in range(K):
        diff = X - means[k]
        if covariance == DIAGONAL:
            var = covariances[k]
            out[:, k] = -0.5 * (d * LOG_2PI + np.sum(np.log(var)) + np.sum(diff ** 2 / var, axis=1))
        else:
            try:
                L = scipy.linalg.cholesky(covariances[k], lower=True)
            except np.linalg.LinAlgError as e:
                raise ComponentCollapseError(f"covariance of component {k} is not positive-definite",
                                             component=k) from e
            soln = scipy.linalg.solve_triangular(L, diff.T, lower=True)
            out[:, k] = -0.5 * (d * LOG_2PI + np.sum(soln ** 2, axis=0)) - np.sum(np.log(np.diag(L)))
    return out


def _estimate(model: GmmModel, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row log p(x_n) and log responsibilities."""
    if X.shape[1] != model.d:
        raise GmmFitError(f"model dimension {model.d} does not match matrix width {X.shape[1]}")
    weighted = _log_gaussian(X, model.means, model.covariances, model.covariance) + np.log(model.weights)
    log_norm = logsumexp(weighted, axis=1)
    bad = np.flatnonzero(~np.isfinite(log_norm))
    if bad.size:
        raise GmmFitError(f"non-finite density at row {int(bad[0])}")
    return log_norm, weighted - log_norm[:, None]


def e_step(model: GmmModel, matrix: Data) -> Responsibilities:
    """Posterior probability of each component for each row, computed in log space."""
    _, log_resp = _estimate(model, as_array(matrix))
    return Responsibilities(matrix=np.exp(log_resp))


predict_proba = e_step


def m_step(matrix: Data, resp: Union[Responsibilities, np.ndarray],
           config: GmmConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Weighted parameter updates from responsibilities.

    Returns:
        (weights, means, covariances) with reg_var added to every variance

    Raises:
        ComponentCollapseError: if a component's total responsibility is ~0
    """
    X = as_array(matrix)
    R = resp.matrix if isinstance(resp, Responsibilities) else np.asarray(resp, dtype=float)
    n, d = X.shape

    nk = R.sum(axis=0)
    collapsed = np.flatnonzero(nk < COLLAPSE_WEIGHT)
    if collapsed.size:
        k = int(collapsed[0])
        raise ComponentCollapseError(f"component {k} collapsed (N_k={nk[k]:.3g})", component=k)

    weights = nk / n
    means = (R.T @ X) / nk[:, None]
    if config.covariance == DIAGONAL:
        covariances = np.empty((len(nk), d))
        for k in range(len(nk)):
            diff = X - means[k]
            covariances[k] = (R[:, k] @ (diff ** 2)) / nk[k] + config.reg_var
    else:
        covariances = np.empty((len(nk), d, d))
        for k in range(len(nk)):
            diff = X - means[k]
            cov = (R[:, k, None] * diff).T @ diff / nk[k]
            covariances[k] = 0.5 * (cov + cov.T) + config.reg_var * np.eye(d)
    return weights, means, covariances


def log_likelihood(model: GmmModel, matrix: Data) -> float:
    """Sum over rows of log sum_k pi_k N(x_n | mu_k, Sigma_k)."""
    log_norm, _ = _estimate(model, as_array(matrix))
    return float(log_norm.sum())


def bic(model: GmmModel, matrix: Data) -> float:
    """k ln N - 2 ln L, with the model's parameter count."""
    X = as_array(matrix)
    return bic_value(model.n_parameters(), X.shape[0], log_likelihood(model, X))


def bic_value(n_params: int, n_rows: int, log_lik: float) -> float:
    return n_params * math.log(n_rows) - 2.0 * log_lik


def assign(model: GmmModel, matrix: Data) -> np.ndarray:
    """Hard labels: most responsible component, smallest index on ties."""
    return e_step(model, matrix).labels


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: pick rows with probability proportional to squared distance."""
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(0, n)]
    closest = np.sum((X - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(0, n)
        centers[i] = X[idx]
        closest = np.minimum(closest, np.sum((X - centers[i]) ** 2, axis=1))
    return centers


def _initial_model(X: np.ndarray, config: GmmConfig, rng: np.random.Generator) -> GmmModel:
    K, d = config.n_components, X.shape[1]
    means = kmeans_plusplus(X, K, rng)
    variance = X.var(axis=0) + config.reg_var
    if config.covariance == DIAGONAL:
        covariances = np.tile(variance, (K, 1))
    else:
        covariances = np.tile(np.diag(variance), (K, 1, 1))
    return GmmModel(weights=np.full(K, 1.0 / K), means=means, covariances=covariances,
                    covariance=config.covariance, config=config)


def _run_em(X: np.ndarray, config: GmmConfig, rng: np.random.Generator, restart: int) -> GmmModel:
    model = _initial_model(X, config, rng)
    history: List[float] = []
    converged = False
    for it in range(config.max_iter):
        log_norm, log_resp = _estimate(model, X)
        ll = float(log_norm.sum())
        if history and ll - history[-1] < config.tol * abs(history[-1]):
            history.append(ll)
            converged = True
            break
        history.append(ll)
        weights, means, covariances = m_step(X, np.exp(log_resp), config)
        model = replace(model, weights=weights, means=means, covariances=covariances)
    else:
        history.append(log_likelihood(model, X))

    return replace(model, train_log_likelihood=history[-1], converged=converged,
                   n_iter=len(history) - 1, restart=restart, history=tuple(history))


def _run_restart(X: np.ndarray, config: GmmConfig, restart: int) -> GmmModel:
    """One restart; collapsed attempts are re-seeded from (seed, restart, attempt)."""
    for attempt in range(config.n_restarts + 1):
        rng = np.random.default_rng([config.seed, restart, attempt])
        try:
            model = _run_em(X, config, rng, restart)
            return replace(model, failed_attempts=attempt)
        except ComponentCollapseError as e:
            logger.debug(f"K={config.n_components} restart {restart} attempt {attempt}: {e}")
    raise GmmFitError(
        f"K={config.n_components}: restart {restart} collapsed {config.n_restarts + 1} times in a row")


def fit(matrix: Data, config: GmmConfig, threads: int = 1) -> GmmModel:
    """
    Fit a mixture with n_restarts independent EM runs and keep the best.

    The winner is the highest final log-likelihood, ties going to the lower
    restart index, so the result does not depend on `threads`.
    """
    X = as_array(matrix)
    if not np.all(np.isfinite(X)):
        raise GmmFitError("training matrix contains non-finite values")
    if X.shape[0] < config.n_components:
        raise GmmFitError(f"{X.shape[0]} rows cannot support {config.n_components} components")

    restarts = range(config.n_restarts)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            models = list(pool.map(lambda r: _run_restart(X, config, r), restarts))
    else:
        models = [_run_restart(X, config, r) for r in restarts]

    best = max(models, key=lambda m: (m.train_log_likelihood, -m.restart))
    failed = sum(m.failed_attempts for m in models)
    if failed:
        logger.warning(f"K={config.n_components}: {failed} collapsed attempts were re-seeded")
    logger.debug(f"K={config.n_components}: best restart {best.restart}, "
                 f"log-likelihood {best.train_log_likelihood:.6f}, {best.n_iter} iterations")
    converged = sum(m.converged for m in models)
    if converged < len(models):
        logger.info(f"K={config.n_components}: {converged}/{len(models)} restarts converged "
                    f"within {config.max_iter} iterations")
    return replace(best, failed_attempts=failed, converged_restarts=converged)


def model_to_dict(model: GmmModel) -> dict:
    return {
        'format': MODEL_FORMAT,
        'version': MODEL_FORMAT_VERSION,
        'config': asdict(model.config) if model.config else None,
        'covariance': model.covariance,
        'weights': model.weights.tolist(),
        'means': model.means.tolist(),
        'covariances': model.covariances.tolist(),
        'train_log_likelihood': model.train_log_likelihood,
        'converged': model.converged,
        'n_iter': model.n_iter,
        'restart': model.restart,
        'converged_restarts': model.converged_restarts,
    }


def model_from_dict(doc: dict) -> GmmModel:
    if doc.get('format') != MODEL_FORMAT:
        raise GmmFitError(f"not a model document: format={doc.get('format')!r}")
    if doc.get('version') != MODEL_FORMAT_VERSION:
        raise GmmFitError(f"unsupported model version {doc.get('version')}")
    return GmmModel(
        weights=np.array(doc['weights'], dtype=float),
        means=np.array(doc['means'], dtype=float),
        covariances=np.array(doc['covariances'], dtype=float),
        covariance=doc['covariance'],
        train_log_likelihood=float(doc['train_log_likelihood']),
        config=GmmConfig(**doc['config']) if doc.get('config') else None,
        converged=bool(doc['converged']),
        n_iter=int(doc['n_iter']),
        restart=int(doc['restart']),
        converged_restarts=int(doc.get('converged_restarts', 0)),
    )


def save_model(model: GmmModel, path: str, column_names=None) -> None:
    doc = model_to_dict(model)
    if column_names is not None:
        doc['columns'] = list(column_names)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(doc, f, indent=2)
        f.write('\n')


def load_model(path: str) -> GmmModel:
    with open(path, 'r', encoding='utf-8') as f:
        return model_from_dict(json.load(f))
