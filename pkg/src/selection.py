"""Cluster-count selection by BIC and grid-size selection by silhouette."""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from errors import FeatureError, GmmFitError, GridError, SelectionError
from features import FeatureCatalog, ZSCORE, build_features, standardize
from geometry import make_hexgrid
from gmm import Data, GmmConfig, GmmModel, as_array, assign, bic, fit
from ingest import Boundary, EntitySet, clip_to_boundary

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BicEntry:
    k: int
    bic: float
    train_log_likelihood: float
    converged_restarts: int
    failed: bool = False


@dataclass(frozen=True)
class BicCurve:
    entries: Tuple[BicEntry, ...]
    best_k: int
    models: Dict[int, GmmModel] = field(default_factory=dict, compare=False, repr=False)

    @property
    def best_model(self) -> GmmModel:
        return self.models[self.best_k]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(e.k, e.bic, e.train_log_likelihood, e.converged_restarts, e.failed) for e in self.entries],
            columns=['k', 'bic', 'train_log_likelihood', 'converged_restarts', 'failed'],
        )


@dataclass(frozen=True, eq=False)
class SilhouetteBreakdown:
    a: np.ndarray
    b: np.ndarray
    s: np.ndarray

    @property
    def overall(self) -> float:
        return float(np.mean(self.s))


@dataclass(frozen=True)
class GridSweepEntry:
    size_m: float
    best_k: int
    silhouette: float
    cell_count: int
    best_bic: float


@dataclass(frozen=True)
class GridSweepResult:
    entries: Tuple[GridSweepEntry, ...]
    best_size: float
    skipped: Tuple[Tuple[float, str], ...] = ()

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(e.size_m, e.best_k, e.silhouette, e.cell_count, e.best_bic) for e in self.entries],
            columns=['size_m', 'best_k', 'silhouette', 'cell_count', 'best_bic'],
        )


def silhouette(matrix: Data, labels: Sequence[int]) -> SilhouetteBreakdown:
    """
    Exact silhouette on Euclidean distances.

    Points alone in their cluster score 0.

    Raises:
        SelectionError: if fewer than two distinct labels are present
    """
    X = as_array(matrix)
    labels = np.asarray(labels)
    if labels.shape[0] != X.shape[0]:
        raise SelectionError(f"{labels.shape[0]} labels for {X.shape[0]} rows")
    clusters, inverse = np.unique(labels, return_inverse=True)
    if clusters.size < 2:
        raise SelectionError("silhouette undefined for one cluster")

    dist = cdist(X, X)
    onehot = np.zeros((X.shape[0], clusters.size))
    onehot[np.arange(X.shape[0]), inverse] = 1.0
    sizes = onehot.sum(axis=0)
    sums = dist @ onehot

    rows = np.arange(X.shape[0])
    own_size = sizes[inverse]
    a = np.divide(sums[rows, inverse], own_size - 1, out=np.zeros(X.shape[0]), where=own_size > 1)
    mean_other = sums / sizes
    mean_other[rows, inverse] = np.inf
    b = mean_other.min(axis=1)

    denom = np.maximum(a, b)
    s = np.divide(b - a, denom, out=np.zeros(X.shape[0]), where=denom > 0)
    s[own_size == 1] = 0.0
    return SilhouetteBreakdown(a=a, b=b, s=s)


def select_k(matrix: Data, k_range: Tuple[int, int], base_config: GmmConfig,
             threads: int = 1) -> BicCurve:
    """
    Fit every K in the inclusive range and keep the one with the lowest BIC.

    A K whose restarts all collapse is recorded as failed and skipped.
    """
    X = as_array(matrix)
    k_min, k_max = k_range
    if k_min < 1 or k_max < k_min or k_max > X.shape[0]:
        raise SelectionError(f"k range [{k_min}, {k_max}] is outside [1, {X.shape[0]}]")

    entries: List[BicEntry] = []
    models: Dict[int, GmmModel] = {}
    for k in range(k_min, k_max + 1):
        config = replace(base_config, n_components=k)
        try:
            model = fit(X, config, threads=threads)
        except GmmFitError as e:
            logger.warning(f"K={k} failed: {e}")
            entries.append(BicEntry(k=k, bic=float('nan'), train_log_likelihood=float('nan'),
                                    converged_restarts=0, failed=True))
            continue
        models[k] = model
        value = bic(model, X)
        entries.append(BicEntry(k=k, bic=value, train_log_likelihood=model.train_log_likelihood,
                                converged_restarts=model.converged_restarts))
        logger.info(f"K={k}: BIC={value:.3f}, log-likelihood={model.train_log_likelihood:.3f}")

    valid = [e for e in entries if not e.failed]
    if not valid:
        raise SelectionError(f"every K in [{k_min}, {k_max}] failed to fit")
    best = min(valid, key=lambda e: (e.bic, e.k))
    logger.info(f"BIC selects K={best.k}")
    return BicCurve(entries=tuple(entries), best_k=best.k, models=models)


def select_grid(entities: EntitySet, boundary: Boundary, catalog: FeatureCatalog, city: str,
                sizes: Sequence[float], k_range: Tuple[int, int], base_config: GmmConfig,
                threads: int = 1) -> GridSweepResult:
    """
    Silhouette of the BIC-best model at each grid size; highest silhouette wins.

    Sizes yielding too few cells, degenerate features, no fittable K or a
    single cluster are skipped and recorded.
    """
    if len(sizes) < 2:
        raise SelectionError("grid sweep needs at least 2 candidate sizes")
    if any(not s > 0 for s in sizes):
        raise SelectionError(f"grid sizes must be positive: {list(sizes)}")

    clipped = clip_to_boundary(entities, boundary)
    entries: List[GridSweepEntry] = []
    skipped: List[Tuple[float, str]] = []
    for size in sorted(set(float(s) for s in sizes)):
        try:
            grid = make_hexgrid(boundary, size)
        except GridError as e:
            skipped.append((size, str(e)))
            logger.warning(f"Grid size {size} m skipped: {e}")
            continue
        if len(grid) < 2 * k_range[1]:
            reason = f"{len(grid)} cells < {2 * k_range[1]}"
            skipped.append((size, reason))
            logger.warning(f"Grid size {size} m skipped: {reason}")
            continue

        try:
            matrix = standardize(build_features(clipped, grid, catalog, city, threads=threads), ZSCORE)
            curve = select_k(matrix, k_range, base_config, threads=threads)
        except (FeatureError, SelectionError) as e:
            skipped.append((size, str(e)))
            logger.warning(f"Grid size {size} m skipped: {e}")
            continue
        labels = assign(curve.best_model, matrix)
        if np.unique(labels).size < 2:
            skipped.append((size, "single cluster"))
            logger.warning(f"Grid size {size} m skipped: single cluster")
            continue

        score = silhouette(matrix, labels).overall
        best_bic = next(e.bic for e in curve.entries if e.k == curve.best_k)
        entries.append(GridSweepEntry(size_m=size, best_k=curve.best_k, silhouette=score,
                                      cell_count=len(grid), best_bic=best_bic))
        logger.info(f"Grid size {size} m: {len(grid)} cells, K={curve.best_k}, silhouette={score:.4f}")

    if not entries:
        raise SelectionError("no grid size produced a usable clustering")
    best = max(entries, key=lambda e: (e.silhouette, -e.size_m))
    logger.info(f"Silhouette selects grid size {best.size_m} m")
    return GridSweepResult(entries=tuple(entries), best_size=best.size_m, skipped=tuple(skipped))


def write_bic_curve(curve: BicCurve, path: str) -> None:
    curve.to_frame().to_csv(path, index=False, lineterminator='\n', float_format='%.17g')


def write_grid_sweep(result: GridSweepResult, path: str) -> None:
    result.to_frame().to_csv(path, index=False, lineterminator='\n', float_format='%.17g')
