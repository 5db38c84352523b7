"""Joint clustering of several cities and shared-typology reporting."""

import logging
import os
from dataclasses import dataclass, replace
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import ks_2samp

from config import CENTRALITY_COLUMN, DISTRIBUTION_BINS, SHARED_CLUSTER_THRESHOLD
from errors import CompareError, FeatureError
from features import MEAN_RATIO, RAW, ZSCORE, FeatureMatrix, select_columns, standardize

logger = logging.getLogger(__name__)

UNIFORM_GRID = 'uniform_grid'
PER_CITY_GRID = 'per_city_grid'
JOIN_MODES = (UNIFORM_GRID, PER_CITY_GRID)


def normalize_mode(mode: str) -> str:
    """Accept `per-city-grid` style spellings from the command line."""
    normalized = mode.replace('-', '_')
    if normalized not in JOIN_MODES:
        raise CompareError(f"unknown join mode {mode!r}; expected one of {list(JOIN_MODES)}")
    return normalized


@dataclass(frozen=True, eq=False)
class JointMatrix:
    """Rows of two or more cities, standardized over their union."""

    matrix: FeatureMatrix
    raw: FeatureMatrix
    city_ranges: Dict[str, Tuple[int, int]]
    mode: str = PER_CITY_GRID

    @property
    def cities(self) -> List[str]:
        return list(self.city_ranges)

    @property
    def row_ids(self):
        return self.matrix.row_ids

    @property
    def values(self) -> np.ndarray:
        return self.matrix.values

    def city_rows(self, city: str) -> slice:
        start, stop = self.city_ranges[city]
        return slice(start, stop)

    def select_columns(self, names: Sequence[str]) -> 'JointMatrix':
        """Restrict the raw union to `names` and standardize it again."""
        raw = select_columns(self.raw, names)
        method = self.matrix.normalization
        matrix = raw if method == RAW else standardize(raw, method)
        return replace(self, matrix=matrix, raw=raw)


def join_cities(matrices: Sequence[FeatureMatrix], mode: str = PER_CITY_GRID,
                normalization: str = ZSCORE) -> JointMatrix:
    """
    Concatenate raw per-city matrices and standardize them jointly.

    Columns that are degenerate over the union are dropped for every city.

    Raises:
        CompareError: fewer than two cities, repeated city tags, differing
            column catalogues, or unequal grid sizes in uniform_grid mode
    """
    mode = normalize_mode(mode)
    if len(matrices) < 2:
        raise CompareError(f"joining needs at least 2 cities, got {len(matrices)}")
    for m in matrices:
        if m.normalization != RAW:
            raise CompareError(f"join_cities expects raw matrices, got {m.normalization}")

    columns = matrices[0].column_names
    for m in matrices[1:]:
        if m.column_names != columns:
            difference = sorted(set(columns) ^ set(m.column_names))
            if not difference:
                raise CompareError("column catalogues list the same features in a different order")
            raise CompareError(f"column catalogues differ: {difference}")

    tags: List[str] = []
    for m in matrices:
        tags.extend(m.cities)
    if len(set(tags)) != len(tags):
        raise CompareError(f"city tags must be distinct, got {tags}")

    sizes = {m.grid_size_m for m in matrices}
    if mode == UNIFORM_GRID and (len(sizes) != 1 or None in sizes):
        raise CompareError(f"uniform_grid mode needs one shared grid size, got {sorted(map(str, sizes))}")

    ranges: Dict[str, Tuple[int, int]] = {}
    offset = 0
    for m in matrices:
        for city in m.cities:
            count = sum(1 for c, _ in m.row_ids if c == city)
            ranges[city] = (offset, offset + count)
            offset += count

    raw = FeatureMatrix(
        row_ids=tuple(r for m in matrices for r in m.row_ids),
        column_names=columns,
        values=np.vstack([m.values for m in matrices]),
        normalization=RAW,
        grid_size_m=sizes.pop() if len(sizes) == 1 else None,
    )
    try:
        matrix = raw if normalization == RAW else standardize(raw, normalization)
    except FeatureError as e:
        raise CompareError(f"joint standardization failed: {e}") from e

    logger.info(f"Joined {len(ranges)} cities ({mode}): {raw.shape[0]} rows, "
                f"{matrix.shape[1]} columns after {normalization}")
    return JointMatrix(matrix=matrix, raw=raw, city_ranges=ranges, mode=mode)


def centrality_only_matrix(matrix: Union[FeatureMatrix, JointMatrix]) -> Union[FeatureMatrix, JointMatrix]:
    """Keep only the degree-centrality column, preserving rows."""
    names = matrix.raw.column_names if isinstance(matrix, JointMatrix) else matrix.column_names
    if CENTRALITY_COLUMN not in names:
        raise CompareError(f"matrix has no {CENTRALITY_COLUMN} column")
    if not isinstance(matrix, JointMatrix):
        return select_columns(matrix, [CENTRALITY_COLUMN])
    try:
        return matrix.select_columns([CENTRALITY_COLUMN])
    except FeatureError as e:
        raise CompareError(f"{CENTRALITY_COLUMN} cannot be standardized over the joined cities: {e}") from e


@dataclass(frozen=True, eq=False)
class CrossCityReport:
    """Cluster x city counts, shared flags and per-city cluster means."""

    contingency: pd.DataFrame
    shared: pd.Series
    means: pd.DataFrame
    threshold: float

    @property
    def shared_clusters(self) -> List[int]:
        return [int(k) for k, flag in self.shared.items() if flag]

    @property
    def n_shared(self) -> int:
        return int(self.shared.sum())


def _city_ranges(matrix: Union[FeatureMatrix, JointMatrix]) -> Dict[str, Tuple[int, int]]:
    if isinstance(matrix, JointMatrix):
        return matrix.city_ranges
    ranges: Dict[str, Tuple[int, int]] = {}
    for i, (city, _) in enumerate(matrix.row_ids):
        start, _ = ranges.get(city, (i, i))
        ranges[city] = (start, i + 1)
    return ranges


def cross_city_report(labels: Sequence[int], joint: Union[FeatureMatrix, JointMatrix],
                      threshold: float = SHARED_CLUSTER_THRESHOLD,
                      n_clusters: Optional[int] = None) -> CrossCityReport:
    """
    Contingency of clusters against cities.

    A cluster is shared when every city holds at least one of its BSUs and
    at least `threshold` of them.
    """
    labels = np.asarray(labels, dtype=int)
    n_rows = len(joint.row_ids)
    if labels.shape[0] != n_rows:
        raise CompareError(f"{labels.shape[0]} labels for {n_rows} rows")
    if not 0 <= threshold <= 1:
        raise CompareError(f"threshold must be within [0, 1], got {threshold}")

    k = n_clusters if n_clusters is not None else int(labels.max()) + 1
    cities = np.array([city for city, _ in joint.row_ids])
    city_order = list(_city_ranges(joint))

    counts = np.zeros((k, len(city_order)), dtype=int)
    for j, city in enumerate(city_order):
        counts[:, j] = np.bincount(labels[cities == city], minlength=k)[:k]
    contingency = pd.DataFrame(counts, index=pd.RangeIndex(k, name='cluster'),
                               columns=pd.Index(city_order, name='city'))

    totals = counts.sum(axis=1, keepdims=True)
    fractions = np.divide(counts, totals, out=np.zeros(counts.shape), where=totals > 0)
    flags = np.all((counts >= 1) & (fractions >= threshold), axis=1) & (len(city_order) > 1)
    shared = pd.Series(flags, index=contingency.index, name='shared')

    raw = joint.raw if isinstance(joint, JointMatrix) else joint
    ratio = standardize(raw, MEAN_RATIO) if raw.normalization == RAW else raw
    index = pd.MultiIndex.from_product([range(k), city_order], names=['cluster', 'city'])
    means = pd.DataFrame(np.nan, index=index, columns=list(ratio.column_names))
    for cluster in range(k):
        for city in city_order:
            rows = (labels == cluster) & (cities == city)
            if rows.any():
                means.loc[(cluster, city)] = ratio.values[rows].mean(axis=0)

    logger.info(f"{int(flags.sum())}/{k} clusters shared across {city_order} (threshold {threshold})")
    return CrossCityReport(contingency=contingency, shared=shared, means=means, threshold=threshold)


@dataclass(frozen=True, eq=False)
class DistributionComparison:
    """Per-feature histograms on shared bins and pairwise KS statistics."""

    histograms: pd.DataFrame
    ks: pd.DataFrame


def feature_distribution_comparison(joint: Union[FeatureMatrix, JointMatrix], bins: int = DISTRIBUTION_BINS,
                                    columns: Optional[Sequence[str]] = None) -> DistributionComparison:
    """Raw-scale per-city feature distributions, binned on the union's range."""
    raw = joint.raw if isinstance(joint, JointMatrix) else joint
    cities = np.array([city for city, _ in raw.row_ids])
    city_order = list(_city_ranges(joint))
    names = list(columns) if columns is not None else list(raw.column_names)

    hist_rows = []
    ks_rows = []
    for name in names:
        values = raw.column(name)
        edges = np.histogram_bin_edges(values, bins=bins)
        per_city = {city: values[cities == city] for city in city_order}
        for city, sample in per_city.items():
            counts, _ = np.histogram(sample, bins=edges)
            for left, right, count in zip(edges[:-1], edges[1:], counts):
                hist_rows.append((name, city, float(left), float(right), int(count)))
        for a, b in combinations(per_city, 2):
            result = ks_2samp(per_city[a], per_city[b])
            ks_rows.append((name, a, b, float(result.statistic), float(result.pvalue)))

    return DistributionComparison(
        histograms=pd.DataFrame(hist_rows, columns=['feature', 'city', 'bin_left', 'bin_right', 'count']),
        ks=pd.DataFrame(ks_rows, columns=['feature', 'city_a', 'city_b', 'statistic', 'pvalue']),
    )


def write_cross_city_report(report: CrossCityReport, out_dir: str,
                            distributions: Optional[DistributionComparison] = None) -> List[str]:
    """contingency.csv, cluster_means_<city>.csv per city, and optional distribution tables."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    path = os.path.join(out_dir, 'contingency.csv')
    table = report.contingency.copy()
    table.columns = [str(c) for c in table.columns]
    table.insert(0, 'cluster', [int(k) + 1 for k in table.index])
    table['shared'] = report.shared.to_numpy()
    table.to_csv(path, index=False, lineterminator='\n')
    written.append(path)

    for city in report.contingency.columns:
        path = os.path.join(out_dir, f"cluster_means_{city}.csv")
        means = report.means.xs(city, level='city').T
        means.columns = [int(k) + 1 for k in means.columns]
        means.rename_axis('feature').to_csv(path, lineterminator='\n', float_format='%.17g', na_rep='NA')
        written.append(path)

    if distributions is not None:
        path = os.path.join(out_dir, 'feature_histograms.csv')
        distributions.histograms.to_csv(path, index=False, lineterminator='\n', float_format='%.17g')
        written.append(path)
        path = os.path.join(out_dir, 'feature_ks.csv')
        distributions.ks.to_csv(path, index=False, lineterminator='\n', float_format='%.17g')
        written.append(path)

    logger.info(f"Cross-city report written to {out_dir}")
    return written
