"""Result artifacts: cluster-mean tables, correlations, distributions and maps."""

import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import DISTRIBUTION_BINS, REPORT_DECIMALS
from errors import ReportError
from features import MEAN_RATIO, RAW, FeatureMatrix, standardize
from geometry import HexGrid, cell_polygon_lonlat
from selection import BicCurve, GridSweepResult, write_bic_curve, write_grid_sweep

logger = logging.getLogger(__name__)

NOT_AVAILABLE = 'NA'


@dataclass(frozen=True, eq=False)
class ClusterMeansTable:
    """Features (rows) by clusters 1..K (columns) of mean-ratio values."""

    table: pd.DataFrame
    cluster_sizes: np.ndarray

    @property
    def n_clusters(self) -> int:
        return self.table.shape[1]

    def weighted_average(self) -> pd.Series:
        """Cluster-size weighted mean of each row; 1.0 for every feature."""
        weights = self.cluster_sizes / self.cluster_sizes.sum()
        filled = self.table.fillna(0.0).to_numpy()
        return pd.Series(filled @ weights, index=self.table.index)

    def rounded(self, decimals: int = REPORT_DECIMALS) -> pd.DataFrame:
        return self.table.round(decimals)


def _check_labels(labels: Sequence[int], n_rows: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (n_rows,):
        raise ReportError(f"{labels.size} labels for {n_rows} rows")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        raise ReportError("labels must be integers")
    if labels.size and labels.min() < 0:
        raise ReportError("labels must be non-negative")
    return labels.astype(int)


def cluster_means(raw: FeatureMatrix, labels: Sequence[int], n_clusters: Optional[int] = None) -> ClusterMeansTable:
    """
    Per-cluster mean of each mean-ratio normalized feature.

    Empty clusters get a column of NaN (written as NA) and a warning.
    """
    if raw.normalization != RAW:
        raise ReportError(f"cluster_means expects a raw matrix, got {raw.normalization}")
    labels = _check_labels(labels, raw.shape[0])
    k = n_clusters if n_clusters is not None else int(labels.max()) + 1
    if labels.size and labels.max() >= k:
        raise ReportError(f"label {int(labels.max())} out of range for {k} clusters")

    ratio = standardize(raw, MEAN_RATIO)
    sizes = np.bincount(labels, minlength=k)
    values = np.full((ratio.shape[1], k), np.nan)
    for cluster in range(k):
        members = labels == cluster
        if members.any():
            values[:, cluster] = ratio.values[members].mean(axis=0)
        else:
            logger.warning(f"Cluster {cluster + 1} is empty; its means are not available")

    table = pd.DataFrame(values, index=pd.Index(ratio.column_names, name='feature'),
                         columns=[cluster + 1 for cluster in range(k)])
    return ClusterMeansTable(table=table, cluster_sizes=sizes)


def cluster_profiles(means: ClusterMeansTable) -> pd.DataFrame:
    """Clusters (rows) by features, each feature scaled to [0, 1] by its largest cluster mean."""
    table = means.table.fillna(0.0)
    peak = table.max(axis=1)
    scaled = table.div(peak.where(peak > 0), axis=0).fillna(0.0)
    profiles = scaled.T
    profiles.index.name = 'cluster'
    return profiles


def correlation_matrix(matrix: FeatureMatrix) -> pd.DataFrame:
    """Pearson correlation between feature columns."""
    if matrix.shape[0] < 2:
        raise ReportError("correlation needs at least 2 rows")
    corr = np.corrcoef(matrix.values, rowvar=False)
    corr = np.atleast_2d(corr)
    np.fill_diagonal(corr, 1.0)
    names = list(matrix.column_names)
    return pd.DataFrame(corr, index=pd.Index(names, name='feature'), columns=names)


def export_choropleth(grids: Mapping[str, HexGrid], row_ids: Sequence[Tuple[str, int]],
                      labels: Sequence[int], raw: Optional[FeatureMatrix] = None) -> Dict:
    """
    One hexagon Feature per clustered BSU, labelled with its city and cluster.

    The `cluster` property is 1-based. When `raw` is given, its feature
    values for the same rows are attached as properties.
    """
    labels = _check_labels(labels, len(row_ids))
    raw_index: Dict[Tuple[str, int], int] = {}
    if raw is not None:
        raw_index = {rid: i for i, rid in enumerate(raw.row_ids)}

    features = []
    for (city, cell_id), label in zip(row_ids, labels):
        grid = grids.get(city)
        if grid is None:
            raise ReportError(f"no grid for city '{city}'")
        if grid.index_of(cell_id) is None:
            raise ReportError(f"cell {cell_id} is not part of the {city} grid")
        properties = {'cell_id': int(cell_id), 'city': city, 'cluster': int(label) + 1}
        if raw is not None:
            i = raw_index.get((city, int(cell_id)))
            if i is None:
                raise ReportError(f"no raw feature row for {city}/{cell_id}")
            properties.update({name: float(v) for name, v in zip(raw.column_names, raw.values[i])})
        features.append({
            'type': 'Feature',
            'properties': properties,
            'geometry': {'type': 'Polygon', 'coordinates': [cell_polygon_lonlat(grid, grid.cell(cell_id))]},
        })
    return {'type': 'FeatureCollection', 'features': features}


def read_choropleth(doc: Dict) -> List[Tuple[str, int, int]]:
    """(city, cell_id, 0-based label) per feature, in document order."""
    if doc.get('type') != 'FeatureCollection':
        raise ReportError("choropleth must be a FeatureCollection")
    try:
        return [(str(f['properties']['city']), int(f['properties']['cell_id']),
                 int(f['properties']['cluster']) - 1) for f in doc['features']]
    except (KeyError, TypeError, ValueError) as e:
        raise ReportError(f"malformed choropleth feature: {e}") from e


def write_geojson(doc: Dict, path: str) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(doc, f, indent=1, ensure_ascii=False)
        f.write('\n')


def cluster_distributions(raw: FeatureMatrix, labels: Sequence[int], name: str,
                          n_clusters: int, bins: int = DISTRIBUTION_BINS) -> pd.DataFrame:
    """Histogram counts of one raw feature per cluster on bins shared by all clusters."""
    labels = _check_labels(labels, raw.shape[0])
    values = raw.column(name)
    edges = np.histogram_bin_edges(values, bins=bins)
    frame = pd.DataFrame({'bin_left': edges[:-1], 'bin_right': edges[1:]})
    for cluster in range(n_clusters):
        counts, _ = np.histogram(values[labels == cluster], bins=edges)
        frame[f"cluster_{cluster + 1}"] = counts
    return frame


def write_distributions(raw: FeatureMatrix, labels: Sequence[int], out_dir: str,
                        n_clusters: int, bins: int = DISTRIBUTION_BINS) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name in raw.column_names:
        path = os.path.join(out_dir, f"{name}.csv")
        cluster_distributions(raw, labels, name, n_clusters, bins).to_csv(
            path, index=False, lineterminator='\n', float_format='%.17g')
        written.append(path)
    return written


def write_report(out_dir: str, raw: FeatureMatrix, standardized: FeatureMatrix, labels: Sequence[int],
                 grids: Mapping[str, HexGrid], n_clusters: int, bic_curve: Optional[BicCurve] = None,
                 sweep: Optional[GridSweepResult] = None) -> List[str]:
    """
    Write the report tree under out_dir.

    cluster_means.csv, cluster_profiles.csv, correlations.csv,
    distributions/<feature>.csv, map_<city>.geojson and, when given,
    bic.csv and silhouette_sweep.csv.
    """
    if raw.row_ids != standardized.row_ids:
        raise ReportError("raw and standardized matrices describe different rows")
    labels = _check_labels(labels, raw.shape[0])
    os.makedirs(out_dir, exist_ok=True)
    written: List[str] = []

    means = cluster_means(raw, labels, n_clusters)
    path = os.path.join(out_dir, 'cluster_means.csv')
    means.rounded().to_csv(path, lineterminator='\n', na_rep=NOT_AVAILABLE)
    written.append(path)

    path = os.path.join(out_dir, 'cluster_profiles.csv')
    cluster_profiles(means).round(REPORT_DECIMALS).to_csv(path, lineterminator='\n')
    written.append(path)

    path = os.path.join(out_dir, 'correlations.csv')
    correlation_matrix(standardized).to_csv(path, lineterminator='\n', float_format='%.17g',
                                            na_rep=NOT_AVAILABLE)
    written.append(path)

    written.extend(write_distributions(raw, labels, os.path.join(out_dir, 'distributions'), n_clusters))

    for city in raw.cities:
        rows = [i for i, (c, _) in enumerate(raw.row_ids) if c == city]
        doc = export_choropleth(grids, [raw.row_ids[i] for i in rows], labels[rows], raw=raw)
        path = os.path.join(out_dir, f"map_{city}.geojson")
        write_geojson(doc, path)
        written.append(path)

    if bic_curve is not None:
        path = os.path.join(out_dir, 'bic.csv')
        write_bic_curve(bic_curve, path)
        written.append(path)
    if sweep is not None:
        path = os.path.join(out_dir, 'silhouette_sweep.csv')
        write_grid_sweep(sweep, path)
        written.append(path)

    logger.info(f"Report written to {out_dir}: {len(written)} files")
    return written


def write_labels(row_ids: Sequence[Tuple[str, int]], labels: Sequence[int], path: str) -> None:
    """city,cell_id,label CSV with 0-based labels."""
    labels = _check_labels(labels, len(row_ids))
    frame = pd.DataFrame({
        'city': [city for city, _ in row_ids],
        'cell_id': [int(cell) for _, cell in row_ids],
        'label': labels,
    })
    frame.to_csv(path, index=False, lineterminator='\n')


def read_labels(path: str) -> Tuple[List[Tuple[str, int]], np.ndarray]:
    frame = pd.read_csv(path, dtype={'city': str})
    if list(frame.columns) != ['city', 'cell_id', 'label']:
        raise ReportError(f"{path}: expected header city,cell_id,label")
    row_ids = list(zip(frame['city'].tolist(), (int(c) for c in frame['cell_id'])))
    return row_ids, frame['label'].to_numpy(dtype=int)
