"""Per-BSU urban form features and the feature matrix."""

import json
import logging
import math

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import pandas as pd

from config import (
    CENTRALITY_COLUMN, FEATURE_CATALOG, WALKABLE_HIGHWAYS, WAY_SAMPLE_FRACTION,
)
from errors import FeatureError
from geometry import HexGrid, locate_many, project
from ingest import NODE, WAY, Entity, EntitySet

logger = logging.getLogger(__name__)

EXTENSIVE = 'extensive'
INTENSIVE = 'intensive'

RAW = 'raw'
ZSCORE = 'zscore'
MEAN_RATIO = 'mean_ratio'

# relative standard deviation below which a column counts as constant
_DEGENERATE_STD = 1e-12


@dataclass(frozen=True)
class TagSelector:
    """Matches entities carrying `key`, optionally with exactly `value`."""

    key: str
    value: Optional[str] = None

    def __post_init__(self):
        if not self.key:
            raise ValueError("selector key must be nonempty")

    @property
    def name(self) -> str:
        return self.key if self.value is None else f"{self.key}_{self.value}"

    def matches(self, entity: Entity) -> bool:
        if self.key not in entity.tags:
            return False
        return self.value is None or entity.tags[self.key] == self.value


@dataclass(frozen=True)
class NetworkMetric:
    """A street-network measure aggregated per cell."""

    network: str = 'walk'
    metric: str = 'degree_centrality'
    aggregation: str = EXTENSIVE

    @property
    def name(self) -> str:
        return self.metric


FeatureSpec = Union[TagSelector, NetworkMetric]


@dataclass(frozen=True)
class FeatureCatalog:
    features: Tuple[FeatureSpec, ...]
    walkable: FrozenSet[str] = WALKABLE_HIGHWAYS

    @property
    def names(self) -> List[str]:
        return [f.name for f in self.features]


def _spec_from_dict(entry: Dict) -> FeatureSpec:
    if 'network' in entry:
        network = NetworkMetric(
            network=entry['network'],
            metric=entry.get('metric', 'degree_centrality'),
            aggregation=entry.get('aggregation', EXTENSIVE),
        )
        if network.network != 'walk' or network.metric != 'degree_centrality':
            raise FeatureError(f"unsupported network feature {network.network}/{network.metric}")
        if network.aggregation not in (EXTENSIVE, INTENSIVE):
            raise FeatureError(f"unknown aggregation {network.aggregation!r}")
        return network
    if 'key' not in entry:
        raise FeatureError(f"catalogue entry needs 'key' or 'network': {entry}")
    return TagSelector(key=entry['key'], value=entry.get('value'))


def default_catalog() -> FeatureCatalog:
    return FeatureCatalog(features=tuple(_spec_from_dict(e) for e in FEATURE_CATALOG))


def load_catalog(path: Optional[str]) -> FeatureCatalog:
    """Read a TOML catalogue; None gives the built-in default."""
    if path is None:
        return default_catalog()
    with open(path, 'rb') as f:
        doc = tomllib.load(f)

    entries = doc.get('feature', [])
    features = tuple(_spec_from_dict(e) for e in entries) if entries else default_catalog().features
    walk = doc.get('walk', {})
    walkable = frozenset(walk['highway']) if 'highway' in walk else WALKABLE_HIGHWAYS

    names = [f.name for f in features]
    if len(set(names)) != len(names):
        raise FeatureError(f"duplicate feature names in catalogue {path}")
    logger.info(f"Loaded catalogue {path}: {len(features)} features")
    return FeatureCatalog(features=features, walkable=walkable)


def catalog_to_dict(catalog: FeatureCatalog) -> Dict:
    entries = []
    for spec in catalog.features:
        if isinstance(spec, TagSelector):
            entry = {'key': spec.key}
            if spec.value is not None:
                entry['value'] = spec.value
        else:
            entry = {'network': spec.network, 'metric': spec.metric, 'aggregation': spec.aggregation}
        entries.append(entry)
    return {'walk': {'highway': sorted(catalog.walkable)}, 'feature': entries}


@dataclass(frozen=True, eq=False)
class FeatureColumn:
    """One feature's value per grid cell, in grid order."""

    name: str
    values: np.ndarray
    aggregation: str = EXTENSIVE
    flagged_cells: Tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Rows are (city, cell_id) BSUs, columns named features."""

    row_ids: Tuple[Tuple[str, int], ...]
    column_names: Tuple[str, ...]
    values: np.ndarray
    normalization: str = RAW
    dropped_columns: Tuple[str, ...] = ()
    grid_size_m: Optional[float] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (len(self.row_ids), len(self.column_names)):
            raise FeatureError(
                f"matrix shape {values.shape} does not match "
                f"{len(self.row_ids)} rows x {len(self.column_names)} columns")
        if len(set(self.column_names)) != len(self.column_names):
            raise FeatureError("column names must be unique")
        if not np.all(np.isfinite(values)):
            raise FeatureError("feature matrix contains non-finite entries")
        object.__setattr__(self, 'values', values)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def cities(self) -> List[str]:
        seen = []
        for city, _ in self.row_ids:
            if city not in seen:
                seen.append(city)
        return seen

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.column_names.index(name)]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(self.column_names))
        frame.insert(0, 'cell_id', [cell for _, cell in self.row_ids])
        frame.insert(0, 'city', [city for city, _ in self.row_ids])
        return frame


def _way_samples(entity: Entity, grid: HexGrid) -> Tuple[np.ndarray, np.ndarray]:
    x, y = project(entity.lats, entity.lons, grid.frame)
    step = grid.size_m * WAY_SAMPLE_FRACTION
    xs, ys = [x[:1]], [y[:1]]
    for i in range(len(x) - 1):
        length = math.hypot(x[i + 1] - x[i], y[i + 1] - y[i])
        n = max(1, math.ceil(length / step))
        t = np.arange(1, n + 1) / n
        xs.append(x[i] + (x[i + 1] - x[i]) * t)
        ys.append(y[i] + (y[i + 1] - y[i]) * t)
    return np.concatenate(xs), np.concatenate(ys)


def way_cells(entity: Entity, grid: HexGrid) -> np.ndarray:
    """Retained cell_ids a way passes through, from polyline samples."""
    xs, ys = _way_samples(entity, grid)
    cells = locate_many(grid, xs, ys)
    return np.unique(cells[cells >= 0])


def count_feature(entities: EntitySet, grid: HexGrid, selector: TagSelector) -> FeatureColumn:
    """
    Count matching entities per cell.

    A node adds 1 to the cell it lies in; a way adds 1 to every cell it
    crosses, at most once per cell.
    """
    counts = np.zeros(len(grid), dtype=float)
    matched = [e for e in entities if selector.matches(e)]

    nodes = [e for e in matched if e.kind == NODE]
    if nodes:
        lats = np.array([n.geometry[0][0] for n in nodes])
        lons = np.array([n.geometry[0][1] for n in nodes])
        x, y = project(lats, lons, grid.frame)
        for cell_id in locate_many(grid, x, y):
            if cell_id >= 0:
                counts[grid.index_of(cell_id)] += 1

    for way in (e for e in matched if e.kind == WAY):
        for cell_id in way_cells(way, grid):
            counts[grid.index_of(cell_id)] += 1

    if not matched:
        logger.warning(f"Selector {selector.name} matched no entities; column is all zero")
    return FeatureColumn(name=selector.name, values=counts, aggregation=EXTENSIVE)


def entity_coverage(entities: EntitySet, grid: HexGrid) -> Tuple[int, int]:
    """(entities touching a retained cell, total entities)."""
    nodes = [e for e in entities if e.kind == NODE]
    covered = 0
    if nodes:
        x, y = project(np.array([n.geometry[0][0] for n in nodes]),
                       np.array([n.geometry[0][1] for n in nodes]), grid.frame)
        covered += int(np.count_nonzero(locate_many(grid, x, y) >= 0))
    covered += sum(1 for e in entities if e.kind == WAY and way_cells(e, grid).size)
    return covered, len(entities)


@dataclass
class WalkGraph:
    """Pedestrian street graph; vertices carry their lat/lon position."""

    graph: nx.Graph

    @property
    def n(self) -> int:
        return self.graph.number_of_nodes()

    @property
    def edge_count(self) -> int:
        return self.graph.number_of_edges()

    def positions(self) -> Tuple[List[int], np.ndarray, np.ndarray]:
        ids = sorted(self.graph.nodes)
        lats = np.array([self.graph.nodes[v]['lat'] for v in ids])
        lons = np.array([self.graph.nodes[v]['lon'] for v in ids])
        return ids, lats, lons


def build_walk_network(entities: EntitySet, walkable: FrozenSet[str] = WALKABLE_HIGHWAYS) -> WalkGraph:
    """Graph of consecutive vertices of walkable ways, merged on shared node ids."""
    graph = nx.Graph()
    for way in entities.ways:
        if way.tags.get('highway') not in walkable:
            continue
        for ref, (lat, lon) in zip(way.refs, way.geometry):
            graph.add_node(ref, lat=lat, lon=lon)
        for a, b in zip(way.refs, way.refs[1:]):
            if a != b:
                graph.add_edge(a, b)

    if graph.number_of_nodes() == 0:
        raise FeatureError("no walk network in extract")
    logger.info(f"Walk network: {graph.number_of_nodes()} vertices, {graph.number_of_edges()} edges")
    return WalkGraph(graph=graph)


def degree_centrality(graph: WalkGraph) -> Dict[int, float]:
    """degree(v) / (N - 1) for every vertex."""
    if graph.n < 2:
        raise FeatureError(f"degree centrality needs at least 2 vertices, got {graph.n}")
    return nx.degree_centrality(graph.graph)


def network_feature(grid: HexGrid, graph: WalkGraph, mode: str = EXTENSIVE,
                    name: str = CENTRALITY_COLUMN) -> FeatureColumn:
    """Sum (extensive) or average (intensive) vertex centrality per cell."""
    if mode not in (EXTENSIVE, INTENSIVE):
        raise FeatureError(f"unknown aggregation {mode!r}")

    centrality = degree_centrality(graph)
    ids, lats, lons = graph.positions()
    x, y = project(lats, lons, grid.frame)
    cells = locate_many(grid, x, y)

    sums = np.zeros(len(grid))
    counts = np.zeros(len(grid))
    for vertex, cell_id in zip(ids, cells):
        if cell_id >= 0:
            i = grid.index_of(cell_id)
            sums[i] += centrality[vertex]
            counts[i] += 1

    flagged: Tuple[int, ...] = ()
    if mode == EXTENSIVE:
        values = sums
    else:
        values = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
        flagged = tuple(int(c) for c, k in zip(grid.cell_ids, counts) if k == 0)
        if flagged:
            logger.warning(f"{len(flagged)} cells hold no walk-network vertex; {name} set to 0 there")
    return FeatureColumn(name=name, values=values, aggregation=mode, flagged_cells=flagged)


def compute_columns(entities: EntitySet, grid: HexGrid, catalog: FeatureCatalog,
                    threads: int = 1) -> List[FeatureColumn]:
    """Every catalogue column, in catalogue order."""
    graph: Optional[WalkGraph] = None
    if any(isinstance(spec, NetworkMetric) for spec in catalog.features):
        graph = build_walk_network(entities, catalog.walkable)

    def compute(spec: FeatureSpec) -> FeatureColumn:
        if isinstance(spec, NetworkMetric):
            return network_feature(grid, graph, spec.aggregation, spec.name)
        return count_feature(entities, grid, spec)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(compute, catalog.features))
    return [compute(spec) for spec in catalog.features]


def _catalog_rank(name: str, order: Sequence[str]) -> int:
    return order.index(name) if name in order else len(order)


def assemble_matrix(columns: Sequence[FeatureColumn], city_tag: str, grid: Optional[HexGrid] = None,
                    cell_ids: Optional[Sequence[int]] = None) -> FeatureMatrix:
    """
    Stack columns into a raw matrix, ordered as in the default catalogue.

    Columns outside the default catalogue keep their relative order after it.
    """
    if not columns:
        raise FeatureError("cannot assemble a matrix from zero columns")
    names = [c.name for c in columns]
    if len(set(names)) != len(names):
        duplicates = sorted({n for n in names if names.count(n) > 1})
        raise FeatureError(f"duplicate column names: {duplicates}")
    lengths = {len(c.values) for c in columns}
    if len(lengths) != 1:
        raise FeatureError(f"column lengths differ: {sorted(lengths)}")

    n_rows = lengths.pop()
    if grid is not None:
        cell_ids = grid.cell_ids.tolist()
    if cell_ids is None:
        cell_ids = list(range(n_rows))
    if len(cell_ids) != n_rows:
        raise FeatureError(f"{len(cell_ids)} cell ids for columns of length {n_rows}")

    order = default_catalog().names
    ranked = sorted(range(len(columns)), key=lambda i: (_catalog_rank(columns[i].name, order), i))
    ordered = [columns[i] for i in ranked]

    return FeatureMatrix(
        row_ids=tuple((city_tag, int(c)) for c in cell_ids),
        column_names=tuple(c.name for c in ordered),
        values=np.column_stack([c.values for c in ordered]),
        normalization=RAW,
        grid_size_m=grid.size_m if grid is not None else None,
    )


def standardize(matrix: FeatureMatrix, method: str = ZSCORE) -> FeatureMatrix:
    """
    Normalize a raw matrix column-wise.

    zscore uses the population standard deviation and drops constant columns;
    mean_ratio divides by the column mean and drops all-zero columns.
    """
    if matrix.normalization != RAW:
        raise FeatureError(f"standardize expects a raw matrix, got {matrix.normalization}")
    if method not in (ZSCORE, MEAN_RATIO):
        raise FeatureError(f"unknown normalization {method!r}")

    values = matrix.values
    mean = values.mean(axis=0)
    if method == ZSCORE:
        std = values.std(axis=0)
        keep = std > _DEGENERATE_STD * np.maximum(1.0, np.abs(mean))
    else:
        keep = mean != 0

    dropped = tuple(n for n, k in zip(matrix.column_names, keep) if not k)
    if not keep.any():
        raise FeatureError(f"all columns are degenerate under {method}: {list(dropped)}")
    if dropped:
        logger.warning(f"{method}: dropped degenerate columns {list(dropped)}")

    kept = values[:, keep]
    if method == ZSCORE:
        normalized = (kept - mean[keep]) / std[keep]
    else:
        normalized = kept / mean[keep]

    return replace(
        matrix,
        column_names=tuple(n for n, k in zip(matrix.column_names, keep) if k),
        values=normalized,
        normalization=method,
        dropped_columns=matrix.dropped_columns + dropped,
    )


def select_columns(matrix: FeatureMatrix, names: Sequence[str]) -> FeatureMatrix:
    missing = [n for n in names if n not in matrix.column_names]
    if missing:
        raise FeatureError(f"columns not in matrix: {missing}")
    idx = [matrix.column_names.index(n) for n in names]
    return replace(matrix, column_names=tuple(names), values=matrix.values[:, idx])


def write_features_csv(matrix: FeatureMatrix, path: str) -> None:
    """CSV with header city,cell_id,<features>, plus a .meta.json sidecar."""
    matrix.to_frame().to_csv(path, index=False, lineterminator='\n', float_format='%.17g')
    meta = {
        'normalization': matrix.normalization,
        'dropped_columns': list(matrix.dropped_columns),
        'grid_size_m': matrix.grid_size_m,
    }
    with open(f"{path}.meta.json", 'w', encoding='utf-8', newline='\n') as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write('\n')


def read_features_csv(path: str) -> FeatureMatrix:
    frame = pd.read_csv(path, dtype={'city': str})
    if list(frame.columns[:2]) != ['city', 'cell_id']:
        raise FeatureError(f"{path}: header must start with city,cell_id")
    meta: Dict = {}
    try:
        with open(f"{path}.meta.json", 'r', encoding='utf-8') as f:
            meta = json.load(f)
    except FileNotFoundError:
        logger.warning(f"No metadata sidecar for {path}; assuming a raw matrix")

    return FeatureMatrix(
        row_ids=tuple(zip(frame['city'].tolist(), (int(c) for c in frame['cell_id']))),
        column_names=tuple(frame.columns[2:]),
        values=frame.iloc[:, 2:].to_numpy(dtype=float),
        normalization=meta.get('normalization', RAW),
        dropped_columns=tuple(meta.get('dropped_columns', ())),
        grid_size_m=meta.get('grid_size_m'),
    )


def build_features(entities: EntitySet, grid: HexGrid, catalog: FeatureCatalog, city: str,
                   threads: int = 1) -> FeatureMatrix:
    """Catalogue columns for one city assembled into its raw matrix."""
    columns = compute_columns(entities, grid, catalog, threads=threads)
    matrix = assemble_matrix(columns, city, grid=grid)
    logger.info(f"Feature matrix for {city}: {matrix.shape[0]} cells x {matrix.shape[1]} features")
    return matrix
