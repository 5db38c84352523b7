"""End-to-end orchestrator: ingest, grid, features, model selection, fit, report."""

import logging
import os
import secrets
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from typing import Any, Callable, Dict, List, Optional, Tuple

import yaml

from config import (
    CENTRALITY_COLUMN, DEFAULT_K_RANGE, DEFAULT_THREADS, GMM_DEFAULTS, LOG_FORMAT, LOG_LEVEL,
    REFERENCE_RESULTS,
)
from errors import ConfigError, StageError
from features import (
    MEAN_RATIO, ZSCORE, build_features, catalog_to_dict, load_catalog, select_columns, standardize,
    write_features_csv,
)
from geometry import grid_to_geojson, make_hexgrid
from gmm import GmmConfig, assign, fit, save_model
from ingest import clip_to_boundary, parse_boundary_geojson, parse_osm_xml, write_entities
from report import write_geojson, write_labels, write_report
from selection import select_grid, select_k, write_bic_curve, write_grid_sweep

logger = logging.getLogger(__name__)

FAILED_MARKER = 'FAILED'
RESOLVED_CONFIG = 'resolved_config.yaml'


@dataclass(frozen=True)
class RunConfig:
    """Declarative description of one city run."""

    city: str
    osm: str
    boundary: str
    output_dir: str
    grid_size_m: Optional[float] = None
    sweep_sizes: Tuple[float, ...] = ()
    catalog: Optional[str] = None
    normalization: str = ZSCORE
    centrality_only: bool = False
    k: Optional[int] = None
    k_min: int = DEFAULT_K_RANGE[0]
    k_max: int = DEFAULT_K_RANGE[1]
    covariance: str = GMM_DEFAULTS['covariance']
    max_iter: int = GMM_DEFAULTS['max_iter']
    tol: float = GMM_DEFAULTS['tol']
    n_restarts: int = GMM_DEFAULTS['n_restarts']
    reg_var: float = GMM_DEFAULTS['reg_var']
    seed: Optional[int] = None
    threads: int = DEFAULT_THREADS
    log_level: str = LOG_LEVEL

    def gmm_config(self, n_components: int) -> GmmConfig:
        return GmmConfig(
            n_components=n_components, covariance=self.covariance, max_iter=self.max_iter,
            tol=self.tol, n_restarts=self.n_restarts, reg_var=self.reg_var,
            seed=self.seed if self.seed is not None else 0,
        )


def resolve_seed(seed: Optional[int]) -> int:
    """The given seed, or a fresh one that the caller must record."""
    if seed is not None:
        return seed
    seed = secrets.randbelow(2 ** 31)
    logger.info(f"No seed given; generated seed {seed}")
    return seed


def validate_run_config(config: RunConfig) -> RunConfig:
    """
    Check paths and parameters before any work starts.

    Raises:
        ConfigError: on the first problem found
    """
    if not config.city or not config.city.replace('_', '').replace('-', '').isalnum():
        raise ConfigError(f"city tag must be alphanumeric (with - or _), got {config.city!r}")
    for label, path in (('osm', config.osm), ('boundary', config.boundary), ('catalog', config.catalog)):
        if path is not None and not os.path.isfile(path):
            raise ConfigError(f"{label} file not found: {path}")
    if config.grid_size_m is None and len(config.sweep_sizes) < 2:
        raise ConfigError("set grid.size_m or at least 2 grid.sweep sizes")
    if config.grid_size_m is not None and not config.grid_size_m > 0:
        raise ConfigError(f"grid size must be positive, got {config.grid_size_m}")
    if any(not s > 0 for s in config.sweep_sizes):
        raise ConfigError(f"sweep sizes must be positive, got {list(config.sweep_sizes)}")
    if config.normalization not in (ZSCORE, MEAN_RATIO):
        raise ConfigError(f"normalization must be '{ZSCORE}' or '{MEAN_RATIO}'")
    if config.k is not None and config.k < 1:
        raise ConfigError(f"k must be >= 1, got {config.k}")
    if config.k is None and not 1 <= config.k_min <= config.k_max:
        raise ConfigError(f"invalid k range [{config.k_min}, {config.k_max}]")
    if config.threads < 1:
        raise ConfigError(f"threads must be >= 1, got {config.threads}")
    if config.log_level.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
        raise ConfigError(f"unknown log level {config.log_level!r}")
    try:
        config.gmm_config(config.k or config.k_max)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return config


# YAML section -> {yaml key: RunConfig field}
_SECTIONS: Dict[str, Dict[str, str]] = {
    'inputs': {'osm': 'osm', 'boundary': 'boundary'},
    'grid': {'size_m': 'grid_size_m', 'sweep': 'sweep_sizes'},
    'features': {'catalog': 'catalog', 'normalization': 'normalization',
                 'centrality_only': 'centrality_only'},
    'gmm': {'k': 'k', 'k_min': 'k_min', 'k_max': 'k_max', 'covariance': 'covariance',
            'max_iter': 'max_iter', 'tol': 'tol', 'n_restarts': 'n_restarts', 'reg_var': 'reg_var'},
}
_TOP_LEVEL = ('city', 'seed', 'output_dir', 'threads', 'log_level')


def _flatten(doc: Dict[str, Any]) -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in doc.items():
        if key == 'results':
            continue
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"'{key}' must be a mapping")
            unknown = set(value) - set(_SECTIONS[key])
            if unknown:
                raise ConfigError(f"unknown keys in '{key}': {sorted(unknown)}")
            flat.update({_SECTIONS[key][k]: v for k, v in value.items()})
        elif key in _TOP_LEVEL:
            flat[key] = value
        else:
            raise ConfigError(f"unknown config key '{key}'")
    return flat


def load_run_config(path: Optional[str] = None, **overrides: Any) -> RunConfig:
    """
    Build a RunConfig from a YAML file, with keyword overrides taking precedence.

    Overrides use RunConfig field names; None values are ignored.
    """
    values: Dict[str, Any] = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            try:
                doc = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"{path}: invalid YAML: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        values = _flatten(doc)
        logger.info(f"Loaded run configuration from {path}")

    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown settings: {sorted(unknown)}")
    missing = [name for name in ('city', 'osm', 'boundary', 'output_dir') if not values.get(name)]
    if missing:
        raise ConfigError(f"missing required settings: {missing}")

    try:
        if 'sweep_sizes' in values:
            values['sweep_sizes'] = tuple(float(s) for s in values['sweep_sizes'])
        if values.get('grid_size_m') is not None:
            values['grid_size_m'] = float(values['grid_size_m'])
        for name in ('tol', 'reg_var'):
            if name in values:
                values[name] = float(values[name])
        for name in ('k_min', 'k_max', 'max_iter', 'n_restarts', 'threads', 'seed'):
            if values.get(name) is not None:
                values[name] = int(values[name])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid numeric setting: {e}") from e
    if isinstance(values.get('k'), str):
        if values['k'].lower() == 'auto':
            values['k'] = None
        elif values['k'].strip().isdigit():
            values['k'] = int(values['k'])
        else:
            raise ConfigError(f"k must be an integer or 'auto', got {values['k']!r}")
    try:
        config = RunConfig(**values)
    except TypeError as e:
        raise ConfigError(f"invalid run configuration: {e}") from e
    return validate_run_config(config)


def resolved_config_dict(config: RunConfig, results: Dict[str, Any]) -> Dict[str, Any]:
    """The replayable YAML document: every setting that shapes outputs plus run results."""
    flat = asdict(config)
    doc: Dict[str, Any] = {'city': flat['city'], 'seed': flat['seed']}
    for section, keys in _SECTIONS.items():
        doc[section] = {key: flat[name] for key, name in keys.items()}
    doc['grid']['sweep'] = list(flat['sweep_sizes'])
    doc['results'] = results
    return doc


def setup_logging(level: str = LOG_LEVEL, log_file: Optional[str] = None):
    """Configure logging for the pipeline."""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=getattr(logging, level.upper()), format=LOG_FORMAT, handlers=handlers, force=True)


@dataclass
class RunState:
    """Artifacts handed from one stage to the next."""

    entities: Any = None
    boundary: Any = None
    grid: Any = None
    sweep: Any = None
    raw: Any = None
    standardized: Any = None
    bic_curve: Any = None
    model: Any = None
    labels: Any = None
    catalog: Any = None
    written: List[str] = field(default_factory=list)


class UrbanFormPipeline:
    """One city from OSM extract to report, stage by stage."""

    STAGES = ('ingest', 'grid', 'features', 'select_k', 'fit', 'report')

    def __init__(self, config: RunConfig):
        self.config = replace(config, seed=resolve_seed(config.seed))
        self.state = RunState()
        self.run_id = datetime.now(timezone.utc).isoformat()

    def path(self, *parts: str) -> str:
        return os.path.join(self.config.output_dir, *parts)

    def _write_failed_marker(self, stage: str, error: Exception):
        try:
            with open(self.path(FAILED_MARKER), 'w', encoding='utf-8', newline='\n') as f:
                f.write(f"{stage}: {error}\n")
        except OSError as e:
            logger.error(f"Could not write {FAILED_MARKER} marker: {e}")

    def _run_stage(self, name: str, step: Callable[[], None]):
        logger.info(f"Stage {name}: starting")
        try:
            step()
        except Exception as e:
            logger.error(f"✗ Stage {name} failed: {e}", exc_info=True)
            self._write_failed_marker(name, e)
            raise StageError(name, e) from e
        logger.info(f"✓ Stage {name} complete")

    def run_ingestion(self):
        config = self.config
        with open(config.osm, 'rb') as f:
            entities = parse_osm_xml(f)
        with open(config.boundary, 'r', encoding='utf-8') as f:
            self.state.boundary = parse_boundary_geojson(f)
        self.state.entities = clip_to_boundary(entities, self.state.boundary)
        path = self.path('entities.ndjson')
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            write_entities(self.state.entities, f)
        self.state.written.append(path)

    def run_grid(self):
        config = self.config
        self.state.catalog = load_catalog(config.catalog)
        size = config.grid_size_m
        if size is None:
            self.state.sweep = select_grid(
                self.state.entities, self.state.boundary, self.state.catalog, config.city,
                config.sweep_sizes, (config.k_min, config.k_max), config.gmm_config(config.k_min),
                threads=config.threads,
            )
            path = self.path('silhouette_sweep.csv')
            write_grid_sweep(self.state.sweep, path)
            self.state.written.append(path)
            size = self.state.sweep.best_size
        self.state.grid = make_hexgrid(self.state.boundary, size)
        path = self.path('grid.geojson')
        write_geojson(grid_to_geojson(self.state.grid, config.city), path)
        self.state.written.append(path)

    def run_features(self):
        config = self.config
        raw = build_features(self.state.entities, self.state.grid, self.state.catalog, config.city,
                             threads=config.threads)
        if config.centrality_only:
            raw = select_columns(raw, [CENTRALITY_COLUMN])
        self.state.raw = raw
        self.state.standardized = standardize(raw, config.normalization)
        for name, matrix in (('features.csv', raw), (f"features_{config.normalization}.csv",
                                                     self.state.standardized)):
            path = self.path(name)
            write_features_csv(matrix, path)
            self.state.written.append(path)

    def run_select_k(self):
        config = self.config
        if config.k is not None:
            logger.info(f"Using fixed K={config.k}")
            return
        k_max = min(config.k_max, self.state.standardized.shape[0])
        self.state.bic_curve = select_k(self.state.standardized, (config.k_min, k_max),
                                        config.gmm_config(config.k_min), threads=config.threads)
        path = self.path('bic.csv')
        write_bic_curve(self.state.bic_curve, path)
        self.state.written.append(path)

    def run_fit(self):
        config = self.config
        if self.state.bic_curve is not None:
            model = self.state.bic_curve.best_model
        else:
            model = fit(self.state.standardized, config.gmm_config(config.k), threads=config.threads)
        self.state.model = model
        self.state.labels = assign(model, self.state.standardized)

        path = self.path('model.json')
        save_model(model, path, column_names=self.state.standardized.column_names)
        self.state.written.append(path)
        path = self.path('labels.csv')
        write_labels(self.state.standardized.row_ids, self.state.labels, path)
        self.state.written.append(path)

    def run_report(self):
        self.state.written.extend(write_report(
            self.path('report'), self.state.raw, self.state.standardized, self.state.labels,
            {self.config.city: self.state.grid}, self.state.model.n_components,
            bic_curve=self.state.bic_curve, sweep=self.state.sweep,
        ))

    def log_reference(self):
        reference = REFERENCE_RESULTS.get(self.config.city.lower())
        if reference is None:
            return
        logger.info(f"Published reference for {self.config.city}: grid {reference['grid_size_m']} m, "
                    f"{reference['n_clusters']} clusters (this run: grid {self.state.grid.size_m} m, "
                    f"{self.state.model.n_components} clusters)")
        if self.config.city.lower() == 'philadelphia':
            logger.warning("Published Philadelphia figures show 8 clusters while its summary table "
                           "lists 7; 7 is used as the reference")

    def write_resolved_config(self):
        results = {
            'grid_size_m': self.state.grid.size_m,
            'n_cells': len(self.state.grid),
            'selected_k': self.state.model.n_components,
            'columns': list(self.state.standardized.column_names),
            'dropped_columns': list(self.state.standardized.dropped_columns),
            'catalog': catalog_to_dict(self.state.catalog),
        }
        path = self.path(RESOLVED_CONFIG)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            yaml.safe_dump(resolved_config_dict(self.config, results), f, sort_keys=False)
        self.state.written.append(path)

    def run(self) -> Dict:
        """
        Execute every stage in order.

        Returns:
            Summary of the run

        Raises:
            StageError: naming the first stage that failed
        """
        start_time = datetime.now(timezone.utc)
        logger.info("=" * 60)
        logger.info(f"Starting urban form run {self.run_id} for {self.config.city} (seed {self.config.seed})")
        logger.info("=" * 60)

        os.makedirs(self.config.output_dir, exist_ok=True)
        if os.path.exists(self.path(FAILED_MARKER)):
            os.remove(self.path(FAILED_MARKER))

        steps = {
            'ingest': self.run_ingestion,
            'grid': self.run_grid,
            'features': self.run_features,
            'select_k': self.run_select_k,
            'fit': self.run_fit,
            'report': self.run_report,
        }
        for name in self.STAGES:
            self._run_stage(name, steps[name])
        self._run_stage('resolve', self.write_resolved_config)
        self.log_reference()

        duration = (datetime.now(timezone.utc) - start_time).total_seconds()
        summary = {
            'run_id': self.run_id,
            'city': self.config.city,
            'seed': self.config.seed,
            'grid_size_m': self.state.grid.size_m,
            'n_cells': len(self.state.grid),
            'n_clusters': self.state.model.n_components,
            'files': len(self.state.written),
            'duration_seconds': duration,
            'status': 'success',
        }
        logger.info("=" * 60)
        logger.info(f"Run complete: {summary['n_clusters']} clusters over {summary['n_cells']} cells")
        logger.info(f"Duration: {duration:.2f} seconds")
        logger.info("=" * 60)
        return summary


def run_pipeline(config: RunConfig) -> Dict:
    """Validate and execute a run; StageError propagates with the failing stage."""
    return UrbanFormPipeline(validate_run_config(config)).run()
