"""
Command-line interface for the urban form toolkit.

Each pipeline stage is a subcommand reading and writing the documented
interchange files, so expensive stages (ingestion, feature extraction) can
be cached while clustering parameters are iterated on. `run` executes the
whole pipeline from a YAML run configuration.

Exit codes: 0 success, 2 invalid input or configuration, 3 stage failure.
"""

import json
import logging
import os
import shutil
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional

import typer

from compare import (
    PER_CITY_GRID, centrality_only_matrix, cross_city_report, feature_distribution_comparison,
    join_cities, normalize_mode, write_cross_city_report,
)
from config import DEFAULT_K_RANGE, DEFAULT_THREADS, GMM_DEFAULTS, LOG_LEVEL, SHARED_CLUSTER_THRESHOLD
from errors import ConfigError, UrbanFormError
from features import (
    MEAN_RATIO, RAW, ZSCORE, build_features, entity_coverage, load_catalog, read_features_csv, standardize,
    write_features_csv,
)
from geometry import grid_to_geojson, make_hexgrid, read_grid
from gmm import GmmConfig, assign, fit, save_model
from ingest import parse_boundary_geojson, parse_osm_xml, read_entities, run_ingestion
from pipeline import load_run_config, resolve_seed, run_pipeline, setup_logging
from report import export_choropleth, read_labels, write_geojson, write_labels, write_report
from selection import select_grid, select_k, write_bic_curve, write_grid_sweep

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_STAGE = 3

app = typer.Typer(
    name="urbanform",
    help="Classify urban form from OpenStreetMap data with Gaussian mixture clustering",
    add_completion=False,
)


@app.callback()
def main(
    ctx: typer.Context,
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed for every random choice (generated if omitted)"),
    threads: Optional[int] = typer.Option(None, "--threads", help="Worker threads [default: URBANFORM_THREADS or 1]"),
    log_level: Optional[str] = typer.Option(None, "--log-level", help="DEBUG, INFO, WARNING or ERROR"),
    log_file: Optional[Path] = typer.Option(None, "--log-file", help="Also write logs to this file"),
):
    """Global options shared by every subcommand."""
    if threads is not None and threads < 1:
        typer.echo("Error: --threads must be >= 1", err=True)
        raise typer.Exit(EXIT_CONFIG)
    if log_level is not None and log_level.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
        typer.echo(f"Error: unknown log level {log_level}", err=True)
        raise typer.Exit(EXIT_CONFIG)
    setup_logging(log_level or LOG_LEVEL, str(log_file) if log_file else None)
    # *_flag entries stay None when the option was not given
    ctx.obj = {
        'seed': seed,
        'threads': threads or DEFAULT_THREADS,
        'threads_flag': threads,
        'log_level_flag': log_level.upper() if log_level else None,
        'log_file': str(log_file) if log_file else None,
    }


@contextmanager
def _exit_codes():
    """Map toolkit errors onto the documented exit codes."""
    try:
        yield
    except (ConfigError, FileNotFoundError) as e:
        logger.error(f"Invalid input: {e}")
        typer.echo(f"Error: {e}", err=True)
        raise typer.Exit(EXIT_CONFIG)
    except UrbanFormError as e:
        logger.error(f"Failed: {e}", exc_info=True)
        typer.echo(f"Error: {e}", err=True)
        raise typer.Exit(EXIT_STAGE)


def _require(path: Path, label: str):
    if not path.is_file():
        raise ConfigError(f"{label} file not found: {path}")


def _k_option(k: str) -> Optional[int]:
    if k.lower() == 'auto':
        return None
    try:
        value = int(k)
    except ValueError:
        raise ConfigError(f"--k must be an integer or 'auto', got {k!r}")
    if value < 1:
        raise ConfigError(f"--k must be >= 1, got {value}")
    return value


def _gmm_config(ctx: typer.Context, n_components: int, covariance: str, n_restarts: int) -> GmmConfig:
    try:
        return GmmConfig(n_components=n_components, covariance=covariance, n_restarts=n_restarts,
                         seed=ctx.obj['seed'])
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _resolve_ctx_seed(ctx: typer.Context):
    ctx.obj['seed'] = resolve_seed(ctx.obj['seed'])


def _load_grid(path: Path):
    _require(path, 'grid')
    with open(path, 'r', encoding='utf-8') as f:
        return read_grid(json.load(f))


def _standardized(path: Path, normalization: str = ZSCORE):
    _require(path, 'features')
    matrix = read_features_csv(str(path))
    return standardize(matrix, normalization) if matrix.normalization == RAW else matrix


@app.command()
def ingest(
    osm: Path = typer.Option(..., "--osm", help="OSM XML extract"),
    boundary: Path = typer.Option(..., "--boundary", help="GeoJSON study-area boundary"),
    out: Path = typer.Option(..., "--out", help="Entity interchange file to write"),
):
    """Parse an OSM extract and clip it to the boundary."""
    with _exit_codes():
        _require(osm, 'osm')
        _require(boundary, 'boundary')
        entities = run_ingestion(str(osm), str(boundary), str(out))
        typer.echo(f"{len(entities)} entities written to {out}")


@app.command()
def grid(
    boundary: Path = typer.Option(..., "--boundary", help="GeoJSON study-area boundary"),
    size: float = typer.Option(..., "--size", help="Hexagon centre spacing in meters"),
    out: Path = typer.Option(..., "--out", help="Grid GeoJSON to write"),
    entities: Optional[Path] = typer.Option(
        None, "--entities", help="Entity file from `ingest`; reports how many entities the grid covers"),
    city: Optional[str] = typer.Option(
        None, "--city", help="City tag recorded on every cell [default: boundary name]"),
):
    """
    Tessellate the boundary with hexagonal cells.

    The grid depends only on the boundary and the size. With --entities the
    command also reports how many entities touch a retained cell; the rest
    are invisible to feature extraction at this size.
    """
    with _exit_codes():
        _require(boundary, 'boundary')
        if entities is not None:
            _require(entities, 'entities')
        with open(boundary, 'r', encoding='utf-8') as f:
            area = parse_boundary_geojson(f)
        hexgrid = make_hexgrid(area, size)
        write_geojson(grid_to_geojson(hexgrid, city or area.name), str(out))
        typer.echo(f"{len(hexgrid)} cells written to {out}")
        if entities is not None:
            with open(entities, 'r', encoding='utf-8') as f:
                covered, total = entity_coverage(read_entities(f), hexgrid)
            if covered < total:
                logger.warning(f"{total - covered} of {total} entities fall in no retained cell")
            typer.echo(f"{covered} of {total} entities covered")


@app.command()
def features(
    ctx: typer.Context,
    entities: Path = typer.Option(..., "--entities", help="Entity interchange file"),
    grid_path: Path = typer.Option(..., "--grid", help="Grid GeoJSON from `grid`"),
    catalog: Optional[Path] = typer.Option(None, "--catalog", help="TOML feature catalogue"),
    normalize: str = typer.Option(RAW, "--normalize", help="raw, zscore or mean_ratio"),
    out: Path = typer.Option(..., "--out", help="Feature CSV to write"),
):
    """Compute the catalogue's per-cell features."""
    with _exit_codes():
        if normalize not in (RAW, ZSCORE, MEAN_RATIO):
            raise ConfigError(f"--normalize must be raw, zscore or mean_ratio, got {normalize!r}")
        _require(entities, 'entities')
        if catalog is not None:
            _require(catalog, 'catalog')
        hexgrid, city = _load_grid(grid_path)
        with open(entities, 'r', encoding='utf-8') as f:
            entity_set = read_entities(f)
        matrix = build_features(entity_set, hexgrid, load_catalog(str(catalog) if catalog else None), city,
                                threads=ctx.obj['threads'])
        if normalize != RAW:
            matrix = standardize(matrix, normalize)
        write_features_csv(matrix, str(out))
        typer.echo(f"{matrix.shape[0]} x {matrix.shape[1]} feature matrix written to {out}")


@app.command("select-k")
def select_k_command(
    ctx: typer.Context,
    features_path: Path = typer.Option(..., "--features", help="Feature CSV"),
    k_min: int = typer.Option(DEFAULT_K_RANGE[0], "--k-min"),
    k_max: int = typer.Option(DEFAULT_K_RANGE[1], "--k-max"),
    covariance: str = typer.Option(GMM_DEFAULTS['covariance'], "--covariance", help="diagonal or full"),
    restarts: int = typer.Option(GMM_DEFAULTS['n_restarts'], "--restarts"),
    out: Path = typer.Option(..., "--out", help="BIC curve CSV to write"),
):
    """Sweep the number of clusters and report the BIC curve."""
    with _exit_codes():
        _resolve_ctx_seed(ctx)
        matrix = _standardized(features_path)
        curve = select_k(matrix, (k_min, k_max), _gmm_config(ctx, k_min, covariance, restarts),
                         threads=ctx.obj['threads'])
        write_bic_curve(curve, str(out))
        typer.echo(f"BIC selects K={curve.best_k}")


@app.command("select-grid")
def select_grid_command(
    ctx: typer.Context,
    osm: Path = typer.Option(..., "--osm", help="OSM XML extract"),
    boundary: Path = typer.Option(..., "--boundary", help="GeoJSON study-area boundary"),
    sizes: str = typer.Option(..., "--sizes", help="Comma-separated grid sizes in meters"),
    city: str = typer.Option("city", "--city"),
    catalog: Optional[Path] = typer.Option(None, "--catalog", help="TOML feature catalogue"),
    k_min: int = typer.Option(DEFAULT_K_RANGE[0], "--k-min"),
    k_max: int = typer.Option(DEFAULT_K_RANGE[1], "--k-max"),
    covariance: str = typer.Option(GMM_DEFAULTS['covariance'], "--covariance"),
    restarts: int = typer.Option(GMM_DEFAULTS['n_restarts'], "--restarts"),
    out: Path = typer.Option(..., "--out", help="Sweep CSV to write"),
):
    """Sweep grid sizes and pick the one with the best silhouette."""
    with _exit_codes():
        _require(osm, 'osm')
        _require(boundary, 'boundary')
        try:
            size_list = [float(s) for s in sizes.split(',') if s.strip()]
        except ValueError:
            raise ConfigError(f"--sizes must be comma-separated numbers, got {sizes!r}")
        _resolve_ctx_seed(ctx)
        with open(osm, 'rb') as f:
            entity_set = parse_osm_xml(f)
        with open(boundary, 'r', encoding='utf-8') as f:
            area = parse_boundary_geojson(f)
        result = select_grid(entity_set, area, load_catalog(str(catalog) if catalog else None), city,
                             size_list, (k_min, k_max), _gmm_config(ctx, k_min, covariance, restarts),
                             threads=ctx.obj['threads'])
        write_grid_sweep(result, str(out))
        typer.echo(f"Silhouette selects grid size {result.best_size:g} m")


@app.command()
def cluster(
    ctx: typer.Context,
    features_path: Path = typer.Option(..., "--features", help="Feature CSV (raw is z-scored first)"),
    k: str = typer.Option("auto", "--k", help="Number of clusters, or 'auto' for BIC selection"),
    k_min: int = typer.Option(DEFAULT_K_RANGE[0], "--k-min"),
    k_max: int = typer.Option(DEFAULT_K_RANGE[1], "--k-max"),
    covariance: str = typer.Option(GMM_DEFAULTS['covariance'], "--covariance"),
    restarts: int = typer.Option(GMM_DEFAULTS['n_restarts'], "--restarts"),
    centrality_only: bool = typer.Option(False, "--centrality-only", help="Cluster on degree centrality alone"),
    out_model: Path = typer.Option(..., "--out-model", help="Model JSON to write"),
    out_labels: Path = typer.Option(..., "--out-labels", help="Labels CSV to write"),
    out_bic: Optional[Path] = typer.Option(None, "--out-bic", help="BIC curve CSV when --k auto"),
):
    """Fit the Gaussian mixture and assign every cell to a cluster."""
    with _exit_codes():
        fixed_k = _k_option(k)
        _resolve_ctx_seed(ctx)
        _require(features_path, 'features')
        matrix = read_features_csv(str(features_path))
        if centrality_only:
            matrix = centrality_only_matrix(matrix)
        if matrix.normalization == RAW:
            matrix = standardize(matrix, ZSCORE)

        if fixed_k is None:
            curve = select_k(matrix, (k_min, min(k_max, matrix.shape[0])),
                             _gmm_config(ctx, k_min, covariance, restarts), threads=ctx.obj['threads'])
            model = curve.best_model
            if out_bic is not None:
                write_bic_curve(curve, str(out_bic))
        else:
            model = fit(matrix, _gmm_config(ctx, fixed_k, covariance, restarts), threads=ctx.obj['threads'])

        save_model(model, str(out_model), column_names=matrix.column_names)
        write_labels(matrix.row_ids, assign(model, matrix), str(out_labels))
        typer.echo(f"{model.n_components} clusters fitted; labels written to {out_labels}")


@app.command()
def compare(
    ctx: typer.Context,
    features_paths: List[Path] = typer.Option(..., "--features", help="Raw feature CSV per city (repeat)"),
    grid_paths: Optional[List[Path]] = typer.Option(None, "--grid", help="Grid GeoJSON per city for maps (repeat)"),
    mode: str = typer.Option(PER_CITY_GRID, "--mode", help="uniform-grid or per-city-grid"),
    k: str = typer.Option("auto", "--k", help="Number of clusters, or 'auto'"),
    k_min: int = typer.Option(DEFAULT_K_RANGE[0], "--k-min"),
    k_max: int = typer.Option(DEFAULT_K_RANGE[1], "--k-max"),
    covariance: str = typer.Option(GMM_DEFAULTS['covariance'], "--covariance"),
    restarts: int = typer.Option(GMM_DEFAULTS['n_restarts'], "--restarts"),
    centrality_only: bool = typer.Option(False, "--centrality-only"),
    threshold: float = typer.Option(SHARED_CLUSTER_THRESHOLD, "--threshold",
                                    help="Share of a cluster each city must hold for it to count as shared"),
    out: Path = typer.Option(..., "--out", help="Output directory"),
):
    """Cluster several cities jointly and report shared and city-specific clusters."""
    with _exit_codes():
        fixed_k = _k_option(k)
        normalize_mode(mode)
        _resolve_ctx_seed(ctx)
        for path in features_paths:
            _require(path, 'features')
        matrices = [read_features_csv(str(p)) for p in features_paths]
        joint = join_cities(matrices, mode=mode)
        if centrality_only:
            joint = centrality_only_matrix(joint)

        if fixed_k is None:
            curve = select_k(joint.matrix, (k_min, min(k_max, joint.matrix.shape[0])),
                             _gmm_config(ctx, k_min, covariance, restarts), threads=ctx.obj['threads'])
            model = curve.best_model
        else:
            curve = None
            model = fit(joint.matrix, _gmm_config(ctx, fixed_k, covariance, restarts), threads=ctx.obj['threads'])
        labels = assign(model, joint.matrix)

        os.makedirs(out, exist_ok=True)
        shared = cross_city_report(labels, joint, threshold=threshold, n_clusters=model.n_components)
        write_cross_city_report(shared, str(out), feature_distribution_comparison(joint))
        save_model(model, str(out / 'model.json'), column_names=joint.matrix.column_names)
        write_labels(joint.row_ids, labels, str(out / 'labels.csv'))
        if curve is not None:
            write_bic_curve(curve, str(out / 'bic.csv'))

        grids: Dict = {}
        for path in grid_paths or []:
            hexgrid, city = _load_grid(path)
            grids[city] = hexgrid
        for city in joint.cities:
            if city not in grids:
                logger.warning(f"No grid given for {city}; skipping its map")
                continue
            rows = joint.city_rows(city)
            doc = export_choropleth(grids, joint.row_ids[rows], labels[rows], raw=joint.raw)
            write_geojson(doc, str(out / f"map_{city}.geojson"))

        typer.echo(f"{shared.n_shared}/{model.n_components} clusters shared; report written to {out}")


@app.command()
def report(
    features_path: Path = typer.Option(..., "--features", help="Raw feature CSV"),
    labels_path: Path = typer.Option(..., "--labels", help="Labels CSV from `cluster`"),
    grid_paths: List[Path] = typer.Option(..., "--grid", help="Grid GeoJSON per city (repeat)"),
    k: Optional[int] = typer.Option(None, "--k", help="Number of clusters (default: from labels)"),
    bic: Optional[Path] = typer.Option(None, "--bic", help="BIC curve CSV to include"),
    sweep: Optional[Path] = typer.Option(None, "--sweep", help="Silhouette sweep CSV to include"),
    out: Path = typer.Option(..., "--out", help="Report directory"),
):
    """Write cluster-mean tables, correlations, distributions and maps."""
    with _exit_codes():
        _require(features_path, 'features')
        _require(labels_path, 'labels')
        raw = read_features_csv(str(features_path))
        if raw.normalization != RAW:
            raise ConfigError("report needs the raw feature matrix")
        row_ids, labels = read_labels(str(labels_path))
        if tuple(row_ids) != raw.row_ids:
            raise ConfigError("labels and features describe different cells")

        grids = {}
        for path in grid_paths:
            hexgrid, city = _load_grid(path)
            grids[city] = hexgrid
        n_clusters = k if k is not None else int(labels.max()) + 1
        standardized = standardize(raw, ZSCORE)
        write_report(str(out), raw, standardized, labels, grids, n_clusters)
        for source, name in ((bic, 'bic.csv'), (sweep, 'silhouette_sweep.csv')):
            if source is not None:
                _require(source, name)
                shutil.copyfile(source, out / name)
        typer.echo(f"Report written to {out}")


@app.command()
def run(
    ctx: typer.Context,
    config_file: Optional[Path] = typer.Option(None, "--config", "-c", help="YAML run configuration"),
    city: Optional[str] = typer.Option(None, "--city"),
    osm: Optional[Path] = typer.Option(None, "--osm"),
    boundary: Optional[Path] = typer.Option(None, "--boundary"),
    size: Optional[float] = typer.Option(None, "--size", help="Grid size in meters"),
    k: Optional[str] = typer.Option(None, "--k", help="Number of clusters, or 'auto'"),
    catalog: Optional[Path] = typer.Option(None, "--catalog"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
):
    """Run every stage end to end; flags override the YAML configuration."""
    with _exit_codes():
        overrides = {
            'city': city,
            'osm': str(osm) if osm else None,
            'boundary': str(boundary) if boundary else None,
            'grid_size_m': size,
            'catalog': str(catalog) if catalog else None,
            'output_dir': str(out) if out else None,
            'seed': ctx.obj['seed'],
            'threads': ctx.obj['threads_flag'],
            'log_level': ctx.obj['log_level_flag'],
        }
        if k is not None:
            overrides['k'] = k
        config = load_run_config(str(config_file) if config_file else None, **overrides)
        if ctx.obj['log_level_flag'] is None:
            setup_logging(config.log_level, ctx.obj['log_file'])
        summary = run_pipeline(config)
        typer.echo(f"{summary['city']}: {summary['n_clusters']} clusters over {summary['n_cells']} cells "
                   f"at {summary['grid_size_m']:g} m (seed {summary['seed']})")


if __name__ == '__main__':
    app()
