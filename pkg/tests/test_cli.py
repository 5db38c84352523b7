"""Tests for the command-line interface."""

import json
import re

import pandas as pd
import pytest
from typer.testing import CliRunner

from cli import EXIT_CONFIG, EXIT_STAGE, app
from conftest import MINI_BOUNDARY, MINI_OSM

runner = CliRunner()


def _invoke(*args):
    return runner.invoke(app, ['--seed', '42', '--log-level', 'WARNING', *[str(a) for a in args]])


@pytest.fixture
def mini_features(tmp_path):
    """Entities, grid and raw features of the fixture written through the CLI."""
    entities = tmp_path / 'entities.ndjson'
    grid = tmp_path / 'grid.geojson'
    features = tmp_path / 'features.csv'
    assert _invoke('ingest', '--osm', MINI_OSM, '--boundary', MINI_BOUNDARY, '--out', entities).exit_code == 0
    assert _invoke('grid', '--boundary', MINI_BOUNDARY, '--size', 500, '--city', 'mini', '--out', grid).exit_code == 0
    assert _invoke('features', '--entities', entities, '--grid', grid, '--out', features).exit_code == 0
    return {'entities': entities, 'grid': grid, 'features': features}


class TestStageCommands:
    """Test cases for the per-stage subcommands."""

    def test_features_csv(self, mini_features):
        """Test the features command writes the raw 31-column matrix."""
        frame = pd.read_csv(mini_features['features'])
        assert frame.columns[:2].tolist() == ['city', 'cell_id']
        assert frame.shape[1] == 33
        assert set(frame['city']) == {'mini'}

    def test_grid_with_entities(self, mini_features, tmp_path):
        """Test grid accepts --entities, reports coverage and defaults the city to the boundary name."""
        out = tmp_path / 'grid_entities.geojson'
        result = _invoke('grid', '--entities', mini_features['entities'], '--boundary', MINI_BOUNDARY,
                         '--size', 500, '--out', out)
        assert result.exit_code == 0, result.output

        lines = [line for line in mini_features['entities'].read_text(encoding='utf-8').splitlines() if line.strip()]
        match = re.search(r'(\d+) of (\d+) entities covered', result.output)
        covered, total = int(match.group(1)), int(match.group(2))
        assert total == len(lines) - 1
        assert 0 < covered <= total

        doc = json.loads(out.read_text(encoding='utf-8'))
        assert {f['properties']['city'] for f in doc['features']} == {'mini_city'}

    def test_grid_help_lists_entities(self):
        """Test grid --help documents the --entities option."""
        result = runner.invoke(app, ['grid', '--help'])
        assert result.exit_code == 0
        assert '--entities' in result.output

    def test_grid_missing_entities_is_config_error(self, tmp_path):
        """Test a missing --entities file exits 2 before any grid is written."""
        out = tmp_path / 'g.geojson'
        result = _invoke('grid', '--entities', tmp_path / 'none.ndjson', '--boundary', MINI_BOUNDARY,
                         '--size', 500, '--out', out)
        assert result.exit_code == EXIT_CONFIG
        assert not out.exists()

    def test_cluster_and_report(self, mini_features, tmp_path):
        """Test cluster then report produce labels, a model and the report tree."""
        model = tmp_path / 'model.json'
        labels = tmp_path / 'labels.csv'
        bic = tmp_path / 'bic.csv'
        result = _invoke('cluster', '--features', mini_features['features'], '--k', 'auto', '--k-min', 2,
                         '--k-max', 3, '--restarts', 2, '--out-model', model, '--out-labels', labels,
                         '--out-bic', bic)
        assert result.exit_code == 0, result.output
        assert json.loads(model.read_text(encoding='utf-8'))['format'] == 'urbanform-gmm'
        assert bic.exists()

        out = tmp_path / 'report'
        result = _invoke('report', '--features', mini_features['features'], '--labels', labels,
                         '--grid', mini_features['grid'], '--bic', bic, '--out', out)
        assert result.exit_code == 0, result.output
        assert (out / 'cluster_means.csv').exists()
        assert (out / 'map_mini.geojson').exists()
        assert (out / 'bic.csv').exists()

    def test_select_k(self, mini_features, tmp_path):
        """Test select-k writes the BIC curve."""
        out = tmp_path / 'bic.csv'
        result = _invoke('select-k', '--features', mini_features['features'], '--k-min', 1, '--k-max', 3,
                         '--restarts', 2, '--out', out)
        assert result.exit_code == 0, result.output
        assert 'BIC selects K=' in result.output
        assert len(pd.read_csv(out)) == 3

    def test_compare_two_cities(self, mini_features, tmp_path):
        """Test compare joins two tagged copies and writes the shared-cluster report."""
        other_grid = tmp_path / 'grid_b.geojson'
        other = tmp_path / 'features_b.csv'
        assert _invoke('grid', '--boundary', MINI_BOUNDARY, '--size', 400, '--city', 'b',
                       '--out', other_grid).exit_code == 0
        assert _invoke('features', '--entities', mini_features['entities'], '--grid', other_grid,
                       '--out', other).exit_code == 0

        out = tmp_path / 'compare'
        result = _invoke('compare', '--features', mini_features['features'], '--features', other,
                         '--grid', mini_features['grid'], '--grid', other_grid, '--mode', 'per-city-grid',
                         '--k', 2, '--restarts', 2, '--out', out)
        assert result.exit_code == 0, result.output
        table = pd.read_csv(out / 'contingency.csv')
        assert table.columns.tolist() == ['cluster', 'mini', 'b', 'shared']
        assert (out / 'map_b.geojson').exists()
        assert (out / 'feature_ks.csv').exists()

    def test_compare_centrality_only(self, mini_features, tmp_path):
        """Test the centrality-only joint run."""
        other_grid = tmp_path / 'grid_b.geojson'
        other = tmp_path / 'features_b.csv'
        _invoke('grid', '--boundary', MINI_BOUNDARY, '--size', 500, '--city', 'b', '--out', other_grid)
        _invoke('features', '--entities', mini_features['entities'], '--grid', other_grid, '--out', other)

        out = tmp_path / 'compare'
        result = _invoke('compare', '--features', mini_features['features'], '--features', other,
                         '--mode', 'uniform-grid', '--centrality-only', '--k', 2, '--restarts', 2, '--out', out)
        assert result.exit_code == 0, result.output
        model = json.loads((out / 'model.json').read_text(encoding='utf-8'))
        assert model['columns'] == ['degree_centrality']


class TestExitCodes:
    """Test cases for exit codes."""

    def test_missing_input_is_config_error(self, tmp_path):
        """Test a missing OSM file exits 2."""
        result = _invoke('ingest', '--osm', tmp_path / 'none.osm', '--boundary', MINI_BOUNDARY,
                         '--out', tmp_path / 'e.ndjson')
        assert result.exit_code == EXIT_CONFIG

    def test_bad_k_is_config_error(self, mini_features, tmp_path):
        """Test a non-numeric --k exits 2."""
        result = _invoke('cluster', '--features', mini_features['features'], '--k', 'several',
                         '--out-model', tmp_path / 'm.json', '--out-labels', tmp_path / 'l.csv')
        assert result.exit_code == EXIT_CONFIG

    def test_oversized_grid_is_stage_error(self, tmp_path):
        """Test a grid larger than the study area exits 3."""
        result = _invoke('grid', '--boundary', MINI_BOUNDARY, '--size', 50000, '--city', 'mini',
                         '--out', tmp_path / 'g.geojson')
        assert result.exit_code == EXIT_STAGE

    def test_single_city_compare_is_stage_error(self, mini_features, tmp_path):
        """Test compare with one city exits 3."""
        result = _invoke('compare', '--features', mini_features['features'], '--k', 2,
                         '--out', tmp_path / 'c')
        assert result.exit_code == EXIT_STAGE

    def test_bad_threads(self):
        """Test --threads 0 exits 2."""
        result = runner.invoke(app, ['--threads', '0', 'grid', '--boundary', MINI_BOUNDARY, '--size', '500',
                                     '--city', 'x', '--out', 'unused.geojson'])
        assert result.exit_code == EXIT_CONFIG


class TestRunCommand:
    """Test cases for `run`."""

    def test_run_from_yaml(self, run_config_file, tmp_path):
        """Test run with a YAML config and an output override succeeds."""
        out = tmp_path / 'out'
        result = _invoke('run', '--config', run_config_file(), '--out', out, '--k', 2)
        assert result.exit_code == 0, result.output
        assert 'mini: 2 clusters' in result.output
        assert (out / 'resolved_config.yaml').exists()

    def test_run_missing_output(self, run_config_file):
        """Test run without an output directory exits 2."""
        result = _invoke('run', '--config', run_config_file())
        assert result.exit_code == EXIT_CONFIG

    def test_run_stage_failure(self, run_config_file, tmp_path):
        """Test a grid that cannot be built exits 3 and leaves the FAILED marker."""
        out = tmp_path / 'out'
        result = _invoke('run', '--config', run_config_file(), '--out', out, '--size', 50000)
        assert result.exit_code == EXIT_STAGE
        assert (out / 'FAILED').read_text(encoding='utf-8').startswith('grid: ')
