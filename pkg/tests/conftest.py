"""Pytest configuration and fixtures for testing."""

import json
import os
import sys

import numpy as np
import pytest

# Add src and tests to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))
sys.path.insert(0, os.path.dirname(__file__))

FIXTURES = os.path.join(os.path.dirname(__file__), 'fixtures')
MINI_OSM = os.path.join(FIXTURES, 'mini_city.osm')
MINI_BOUNDARY = os.path.join(FIXTURES, 'mini_city.geojson')
MINI_MANIFEST = os.path.join(FIXTURES, 'mini_city_manifest.json')


@pytest.fixture
def manifest():
    """Expected facts about the mini_city fixture."""
    with open(MINI_MANIFEST, 'r', encoding='utf-8') as f:
        return json.load(f)


@pytest.fixture
def mini_entities():
    """Parsed (unclipped) mini_city extract."""
    from ingest import parse_osm_xml
    with open(MINI_OSM, 'rb') as f:
        return parse_osm_xml(f, source='mini_city.osm')


@pytest.fixture
def mini_boundary():
    """mini_city study-area pentagon."""
    from ingest import parse_boundary_geojson
    with open(MINI_BOUNDARY, 'r', encoding='utf-8') as f:
        return parse_boundary_geojson(f)


@pytest.fixture
def mini_grid(mini_boundary, manifest):
    """500 m hexagonal grid over mini_city."""
    from geometry import make_hexgrid
    return make_hexgrid(mini_boundary, manifest['grid_size_m'])


@pytest.fixture
def rng():
    """Seeded random generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def run_config_file(tmp_path):
    """YAML run configuration for mini_city written to a temp dir."""
    def write(**extra):
        doc = {
            'city': 'mini',
            'seed': 42,
            'inputs': {'osm': MINI_OSM, 'boundary': MINI_BOUNDARY},
            'grid': {'size_m': 500},
            'gmm': {'k_min': 2, 'k_max': 3, 'n_restarts': 2, 'max_iter': 100},
        }
        for section, values in extra.items():
            if isinstance(values, dict):
                doc.setdefault(section, {}).update(values)
            else:
                doc[section] = values
        import yaml
        path = tmp_path / 'run.yaml'
        path.write_text(yaml.safe_dump(doc), encoding='utf-8')
        return str(path)
    return write
