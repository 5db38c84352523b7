"""Configuration settings for the urban form toolkit."""

import math
import os
from typing import Dict, List, Tuple

from dotenv import load_dotenv

load_dotenv()

# Feature catalogue: (key, value) tag selectors and the walk-network metric,
# in reporting order. A value of None selects any entity carrying the key.
FEATURE_CATALOG: List[Dict] = [
    # Topography
    {'key': 'highway', 'value': 'pedestrian'},
    {'key': 'highway', 'value': 'service'},
    {'key': 'highway', 'value': 'living_street'},
    {'key': 'highway', 'value': 'footway'},
    {'key': 'highway', 'value': 'steps'},
    {'key': 'highway', 'value': 'path'},
    {'network': 'walk', 'metric': 'degree_centrality', 'aggregation': 'extensive'},
    # Multimodality
    {'key': 'public_transport', 'value': None},
    {'key': 'highway', 'value': 'bus_stop'},
    {'key': 'highway', 'value': 'cycleway'},
    {'key': 'highway', 'value': 'crossing'},
    {'key': 'railway', 'value': 'subway_entrance'},
    # Points of interest
    {'key': 'building', 'value': 'residential'},
    {'key': 'building', 'value': 'commercial'},
    {'key': 'building', 'value': 'public'},
    {'key': 'building', 'value': 'school'},
    {'key': 'building', 'value': 'church'},
    {'key': 'building', 'value': 'university'},
    {'key': 'building', 'value': 'train_station'},
    {'key': 'amenity', 'value': 'parking'},
    {'key': 'amenity', 'value': 'restaurant'},
    {'key': 'amenity', 'value': 'cafe'},
    {'key': 'amenity', 'value': 'bar'},
    {'key': 'amenity', 'value': 'pub'},
    {'key': 'amenity', 'value': 'theatre'},
    {'key': 'amenity', 'value': 'cinema'},
    {'key': 'amenity', 'value': 'library'},
    {'key': 'amenity', 'value': 'hospital'},
    {'key': 'amenity', 'value': 'pharmacy'},
    {'key': 'amenity', 'value': 'doctors'},
    # Natural elements
    {'key': 'natural', 'value': None},
]

CENTRALITY_COLUMN = 'degree_centrality'

# highway values that make up the pedestrian network
WALKABLE_HIGHWAYS = frozenset({
    'pedestrian', 'footway', 'path', 'steps', 'living_street', 'residential',
    'service', 'unclassified', 'tertiary', 'secondary', 'primary', 'track',
    'crossing', 'cycleway',
})

# Local projection
EARTH_RADIUS_M = 6_371_000.0
METERS_PER_DEG_LAT = 2 * math.pi * EARTH_RADIUS_M / 360

# Ways are sampled at this fraction of the grid size when assigned to cells
WAY_SAMPLE_FRACTION = 0.1

# Gaussian mixture fitting
GMM_DEFAULTS = {
    'covariance': 'diagonal',
    'max_iter': 500,
    'tol': 1e-7,
    'n_restarts': 10,
    'reg_var': 1e-6,
}
DEFAULT_K_RANGE: Tuple[int, int] = (2, 12)
COLLAPSE_WEIGHT = 1e-10

# Cross-city comparison: minimum share of a cluster's BSUs each city must hold
SHARED_CLUSTER_THRESHOLD = 0.05

# Report formatting
REPORT_DECIMALS = 3
DISTRIBUTION_BINS = 20

# Published case-study parameters, logged for reference only
REFERENCE_RESULTS = {
    'lausanne': {'grid_size_m': 450, 'n_clusters': 5},
    'philadelphia': {'grid_size_m': 1500, 'n_clusters': 7},
}

# Execution
DEFAULT_THREADS = int(os.getenv('URBANFORM_THREADS', '1'))

# Logging
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
