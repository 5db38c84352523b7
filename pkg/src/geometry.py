"""Local planar projection and hexagonal tessellation of the study area."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import shapely
from shapely.geometry import Polygon

from config import METERS_PER_DEG_LAT
from errors import GridError
from ingest import Boundary

logger = logging.getLogger(__name__)

SQRT3 = math.sqrt(3.0)

# cell_id packs axial (q, r) into one non-negative integer
_AXIAL_OFFSET = 1 << 15
_AXIAL_STRIDE = 1 << 16

# neighbour offsets in axial coordinates
_NEIGHBOURS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))

GRID_FORMAT = 'urbanform-grid'


def cell_id_from_axial(q: int, r: int) -> int:
    return (q + _AXIAL_OFFSET) * _AXIAL_STRIDE + (r + _AXIAL_OFFSET)


def axial_from_cell_id(cell_id: int) -> Tuple[int, int]:
    q, r = divmod(int(cell_id), _AXIAL_STRIDE)
    return q - _AXIAL_OFFSET, r - _AXIAL_OFFSET


@dataclass(frozen=True)
class LocalFrame:
    """Equirectangular frame centred on the study area."""

    origin_lat: float
    origin_lon: float
    meters_per_deg_lat: float = METERS_PER_DEG_LAT

    @property
    def meters_per_deg_lon(self) -> float:
        return self.meters_per_deg_lat * math.cos(math.radians(self.origin_lat))

    @classmethod
    def from_boundary(cls, boundary: Boundary) -> 'LocalFrame':
        lat, lon = boundary.centroid()
        return cls(origin_lat=lat, origin_lon=lon)


def project(lat, lon, frame: LocalFrame):
    """WGS84 degrees to local meters; accepts scalars or arrays."""
    x = (np.asarray(lon, dtype=float) - frame.origin_lon) * frame.meters_per_deg_lon
    y = (np.asarray(lat, dtype=float) - frame.origin_lat) * frame.meters_per_deg_lat
    if np.ndim(x) == 0:
        return float(x), float(y)
    return x, y


def unproject(x, y, frame: LocalFrame):
    """Local meters back to (lat, lon) degrees."""
    lat = np.asarray(y, dtype=float) / frame.meters_per_deg_lat + frame.origin_lat
    lon = np.asarray(x, dtype=float) / frame.meters_per_deg_lon + frame.origin_lon
    if np.ndim(lat) == 0:
        return float(lat), float(lon)
    return lat, lon


@dataclass(frozen=True)
class HexCell:
    """One flat-top hexagon (a BSU)."""

    q: int
    r: int
    center_xy: Tuple[float, float]
    vertices: Tuple[Tuple[float, float], ...]

    @property
    def cell_id(self) -> int:
        return cell_id_from_axial(self.q, self.r)


def _axial_center(q, r, radius: float):
    x = 1.5 * radius * np.asarray(q, dtype=float)
    y = SQRT3 * radius * (np.asarray(r, dtype=float) + np.asarray(q, dtype=float) / 2.0)
    return x, y


def _make_cell(q: int, r: int, radius: float) -> HexCell:
    cx, cy = _axial_center(q, r, radius)
    cx, cy = float(cx), float(cy)
    # counter-clockwise from the rightmost corner
    vertices = tuple(
        (cx + radius * math.cos(math.radians(60 * i)), cy + radius * math.sin(math.radians(60 * i)))
        for i in range(6)
    )
    return HexCell(q=q, r=r, center_xy=(cx, cy), vertices=vertices)


@dataclass(frozen=True)
class HexGrid:
    """Hexagonal tessellation of a boundary; size_m is the centre spacing."""

    frame: LocalFrame
    size_m: float
    cells: Tuple[HexCell, ...]
    boundary: Boundary
    _index: Dict[int, int] = field(default=None, compare=False, repr=False)
    _ids: np.ndarray = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, '_index', {c.cell_id: i for i, c in enumerate(self.cells)})
        object.__setattr__(self, '_ids', np.array([c.cell_id for c in self.cells], dtype=np.int64))

    @property
    def radius(self) -> float:
        """Centre-to-vertex distance."""
        return self.size_m / SQRT3

    @property
    def cell_area(self) -> float:
        return SQRT3 / 2.0 * self.size_m ** 2

    @property
    def cell_ids(self) -> np.ndarray:
        return self._ids

    def __len__(self) -> int:
        return len(self.cells)

    def index_of(self, cell_id: int) -> Optional[int]:
        return self._index.get(int(cell_id))

    def cell(self, cell_id: int) -> HexCell:
        return self.cells[self._index[int(cell_id)]]


def _projected_polygon(boundary: Boundary, frame: LocalFrame) -> Polygon:
    rings = []
    for ring in boundary.rings:
        lats = np.array([lat for lat, _ in ring])
        lons = np.array([lon for _, lon in ring])
        x, y = project(lats, lons, frame)
        rings.append(list(zip(x.tolist(), y.tolist())))
    return Polygon(rings[0], rings[1:])


def make_hexgrid(boundary: Boundary, size_m: float, frame: Optional[LocalFrame] = None) -> HexGrid:
    """
    Tessellate the boundary with flat-top hexagons anchored at its centroid.

    Cells whose centre lies inside (or on) the boundary are retained, ordered
    by cell_id.

    Raises:
        GridError: if size_m is not positive, exceeds the study area, or no
            cell centre falls inside the boundary
    """
    if not size_m > 0:
        raise GridError(f"grid size must be positive, got {size_m}")

    frame = frame or LocalFrame.from_boundary(boundary)
    polygon = _projected_polygon(boundary, frame)
    xmin, ymin, xmax, ymax = polygon.bounds
    if size_m > max(xmax - xmin, ymax - ymin):
        raise GridError("grid size exceeds study area")

    radius = size_m / SQRT3
    q_lo = math.floor(xmin / (1.5 * radius)) - 1
    q_hi = math.ceil(xmax / (1.5 * radius)) + 1
    r_span = SQRT3 * radius
    r_lo = math.floor(ymin / r_span - q_hi / 2.0) - 1
    r_hi = math.ceil(ymax / r_span - q_lo / 2.0) + 1

    qs, rs = np.meshgrid(np.arange(q_lo, q_hi + 1), np.arange(r_lo, r_hi + 1), indexing='ij')
    qs, rs = qs.ravel(), rs.ravel()
    cx, cy = _axial_center(qs, rs, radius)
    in_box = (cx >= xmin - radius) & (cx <= xmax + radius) & (cy >= ymin - radius) & (cy <= ymax + radius)
    qs, rs, cx, cy = qs[in_box], rs[in_box], cx[in_box], cy[in_box]
    inside = shapely.intersects_xy(polygon, cx, cy)

    axial = sorted(zip(qs[inside].tolist(), rs[inside].tolist()), key=lambda qr: cell_id_from_axial(*qr))
    if not axial:
        raise GridError(f"no cell centre of a {size_m} m grid falls inside '{boundary.name}'")

    cells = tuple(_make_cell(q, r, radius) for q, r in axial)
    logger.info(f"Built {len(cells)} hexagonal cells of {size_m} m for '{boundary.name}'")
    return HexGrid(frame=frame, size_m=float(size_m), cells=cells, boundary=boundary)


def _cube_round(qf: np.ndarray, rf: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    sf = -qf - rf
    q, r, s = np.rint(qf), np.rint(rf), np.rint(sf)
    dq, dr, ds = np.abs(q - qf), np.abs(r - rf), np.abs(s - sf)
    fix_q = (dq > dr) & (dq > ds)
    fix_r = ~fix_q & (dr > ds)
    q = np.where(fix_q, -r - s, q)
    r = np.where(fix_r, -q - s, r)
    return q.astype(np.int64), r.astype(np.int64)


def locate_many(grid: HexGrid, x, y) -> np.ndarray:
    """
    Containing cell_id for each point, or -1 when that cell was not retained.

    Points on a shared edge go to the smallest retained cell_id among the
    tied cells.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    radius = grid.radius
    qf = (2.0 / 3.0 * x) / radius
    rf = (-x / 3.0 + SQRT3 / 3.0 * y) / radius
    q0, r0 = _cube_round(qf, rf)

    offsets = ((0, 0),) + _NEIGHBOURS
    cand_q = np.stack([q0 + dq for dq, _ in offsets], axis=1)
    cand_r = np.stack([r0 + dr for _, dr in offsets], axis=1)
    cx, cy = _axial_center(cand_q, cand_r, radius)
    dist = np.hypot(x[:, None] - cx, y[:, None] - cy)
    cand_ids = (cand_q + _AXIAL_OFFSET) * _AXIAL_STRIDE + (cand_r + _AXIAL_OFFSET)

    tied = dist <= dist.min(axis=1, keepdims=True) * (1 + 1e-12) + 1e-9 * grid.size_m
    tied &= np.isin(cand_ids, grid.cell_ids)
    missing = np.iinfo(np.int64).max
    chosen = np.where(tied, cand_ids, missing).min(axis=1)
    return np.where(chosen == missing, -1, chosen)


def locate(grid: HexGrid, x: float, y: float) -> Optional[int]:
    """Cell containing (x, y) in the grid's frame, or None outside retained cells."""
    cell_id = int(locate_many(grid, [x], [y])[0])
    return None if cell_id < 0 else cell_id


def cell_polygon_lonlat(grid: HexGrid, cell: HexCell) -> List[List[float]]:
    """Closed 7-point ring of [lon, lat] pairs."""
    xs = np.array([vx for vx, _ in cell.vertices])
    ys = np.array([vy for _, vy in cell.vertices])
    lats, lons = unproject(xs, ys, grid.frame)
    ring = [[float(lon), float(lat)] for lat, lon in zip(lats, lons)]
    ring.append(list(ring[0]))
    return ring


def grid_to_geojson(grid: HexGrid, city: str) -> Dict:
    """FeatureCollection of hexagons; the `urbanform` member lets read_grid rebuild the grid."""
    features = [
        {
            'type': 'Feature',
            'properties': {'cell_id': cell.cell_id, 'q': cell.q, 'r': cell.r, 'city': city},
            'geometry': {'type': 'Polygon', 'coordinates': [cell_polygon_lonlat(grid, cell)]},
        }
        for cell in grid.cells
    ]
    return {
        'type': 'FeatureCollection',
        'urbanform': {
            'format': GRID_FORMAT,
            'version': 1,
            'city': city,
            'size_m': grid.size_m,
            'origin_lat': grid.frame.origin_lat,
            'origin_lon': grid.frame.origin_lon,
            'meters_per_deg_lat': grid.frame.meters_per_deg_lat,
            'boundary_name': grid.boundary.name,
            'boundary': [[[lon, lat] for lat, lon in ring] for ring in grid.boundary.rings],
        },
        'features': features,
    }


def read_grid(doc: Dict) -> Tuple[HexGrid, str]:
    """Rebuild a HexGrid (and its city tag) from grid_to_geojson output."""
    meta = doc.get('urbanform') or {}
    if meta.get('format') != GRID_FORMAT:
        raise GridError("grid file lacks the urbanform metadata member")

    rings = [tuple((float(lat), float(lon)) for lon, lat in ring) for ring in meta['boundary']]
    boundary = Boundary(exterior=rings[0], holes=tuple(rings[1:]), name=meta['boundary_name'])
    frame = LocalFrame(origin_lat=meta['origin_lat'], origin_lon=meta['origin_lon'],
                       meters_per_deg_lat=meta['meters_per_deg_lat'])
    size_m = float(meta['size_m'])
    radius = size_m / SQRT3
    axial = sorted(((int(f['properties']['q']), int(f['properties']['r'])) for f in doc['features']),
                   key=lambda qr: cell_id_from_axial(*qr))
    cells = tuple(_make_cell(q, r, radius) for q, r in axial)
    return HexGrid(frame=frame, size_m=size_m, cells=cells, boundary=boundary), meta['city']
