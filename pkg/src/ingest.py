"""Data ingestion module for OSM extracts and city boundaries."""

import json
import logging
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import BinaryIO, Dict, Iterable, List, Mapping, Optional, Sequence, TextIO, Tuple

import numpy as np
import shapely
from shapely.geometry import Polygon
from shapely.validation import explain_validity

from errors import BoundaryError, OsmParseError

logger = logging.getLogger(__name__)

NODE = 'node'
WAY = 'way'

ENTITY_FORMAT = 'urbanform-entities'
ENTITY_FORMAT_VERSION = 1

LatLon = Tuple[float, float]


def _check_latlon(lat: float, lon: float) -> None:
    if not -90.0 <= lat <= 90.0 or not -180.0 <= lon <= 180.0:
        raise ValueError(f"coordinate out of WGS84 range: ({lat}, {lon})")


@dataclass(frozen=True)
class Entity:
    """An OSM node or way with its tags and resolved geometry."""

    id: int
    kind: str
    tags: Mapping[str, str]
    geometry: Tuple[LatLon, ...]
    refs: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind == NODE:
            if len(self.geometry) != 1:
                raise ValueError(f"node {self.id} must have exactly one coordinate")
        elif self.kind == WAY:
            if len(self.geometry) < 2:
                raise ValueError(f"way {self.id} needs at least 2 coordinates")
            if len(self.refs) != len(self.geometry):
                raise ValueError(f"way {self.id} refs and geometry differ in length")
        else:
            raise ValueError(f"unknown entity kind: {self.kind}")
        for lat, lon in self.geometry:
            _check_latlon(lat, lon)
        if any(not key for key in self.tags):
            raise ValueError(f"{self.kind} {self.id} has an empty tag key")

    @property
    def key(self) -> Tuple[str, int]:
        return (self.kind, self.id)

    @property
    def lats(self) -> np.ndarray:
        return np.array([lat for lat, _ in self.geometry], dtype=float)

    @property
    def lons(self) -> np.ndarray:
        return np.array([lon for _, lon in self.geometry], dtype=float)


@dataclass(frozen=True)
class EntitySet:
    """Immutable collection of entities read from one extract."""

    entities: Tuple[Entity, ...]
    source: str
    warnings: Tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        seen = set()
        for entity in self.entities:
            if entity.key in seen:
                raise ValueError(f"duplicate {entity.kind} id {entity.id}")
            seen.add(entity.key)

    def __len__(self) -> int:
        return len(self.entities)

    def __iter__(self):
        return iter(self.entities)

    @property
    def nodes(self) -> List[Entity]:
        return [e for e in self.entities if e.kind == NODE]

    @property
    def ways(self) -> List[Entity]:
        return [e for e in self.entities if e.kind == WAY]


@dataclass(frozen=True)
class Boundary:
    """Study-area polygon; rings hold (lat, lon) pairs, closed."""

    exterior: Tuple[LatLon, ...]
    holes: Tuple[Tuple[LatLon, ...], ...] = ()
    name: str = 'boundary'
    warnings: Tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        for ring in (self.exterior,) + tuple(self.holes):
            if len(ring) < 4:
                raise BoundaryError(f"ring of '{self.name}' has fewer than 4 points")
            if ring[0] != ring[-1]:
                raise BoundaryError(f"ring of '{self.name}' is not closed")
            for lat, lon in ring:
                _check_latlon(lat, lon)
        polygon = self.polygon()
        if not polygon.is_valid:
            raise BoundaryError(f"boundary '{self.name}' is invalid: {explain_validity(polygon)}")

    @property
    def rings(self) -> Tuple[Tuple[LatLon, ...], ...]:
        return (self.exterior,) + tuple(self.holes)

    def polygon(self) -> Polygon:
        """Shapely polygon in (lon, lat) axis order."""
        return Polygon(
            [(lon, lat) for lat, lon in self.exterior],
            [[(lon, lat) for lat, lon in hole] for hole in self.holes],
        )

    def centroid(self) -> LatLon:
        point = self.polygon().centroid
        return (point.y, point.x)

    def contains(self, lats, lons) -> np.ndarray:
        """Even-odd containment with points on an edge counted inside."""
        return shapely.intersects_xy(self.polygon(), np.asarray(lons, dtype=float),
                                     np.asarray(lats, dtype=float))


def _source_label(stream, fallback: str) -> str:
    path = getattr(stream, 'name', None)
    if isinstance(path, str) and os.path.exists(path):
        mtime = datetime.fromtimestamp(os.path.getmtime(path), tz=timezone.utc)
        return f"{path}@{mtime.isoformat()}"
    return fallback


def _element_tags(elem) -> Dict[str, str]:
    tags = {t.attrib['k']: t.attrib.get('v', '') for t in elem.findall('tag')}
    if '' in tags:
        raise ValueError("empty tag key")
    return tags


def parse_osm_xml(stream: BinaryIO, source: Optional[str] = None) -> EntitySet:
    """
    Parse an OSM XML document into an EntitySet.

    Keeps every tagged node and way plus the untagged nodes that kept ways
    reference. Ways with a dangling node reference are dropped with a warning.

    Raises:
        OsmParseError: if the document is not well-formed XML, or a node or
            way has a missing or invalid id, coordinate, reference or tag key
    """
    nodes: Dict[int, Tuple[LatLon, Dict[str, str]]] = {}
    node_order: List[int] = []
    raw_ways: List[Tuple[int, List[int], Dict[str, str]]] = []

    try:
        for _, elem in ET.iterparse(stream, events=('end',)):
            if elem.tag not in ('node', 'way', 'relation'):
                continue
            try:
                if elem.tag == 'node':
                    node_id = int(elem.attrib['id'])
                    coord = (float(elem.attrib['lat']), float(elem.attrib['lon']))
                    _check_latlon(*coord)
                    tags = _element_tags(elem)
                    if node_id not in nodes:
                        node_order.append(node_id)
                    nodes[node_id] = (coord, tags)
                elif elem.tag == 'way':
                    way_id = int(elem.attrib['id'])
                    refs = [int(nd.attrib['ref']) for nd in elem.findall('nd')]
                    raw_ways.append((way_id, refs, _element_tags(elem)))
            except (KeyError, ValueError) as e:
                detail = f"missing attribute {e}" if isinstance(e, KeyError) else str(e)
                raise OsmParseError(f"{elem.tag} {elem.attrib.get('id', '?')}: {detail}") from e
            elem.clear()
    except ET.ParseError as e:
        line = e.position[0] if e.position else None
        raise OsmParseError(f"malformed OSM XML at line {line}: {e}", line=line) from e

    warnings: List[str] = []
    ways: List[Entity] = []
    referenced = set()
    for way_id, refs, tags in raw_ways:
        if not tags:
            continue
        missing = [ref for ref in refs if ref not in nodes]
        if missing:
            message = f"way {way_id} references missing node {missing[0]}; dropped"
            logger.warning(message)
            warnings.append(message)
            continue
        if len(refs) < 2:
            message = f"way {way_id} has fewer than 2 nodes; dropped"
            logger.warning(message)
            warnings.append(message)
            continue
        ways.append(Entity(
            id=way_id, kind=WAY, tags=tags,
            geometry=tuple(nodes[ref][0] for ref in refs),
            refs=tuple(refs),
        ))
        referenced.update(refs)

    entities: List[Entity] = []
    for node_id in node_order:
        coord, tags = nodes[node_id]
        if tags or node_id in referenced:
            entities.append(Entity(id=node_id, kind=NODE, tags=tags, geometry=(coord,)))
    entities.extend(ways)

    label = source or _source_label(stream, '<stream>')
    logger.info(f"Parsed {len(entities)} entities ({len(ways)} ways) from {label}")
    return EntitySet(entities=tuple(entities), source=label, warnings=tuple(warnings))


def _ring_from_geojson(ring: Sequence[Sequence[float]], name: str) -> Tuple[LatLon, ...]:
    if len(ring) < 4 or tuple(ring[0]) != tuple(ring[-1]):
        raise BoundaryError(f"unclosed ring in boundary '{name}'")
    return tuple((float(pt[1]), float(pt[0])) for pt in ring)


def parse_boundary_geojson(stream) -> Boundary:
    """
    Read the study-area boundary from a GeoJSON Feature or FeatureCollection.

    For a MultiPolygon the largest part is kept and the others are reported
    as warnings.
    """
    try:
        doc = json.load(stream)
    except ValueError as e:
        raise BoundaryError(f"boundary file is not valid JSON: {e}") from e

    if doc.get('type') == 'FeatureCollection':
        features = doc.get('features', [])
    elif doc.get('type') == 'Feature':
        features = [doc]
    else:
        features = [{'type': 'Feature', 'geometry': doc, 'properties': {}}]

    feature = next(
        (f for f in features
         if (f.get('geometry') or {}).get('type') in ('Polygon', 'MultiPolygon')),
        None,
    )
    if feature is None:
        raise BoundaryError("no Polygon or MultiPolygon feature in boundary file")

    properties = feature.get('properties') or {}
    name = str(properties.get('name', 'boundary'))
    geometry = feature['geometry']
    parts = [geometry['coordinates']] if geometry['type'] == 'Polygon' else geometry['coordinates']

    candidates = []
    for part in parts:
        rings = [_ring_from_geojson(ring, name) for ring in part]
        area = Polygon([(lon, lat) for lat, lon in rings[0]]).area
        candidates.append((area, rings))

    warnings: List[str] = []
    best = max(range(len(candidates)), key=lambda i: candidates[i][0])
    for i, (area, _) in enumerate(candidates):
        if i != best:
            message = f"boundary '{name}': ignoring MultiPolygon part {i} (area {area:.6g} deg^2)"
            logger.warning(message)
            warnings.append(message)

    rings = candidates[best][1]
    return Boundary(exterior=rings[0], holes=tuple(rings[1:]), name=name,
                    warnings=tuple(warnings))


def boundary_to_geojson(boundary: Boundary) -> Dict:
    """Serialize a boundary as a GeoJSON Feature."""
    return {
        'type': 'Feature',
        'properties': {'name': boundary.name},
        'geometry': {
            'type': 'Polygon',
            'coordinates': [[[lon, lat] for lat, lon in ring] for ring in boundary.rings],
        },
    }


def clip_to_boundary(entities: EntitySet, boundary: Boundary) -> EntitySet:
    """Keep nodes inside or on the boundary and ways with any vertex inside."""
    if not entities.entities:
        return entities

    lats = np.concatenate([e.lats for e in entities.entities])
    lons = np.concatenate([e.lons for e in entities.entities])
    inside = boundary.contains(lats, lons)

    kept: List[Entity] = []
    offset = 0
    for entity in entities.entities:
        n = len(entity.geometry)
        if inside[offset:offset + n].any():
            kept.append(entity)
        offset += n

    logger.info(f"Clipped to '{boundary.name}': kept {len(kept)}/{len(entities)} entities")
    return EntitySet(entities=tuple(kept), source=entities.source, warnings=entities.warnings)


def _entity_record(entity: Entity) -> Dict:
    record = {
        'id': entity.id,
        'kind': entity.kind,
        'tags': dict(entity.tags),
        'coords': [[lat, lon] for lat, lon in entity.geometry],
    }
    if entity.kind == WAY:
        record['refs'] = list(entity.refs)
    return record


def write_entities(entities: EntitySet, stream: TextIO) -> None:
    """Write the newline-delimited interchange file (header line, then one entity per line)."""
    header = {'format': ENTITY_FORMAT, 'version': ENTITY_FORMAT_VERSION, 'source': entities.source}
    stream.write(json.dumps(header, ensure_ascii=False) + '\n')
    for entity in entities.entities:
        stream.write(json.dumps(_entity_record(entity), ensure_ascii=False) + '\n')


def read_entities(stream: TextIO) -> EntitySet:
    """Read an interchange file written by write_entities."""
    lines: Iterable[str] = (line for line in stream if line.strip())
    try:
        header = json.loads(next(iter(lines)))
    except StopIteration:
        raise OsmParseError("entity file is empty")
    if header.get('format') != ENTITY_FORMAT:
        raise OsmParseError(f"not an entity file: format={header.get('format')!r}")
    if header.get('version') != ENTITY_FORMAT_VERSION:
        raise OsmParseError(f"unsupported entity file version {header.get('version')}")

    entities = []
    for lineno, line in enumerate(lines, start=2):
        try:
            record = json.loads(line)
        except ValueError as e:
            raise OsmParseError(f"bad entity record at line {lineno}: {e}", line=lineno) from e
        entities.append(Entity(
            id=int(record['id']),
            kind=record['kind'],
            tags=record['tags'],
            geometry=tuple((float(lat), float(lon)) for lat, lon in record['coords']),
            refs=tuple(int(r) for r in record.get('refs', ())),
        ))
    return EntitySet(entities=tuple(entities), source=header.get('source', ''))


def run_ingestion(osm_path: str, boundary_path: str, out_path: str) -> EntitySet:
    """Parse, clip and persist one city extract."""
    with open(osm_path, 'rb') as f:
        entities = parse_osm_xml(f)
    with open(boundary_path, 'r', encoding='utf-8') as f:
        boundary = parse_boundary_geojson(f)

    clipped = clip_to_boundary(entities, boundary)
    with open(out_path, 'w', encoding='utf-8', newline='\n') as f:
        write_entities(clipped, f)

    logger.info(f"Ingestion complete: {len(clipped)} entities written to {out_path}")
    return clipped
