"""Exception types raised across the toolkit."""

from typing import Optional


class UrbanFormError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(UrbanFormError):
    """Invalid run configuration or command-line input (exit code 2)."""


class OsmParseError(UrbanFormError):
    """Malformed OSM XML."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message)
        self.line = line


class BoundaryError(UrbanFormError):
    """Unusable boundary file or polygon."""


class GridError(UrbanFormError):
    """Hexagonal grid cannot be built."""


class FeatureError(UrbanFormError):
    """Feature extraction or matrix assembly failed."""


class GmmFitError(UrbanFormError):
    """Gaussian mixture fitting failed."""


class ComponentCollapseError(GmmFitError):
    """A mixture component lost (almost) all of its weight."""

    def __init__(self, message: str, component: int):
        super().__init__(message)
        self.component = component


class SelectionError(UrbanFormError):
    """Model or grid-size selection has no admissible candidate."""


class CompareError(UrbanFormError):
    """Cities cannot be joined or compared."""


class ReportError(UrbanFormError):
    """Report artifacts cannot be produced."""


class StageError(UrbanFormError):
    """A pipeline stage failed (exit code 3)."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
