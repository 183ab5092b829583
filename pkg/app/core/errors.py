"""
Engine exception hierarchy
"""

from typing import Optional


class EngineError(Exception):
    """Base class for every recoverable engine failure"""


class ConfigError(EngineError):
    """Invalid or unknown run configuration"""


# Scene ingestion

class ObjParseError(EngineError):
    """Malformed OBJ record"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TaxonomyError(EngineError):
    """Invalid class taxonomy"""


class AnnotationError(EngineError):
    """Annotation map does not cover the scene"""


class UnmappedObjectError(AnnotationError):
    """Mesh object name absent from the annotation map"""


class UnknownClassError(AnnotationError):
    """Annotation references a class outside the taxonomy"""


class PlacementError(EngineError):
    """Furniture could not be placed inside the room"""


# Camera / rendering

class BehindCameraError(EngineError):
    """Point with non-positive camera depth"""


class InvalidDepthError(EngineError):
    """Zero or negative depth where a measurement is required"""


class InvalidRayError(EngineError):
    """Ray direction is not unit norm"""


class FormatError(EngineError):
    """File does not follow the expected binary or text layout"""


class TruncatedPayloadError(FormatError):
    """File ends before the declared payload"""


# Reconstruction

class TrackingLostError(EngineError):
    """ICP could not find enough correspondences"""


class DegenerateScatterError(EngineError):
    """Normal scatter has no dominant direction"""


class InsufficientSamplesError(EngineError):
    """Too few samples for a statistical estimate"""


class GridMismatchError(EngineError):
    """Volumes do not share grid geometry"""


# Network

class ChannelMismatchError(EngineError):
    """Input channel count does not match the layer"""


class TrainingDataError(EngineError):
    """Empty dataset or no labelled pixels"""


class WeightFormatError(FormatError):
    """Weight file magic, version or layout mismatch"""


# Pipeline

class DatasetError(EngineError):
    """Dataset or sequence directory missing or without frames"""


class StorageError(EngineError):
    """Path outside the data directory or unknown collection"""
