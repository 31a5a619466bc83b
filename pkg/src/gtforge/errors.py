"""Exception types shared across gtforge modules."""


class GtforgeError(Exception):
    """Base class for all gtforge errors."""


# geometry
class PointBehindCamera(GtforgeError):
    """Projected point has non-positive depth in the camera frame."""


class CoincidentCenters(GtforgeError):
    """Stereo rectification requires distinct optical centers."""


class NonPositiveHeight(GtforgeError):
    """Camera altitude above the reference ground is not positive."""


class RayParallelToGround(GtforgeError):
    """An image-corner ray does not intersect the ground plane."""


class SizeMismatch(GtforgeError):
    """Raster dimensions do not match the expected size."""


# pointcloud / file formats
class ParseError(GtforgeError):
    """Malformed input file; carries the byte offset of the failure."""

    def __init__(self, message: str, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class UnsupportedFormat(GtforgeError):
    """File format not handled by this reader."""


class FormatError(GtforgeError):
    """File content violates the expected layout."""


# surface
class DegenerateInput(GtforgeError):
    """Input too degenerate to triangulate (collinear or < 3 points)."""


class MeshCloudMismatch(GtforgeError):
    """Ray index was not built from the point cloud being projected."""


# registration
class InsufficientGcps(GtforgeError):
    """Fewer than four ground control points available for resection."""


class SolverDiverged(GtforgeError):
    """Damped least-squares failed to reduce the residual."""


class NoCorrespondences(GtforgeError):
    """No tie point matched a LiDAR point within the distance bound."""


# matcher
class WindowTooLarge(GtforgeError):
    """Census window must be odd and between 3 and 9 pixels."""


# evalkit
class EmptySelection(GtforgeError):
    """No ground-truth samples match the requested visibility split."""


class ZeroBaseline(GtforgeError):
    """Relative shift gain is undefined for a non-positive baseline score."""


class NonPositiveRatio(GtforgeError):
    """Base-to-height ratio must be positive to be binned."""


class MissingPrediction(GtforgeError):
    """A pair under evaluation has no prediction raster."""


class MissingBaseline(GtforgeError):
    """No baseline evaluation exists for a test dataset."""


# cli
class ConfigError(GtforgeError):
    """Invalid or incomplete pipeline configuration."""
