"""Exception types shared across the package."""


class PlasmonetError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(PlasmonetError):
    """A configuration value is out of range or inconsistent."""


class GeometryError(PlasmonetError):
    """A structure description is invalid."""


class SimulationError(PlasmonetError):
    """The field solver failed (instability, non-finite fields, bad domain)."""


class FormatError(PlasmonetError):
    """A binary or text artifact is malformed or fails its checksum."""


class DatasetError(PlasmonetError):
    """Dataset layout problems: missing manifest, bad split, empty subset."""


class ShapeError(PlasmonetError):
    """Array shapes fed to a network operation are incompatible."""


class TrainingError(PlasmonetError):
    """Training aborted (non-finite loss) or cannot resume."""
