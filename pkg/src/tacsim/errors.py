"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: configuration/input problems
(SchemaError, StlParseError, missing files) exit 2, data-consistency problems
(PairingError) exit 3, simulation failures (EngineError subclasses) exit 4.
"""


class TacsimError(Exception):
    """Base class for all tacsim errors."""


class StlParseError(TacsimError):
    """Malformed STL payload; message names the offending byte offset or facet."""


class SchemaError(TacsimError):
    """Config/calibration file violates its schema; message names the field."""


class PairingError(TacsimError):
    """Marker observation sets cannot be paired (mismatched ids or frame counts)."""


class EngineError(TacsimError):
    """Base class for simulation-time failures."""


class OutOfDomainError(EngineError):
    """Particle kernel support left the grid; carries the particle index."""

    def __init__(self, particle: int, step: int | None = None):
        self.particle = particle
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"particle {particle} out of grid domain{where}")


class InvertedElementError(EngineError):
    """det(F) <= 0 for an elastomer particle; carries the particle index."""

    def __init__(self, particle: int, step: int | None = None):
        self.particle = particle
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"deformation gradient inverted for particle {particle}{where}")


class CflError(EngineError):
    """dt * max particle speed exceeded the grid interval."""


class BehindCameraError(TacsimError):
    """Point projected with Z at or behind the camera plane."""


class InsufficientPointsError(TacsimError):
    """Fewer than 5 points supplied to the ellipse fit."""


class DegenerateFitError(TacsimError):
    """Ellipse fit degenerated (collinear points / non-elliptic conic)."""


class EmptyFrameError(TacsimError):
    """No visible particles when rendering a depth map."""


class LayoutResolutionError(TacsimError):
    """A marker group captured fewer particles than an ellipse fit needs."""
