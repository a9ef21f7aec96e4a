"""Exception taxonomy shared across the package."""


class Exo2EgoError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(Exo2EgoError):
    """An array does not satisfy a documented shape or divisibility law."""


class NonRigidPose(Exo2EgoError):
    """A 4x4 matrix violates the SE(3) invariants beyond tolerance."""


class DegenerateIntrinsics(Exo2EgoError):
    """Pinhole intrinsics with non-positive focal length or empty image."""


class ViewCountMismatch(Exo2EgoError):
    """Number of exocentric views differs from what a module was built for."""


class MissingCondition(Exo2EgoError):
    """A conditioning signal required by the model configuration is absent."""


class StepOutOfRange(Exo2EgoError):
    """Diffusion timestep outside [0, T)."""


class TargetNotFound(Exo2EgoError):
    """Adapter attachment found no layer matching the requested target."""


class MissingPrerequisite(Exo2EgoError):
    """A training stage was started without its required checkpoints."""


class NonFiniteLoss(Exo2EgoError):
    """Training aborted because the loss became NaN or infinite."""


class ConfigError(Exo2EgoError):
    """Config file failed parsing or schema validation."""


class IOFailure(Exo2EgoError):
    """A dataset / report / manifest artifact could not be read or written."""
