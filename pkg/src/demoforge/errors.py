"""Exception hierarchy shared by all demoforge modules."""


class DemoForgeError(Exception):
    """Base class for every error raised by this package."""

    #: short machine-readable tag used in failure records
    reason = "Error"


# --- robot descriptions -----------------------------------------------------


class UrdfError(DemoForgeError):
    reason = "UrdfError"


class MalformedXml(UrdfError):
    reason = "MalformedXml"


class KinematicLoop(UrdfError):
    reason = "KinematicLoop"


class UnsupportedJointType(UrdfError):
    reason = "UnsupportedJointType"


class MissingLimit(UrdfError):
    reason = "MissingLimit"


class DimensionMismatch(DemoForgeError, ValueError):
    reason = "DimensionMismatch"


class UnknownFrame(DemoForgeError, KeyError):
    reason = "UnknownFrame"

    def __str__(self):
        return Exception.__str__(self)


class JointLimitViolation(DemoForgeError, ValueError):
    reason = "JointLimitViolation"


# --- trajectories / sampling ------------------------------------------------


class DegenerateEndpoints(DemoForgeError, ValueError):
    reason = "DegenerateEndpoints"


class SamplingExhausted(DemoForgeError):
    reason = "SamplingExhausted"


class DegenerateCloud(DemoForgeError, ValueError):
    reason = "DegenerateCloud"


class NoTemporalOverlap(DemoForgeError, ValueError):
    reason = "NoTemporalOverlap"


class NoMotionDetected(DemoForgeError):
    reason = "NoMotionDetected"


class NoFeasibleGrasp(DemoForgeError):
    reason = "NoFeasibleGrasp"


# --- inverse kinematics -----------------------------------------------------


class WindowOutOfRange(DemoForgeError, ValueError):
    reason = "WindowOutOfRange"


class Diverged(DemoForgeError):
    reason = "Diverged"


class TrackingFailure(DemoForgeError):
    """Residual exceeded tolerance on at least one transport step."""

    reason = "TrackingFailure"

    def __init__(self, message, step=None, arm=None):
        super().__init__(message)
        self.step = step
        self.arm = arm


# --- configuration / datasets -----------------------------------------------


class ConfigError(DemoForgeError):
    reason = "ConfigError"


class ParseError(ConfigError):
    reason = "ParseError"


class MissingAsset(ConfigError):
    reason = "MissingAsset"


class InvariantViolation(ConfigError):
    reason = "InvariantViolation"


class FormatUnavailable(DemoForgeError):
    reason = "FormatUnavailable"
