"""Exception hierarchy.

Every error carries a short machine-readable ``code`` and an optional ``detail``
mapping so the CLI can serialize it to JSON on stderr.
"""


class CegError(Exception):
    """Base class for all library errors."""

    code = "error"
    # exit status used by the CLI: 2 = invalid input, 3 = runtime failure
    exit_status = 2

    def __init__(self, message="", **detail):
        super().__init__(message or self.code)
        self.detail = detail

    def to_dict(self):
        return {"error": self.code, "message": str(self), "detail": self.detail}


class ModelError(CegError):
    code = "model_invalid"


class CycleDetected(ModelError):
    code = "cycle_detected"


class MultipleParents(ModelError):
    code = "multiple_parents"


class ThetaNotNormalized(ModelError):
    code = "theta_not_normalized"


class DuplicateEdgeLabel(ModelError):
    code = "duplicate_edge_label"


class IncompatibleStage(ModelError):
    code = "incompatible_stage"


class PathThroughTwoRootCauses(ModelError):
    code = "path_through_two_root_causes"


class UnattributedFailurePath(ModelError):
    code = "unattributed_failure_path"


class DisconnectedPath(CegError):
    code = "disconnected_path"


class RemedyError(CegError):
    code = "remedy_invalid"


class UnknownRootCause(RemedyError):
    code = "unknown_root_cause"


class EmptyActionSet(RemedyError):
    code = "empty_action_set"


class NonpositiveOmega(RemedyError):
    code = "nonpositive_omega"


class NonpositiveBeta(RemedyError):
    code = "nonpositive_beta"


class ZeroRootProbability(CegError):
    code = "zero_root_probability"


class ConfigInvalid(CegError):
    code = "config_invalid"


class ShapeMismatch(CegError):
    code = "shape_mismatch"


class EmptyData(CegError):
    code = "empty_data"


class StructureMismatch(CegError):
    code = "structure_mismatch"


class InsufficientData(CegError):
    code = "insufficient_data"
    exit_status = 3


class EmptyCluster(CegError):
    code = "empty_cluster"


class ShapeSolverDiverged(CegError):
    code = "shape_solver_diverged"
    exit_status = 3


class ElementSetMismatch(CegError):
    code = "element_set_mismatch"


class DatasetError(CegError):
    code = "dataset_invalid"
