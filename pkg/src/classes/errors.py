# src/classes/errors.py
"""Exception hierarchy shared by the pipeline and mapped to CLI exit codes."""


class OccluPoseError(Exception):
    """Base class for errors raised by occlupose."""

    exit_code = 1


class MissingInputError(OccluPoseError):
    """A dataset, checkpoint, run directory or report the command needs is absent."""

    exit_code = 3


class InconsistentStateError(OccluPoseError):
    """Inputs exist but disagree with each other (config vs checkpoint, manifest vs data)."""

    exit_code = 4


class CheckpointFormatError(InconsistentStateError):
    """A checkpoint file has the wrong magic, version or payload size."""
