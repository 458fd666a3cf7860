"""Exception taxonomy mapped onto CLI exit codes."""

from __future__ import annotations


class ConfigError(Exception):
    """Bad experiment configuration or CLI arguments (exit code 2)."""


class StageError(Exception):
    """A pipeline stage failed; carries the stage name and artifact path (exit code 3)."""

    def __init__(self, stage: str, artifact: str, message: str):
        super().__init__(f"stage '{stage}' failed at {artifact}: {message}")
        self.stage = stage
        self.artifact = artifact


class CorruptArtifactError(Exception):
    """Stored artifact contradicts its recorded hashes (exit code 4)."""


class TrainingDivergedError(Exception):
    """Loss became non-finite; carries the offending batch index."""

    def __init__(self, epoch: int, batch_index: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


class MaskBuildError(Exception):
    """Mask construction could not proceed (for example no high-confidence maps)."""
