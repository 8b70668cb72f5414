"""Exception hierarchy.

Every error carries a ``category`` used by the CLI for exit codes:
``config`` -> 2, ``data`` -> 3, ``pipeline`` -> 4.
"""


class BuildFuncError(Exception):
    category = "pipeline"


class ConfigError(BuildFuncError):
    category = "config"


class InvalidParams(ConfigError):
    pass


class IoError(BuildFuncError):
    category = "data"


class EmptyScene(BuildFuncError):
    category = "data"


class DegenerateGeometry(BuildFuncError):
    category = "data"


class OverlappingBlocks(BuildFuncError):
    category = "data"

    def __init__(self, pairs):
        self.pairs = list(pairs)
        shown = ", ".join(f"{a}/{b}" for a, b in self.pairs[:20])
        super().__init__(f"{len(self.pairs)} overlapping block pair(s): {shown}")


class InvalidLayout(BuildFuncError):
    category = "data"


class GridMismatch(BuildFuncError):
    category = "data"


class OutOfExtent(BuildFuncError):
    category = "data"


class UnknownIds(BuildFuncError):
    category = "data"

    def __init__(self, ids):
        self.ids = list(ids)
        shown = ", ".join(str(i) for i in self.ids[:20])
        super().__init__(f"{len(self.ids)} unknown building id(s): {shown}")


class EmptyIndex(BuildFuncError):
    pass


class PipelineOrderError(BuildFuncError):
    pass


class KTooLarge(BuildFuncError):
    pass


class InvalidHighLevelPoi(BuildFuncError):
    pass


class SkippedBuilding(BuildFuncError):
    """Raised when an Unlabeled building is passed to per-building scoring."""


class PipelineError(BuildFuncError):
    """Wraps a stage failure with the stage that raised it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.category = getattr(cause, "category", "pipeline")
        super().__init__(f"stage {stage}: {type(cause).__name__}: {cause}")

    @property
    def kind(self):
        return type(self.cause).__name__
