"""Exception hierarchy shared by all trajmatch modules."""


class TrajmatchError(Exception):
    """Base class; CLI maps these to a machine-parseable error line."""


class IngestError(TrajmatchError):
    pass


class RasterError(TrajmatchError):
    pass


class QualityError(TrajmatchError):
    pass


class LocalizeError(TrajmatchError):
    pass


class PipelineError(TrajmatchError):
    pass


class ModelError(TrajmatchError):
    pass


class TrainingDivergedError(TrajmatchError):
    pass


class SynthError(TrajmatchError):
    pass


class RoutineError(TrajmatchError):
    pass
