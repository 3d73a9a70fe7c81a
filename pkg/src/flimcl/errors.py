"""Exception hierarchy shared across the package."""


class FlimclError(Exception):
    """Base class for all package errors."""


class ParameterError(FlimclError, ValueError):
    pass


class ConfigError(FlimclError, ValueError):
    pass


class InputError(FlimclError, ValueError):
    pass


class DegenerateInputError(InputError):
    pass


class TrainingError(FlimclError):
    pass


class ThresholdUndefinedError(InputError):
    def __init__(self, class_index, name=None):
        label = name if name is not None else class_index
        super().__init__(f"class {label!r} has no labeled points; threshold undefined")
        self.class_index = class_index


class PruningError(FlimclError):
    pass


class UndefinedAUCError(InputError):
    pass


class ManifestError(InputError):
    pass


class StageDependencyError(FlimclError):
    def __init__(self, stage, missing):
        super().__init__(f"stage {stage!r} needs {missing}; run the producing stage first")
        self.stage = stage
        self.missing = missing
