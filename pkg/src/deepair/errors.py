"""Exception hierarchy shared by every pipeline stage.

Each error carries the name of the module that raised it so the command line
can emit a one-line, module-qualified message.
"""


class DeepAirError(Exception):
    module = "deepair"

    def oneline(self):
        msg = " ".join(str(self).split())
        return f"error[{self.module}] {type(self).__name__}: {msg}"


class GridError(DeepAirError):
    module = "gridstore"


class SizingError(DeepAirError):
    module = "gridstore"


class FormatError(DeepAirError):
    module = "gridstore"


class VersionMismatchError(FormatError):
    pass


class LengthMismatchError(FormatError):
    pass


class InsufficientDataError(DeepAirError):
    module = "interp"


class PolicyError(DeepAirError):
    module = "interp"


class ShapeError(DeepAirError):
    module = "tensorcore"


class NonFiniteError(DeepAirError):
    module = "tensorcore"


class TapeError(DeepAirError):
    module = "tensorcore"


class CheckpointError(DeepAirError):
    module = "tensorcore"


class ModelError(DeepAirError):
    module = "model"


class TrainingError(DeepAirError):
    module = "trainer"


class DivergenceError(TrainingError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class UndefinedMetricError(DeepAirError):
    module = "evaluator"


class SynthConfigError(DeepAirError):
    module = "synthcity"


class ConfigError(DeepAirError):
    module = "cli"
