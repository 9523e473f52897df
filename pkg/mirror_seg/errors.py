__all__ = [
    "MirrorSegError",
    "ConfigError",
    "VolumeFormatError",
    "NonFiniteError",
    "ShapeError",
    "ModalityError",
    "EmptyMaskError",
    "PlacementError",
    "GroupingError",
    "RangeError",
    "SamplingError",
    "StageError",
    "DatasetError",
]


class MirrorSegError(Exception):
    "Base class of every error raised by `mirror_seg`; `category` is what the CLI prints"
    category, exit_code = "error", 1


class ConfigError(MirrorSegError, ValueError):
    "A configuration field violates its invariant or cannot be parsed"
    category, exit_code = "config", 2


class VolumeFormatError(MirrorSegError):
    "A volume sidecar/raw pair is missing, malformed or inconsistent"
    category, exit_code = "volume-format", 3


class NonFiniteError(MirrorSegError, FloatingPointError):
    "NaN or Inf found where only finite values are allowed"
    category, exit_code = "non-finite", 4


class ShapeError(MirrorSegError, ValueError):
    "Shapes, channel counts or spacings of the operands do not line up"
    category, exit_code = "shape", 5


class ModalityError(MirrorSegError, ValueError):
    "An operation received a volume of the wrong modality"
    category, exit_code = "modality", 5


class EmptyMaskError(MirrorSegError, ValueError):
    "A mask that must contain foreground is empty"
    category, exit_code = "empty-mask", 6


class PlacementError(MirrorSegError):
    "A phantom lesion could not be placed inside the body"
    category, exit_code = "placement", 6


class GroupingError(MirrorSegError, KeyError):
    "A fine tissue label has no entry in the grouping table"
    category, exit_code = "grouping", 6

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class RangeError(MirrorSegError, ValueError):
    "A scalar argument lies outside its admissible range"
    category, exit_code = "range", 5


class SamplingError(MirrorSegError):
    "Patch sampling cannot satisfy its contract (e.g. no lesion patches)"
    category, exit_code = "sampling", 7


class StageError(MirrorSegError):
    "A training stage was started without its preconditions"
    category, exit_code = "stage", 7


class DatasetError(MirrorSegError):
    "Dataset files or study ids are missing or do not match"
    category, exit_code = "dataset", 3
