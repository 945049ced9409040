"""Exception hierarchy shared by every stage of the pipeline."""


class UttLidError(Exception):
    """Base class; ``kind`` drives the CLI exit status."""

    kind = "error"


class ShapeError(UttLidError, ValueError):
    kind = "shape"


class DataError(UttLidError):
    kind = "data"


class EmptyUtteranceError(DataError):
    kind = "empty_utterance"


class InputTooShortError(DataError, ValueError):
    kind = "input_too_short"


class FormatError(DataError):
    kind = "format"


class ManifestError(DataError):
    kind = "manifest"


class AlignmentError(DataError):
    kind = "alignment"


class UndefinedMetricError(DataError):
    kind = "undefined_metric"


class NumericFailure(UttLidError):
    kind = "numeric"
