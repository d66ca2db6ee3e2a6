"""Exception hierarchy shared by all wordsem modules."""


class WordsemError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(WordsemError):
    """Malformed input line. Carries the line number and offending field."""

    def __init__(self, message, line_no=None, field=None):
        self.line_no = line_no
        self.field = field
        detail = message
        if line_no is not None:
            detail = f"line {line_no}: {detail}"
        if field is not None:
            detail = f"{detail} (field: {field})"
        super().__init__(detail)


class IntegrityError(WordsemError):
    """Structurally inconsistent data: dangling references, cycles."""


class GraphLookupError(WordsemError, KeyError):
    """Unknown synset, image or concept id."""


class ConfigError(WordsemError):
    """Invalid or unsatisfiable configuration."""


class ParameterError(WordsemError, ValueError):
    """Argument outside its documented domain."""


class RenderError(WordsemError):
    """Word cannot be rasterized (unsupported character)."""


class StructuralError(WordsemError):
    """Network layer shapes do not line up."""


class StateError(WordsemError):
    """Operation called out of order (e.g. backward without forward)."""


class NumericError(WordsemError):
    """Non-finite value encountered during training."""


class FormatError(WordsemError):
    """Binary file does not match its declared format."""


class MetricUndefinedError(WordsemError):
    """Metric has no defined value (no relevant items)."""


class UsageError(WordsemError):
    """Command line invoked incorrectly."""
