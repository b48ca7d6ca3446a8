"""Exception hierarchy.

The CLI maps the three top-level families onto exit codes:
ConfigError -> 2, DataError -> 3, RuntimeFailure -> 4.
"""


class EdgeStereoError(Exception):
    pass


class ConfigError(EdgeStereoError, ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(EdgeStereoError):
    pass


class MissingFileError(DataError, FileNotFoundError):
    pass


class FormatError(DataError, ValueError):
    pass


class CorruptDataError(FormatError):
    pass


class UnsupportedFormatError(FormatError):
    pass


class ManifestError(DataError, ValueError):
    pass


class CheckpointVersionError(FormatError):
    pass


class RuntimeFailure(EdgeStereoError, RuntimeError):
    pass


class DimensionError(RuntimeFailure, ValueError):
    pass


class ContractError(RuntimeFailure, ValueError):
    pass


class EmptySupportError(RuntimeFailure, ValueError):
    pass


class DivergenceError(RuntimeFailure):
    def __init__(self, component, value=None):
        self.component = component
        self.value = value
        super().__init__(f"non-finite loss in component {component!r}: {value}")
