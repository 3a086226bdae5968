"""
Exception hierarchy shared by every module.

InputError subclasses mean the caller handed us something bad (exit code 2),
RuntimeFailure subclasses mean the computation itself went wrong (exit code 3).
"""


class KernClassifierError(Exception):
    exit_code = 1


class InputError(KernClassifierError):
    exit_code = 2


class RuntimeFailure(KernClassifierError):
    exit_code = 3


# ---------- parsing ----------

class KernSyntaxError(InputError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None, path: str | None = None):
        self.line = line
        self.column = column
        self.path = path
        super().__init__(message)

    def __str__(self):
        where = []
        if self.path:
            where.append(self.path)
        if self.line is not None:
            where.append(f"line {self.line}")
        if self.column is not None:
            where.append(f"col {self.column}")
        prefix = ":".join(where)
        base = super().__str__()
        return f"{prefix}: {base}" if prefix else base


class UnsupportedFeature(InputError):
    pass


class PitchRangeError(InputError):
    pass


# ---------- encoding / artifacts ----------

class UnknownValue(InputError):
    pass


class SpineOverflow(InputError):
    pass


class ManifestError(InputError):
    pass


class CorpusParseError(InputError):
    """One or more manifest files failed to parse; .failures lists (path, error)."""

    def __init__(self, failures: list):
        self.failures = failures
        lines = [f"{len(failures)} score(s) failed to parse:"]
        lines += [f"  {path}: {err}" for path, err in failures]
        super().__init__("\n".join(lines))


class VocabFormatError(InputError):
    pass


class CacheFormatError(InputError):
    pass


class CheckpointFormatError(InputError):
    pass


class CorruptRecord(InputError):
    pass


# ---------- experiments ----------

class TooFewScores(InputError):
    pass


class UnknownComposer(InputError):
    pass


class UnknownArchitecture(InputError):
    pass


# ---------- numerics ----------

class ShapeMismatch(RuntimeFailure):
    pass


class LabelOutOfRange(RuntimeFailure):
    pass


class NonFiniteValue(RuntimeFailure):
    pass


class DivergenceError(RuntimeFailure):
    def __init__(self, message: str, fold: int | None = None, epoch: int | None = None):
        self.fold = fold
        self.epoch = epoch
        super().__init__(message)

    def __str__(self):
        base = super().__str__()
        return f"fold {self.fold}: {base}" if self.fold is not None else base
