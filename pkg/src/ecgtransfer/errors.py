"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class EcgError(Exception):
    exit_code = 3


class ConfigError(EcgError):
    exit_code = 2


class DataError(EcgError):
    exit_code = 3


class NumericError(EcgError):
    exit_code = 4


# ecg_io
class MalformedHeader(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class TruncatedData(DataError):
    pass


class LengthMismatch(DataError):
    pass


class RangeOverflow(DataError):
    pass


class MissingFold(DataError):
    pass


class InvalidRecord(DataError):
    pass


# preprocess
class UnsupportedRate(DataError):
    pass


class TooLong(DataError):
    pass


class TooShort(DataError):
    pass


# autodiff / model
class ShapeMismatch(DataError):
    pass


class DegenerateBatch(NumericError):
    pass


class ConfigInvalid(ConfigError):
    pass


class OutOfRange(ConfigError):
    pass


class CorruptCheckpoint(DataError):
    pass


# training / evaluation
class DegenerateClass(DataError):
    pass


class EmptyDataset(DataError):
    pass


class NonFiniteLoss(NumericError):
    pass


class TooFewPositives(DataError):
    pass


class KeyMismatch(DataError):
    pass


# configuration files
class UnknownKey(ConfigError):
    pass


class MissingKey(ConfigError):
    pass
